"""
Quantizing stored features to 8 bits
====================================

A 256-entry k-means codebook replaces each 143-bit feature by an 8-bit
index before it enters the line buffer.
"""

import numpy as np

from dpm_accel.frontend import pyramid_features
from dpm_accel.vq import (
    LineBufferModel,
    dequantize,
    overall_storage_ratio,
    quantize_grid,
    storage_ratio_per_cell,
    train_codebook,
)

from _frames import smooth_noise

fp = pyramid_features(smooth_noise(1920, 1080, seed=1))
cells = np.concatenate([g.values.reshape(-1, 13) for g in fp.levels])

# train on a random subset; Lloyd distortion falls monotonically
rng = np.random.default_rng(0)
cb = train_codebook(cells[rng.choice(cells.shape[0], 5000, replace=False)], k=256, seed=0)
print(f"{len(cb.history) - 1} Lloyd iterations, distortion {cb.history[0]:.3f} -> {cb.history[-1]:.3f}")

# quantization error over the full pyramid
recon = np.concatenate([dequantize(quantize_grid(g.values, cb).indices, cb).reshape(-1, 13) for g in fp.levels])
rel = np.linalg.norm(recon - cells) / np.linalg.norm(cells)
print(f"relative reconstruction error {rel:.3f}")

# write every row through the ring buffer model
lb = LineBufferModel()
for g in fp.levels:
    for row in quantize_grid(g.values, cb).indices:
        lb.write_row(row)
print(f"buffer {lb.capacity_bytes_raw / 1024:.0f} KB raw vs {lb.capacity_bytes_vq / 1024:.0f} KB quantized")
print(f"write traffic at 30 fps: {lb.raw_write_bytes_total * 30 / 1e6:.1f} MB/s raw, {lb.write_bytes_total * 30 / 1e6:.2f} MB/s quantized")
print(f"storage ratio per cell {storage_ratio_per_cell()}, overall with codebook {overall_storage_ratio():.2f}")

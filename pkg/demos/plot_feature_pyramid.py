"""
The feature pyramid of an HD frame
==================================

A 1920x1080 frame is resampled at 12 scales, three per octave, and every
level is cut into 8x8-pixel cells with one 13-D feature each.
"""

import time

import numpy as np

from dpm_accel.frontend import PyramidConfig, pyramid_features
from dpm_accel.metrics import CostLedger
from dpm_accel.vq import BYTES_PER_CELL_RAW

from _frames import smooth_noise

img = smooth_noise(1920, 1080)

# build the pyramid and time it
led = CostLedger()
t0 = time.perf_counter()
fp = pyramid_features(img, PyramidConfig(), led)
print(f"pyramid built in {time.perf_counter() - t0:.2f} s")

# per-level geometry
for k, g in enumerate(fp.levels):
    w, h = fp.level_sizes[k]
    print(f"level {k:2d}  scale {fp.scale_of_level[k]:.4f}  {w:4d}x{h:4d} px  {g.cols:3d}x{g.rows:3d} cells")

# the total is close to the geometric series sum over 2^(-2k/3)
series = sum(2 ** (-2 * k / 3) for k in range(12))
print(f"total cells {fp.total_cells}, {fp.total_cells / fp.levels[0].num_cells:.3f}x level 0 (series {series:.3f})")

# each cell is 13 components of 11 bits
v = fp.levels[0].quantized_values
print(f"11-bit range used at level 0: {v.min()}..{v.max()}")
print(f"raw write traffic at 30 fps: {fp.total_cells * BYTES_PER_CELL_RAW * 30 / 1e6:.1f} MB/s")

# feature statistics: 9 orientation bins and 4 texture components
vals = np.concatenate([g.values.reshape(-1, 13) for g in fp.levels])
print("mean per component:", np.round(vals.mean(axis=0), 4))
print(f"hog multiplications for the frame: {led.get('hog'):,}")

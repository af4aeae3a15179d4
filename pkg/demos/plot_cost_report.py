"""
All optimizations against the unoptimized detector
==================================================

Two classes share one HD feature pyramid. The reference run scores every
window with dense weights, raw features and an exhaustive deformation
search; the optimized run prunes, quantizes and projects.
"""

import numpy as np

from dpm_accel.engine import DetectorConfig, detect_pyramid
from dpm_accel.frontend import pyramid_features
from dpm_accel.metrics import CostLedger, report
from dpm_accel.model import compile_model, random_model
from dpm_accel.vq import train_codebook

from _frames import smooth_noise

rng = np.random.default_rng(5)
frontend = CostLedger()
fp = pyramid_features(smooth_noise(1920, 1080, seed=5), ledger=frontend)
models = [compile_model(random_model(rng, class_name=c), 7) for c in ("car", "person")]
cells = np.concatenate([g.values.reshape(-1, 13) for g in fp.levels])
cb = train_codebook(cells[rng.choice(cells.shape[0], 5000, replace=False)], seed=0)

base, opt = CostLedger(), CostLedger()
base += frontend
opt += frontend
detect_pyramid(fp, models, DetectorConfig.reference(), ledger=base)
run = detect_pyramid(fp, models, DetectorConfig(), cb, ledger=opt)

rep = report(base, opt)
for k, v in sorted(rep.ratios.items()):
    print(f"{k:32s} {v:8.2f}")
print(f"memory: {rep.extras['baseline_memory_bytes'] / 1024:.0f} KB -> {rep.extras['optimized_memory_bytes'] / 1024:.0f} KB")
for name in sorted(set(base.storage) | set(opt.storage)):
    print(f"  {name:20s} {base.storage[name]:10.0f} B  {opt.storage[name]:10.0f} B")

# VQ perturbs part features, so optimized scores differ slightly from the reference
print("top detections (optimized):")
for d in sorted(run.detections, key=lambda d: -d.score)[:5]:
    print(f"  {d.class_name:7s} score {d.score:8.3f} level {d.level} bbox {tuple(round(v) for v in d.bbox)}")

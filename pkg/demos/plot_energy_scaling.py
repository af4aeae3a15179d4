"""
Trading parts work for the pruning factor
=========================================

Root scores gate the part engines. Sweeping the prune fraction, or turning
parts off entirely, scales the classification work of one frame.
"""

from dpm_accel.engine import DetectorConfig, detect_pyramid
from dpm_accel.frontend import pyramid_features
from dpm_accel.metrics import CostLedger
from dpm_accel.model import compile_model, random_model

import numpy as np

from _frames import smooth_noise

fp = pyramid_features(smooth_noise(1280, 720, seed=2))
cm = compile_model(random_model(np.random.default_rng(4)), 7)

print("prune  candidates  part mults    deform evals  classification mults")
for p in (0.0, 0.5, 0.9, 0.97, 0.99):
    led = CostLedger()
    run = detect_pyramid(fp, [cm], DetectorConfig(prune_fraction=p, vq_enabled=False), ledger=led)
    print(f"{p:5.2f}  {len(run.runs[0].candidates):10d}  {led.get('part_svm'):11,d}  "
          f"{led.get('deform', 'evals'):12,d}  {led.classification_mults():,}")

led = CostLedger()
detect_pyramid(fp, [cm], DetectorConfig(parts_enabled=False, vq_enabled=False), ledger=led)
print(f"parts off: classification mults {led.classification_mults():,}")

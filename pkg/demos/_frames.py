"""Synthetic frames shared by the demo scripts."""

import numpy as np

from dpm_accel.frontend import Image, resize_bilinear


def smooth_noise(width, height, seed=0, grain=6):
    # coarse random samples upsampled bilinearly give texture at several scales
    rng = np.random.default_rng(seed)
    small = rng.integers(0, 256, size=(max(2, height // grain), max(2, width // grain)), dtype=np.uint8)
    return resize_bilinear(Image(small), width, height)

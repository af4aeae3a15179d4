import numpy as np
import pytest

from dpm_accel.frontend import Image, pyramid_from_grids
from dpm_accel.model import random_model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def noise_image(rng, width, height, sigma=2.0):
    from scipy.ndimage import gaussian_filter

    a = gaussian_filter(rng.normal(size=(height, width)), sigma)
    a = (a - a.min()) / (a.max() - a.min()) * 255.0
    return Image(np.floor(a).astype(np.uint8))


def random_pyramid(rng, shape0=(40, 48), levels=7, levels_per_octave=3):
    """i.i.d. non-negative features with geometric level sizes; shape0 is (rows, cols)."""
    grids = []
    for k in range(levels):
        s = 2.0 ** (-k / levels_per_octave)
        r, c = max(1, round(shape0[0] * s)), max(1, round(shape0[1] * s))
        grids.append(rng.uniform(0.0, 0.2, size=(r, c, 13)))
    return pyramid_from_grids(grids, levels_per_octave=levels_per_octave)


def small_model(rng, root=(4, 3), part=(3, 3), **kw):
    return random_model(rng, root, part, **kw)

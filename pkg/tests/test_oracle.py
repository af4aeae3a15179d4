import numpy as np
import pytest

from dpm_accel.engine import DetectorConfig, run_model
from dpm_accel.frontend import Image, pyramid_features
from dpm_accel.metrics import CostLedger
from dpm_accel.model import DpmModel, Filter, PartSpec, compile_model, random_model
from dpm_accel.oracle import closed_form_mults, correlate, dense_scores

from conftest import noise_image, random_pyramid, small_model


def loop_correlate(feat, w):
    h, ww, _ = w.shape
    R, C, _ = feat.shape
    out = np.zeros((R - h + 1, C - ww + 1))
    for y in range(out.shape[0]):
        for x in range(out.shape[1]):
            out[y, x] = np.sum(feat[y : y + h, x : x + ww] * w)
    return out


def test_correlate_matches_loops(rng):
    f, w = rng.normal(size=(9, 11, 13)), rng.normal(size=(3, 4, 13))
    np.testing.assert_allclose(correlate(f, w), loop_correlate(f, w), rtol=1e-12, atol=1e-12)
    assert correlate(f, rng.normal(size=(10, 1, 13))) is None


def test_zero_parts_total_is_root_plus_bias(rng):
    base = small_model(rng, root=(1, 1), part=(2, 2))
    parts = tuple(PartSpec(Filter(np.zeros_like(p.filter.weights)), p.anchor, p.deformation) for p in base.parts)
    m = DpmModel("z", 0.75, 0.0, base.root, parts)
    fp = random_pyramid(rng, (12, 12), levels=5)
    res = dense_scores(fp, m)
    for r, t in zip(res.root, res.total):
        # zero responses minus the cost at delta = 0 contribute exactly 0
        np.testing.assert_array_equal(t, r + 0.75)


def test_closed_form_counts(rng):
    fp = random_pyramid(rng, (30, 36), levels=8)
    m = small_model(rng, root=(5, 4), part=(3, 2))
    res = dense_scores(fp, m)
    cf = closed_form_mults(fp, m)
    assert res.ledger.get("root_svm") == cf["root_svm"]
    assert res.ledger.get("part_svm") == cf["part_svm"]
    assert dense_scores(fp, m, parts_enabled=False).ledger.get("part_svm") == 0


def test_permutation_invariance(rng):
    fp = random_pyramid(rng, (24, 24), levels=6)
    m = small_model(rng)
    perm = rng.permutation(8)
    m2 = DpmModel(m.class_name, m.bias, m.detection_threshold, m.root, tuple(m.parts[i] for i in perm))
    a, b = dense_scores(fp, m), dense_scores(fp, m2)
    for x, y in zip(a.total, b.total):
        if x is not None:
            np.testing.assert_allclose(x, y, rtol=1e-12)


def test_engine_reference_matches(rng):
    fp = random_pyramid(rng, (26, 30), levels=7)
    cm = compile_model(small_model(rng), min_zeros=0)
    run = run_model(fp, cm, DetectorConfig.reference())
    dense = dense_scores(fp, cm.source).totals()
    eng = run.totals()
    assert eng.keys() == dense.keys()
    for k, v in dense.items():
        assert eng[k] == pytest.approx(v, rel=1e-9, abs=1e-12)


def hd_fixture():
    rng = np.random.default_rng(5)
    fp = pyramid_features(noise_image(rng, 1920, 1080, sigma=3.0))
    return fp, random_model(rng, (16, 8), (6, 6))


@pytest.mark.slow
def test_overhead_ratio_counts():
    fp, m = hd_fixture()
    res = dense_scores(fp, m)
    cf = closed_form_mults(fp, m)
    assert res.ledger.get("root_svm") == cf["root_svm"]
    assert res.ledger.get("part_svm") == cf["part_svm"]
    ratio = (cf["root_svm"] + cf["part_svm"]) / cf["root_svm"]
    print(f"dense (root+parts)/root multiplication ratio: {ratio:.2f}")


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="dense part maps over the 16x8 / 6x6 geometry give well under 20x; see notes")
def test_overhead_ratio_band():
    fp, m = hd_fixture()
    cf = closed_form_mults(fp, m)
    ratio = (cf["root_svm"] + cf["part_svm"]) / cf["root_svm"]
    assert 20 <= ratio <= 50

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dpm_accel.metrics import CostLedger
from dpm_accel.vq import (
    BYTES_PER_CELL_RAW,
    Codebook,
    CodebookFormatError,
    LineBufferModel,
    _assign,
    buffer_write,
    decode_codebook,
    dequantize,
    encode_codebook,
    load_codebook,
    overall_storage_ratio,
    quantize_cell,
    quantize_grid,
    save_codebook,
    storage_ratio_per_cell,
    train_codebook,
)


def nearest_scan(f, centers):
    """Exhaustive loop, first strict minimum wins."""
    best, best_d = 0, float("inf")
    for i, c in enumerate(centers):
        d = 0.0
        for a, b in zip(f, c):
            d += (a - b) * (a - b)
        if d < best_d:
            best, best_d = i, d
    return best


class TestTraining:
    def test_two_blobs(self, rng):
        a = rng.normal(0.0, 1e-3, size=(200, 13))
        b = 1.0 + rng.normal(0.0, 1e-3, size=(300, 13))
        cb = train_codebook(np.vstack([a, b]), k=2, seed=3)
        got = sorted(cb.centers.tolist(), key=lambda c: c[0])
        # float32 center storage bounds the agreement
        np.testing.assert_allclose(got[0], a.mean(axis=0), atol=1e-6)
        np.testing.assert_allclose(got[1], b.mean(axis=0), atol=1e-6)

    def test_k_equals_n(self, rng):
        x = rng.uniform(size=(16, 13)).astype(np.float32).astype(np.float64)
        cb = train_codebook(x, k=16, seed=0)
        assert cb.distortion == 0.0
        assert sorted(map(tuple, cb.centers)) == sorted(map(tuple, x))

    @pytest.mark.parametrize("k", [1, 300])
    def test_k_out_of_range(self, rng, k):
        with pytest.raises(ValueError):
            train_codebook(rng.uniform(size=(400, 13)), k=k)

    def test_too_few_samples(self, rng):
        with pytest.raises(ValueError):
            train_codebook(rng.uniform(size=(5, 13)), k=8)

    def test_too_few_distinct(self):
        with pytest.raises(ValueError):
            train_codebook(np.zeros((50, 13)), k=4)

    def test_seeded_determinism(self, rng):
        x = rng.uniform(size=(500, 13))
        a, b = train_codebook(x, k=32, seed=9), train_codebook(x, k=32, seed=9)
        assert encode_codebook(a) == encode_codebook(b)

    def test_distinct_centers(self, rng):
        cb = train_codebook(rng.uniform(size=(2000, 13)), k=64, seed=1)
        assert len({tuple(c) for c in cb.centers}) == 64

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_lloyd_monotone(self, seed):
        r = np.random.default_rng(seed)
        x = r.uniform(size=(300, 13))
        h = train_codebook(x, k=8, seed=seed).history
        assert all(b <= a * (1 + 1e-12) for a, b in zip(h, h[1:]))


class TestQuantize:
    def test_exact_center(self, rng):
        cb = Codebook.from_centers(rng.uniform(size=(256, 13)))
        assert quantize_cell(cb.centers[37], cb) == 37

    def test_tie_lowest_index(self):
        centers = np.zeros((10, 13))
        centers[3, 0] = 1.0
        centers[9, 0] = -1.0
        for i in range(10):
            if i not in (3, 9):
                centers[i, 1] = 5.0 + i
        assert quantize_cell(np.zeros(13), Codebook.from_centers(centers)) == 3

    def test_matches_scan(self, rng):
        cb = Codebook.from_centers(rng.uniform(size=(256, 13)))
        for f in rng.uniform(size=(200, 13)):
            assert quantize_cell(f, cb) == nearest_scan(f, cb.centers)

    def test_grid_matches_cell(self, rng):
        cb = Codebook.from_centers(rng.uniform(size=(40, 13)))
        vals = rng.uniform(size=(5, 7, 13))
        q = quantize_grid(vals, cb)
        assert q.indices.dtype == np.uint8
        for y in range(5):
            for x in range(7):
                assert q.indices[y, x] == quantize_cell(vals[y, x], cb)

    def test_ledger_charges(self, rng):
        cb = Codebook.from_centers(rng.uniform(size=(256, 13)))
        led = CostLedger()
        quantize_cell(np.zeros(13), cb, led)
        assert led.get("vq_quant") == 256 * 13
        quantize_grid(np.zeros((2, 3, 13)), cb, led)
        assert led.get("vq_quant") == 7 * 256 * 13

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**31))
    def test_nearest_property(self, seed):
        r = np.random.default_rng(seed)
        cb = Codebook.from_centers(r.uniform(size=(17, 13)))
        f = r.uniform(size=13)
        err = np.linalg.norm(f - dequantize(quantize_cell(f, cb), cb))
        assert np.all(err <= np.linalg.norm(cb.centers - f, axis=1) + 1e-12)


class TestDequantize:
    def test_round_trip_on_center(self, rng):
        cb = Codebook.from_centers(rng.uniform(size=(256, 13)))
        np.testing.assert_array_equal(dequantize(quantize_cell(cb.centers[5], cb), cb), cb.centers[5])
        np.testing.assert_array_equal(dequantize(255, cb), cb.centers[-1])

    def test_out_of_range(self, rng):
        cb = Codebook.from_centers(rng.uniform(size=(16, 13)))
        with pytest.raises(IndexError):
            dequantize(16, cb)

    def test_no_ledger_charge(self, rng):
        cb = Codebook.from_centers(rng.uniform(size=(16, 13)))
        led = CostLedger()
        before = dict(led.counters)
        dequantize(np.arange(16), cb)
        assert dict(led.counters) == before


class TestCodebookFile:
    def test_round_trip(self, tmp_path, rng):
        cb = Codebook.from_centers(rng.uniform(0, 0.3, size=(256, 13)))
        save_codebook(cb, tmp_path / "c.vqcb")
        back = load_codebook(tmp_path / "c.vqcb")
        np.testing.assert_array_equal(back.centers, cb.centers)
        np.testing.assert_array_equal(back.quantized_centers, cb.quantized_centers)
        assert encode_codebook(back) == encode_codebook(cb)

    def test_layout(self, rng):
        buf = encode_codebook(Codebook.from_centers(rng.uniform(size=(4, 13))))
        assert buf[:4] == b"VQCB" and buf[4] == 1
        assert len(buf) == 8 + 4 * 52 + 2 * 52

    @pytest.mark.parametrize("mutate", [lambda b: b"XXXX" + b[4:], lambda b: b[:-1], lambda b: b[:4] + b"\x09" + b[5:]])
    def test_corrupt(self, rng, mutate):
        buf = encode_codebook(Codebook.from_centers(rng.uniform(size=(4, 13))))
        with pytest.raises(CodebookFormatError):
            decode_codebook(mutate(buf))


class TestLineBuffer:
    def test_eviction(self):
        lb = LineBufferModel(capacity_cells=32768)
        for _ in range(132):
            buffer_write(range(250), lb)  # 33,000 cells
        assert lb.occupancy <= 32768
        assert lb.evicted_rows > 0
        assert lb.write_bytes_total == 33000

    def test_row_too_large(self):
        with pytest.raises(ValueError):
            LineBufferModel(capacity_cells=10).write_row(range(11))

    def test_hd_pyramid_bytes(self):
        lb = LineBufferModel()
        cells = 86728  # HD pyramid total, see the frontend tests
        for _ in range(cells // 1000):
            lb.write_row(range(1000))
        lb.write_row(range(cells % 1000))
        assert lb.write_bytes_total == cells
        assert lb.raw_write_bytes_total == cells * 17.875
        assert lb.raw_write_bytes_total / lb.write_bytes_total == 17.875

    def test_ratios(self):
        assert storage_ratio_per_cell() == 17.875 == BYTES_PER_CELL_RAW
        # 585,728 / (32,768 + 4,576)
        assert overall_storage_ratio() == pytest.approx(32768 * 17.875 / (32768 + 4576))
        assert 14 <= overall_storage_ratio() <= 18


def test_assign_against_scan(rng):
    x, c = rng.uniform(size=(300, 13)), rng.uniform(size=(12, 13))
    labels, _ = _assign(x, c)
    assert labels.tolist() == [nearest_scan(f, c) for f in x]

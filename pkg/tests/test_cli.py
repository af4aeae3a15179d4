import json

import numpy as np
import pytest

from dpm_accel.cli import main, max_relative_deviation
from dpm_accel.frontend import Image, save_image
from dpm_accel.model import decode_compiled, encode_compiled, load_compiled, random_model, save_model
from dpm_accel.vq import load_codebook

from conftest import noise_image


@pytest.fixture(scope="module")
def files(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    rng = np.random.default_rng(11)
    save_image(noise_image(rng, 640, 360), d / "frame.pgm")
    rgb = np.repeat(noise_image(rng, 320, 240).data[..., None], 3, axis=2)
    save_image(Image(rgb), d / "frame.ppm")
    save_model(random_model(rng, class_name="car"), d / "car.json")
    save_model(random_model(rng, class_name="person"), d / "person.json")
    assert main(["train-codebook", "--image", str(d / "frame.pgm"), "--out", str(d / "cb.vqcb")]) == 0
    assert main(["compile", "--model", str(d / "car.json"), "--out", str(d / "car.dpmc")]) == 0
    return d


def run(args, capsys):
    code = main([str(a) for a in args])
    out = capsys.readouterr()
    return code, out.out, out.err


class TestDetect:
    def test_two_models_merged(self, files, tmp_path, capsys):
        code, _, err = run(["detect", "--image", files / "frame.pgm", "--model", files / "car.dpmc",
                            "--model", files / "person.json", "--codebook", files / "cb.vqcb",
                            "--out", tmp_path / "d.json", "--annotate", tmp_path / "a.ppm"], capsys)
        assert code == 0 and err == ""
        dets = json.loads((tmp_path / "d.json").read_text())
        assert {d["class"] for d in dets} == {"car", "person"}
        for d in dets:
            assert set(d) == {"class", "score", "level", "bbox", "parts", "root_only"}
            assert len(d["parts"]) == 8 and all(-2 <= v <= 2 for p in d["parts"] for v in p)
        assert (tmp_path / "a.ppm").read_bytes()[:2] == b"P6"

    def test_parts_off(self, files, tmp_path, capsys):
        code, _, _ = run(["detect", "--image", files / "frame.pgm", "--model", files / "car.dpmc",
                          "--parts", "off", "--out", tmp_path / "d.json", "--metrics", tmp_path / "m.json"], capsys)
        assert code == 0
        m = json.loads((tmp_path / "m.json").read_text())
        assert m["stages"]["optimized"]["part_svm"].get("mults", 0) == 0

    def test_prune_metrics(self, files, tmp_path, capsys):
        code, _, _ = run(["detect", "--image", files / "frame.pgm", "--model", files / "car.dpmc",
                          "--codebook", files / "cb.vqcb", "--prune-fraction", "0.97",
                          "--out", tmp_path / "d.json", "--metrics", tmp_path / "m.json"], capsys)
        assert code == 0
        r = json.loads((tmp_path / "m.json").read_text())["ratios"]
        assert 30 <= r["parts_reduction"] <= 36

    def test_ppm_input(self, files, tmp_path, capsys):
        code, _, _ = run(["detect", "--image", files / "frame.ppm", "--model", files / "car.json",
                          "--out", tmp_path / "d.json"], capsys)
        assert code == 0

    @pytest.mark.parametrize(
        "extra",
        [["--image", "missing.pgm"], ["--vq", "on"], ["--prune-fraction", "1.5"]],
    )
    def test_errors_have_diagnostics(self, files, tmp_path, capsys, extra):
        args = ["detect", "--image", files / "frame.pgm", "--model", files / "car.json", "--out", tmp_path / "d.json"]
        code, _, err = run(args + extra, capsys)
        assert code != 0 and err.startswith("error:")

    def test_bad_codebook_dim(self, files, tmp_path, capsys):
        import struct

        bad = tmp_path / "bad.vqcb"
        bad.write_bytes(b"VQCB" + struct.pack("<BHB", 1, 2, 3) + b"\x00" * (2 * 3 * 6))
        code, _, err = run(["detect", "--image", files / "frame.pgm", "--model", files / "car.json",
                            "--codebook", bad, "--out", tmp_path / "d.json"], capsys)
        assert code == 2 and "dimension" in err


class TestCompile:
    def test_round_trip_and_report(self, files, tmp_path, capsys):
        code, out, _ = run(["compile", "--model", files / "car.json", "--out", tmp_path / "c.dpmc"], capsys)
        assert code == 0
        cm = load_compiled(tmp_path / "c.dpmc")
        assert encode_compiled(decode_compiled(encode_compiled(cm))) == encode_compiled(cm)
        pct = float(out.split("compiled ")[1].split("%")[0])
        assert pct >= 53.8

    def test_lossless(self, files, tmp_path, capsys):
        code, _, _ = run(["compile", "--model", files / "car.json", "--min-zeros", "0", "--out", tmp_path / "c.dpmc"], capsys)
        assert code == 0
        from dpm_accel.model import load_model

        src = load_model(files / "car.json")
        cm = load_compiled(tmp_path / "c.dpmc")
        # f32 storage of basis and coefficients bounds the reconstruction
        np.testing.assert_allclose(cm.source.root.weights, src.root.weights, atol=1e-5)

    def test_schema_violation(self, tmp_path, capsys):
        (tmp_path / "bad.json").write_text('{"class_name": "x"}')
        code, _, err = run(["compile", "--model", tmp_path / "bad.json", "--out", tmp_path / "o"], capsys)
        assert code == 2 and err


class TestTrainCodebook:
    def test_two_blobs(self, tmp_path, capsys):
        # left half flat (all-zero features), right half a fine checkerboard
        a = np.zeros((64, 128), dtype=np.uint8)
        a[:, 64:] = (np.indices((64, 64)).sum(axis=0) % 2 * 255).astype(np.uint8)
        save_image(Image(a), tmp_path / "b.pgm")
        code, out, _ = run(["train-codebook", "--image", tmp_path / "b.pgm", "--k", "2",
                            "--out", tmp_path / "cb.vqcb"], capsys)
        assert code == 0 and "distortion" in out
        cb = load_codebook(tmp_path / "cb.vqcb")
        assert cb.k == 2
        assert np.min(np.abs(cb.centers).sum(axis=1)) < 0.3

    def test_default_k(self, files):
        assert load_codebook(files / "cb.vqcb").k == 256

    def test_too_few(self, tmp_path, capsys):
        save_image(Image(np.zeros((64, 64), dtype=np.uint8)), tmp_path / "z.pgm")
        code, _, err = run(["train-codebook", "--image", tmp_path / "z.pgm", "--out", tmp_path / "z.vqcb"], capsys)
        assert code == 2 and "distinct" in err


class TestBench:
    def test_reference_pass_and_ratios(self, files, tmp_path, capsys):
        code, out, _ = run(["bench", "--image", files / "frame.pgm", "--model", files / "car.dpmc",
                            "--codebook", files / "cb.vqcb", "--deform", "c2f", "--metrics", tmp_path / "b.json"], capsys)
        assert code == 0 and "equivalence PASS" in out
        rep = json.loads((tmp_path / "b.json").read_text())
        assert rep["equivalence"]["max_relative_deviation"] <= 1e-9
        for k in ("parts_reduction", "feature_storage_reduction", "classification_mult_reduction",
                  "weight_storage_reduction", "deform_eval_reduction", "total_memory_reduction"):
            assert k in rep["ratios"] and k in out
        assert 1.47 <= rep["ratios"]["deform_eval_reduction"] <= 2.08

    def test_oracle_baseline(self, files, tmp_path, capsys):
        code, out, _ = run(["bench", "--image", files / "frame.pgm", "--model", files / "car.json",
                            "--oracle", "--metrics", tmp_path / "b.json"], capsys)
        assert code == 0 and "PASS" in out

    def test_deviation_helper(self):
        assert max_relative_deviation({1: 1.0}, {1: 1.0}) == 0.0
        assert max_relative_deviation({1: 1.0}, {2: 1.0}) == float("inf")


def test_calibrate_prune(files, tmp_path, capsys):
    code, _, _ = run(["calibrate-prune", "--image", files / "frame.pgm", "--model", files / "car.dpmc",
                      "--out", tmp_path / "t.json"], capsys)
    assert code == 0
    t = json.loads((tmp_path / "t.json").read_text())[0]
    assert t["kept"] >= int(np.ceil(0.03 * t["windows"]))


def determinism_commands(files, out):
    f = files
    return [
        ["train-codebook", "--image", f / "frame.pgm", "--k", "16", "--seed", "4", "--out", out / "cb.vqcb"],
        ["compile", "--model", f / "car.json", "--out", out / "c.dpmc"],
        ["calibrate-prune", "--image", f / "frame.pgm", "--model", f / "car.dpmc", "--out", out / "t.json"],
        ["detect", "--image", f / "frame.pgm", "--model", f / "car.dpmc", "--model", f / "person.json",
         "--codebook", f / "cb.vqcb", "--out", out / "d.json", "--annotate", out / "a.ppm", "--metrics", out / "m.json"],
        ["bench", "--image", f / "frame.pgm", "--model", f / "car.dpmc", "--codebook", f / "cb.vqcb",
         "--metrics", out / "b.json"],
    ]


def test_determinism(files, tmp_path, capsys):
    outs = []
    for n in range(2):
        d = tmp_path / f"run{n}"
        d.mkdir()
        for cmd in determinism_commands(files, d):
            assert main([str(a) for a in cmd]) == 0
        outs.append({p.name: p.read_bytes() for p in sorted(d.iterdir())})
    assert outs[0].keys() == outs[1].keys() and len(outs[0]) == 7
    for name in outs[0]:
        assert outs[0][name] == outs[1][name], name

"""Command-line entry points: detect, compile, train-codebook, calibrate-prune, bench."""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import tempfile

import numpy as np

from . import engine, frontend, metrics, model, oracle, vq


def _atomic_write(path: str, data: bytes | str) -> None:
    if isinstance(data, str):
        data = data.encode("utf-8")
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _onoff(v: str) -> bool:
    if v not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return v == "on"


def _deform(v: str) -> str:
    return {"exhaustive": "exhaustive", "c2f": "coarse_to_fine", "coarse_to_fine": "coarse_to_fine"}[v]


def _add_detector_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_mutually_exclusive_group()
    g.add_argument("--prune-fraction", type=float, default=None)
    g.add_argument("--prune-threshold", type=float, default=None)
    p.add_argument("--parts", type=_onoff, default=True, metavar="on|off")
    p.add_argument("--projection", type=_onoff, default=True, metavar="on|off")
    p.add_argument("--vq", type=_onoff, default=None, metavar="on|off",
                   help="default: on when --codebook is given")
    p.add_argument("--deform", type=_deform, default="coarse_to_fine", metavar="exhaustive|c2f")
    p.add_argument("--nms-iou", type=float, default=0.5)
    p.add_argument("--min-zeros", type=int, default=model.MIN_ZEROS_DEFAULT)


def _detector_config(a) -> engine.DetectorConfig:
    vq_on = a.vq if a.vq is not None else a.codebook is not None
    if vq_on and a.codebook is None:
        raise CliError("--vq on requires --codebook")
    return engine.DetectorConfig(
        prune_fraction=0.97 if a.prune_fraction is None else a.prune_fraction,
        prune_threshold=a.prune_threshold,
        parts_enabled=a.parts,
        vq_enabled=vq_on,
        projection_enabled=a.projection,
        deform_mode=a.deform,
        nms_iou=a.nms_iou,
    )


class CliError(Exception):
    pass


def _load_models(paths, min_zeros):
    return [model.load_any_model(p, min_zeros) for p in paths]


def _load_codebook(path):
    if path is None:
        return None
    cb = vq.load_codebook(path)
    if cb.dim != frontend.FEATURE_DIM:
        raise CliError(f"codebook dimension {cb.dim} does not match feature dimension {frontend.FEATURE_DIM}")
    return cb


def annotate(img: frontend.Image, dets) -> frontend.Image:
    rgb = img.data if img.channels == 3 else np.repeat(img.data[..., None], 3, axis=2)
    rgb = rgb.copy()
    palette = [(255, 0, 0), (0, 255, 0), (0, 128, 255), (255, 255, 0)]
    classes = sorted({d.class_name for d in dets})
    H, W = rgb.shape[:2]
    for d in dets:
        color = palette[classes.index(d.class_name) % len(palette)]
        x, y, w, h = d.bbox
        x0, y0 = int(round(x)), int(round(y))
        x1, y1 = min(int(round(x + w)) - 1, W - 1), min(int(round(y + h)) - 1, H - 1)
        if x1 < x0 or y1 < y0:
            continue
        rgb[y0, x0 : x1 + 1] = color
        rgb[y1, x0 : x1 + 1] = color
        rgb[y0 : y1 + 1, x0] = color
        rgb[y0 : y1 + 1, x1] = color
    return frontend.Image(rgb)


# ------------------------------------------------------------------ commands


def cmd_detect(a) -> int:
    img = frontend.load_image(a.image)
    models = _load_models(a.model, a.min_zeros)
    cb = _load_codebook(a.codebook)
    cfg = _detector_config(a)
    run = engine.detect(img, models, cfg, cb)
    _atomic_write(a.out, _dumps([d.to_dict() for d in run.detections]))
    if a.annotate:
        _atomic_write(a.annotate, frontend.encode_image(annotate(img, run.detections)))
    if a.metrics:
        base = engine.detect(img, models, engine.DetectorConfig.reference(parts_enabled=cfg.parts_enabled), cb)
        _atomic_write(a.metrics, metrics.report(base.ledger, run.ledger).to_json() + "\n")
    print(f"{len(run.detections)} detections written to {a.out}")
    return 0


def cmd_compile(a) -> int:
    src = model.load_model(a.model)
    if a.codebook is not None:
        _load_codebook(a.codebook)
    cm = model.compile_model(src, a.min_zeros)
    _atomic_write(a.out, model.encode_compiled(cm))
    popc = np.concatenate([f.popcounts().ravel() for f in cm.sparse_filters()])
    print(f"class {cm.class_name}: {cm.total_cells} cells, min_zeros={cm.min_zeros}")
    print(f"zero fraction: source {cm.source_zero_fraction:.1%}, compiled {cm.zero_fraction:.1%}")
    print(f"max nonzeros per cell: {int(popc.max())}")
    print(f"weight storage: dense {cm.weights_dense_bytes()} B, sparse {cm.weights_sparse_bytes()} B")
    return 0


def cmd_train_codebook(a) -> int:
    cfg = frontend.PyramidConfig()
    samples = []
    for path in a.image:
        fp = frontend.pyramid_features(frontend.load_image(path), cfg)
        samples.extend(g.values.reshape(-1, frontend.FEATURE_DIM) for g in fp.levels)
    x = np.concatenate(samples) if samples else np.zeros((0, frontend.FEATURE_DIM))
    if a.max_samples and x.shape[0] > a.max_samples:
        pick = np.random.default_rng(a.seed).choice(x.shape[0], a.max_samples, replace=False)
        x = x[np.sort(pick)]
    distinct = np.unique(x, axis=0).shape[0]
    if distinct < a.k:
        raise CliError(f"only {distinct} distinct feature vectors; need at least k={a.k}")
    cb = vq.train_codebook(x, a.k, a.seed)
    _atomic_write(a.out, vq.encode_codebook(cb))
    print(f"trained k={cb.k} on {x.shape[0]} samples in {len(cb.history) - 1} iterations")
    print(f"distortion: {cb.distortion:.6g} (mean {cb.distortion / x.shape[0]:.6g})")
    return 0


def cmd_calibrate_prune(a) -> int:
    img = frontend.load_image(a.image)
    cms = _load_models(a.model, a.min_zeros)
    fp = frontend.pyramid_features(img)
    proj = a.projection
    out = []
    for cm in cms:
        sm = engine.root_scores(fp, cm, projection=proj)
        sub = engine.eligible_scores(sm, fp.levels_per_octave)
        theta = engine.calibrate_prune_threshold(sub, a.prune_fraction)
        out.append({"class": cm.class_name, "prune_fraction": a.prune_fraction, "threshold": theta,
                    "windows": sub.total_windows,
                    "kept": int((sub.all_scores() >= theta).sum())})
        print(f"{cm.class_name}: threshold {theta!r} keeps {out[-1]['kept']} of {out[-1]['windows']}")
    if a.out:
        _atomic_write(a.out, _dumps(out))
    return 0


def max_relative_deviation(engine_totals: dict, oracle_totals: dict) -> float:
    if engine_totals.keys() != oracle_totals.keys():
        return math.inf
    worst = 0.0
    for k, ref in oracle_totals.items():
        worst = max(worst, abs(engine_totals[k] - ref) / max(abs(ref), 1e-3))
    return worst


def cmd_bench(a) -> int:
    img = frontend.load_image(a.image)
    cms = _load_models(a.model, a.min_zeros)
    cb = _load_codebook(a.codebook)
    cfg = _detector_config(a)
    led_base = metrics.CostLedger()
    fp = frontend.pyramid_features(img, ledger=led_base)
    led_opt = metrics.CostLedger()
    frontend.pyramid_features(img, ledger=led_opt)
    ref_cfg = engine.DetectorConfig.reference(parts_enabled=cfg.parts_enabled)
    base = engine.detect_pyramid(fp, cms, ref_cfg, cb, led_base)
    opt = engine.detect_pyramid(fp, cms, cfg, cb, led_opt)

    worst = 0.0
    oracle_ledger = metrics.CostLedger()
    for cm, run in zip(cms, base.runs):
        dense = oracle.dense_scores(fp, cm.source, cfg.parts_enabled)
        oracle_ledger += dense.ledger
        worst = max(worst, max_relative_deviation(run.totals(), dense.totals()))
    verdict = "PASS" if worst <= 1e-9 else "FAIL"

    baseline = oracle_ledger if a.oracle else base.ledger
    if a.oracle:
        # the oracle has no frontend; reuse the engine's frame-level accounting
        for k, v in base.ledger.counters.items():
            if k[0] == "hog":
                baseline.counters[k] = v
        baseline.storage.update(base.ledger.storage)
    rep = metrics.report(baseline, opt.ledger).to_dict()
    rep["equivalence"] = {"verdict": verdict, "max_relative_deviation": worst, "tolerance": 1e-9}
    text = _dumps(rep)
    if a.metrics:
        _atomic_write(a.metrics, text)
    print(f"equivalence {verdict}: max relative deviation {worst:.3g}")
    if verdict != "PASS":
        print(f"error: engine deviates from the dense oracle by {worst:.3g} (> 1e-9)", file=sys.stderr)
    for k, v in sorted(rep["ratios"].items()):
        print(f"{k}: {v if isinstance(v, str) else f'{v:.4g}'}")
    return 0 if verdict == "PASS" else 1


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dpm-accel", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("detect", help="run detection on one frame")
    d.add_argument("--image", required=True)
    d.add_argument("--model", action="append", required=True)
    d.add_argument("--codebook")
    d.add_argument("--out", required=True)
    d.add_argument("--annotate")
    d.add_argument("--metrics")
    d.add_argument("--seed", type=int, default=0)
    _add_detector_flags(d)
    d.set_defaults(func=cmd_detect)

    c = sub.add_parser("compile", help="project and sparsify a JSON model into a DPMC file")
    c.add_argument("--model", required=True)
    c.add_argument("--codebook")
    c.add_argument("--out", required=True)
    c.add_argument("--min-zeros", type=int, default=model.MIN_ZEROS_DEFAULT)
    c.set_defaults(func=cmd_compile)

    t = sub.add_parser("train-codebook", help="k-means codebook over pyramid features")
    t.add_argument("--image", action="append", required=True)
    t.add_argument("--k", type=int, default=256)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--max-samples", type=int, default=50000)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train_codebook)

    k = sub.add_parser("calibrate-prune", help="root-score threshold for a prune fraction")
    k.add_argument("--image", required=True)
    k.add_argument("--model", action="append", required=True)
    k.add_argument("--prune-fraction", type=float, default=0.97)
    k.add_argument("--projection", type=_onoff, default=True, metavar="on|off")
    k.add_argument("--min-zeros", type=int, default=model.MIN_ZEROS_DEFAULT)
    k.add_argument("--out")
    k.add_argument("--seed", type=int, default=0)
    k.set_defaults(func=cmd_calibrate_prune)

    b = sub.add_parser("bench", help="baseline vs optimized cost report and oracle equivalence")
    b.add_argument("--image", required=True)
    b.add_argument("--model", action="append", required=True)
    b.add_argument("--codebook")
    b.add_argument("--metrics")
    b.add_argument("--oracle", action="store_true", help="use the dense oracle's ledger as baseline")
    b.add_argument("--seed", type=int, default=0)
    _add_detector_flags(b)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    a = parser.parse_args(argv)
    try:
        return a.func(a)
    except (CliError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Detection: streaming root scoring, pruning, part engines, deformation search, NMS.

Every score is an ordered sum of elementwise products so that results are
bit-identical across streaming/direct evaluation and across pruned/unpruned
runs. Skipped zero weights contribute exactly +0.0, so sparse and dense
evaluation of the same coefficients also agree bit-for-bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .frontend import FEATURE_DIM, FeaturePyramid, Image, PyramidConfig, pyramid_features
from .metrics import CostLedger
from .model import NUM_PARTS, CompiledModel
from .vq import Codebook, LineBufferModel, quantize_grid

SEARCH_RADIUS = 2
SEARCH = 2 * SEARCH_RADIUS + 1  # 5x5 displacement region
ACCUMULATOR_BYTES = 4  # 32-bit partial sums

# displacement index = (dy + 2) * 5 + (dx + 2); raster order is dy-major
_DX = np.tile(np.arange(-SEARCH_RADIUS, SEARCH_RADIUS + 1), SEARCH)
_DY = np.repeat(np.arange(-SEARCH_RADIUS, SEARCH_RADIUS + 1), SEARCH)
# preference order for ties: smaller L1 norm first, then raster order
_TIE_ORDER = np.array(sorted(range(SEARCH * SEARCH), key=lambda t: (abs(_DX[t]) + abs(_DY[t]), t)))
_COARSE = np.array([t for t in _TIE_ORDER if _DX[t] % 2 == 0 and _DY[t] % 2 == 0])


def _neighborhood_mask(center: int) -> np.ndarray:
    cx, cy = _DX[center], _DY[center]
    return (np.abs(_DX - cx) <= 1) & (np.abs(_DY - cy) <= 1)


_COARSE_MASK = np.zeros(SEARCH * SEARCH, dtype=bool)
_COARSE_MASK[_COARSE] = True
# evaluated set per best coarse point: coarse grid plus its clipped 3x3 neighborhood
_C2F_MASKS = {int(c): _COARSE_MASK | _neighborhood_mask(int(c)) for c in _COARSE}


@dataclass(frozen=True)
class DetectorConfig:
    """Pipeline knobs. ``prune_threshold`` overrides ``prune_fraction`` when set."""

    prune_fraction: float = 0.97
    prune_threshold: float | None = None
    parts_enabled: bool = True
    vq_enabled: bool = True
    projection_enabled: bool = True
    deform_mode: str = "coarse_to_fine"
    nms_iou: float = 0.5
    streaming: bool = False
    buffer_cells: int = 32768

    def __post_init__(self):
        if not 0.0 <= self.prune_fraction < 1.0:
            raise ValueError("prune_fraction must be in [0, 1)")
        if not 0.0 < self.nms_iou < 1.0:
            raise ValueError("nms_iou must be in (0, 1)")
        if self.deform_mode not in ("exhaustive", "coarse_to_fine"):
            raise ValueError("deform_mode must be 'exhaustive' or 'coarse_to_fine'")
        if self.prune_threshold is not None and math.isnan(self.prune_threshold):
            raise ValueError("prune_threshold must not be NaN")

    @classmethod
    def reference(cls, **kw) -> "DetectorConfig":
        """No pruning, no VQ, no projection, exhaustive deformation."""
        base = dict(
            prune_fraction=0.0,
            prune_threshold=None,
            vq_enabled=False,
            projection_enabled=False,
            deform_mode="exhaustive",
        )
        base.update(kw)
        return cls(**base)


@dataclass
class ScoreMap:
    maps: list  # per level (H', W') array; empty (0, 0) where the root does not fit

    @property
    def total_windows(self) -> int:
        return sum(m.size for m in self.maps)

    def all_scores(self) -> np.ndarray:
        if not self.maps:
            return np.zeros(0)
        return np.concatenate([m.ravel() for m in self.maps])


@dataclass(frozen=True)
class Candidate:
    level: int
    x: int
    y: int
    root_score: float


@dataclass
class WindowResult:
    level: int
    x: int
    y: int
    root_score: float
    total: float
    part_scores: tuple
    part_offsets: tuple
    root_only: bool


@dataclass
class Detection:
    class_name: str
    score: float
    level: int
    bbox: tuple  # (x, y, w, h) in full-resolution pixels
    part_offsets: tuple
    root_only: bool = False
    x: int = 0
    y: int = 0

    def to_dict(self) -> dict:
        return {
            "class": self.class_name,
            "score": self.score,
            "level": self.level,
            "bbox": [float(v) for v in self.bbox],
            "parts": [[int(dx), int(dy)] for dx, dy in self.part_offsets],
            "root_only": bool(self.root_only),
        }


# ------------------------------------------------------------ weight views


def _weights(cm: CompiledModel, which: int, projected: bool) -> tuple[np.ndarray, int]:
    """(weights, multiplications per placement) for filter ``which`` (0 = root)."""
    if projected:
        sf = cm.sparse_filters()[which]
        return sf.coeffs, sf.nnz
    f = cm.source.filters()[which]
    return f.weights, f.cells * FEATURE_DIM


def _row_terms(rows: np.ndarray, wrow: np.ndarray) -> np.ndarray:
    """Sum over filter columns i and components k of rows[:, x+i, k] * wrow[i, k]."""
    w = wrow.shape[0]
    wp = rows.shape[1] - w + 1
    out = np.zeros((rows.shape[0], wp))
    for i in range(w):
        for k in range(FEATURE_DIM):
            c = wrow[i, k]
            if c != 0.0:
                out += rows[:, i : i + wp, k] * c
    return out


def _root_direct(feat: np.ndarray, weights: np.ndarray) -> np.ndarray:
    h = weights.shape[0]
    hp = feat.shape[0] - h + 1
    acc = np.zeros((hp, feat.shape[1] - weights.shape[1] + 1))
    for j in range(h):
        acc += _row_terms(feat[j : j + hp], weights[j])
    return acc


def _root_streaming(feat: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Consume feature rows in order; each row updates every window that overlaps it."""
    h, w = weights.shape[:2]
    rows, cols = feat.shape[:2]
    hp, wp = rows - h + 1, cols - w + 1
    acc = np.zeros((hp, wp))
    active = [(i, k) for i in range(w) for k in range(FEATURE_DIM) if np.any(weights[:, i, k] != 0.0)]
    for r in range(rows):
        j_lo, j_hi = max(0, r - hp + 1), min(h - 1, r)
        if j_lo > j_hi:
            continue
        js = np.arange(j_lo, j_hi + 1)
        terms = np.zeros((js.size, wp))
        frow = feat[r]
        for i, k in active:
            terms += frow[i : i + wp, k][None, :] * weights[js, i, k][:, None]
        # window top row y = r - j; windows receive rows in ascending j
        acc[r - js] += terms
    return acc


def project_level(values: np.ndarray, cm: CompiledModel, ledger: CostLedger | None = None) -> np.ndarray:
    out = values @ cm.basis.matrix.T
    if ledger is not None:
        ledger.record("projection", "mults", values.shape[0] * values.shape[1] * FEATURE_DIM * FEATURE_DIM)
        ledger.record("projection", "cells", values.shape[0] * values.shape[1])
    return out


def root_scores(
    fp: FeaturePyramid,
    cm: CompiledModel,
    streaming: bool = False,
    projection: bool = False,
    ledger: CostLedger | None = None,
    features: list | None = None,
) -> ScoreMap:
    """Root filter response at every placement of every level (bias excluded).

    ``features`` may supply already projected per-level arrays; otherwise they
    are projected here when ``projection`` is set.
    """
    weights, per_place = _weights(cm, 0, projection)
    h, w = weights.shape[:2]
    maps = []
    for lvl, grid in enumerate(fp.levels):
        if grid.rows < h or grid.cols < w:
            maps.append(np.zeros((0, 0)))
            continue
        if features is not None:
            feat = features[lvl]
        elif projection:
            feat = project_level(grid.values, cm, ledger)
        else:
            feat = grid.values
        m = _root_streaming(feat, weights) if streaming else _root_direct(feat, weights)
        maps.append(m)
        if ledger is not None:
            ledger.record("root_svm", "mults", m.size * per_place)
            ledger.record("root_svm", "placements", m.size * h * w)
            ledger.record("root_svm", "windows", m.size)
    return ScoreMap(maps)


# ----------------------------------------------------------------- pruning


def keep_count(n: int, p: float) -> int:
    # round first so that e.g. (1 - 0.97) * 100 keeps exactly 3
    return max(1, math.ceil(round((1.0 - p) * n, 9)))


def calibrate_prune_threshold(sm: ScoreMap, p: float) -> float:
    """Nearest-rank (1 - p) quantile: the ceil((1-p)N)-th largest root score."""
    if not 0.0 <= p < 1.0:
        raise ValueError("prune fraction must be in [0, 1)")
    scores = np.sort(sm.all_scores())
    if scores.size == 0:
        raise ValueError("empty score map")
    return float(scores[scores.size - keep_count(scores.size, p)])


def eligible_scores(sm: ScoreMap, levels_per_octave: int, parts_enabled: bool = True) -> ScoreMap:
    """Score maps of the levels whose windows would be parts-classified.

    Falls back to every level when no level has a part level below it.
    """
    if not parts_enabled:
        return sm
    maps = [m if l >= levels_per_octave else np.zeros((0, 0)) for l, m in enumerate(sm.maps)]
    sub = ScoreMap(maps)
    return sub if sub.total_windows else sm


def prune(sm: ScoreMap, theta: float, ledger: CostLedger | None = None) -> list:
    """Placements with root score >= theta in (level, y, x) raster order."""
    out = []
    for lvl, m in enumerate(sm.maps):
        if m.size == 0:
            continue
        ys, xs = np.nonzero(m >= theta)
        out.extend(Candidate(lvl, int(x), int(y), float(m[y, x])) for y, x in zip(ys, xs))
    if ledger is not None:
        ledger.record("part_svm", "candidates", len(out))
    return out


# ------------------------------------------------------------ part engines


def part_responses_batch(
    feat: np.ndarray, weights: np.ndarray, px: np.ndarray, py: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """5x5 responses around part origins (px, py); out-of-grid placements are -inf.

    Returns (responses (n, 25), valid mask (n, 25)).
    """
    ph, pw = weights.shape[:2]
    rows, cols = feat.shape[:2]
    n = px.size
    ox = px[:, None] + _DX[None, :]
    oy = py[:, None] + _DY[None, :]
    valid = (ox >= 0) & (oy >= 0) & (ox + pw <= cols) & (oy + ph <= rows)
    resp = np.full((n, SEARCH * SEARCH), -np.inf)
    if n == 0 or rows == 0 or cols == 0:
        return resp, valid
    if n * SEARCH * SEARCH >= (rows - ph + 1) * (cols - pw + 1) > 0:
        # dense candidates: correlate the whole level once and gather; sums run in
        # the same (j, i, k) order as the patch path, so values are identical
        full = _dense_part_map(feat, weights)
        ok = valid.nonzero()
        resp[ok] = full[oy[ok], ox[ok]]
        return resp, valid
    span_y = np.arange(-SEARCH_RADIUS, SEARCH_RADIUS + ph)
    span_x = np.arange(-SEARCH_RADIUS, SEARCH_RADIUS + pw)
    chunk = 1024
    for s in range(0, n, chunk):
        sl = slice(s, s + chunk)
        ri = np.clip(py[sl, None] + span_y[None, :], 0, rows - 1)
        ci = np.clip(px[sl, None] + span_x[None, :], 0, cols - 1)
        patch = feat[ri[:, :, None], ci[:, None, :]]  # (m, ph+4, pw+4, 13)
        acc = np.zeros((patch.shape[0], SEARCH, SEARCH))
        for j in range(ph):
            for i in range(pw):
                win = patch[:, j : j + SEARCH, i : i + SEARCH, :]
                for k in range(FEATURE_DIM):
                    c = weights[j, i, k]
                    if c != 0.0:
                        acc += win[..., k] * c
        resp[sl] = acc.reshape(-1, SEARCH * SEARCH)
    resp[~valid] = -np.inf
    return resp, valid


def _dense_part_map(feat: np.ndarray, weights: np.ndarray) -> np.ndarray:
    ph, pw = weights.shape[:2]
    hp, wp = feat.shape[0] - ph + 1, feat.shape[1] - pw + 1
    acc = np.zeros((hp, wp))
    for j in range(ph):
        for i in range(pw):
            for k in range(FEATURE_DIM):
                c = weights[j, i, k]
                if c != 0.0:
                    acc += feat[j : j + hp, i : i + wp, k] * c
    return acc


def part_level(candidate_level: int, levels_per_octave: int = 3) -> int:
    return candidate_level - levels_per_octave


def part_response(
    fp: FeaturePyramid,
    cb: Codebook | None,
    cm: CompiledModel,
    part: int,
    candidate: Candidate,
    cfg: "DetectorConfig | None" = None,
) -> np.ndarray:
    """5x5 response grid (rows dy = -2..2, cols dx = -2..2) of one part for one candidate."""
    cfg = cfg or DetectorConfig.reference()
    lp = part_level(candidate.level, fp.levels_per_octave)
    if lp < 0 or lp >= len(fp.levels):
        return np.full((SEARCH, SEARCH), -np.inf)
    feat = _part_features(fp.levels[lp].values, cm, cb, cfg, None, None)
    weights, _ = _weights(cm, 1 + part, cfg.projection_enabled)
    ax, ay = cm.source.parts[part].anchor
    resp, _ = part_responses_batch(
        feat, weights, np.array([2 * candidate.x + ax]), np.array([2 * candidate.y + ay])
    )
    return resp.reshape(SEARCH, SEARCH)


def _part_features(values, cm, cb, cfg, ledger, proj_centers):
    if cfg.vq_enabled:
        if cb is None:
            raise ValueError("vq_enabled requires a codebook")
        centers = cb.centers
        if cfg.projection_enabled:
            centers = proj_centers if proj_centers is not None else cb.centers @ cm.basis.matrix.T
        idx = quantize_grid(values, cb).indices
        return centers[idx]
    if cfg.projection_enabled:
        return project_level(values, cm, ledger)
    return values


# ------------------------------------------------------------- deformation


def deformation_costs(d) -> np.ndarray:
    d1, d2, d3, d4 = d
    return d1 * _DX + d2 * _DY + d3 * _DX * _DX + d4 * _DY * _DY


def deform_max_batch(resp: np.ndarray, d, mode: str = "exhaustive") -> tuple:
    """Best displacement per row of resp (n, 25) after subtracting the quadratic cost.

    Returns (scores (n,), best index (n,), evaluations (n,)).
    """
    values = resp - deformation_costs(d)[None, :]
    n = values.shape[0]
    if mode == "exhaustive":
        ordered = values[:, _TIE_ORDER]
        best = _TIE_ORDER[np.argmax(ordered, axis=1)]
        evals = np.full(n, SEARCH * SEARCH)
    elif mode == "coarse_to_fine":
        coarse = values[:, _COARSE]
        best_coarse = _COARSE[np.argmax(coarse, axis=1)]
        mask = np.stack([_C2F_MASKS[int(c)] for c in best_coarse]) if n else np.zeros((0, 25), bool)
        masked = np.where(mask, values, -np.inf)[:, _TIE_ORDER]
        best = _TIE_ORDER[np.argmax(masked, axis=1)]
        evals = mask.sum(axis=1)
    else:
        raise ValueError(f"unknown deform mode {mode!r}")
    scores = values[np.arange(n), best]
    return scores, best, evals


def deform_max(resp, d, mode: str = "exhaustive") -> tuple:
    """Max over the 5x5 region of resp(delta) - cost(delta).

    ``resp`` is indexed [dy + 2, dx + 2]. Returns (score, (dx, dy), evaluations).
    """
    r = np.asarray(resp, dtype=np.float64).reshape(1, SEARCH * SEARCH)
    s, b, e = deform_max_batch(r, d, mode)
    t = int(b[0])
    return float(s[0]), (int(_DX[t]), int(_DY[t])), int(e[0])


def aggregate(root_score: float, part_scores, bias: float, parts_enabled: bool = True) -> tuple:
    """(total, root_only). Any part scoring -inf sends the window to root-only scoring."""
    if not parts_enabled:
        return root_score + bias, False
    total = root_score
    for s in part_scores:
        if s == -np.inf:
            return root_score + bias, True
        total = total + s
    return total + bias, False


# --------------------------------------------------------------------- NMS


def iou(a, b) -> float:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    iw = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    ih = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def nms(dets: list, iou_threshold: float = 0.5) -> list:
    """Greedy per-class suppression; equal scores keep input order."""
    if not 0.0 < iou_threshold < 1.0:
        raise ValueError("iou must be in (0, 1)")
    order = sorted(range(len(dets)), key=lambda t: -dets[t].score)
    kept = []
    for t in order:
        d = dets[t]
        if all(k.class_name != d.class_name or iou(k.bbox, d.bbox) <= iou_threshold for k in kept):
            kept.append(d)
    return kept


# ---------------------------------------------------------------- pipeline


@dataclass
class ModelRun:
    model: CompiledModel
    score_map: ScoreMap
    threshold: float
    candidates: list
    windows: list = field(default_factory=list)

    def totals(self) -> dict:
        return {(w.level, w.x, w.y): w.total for w in self.windows}


@dataclass
class DetectionRun:
    detections: list
    ledger: CostLedger
    runs: list
    pyramid: FeaturePyramid


def _level_bbox(fp: FeaturePyramid, level: int, x: int, y: int, w: int, h: int) -> tuple:
    s = fp.scale_of_level[level]
    cs = fp.cell_size
    x0, y0 = x * cs / s, y * cs / s
    x1, y1 = (x + w) * cs / s, (y + h) * cs / s
    W, H = fp.image_size
    x0, y0 = min(max(x0, 0.0), W), min(max(y0, 0.0), H)
    x1, y1 = min(max(x1, 0.0), W), min(max(y1, 0.0), H)
    return (x0, y0, x1 - x0, y1 - y0)


def run_model(
    fp: FeaturePyramid,
    cm: CompiledModel,
    cfg: DetectorConfig,
    codebook: Codebook | None = None,
    ledger: CostLedger | None = None,
    candidates: list | None = None,
    quantized: list | None = None,
) -> ModelRun:
    """Full classification pipeline of one model over a shared feature pyramid.

    ``candidates`` bypasses pruning with a fixed candidate list. ``quantized``
    carries per-level codeword indices computed once per frame.
    """
    led = ledger if ledger is not None else CostLedger()
    proj = cfg.projection_enabled
    lpo = fp.levels_per_octave
    root_w, root_h = cm.source.root.w, cm.source.root.h
    nlev = len(fp.levels)

    root_fits = [g.rows >= root_h and g.cols >= root_w for g in fp.levels]
    need_part = [False] * nlev
    if cfg.parts_enabled:
        for l in range(nlev):
            if root_fits[l] and 0 <= l - lpo:
                need_part[l - lpo] = True

    projected = [None] * nlev
    if proj:
        for l, g in enumerate(fp.levels):
            if root_fits[l] or (need_part[l] and not cfg.vq_enabled):
                projected[l] = project_level(g.values, cm, led)

    sm = root_scores(fp, cm, streaming=cfg.streaming, projection=proj, ledger=led,
                     features=projected if proj else None)

    if candidates is None:
        if sm.total_windows == 0:
            theta = math.inf
        elif cfg.prune_threshold is not None:
            theta = cfg.prune_threshold
        elif cfg.prune_fraction == 0.0:
            theta = -math.inf
        else:
            theta = calibrate_prune_threshold(eligible_scores(sm, lpo, cfg.parts_enabled), cfg.prune_fraction)
        cands = prune(sm, theta, led)
    else:
        theta = math.nan
        cands = list(candidates)
        led.record("part_svm", "candidates", len(cands))

    # part-level features: dequantized (and projected) codewords, or raw/projected cells
    part_feat = [None] * nlev
    if cfg.parts_enabled:
        if cfg.vq_enabled:
            if codebook is None:
                raise ValueError("vq_enabled requires a codebook")
            centers = codebook.centers
            if proj:
                centers = codebook.centers @ cm.basis.matrix.T
                led.record("projection", "mults", codebook.k * FEATURE_DIM * FEATURE_DIM)
            for l in range(nlev):
                if need_part[l]:
                    idx = quantized[l] if quantized is not None else quantize_grid(fp.levels[l].values, codebook).indices
                    part_feat[l] = centers[idx]
        else:
            for l in range(nlev):
                if need_part[l]:
                    part_feat[l] = projected[l] if proj else fp.levels[l].values

    by_level: dict = {}
    for c in cands:
        by_level.setdefault(c.level, []).append(c)

    bias = cm.source.bias
    run = ModelRun(cm, sm, theta, cands)
    for lvl in sorted(by_level):
        group = by_level[lvl]
        n = len(group)
        xs = np.array([c.x for c in group])
        ys = np.array([c.y for c in group])
        lp = lvl - lpo
        part_scores = np.full((n, NUM_PARTS), -np.inf)
        offsets = np.zeros((n, NUM_PARTS, 2), dtype=int)
        if cfg.parts_enabled and 0 <= lp < nlev:
            feat = part_feat[lp]
            for p, spec in enumerate(cm.source.parts):
                weights, per_place = _weights(cm, 1 + p, proj)
                ax, ay = spec.anchor
                resp, valid = part_responses_batch(feat, weights, 2 * xs + ax, 2 * ys + ay)
                nvalid = int(valid.sum())
                led.record("part_svm", "mults", nvalid * per_place)
                led.record("part_svm", "placements", nvalid * weights.shape[0] * weights.shape[1])
                s, best, evals = deform_max_batch(resp, spec.deformation, cfg.deform_mode)
                led.record("deform", "evals", int(evals.sum()))
                led.record("deform", "calls", n)
                part_scores[:, p] = s
                offsets[:, p, 0] = _DX[best]
                offsets[:, p, 1] = _DY[best]
        for t, c in enumerate(group):
            if cfg.parts_enabled and 0 <= lp < nlev:
                total, root_only = aggregate(c.root_score, part_scores[t], bias, True)
            else:
                total, root_only = c.root_score + bias, cfg.parts_enabled
            offs = tuple((int(a), int(b)) for a, b in offsets[t]) if not root_only else ((0, 0),) * NUM_PARTS
            run.windows.append(
                WindowResult(lvl, c.x, c.y, c.root_score, total, tuple(part_scores[t]), offs, root_only)
            )

    # streaming root accumulators: root_h rows of partial sums per level in flight
    acc = sum(root_h * m.shape[1] for m in sm.maps if m.size)
    led.add_storage("root_accumulators", acc * ACCUMULATOR_BYTES)
    if proj:
        led.add_storage("weights_sparse", cm.weights_sparse_bytes())
        led.add_storage("weights_dense", cm.weights_dense_bytes(), shadow=True)
    else:
        led.add_storage("weights_dense", cm.weights_dense_bytes())
    return run


def detections_from_run(fp: FeaturePyramid, run: ModelRun) -> list:
    cm = run.model
    thr = cm.source.detection_threshold
    out = []
    for w in run.windows:
        if w.total >= thr:
            bbox = _level_bbox(fp, w.level, w.x, w.y, cm.source.root.w, cm.source.root.h)
            out.append(Detection(cm.class_name, float(w.total), w.level, bbox, w.part_offsets, w.root_only, w.x, w.y))
    return out


def _feature_buffer(fp, cfg, codebook, ledger) -> list | None:
    """Quantize every cell once per frame and model the line buffer writes."""
    lb = LineBufferModel(capacity_cells=cfg.buffer_cells)
    if cfg.vq_enabled:
        if codebook is None:
            raise ValueError("vq_enabled requires a codebook")
        quantized = [quantize_grid(g.values, codebook, ledger).indices for g in fp.levels]
        for q in quantized:
            for row in q:
                lb.write_row(row)
        ledger.add_storage("feature_buffer_vq", lb.capacity_bytes_vq)
        ledger.add_storage("codebook", codebook.storage_bytes)
        ledger.add_storage("feature_buffer_raw", lb.capacity_bytes_raw, shadow=True)
        ledger.add_bandwidth("feature_buffer_vq", lb.write_bytes_total)
        ledger.add_bandwidth("feature_buffer_raw", lb.raw_write_bytes_total, shadow=True)
        return quantized
    for g in fp.levels:
        for _ in range(g.rows):
            lb.write_row(range(g.cols))
    ledger.add_storage("feature_buffer_raw", lb.capacity_bytes_raw)
    ledger.add_bandwidth("feature_buffer_raw", lb.raw_write_bytes_total)
    return None


def detect_pyramid(
    fp: FeaturePyramid,
    models,
    cfg: DetectorConfig = DetectorConfig(),
    codebook: Codebook | None = None,
    ledger: CostLedger | None = None,
) -> DetectionRun:
    models = list(models)
    if not models:
        raise ValueError("at least one model is required")
    led = ledger if ledger is not None else CostLedger()
    quantized = _feature_buffer(fp, cfg, codebook, led) if cfg.parts_enabled else None
    runs, dets = [], []
    for cm in models:
        r = run_model(fp, cm, cfg, codebook, led, quantized=quantized)
        runs.append(r)
        dets.extend(detections_from_run(fp, r))
    led.frames += 1
    return DetectionRun(nms(dets, cfg.nms_iou), led, runs, fp)


def detect(
    img: Image,
    models,
    cfg: DetectorConfig = DetectorConfig(),
    codebook: Codebook | None = None,
    pyramid_cfg: PyramidConfig = PyramidConfig(),
    ledger: CostLedger | None = None,
) -> DetectionRun:
    """Compute the feature pyramid once and run every model over it."""
    led = ledger if ledger is not None else CostLedger()
    fp = pyramid_features(img, pyramid_cfg, led)
    return detect_pyramid(fp, models, cfg, codebook, led)

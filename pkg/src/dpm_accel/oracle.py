"""Dense reference scorer. Shares no inner-loop code with the engine on purpose.

Every root placement of every level gets a root score; every part is
correlated at every placement of its part level; each root then takes an
exhaustive 25-point deformation max. No streaming, pruning, VQ or projection.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .frontend import FeaturePyramid
from .metrics import CostLedger
from .model import DpmModel


@dataclass
class DenseResult:
    root: list  # per level (H', W') or None when the root does not fit
    parts: list  # per level: list of 8 full part-response maps at that level, or None
    total: list  # per level (H', W') or None
    root_only: list  # per level bool mask or None
    ledger: CostLedger = field(default_factory=CostLedger)

    def totals(self) -> dict:
        out = {}
        for lvl, t in enumerate(self.total):
            if t is None:
                continue
            for y in range(t.shape[0]):
                for x in range(t.shape[1]):
                    out[(lvl, x, y)] = float(t[y, x])
        return out


def correlate(features: np.ndarray, weights: np.ndarray) -> np.ndarray | None:
    """Valid-mode correlation of (R, C, 13) features with an (h, w, 13) filter."""
    h, w, _ = weights.shape
    R, C, _ = features.shape
    if R < h or C < w:
        return None
    win = sliding_window_view(features, (h, w), axis=(0, 1))  # (R-h+1, C-w+1, 13, h, w)
    return np.tensordot(win, weights.transpose(2, 0, 1), axes=([2, 3, 4], [0, 1, 2]))


def _best_displacement(resp_map: np.ndarray, ox: np.ndarray, oy: np.ndarray, d) -> np.ndarray:
    """max over dx, dy in [-2, 2] of resp[oy+dy, ox+dx] - cost; -inf when no placement fits."""
    d1, d2, d3, d4 = d
    H, W = resp_map.shape
    best = np.full(ox.shape, -np.inf)
    for dy in range(-2, 3):
        for dx in range(-2, 3):
            cost = d1 * dx + d2 * dy + d3 * dx * dx + d4 * dy * dy
            xx, yy = ox + dx, oy + dy
            ok = (xx >= 0) & (yy >= 0) & (xx < W) & (yy < H)
            val = np.full(ox.shape, -np.inf)
            val[ok] = resp_map[yy[ok], xx[ok]] - cost
            best = np.maximum(best, val)
    return best


def dense_scores(fp: FeaturePyramid, m: DpmModel, parts_enabled: bool = True) -> DenseResult:
    led = CostLedger()
    lpo = fp.levels_per_octave
    n = len(fp.levels)
    roots, totals, masks = [None] * n, [None] * n, [None] * n
    part_maps = [None] * n

    for lvl, g in enumerate(fp.levels):
        r = correlate(g.values, m.root.weights)
        roots[lvl] = r
        if r is not None:
            led.record("root_svm", "mults", r.size * m.root.cells * 13)
            led.record("root_svm", "placements", r.size * m.root.cells)
            led.record("root_svm", "windows", r.size)

    if parts_enabled:
        for lvl in range(n):
            if roots[lvl] is not None and lvl + 0 >= lpo and part_maps[lvl - lpo] is None:
                g = fp.levels[lvl - lpo]
                maps = []
                for p in m.parts:
                    pm = correlate(g.values, p.filter.weights)
                    if pm is None:
                        pm = np.zeros((0, 0))
                    else:
                        led.record("part_svm", "mults", pm.size * p.filter.cells * 13)
                        led.record("part_svm", "placements", pm.size * p.filter.cells)
                    maps.append(pm)
                part_maps[lvl - lpo] = maps

    for lvl in range(n):
        r = roots[lvl]
        if r is None:
            continue
        if not parts_enabled or lvl < lpo:
            totals[lvl] = r + m.bias
            masks[lvl] = np.full(r.shape, parts_enabled)
            continue
        yy, xx = np.mgrid[0 : r.shape[0], 0 : r.shape[1]]
        acc = r.copy()
        root_only = np.zeros(r.shape, dtype=bool)
        for p, pm in zip(m.parts, part_maps[lvl - lpo]):
            ax, ay = p.anchor
            if pm.size == 0:
                root_only[:] = True
                continue
            best = _best_displacement(pm, 2 * xx + ax, 2 * yy + ay, p.deformation)
            led.record("deform", "evals", 25 * r.size)
            led.record("deform", "calls", r.size)
            root_only |= np.isneginf(best)
            acc = acc + np.where(np.isneginf(best), 0.0, best)
        totals[lvl] = np.where(root_only, r, acc) + m.bias
        masks[lvl] = root_only
    return DenseResult(roots, part_maps, totals, masks, led)


def closed_form_mults(fp: FeaturePyramid, m: DpmModel, parts_enabled: bool = True) -> dict:
    """Expected oracle multiplication counts: placements x filter cells x 13, per filter."""
    lpo = fp.levels_per_octave
    root = part = 0
    used_part_levels = set()
    for lvl, g in enumerate(fp.levels):
        hp, wp = g.rows - m.root.h + 1, g.cols - m.root.w + 1
        if hp <= 0 or wp <= 0:
            continue
        root += hp * wp * m.root.cells * 13
        if parts_enabled and lvl >= lpo:
            used_part_levels.add(lvl - lpo)
    for lp in used_part_levels:
        g = fp.levels[lp]
        for p in m.parts:
            hp, wp = g.rows - p.filter.h + 1, g.cols - p.filter.w + 1
            if hp > 0 and wp > 0:
                part += hp * wp * p.filter.cells * 13
    return {"root_svm": root, "part_svm": part}

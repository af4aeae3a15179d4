"""Cost ledger: multiplication, storage and bandwidth accounting per pipeline stage.

Power is not modeled. Multiplication counts are the cost proxy: one real or
fixed-point multiply inside a dot product, a distance computation or a basis
projection counts as one; additions and comparisons are free.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field

STAGES = ("hog", "vq_quant", "projection", "root_svm", "part_svm", "deform")
KINDS = ("mults", "evals", "calls", "cells", "placements", "candidates", "windows")

# Storage names. The first five are the classifier-facing memories; the rest
# are streaming buffers that every configuration needs.
STORAGE_NAMES = (
    "feature_buffer_raw",
    "feature_buffer_vq",
    "codebook",
    "weights_dense",
    "weights_sparse",
    "pixel_line_buffers",
    "hist_line_buffers",
    "root_accumulators",
)

CLASSIFICATION_STAGES = ("projection", "root_svm", "part_svm")

HEADER = (
    "multiplication counts are the cost proxy; power (mW) is not modeled; "
    "additions and comparisons are free"
)


@dataclass
class CostLedger:
    """Monotone counters keyed by (stage, kind), plus storage and bandwidth.

    ``storage`` holds the bytes a configuration actually uses. ``shadow_storage``
    holds counterparts kept only for ratio reporting (e.g. what the raw feature
    buffer would have cost in a VQ run). ``bandwidth`` is bytes written per frame.
    """

    counters: Counter = field(default_factory=Counter)
    storage: Counter = field(default_factory=Counter)
    shadow_storage: Counter = field(default_factory=Counter)
    bandwidth: Counter = field(default_factory=Counter)
    shadow_bandwidth: Counter = field(default_factory=Counter)
    frames: int = 0

    def record(self, stage: str, kind: str, amount: int | float) -> "CostLedger":
        if stage not in STAGES:
            raise ValueError(f"unknown stage {stage!r}")
        if kind not in KINDS:
            raise ValueError(f"unknown counter kind {kind!r}")
        if amount < 0:
            raise ValueError("counters are monotone; amount must be >= 0")
        self.counters[(stage, kind)] += amount
        return self

    def add_storage(self, name: str, nbytes: float, *, shadow: bool = False) -> "CostLedger":
        if name not in STORAGE_NAMES:
            raise ValueError(f"unknown storage name {name!r}")
        if nbytes < 0:
            raise ValueError("storage must be >= 0")
        (self.shadow_storage if shadow else self.storage)[name] += nbytes
        return self

    def add_bandwidth(self, name: str, nbytes: float, *, shadow: bool = False) -> "CostLedger":
        if name not in STORAGE_NAMES:
            raise ValueError(f"unknown storage name {name!r}")
        (self.shadow_bandwidth if shadow else self.bandwidth)[name] += nbytes
        return self

    def get(self, stage: str, kind: str = "mults") -> int | float:
        if stage not in STAGES:
            raise ValueError(f"unknown stage {stage!r}")
        return self.counters.get((stage, kind), 0)

    def mults(self, *stages: str) -> int | float:
        return sum(self.get(s, "mults") for s in (stages or STAGES))

    def classification_mults(self) -> int | float:
        return self.mults(*CLASSIFICATION_STAGES)

    def memory_total(self) -> float:
        return float(sum(self.storage.values()))

    def merge(self, other: "CostLedger") -> "CostLedger":
        out = CostLedger()
        for a in (self, other):
            out.counters.update(a.counters)
            out.storage.update(a.storage)
            out.shadow_storage.update(a.shadow_storage)
            out.bandwidth.update(a.bandwidth)
            out.shadow_bandwidth.update(a.shadow_bandwidth)
        out.frames = self.frames + other.frames
        return out

    def __iadd__(self, other: "CostLedger") -> "CostLedger":
        merged = self.merge(other)
        self.__dict__.update(merged.__dict__)
        return self

    def stage_table(self) -> dict:
        table = {s: {} for s in STAGES}
        for (stage, kind), value in sorted(self.counters.items()):
            table[stage][kind] = value
        return table

    def to_dict(self) -> dict:
        return {
            "stages": self.stage_table(),
            "storage": dict(sorted(self.storage.items())),
            "shadow_storage": dict(sorted(self.shadow_storage.items())),
            "bandwidth_per_frame": dict(sorted(self.bandwidth.items())),
            "shadow_bandwidth_per_frame": dict(sorted(self.shadow_bandwidth.items())),
            "frames": self.frames,
        }


def record(ledger: CostLedger, stage: str, kind: str, amount: int | float) -> CostLedger:
    return ledger.record(stage, kind, amount)


def merge(*ledgers: CostLedger) -> CostLedger:
    out = CostLedger()
    for led in ledgers:
        out = out.merge(led)
    return out


def _ratio(num: float, den: float, name: str, flags: list[str]) -> float:
    if den == 0:
        flags.append(name)
        return math.inf if num > 0 else math.nan
    return num / den


def feature_bytes(led: CostLedger, shadow_raw: bool = False) -> float:
    """Bytes of feature storage a ledger uses: buffer plus codebook if present."""
    if shadow_raw:
        raw = led.storage["feature_buffer_raw"] or led.shadow_storage["feature_buffer_raw"]
        return float(raw)
    return float(
        led.storage["feature_buffer_raw"] + led.storage["feature_buffer_vq"] + led.storage["codebook"]
    )


@dataclass
class CostReport:
    baseline: CostLedger
    optimized: CostLedger
    ratios: dict
    flags: list
    extras: dict

    def to_dict(self) -> dict:
        def enc(v):
            if isinstance(v, float) and not math.isfinite(v):
                return "inf" if v > 0 else "nan"
            return v

        return {
            "header": HEADER,
            "stages": {
                "baseline": self.baseline.stage_table(),
                "optimized": self.optimized.stage_table(),
            },
            "storage": {
                "baseline": dict(sorted(self.baseline.storage.items())),
                "optimized": dict(sorted(self.optimized.storage.items())),
            },
            "ratios": {k: enc(v) for k, v in sorted(self.ratios.items())},
            "infinite_or_undefined": sorted(self.flags),
            "extras": {k: enc(v) for k, v in sorted(self.extras.items())},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def report(baseline: CostLedger, optimized: CostLedger, fps: float = 30.0) -> CostReport:
    """Reduction ratios of ``optimized`` relative to ``baseline`` (bigger is better)."""
    flags: list[str] = []
    b, o = baseline, optimized

    ratios = {
        # part-filter evaluations, so projection savings are not folded in
        "parts_reduction": _ratio(
            b.get("part_svm", "placements"), o.get("part_svm", "placements"), "parts_reduction", flags
        ),
        "feature_storage_reduction": _ratio(
            feature_bytes(o, shadow_raw=True), feature_bytes(o), "feature_storage_reduction", flags
        ),
        "classification_mult_reduction": _ratio(
            b.classification_mults(), o.classification_mults(), "classification_mult_reduction", flags
        ),
        "weight_storage_reduction": _ratio(
            b.storage["weights_dense"] + b.storage["weights_sparse"],
            o.storage["weights_dense"] + o.storage["weights_sparse"],
            "weight_storage_reduction",
            flags,
        ),
        "total_memory_reduction": _ratio(
            b.memory_total(), o.memory_total(), "total_memory_reduction", flags
        ),
    }

    b_evals = _ratio(b.get("deform", "evals"), b.get("deform", "calls"), "deform_eval_reduction", [])
    o_evals = _ratio(o.get("deform", "evals"), o.get("deform", "calls"), "deform_eval_reduction", [])
    if math.isfinite(b_evals) and math.isfinite(o_evals) and o_evals > 0:
        ratios["deform_eval_reduction"] = b_evals / o_evals
    else:
        flags.append("deform_eval_reduction")
        ratios["deform_eval_reduction"] = math.nan

    # Multiplications per filter-cell placement, projection overhead included.
    b_pl = b.get("root_svm", "placements") + b.get("part_svm", "placements")
    o_pl = o.get("root_svm", "placements") + o.get("part_svm", "placements")
    if b_pl and o_pl:
        ratios["per_classifier_mult_reduction"] = _ratio(
            b.classification_mults() / b_pl,
            o.classification_mults() / o_pl,
            "per_classifier_mult_reduction",
            flags,
        )
    else:
        flags.append("per_classifier_mult_reduction")
        ratios["per_classifier_mult_reduction"] = math.nan

    extras = {}
    raw_bw = o.bandwidth["feature_buffer_raw"] or o.shadow_bandwidth["feature_buffer_raw"]
    frames = max(o.frames, 1)
    extras["raw_feature_write_MBps"] = raw_bw / frames * fps / 1e6
    extras["feature_write_MBps"] = (
        (o.bandwidth["feature_buffer_vq"] or o.bandwidth["feature_buffer_raw"]) / frames * fps / 1e6
    )
    cells = o.get("hog", "cells")
    if cells and o.bandwidth["feature_buffer_vq"]:
        extras["per_cell_storage_ratio"] = raw_bw / o.bandwidth["feature_buffer_vq"]
    extras["baseline_memory_bytes"] = b.memory_total()
    extras["optimized_memory_bytes"] = o.memory_total()
    extras["vq_quant_mults"] = o.get("vq_quant")
    return CostReport(baseline, optimized, ratios, flags, extras)

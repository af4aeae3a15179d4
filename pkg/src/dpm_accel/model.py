"""Root + 8 parts model schema, sparsifying basis projection and compiled-model files."""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .frontend import FEATURE_DIM

NUM_PARTS = 8
MAX_TEMPLATE_CELLS = 16  # 128 px / 8 px cells
MIN_ZEROS_DEFAULT = 7
FLAG_MASK = (1 << FEATURE_DIM) - 1

COMPILED_MAGIC = b"DPMC"
COMPILED_VERSION = 1


class ModelError(ValueError):
    pass


class CompiledFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Filter:
    weights: np.ndarray  # (h, w, 13)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 3 or w.shape[2] != FEATURE_DIM or w.shape[0] < 1 or w.shape[1] < 1:
            raise ModelError(f"filter weights must be h x w x {FEATURE_DIM}, got {w.shape}")
        if not np.all(np.isfinite(w)):
            raise ModelError("filter weights must be finite")
        object.__setattr__(self, "weights", w)

    @property
    def h(self) -> int:
        return self.weights.shape[0]

    @property
    def w(self) -> int:
        return self.weights.shape[1]

    @property
    def cells(self) -> int:
        return self.h * self.w


@dataclass(frozen=True)
class PartSpec:
    filter: Filter
    anchor: tuple  # (ax, ay) in part-level cells, relative to the doubled root origin
    deformation: tuple  # (d1, d2, d3, d4)

    def __post_init__(self):
        d = tuple(float(v) for v in self.deformation)
        if len(d) != 4:
            raise ModelError("deformation needs 4 coefficients")
        if not (d[2] > 0 and d[3] > 0):
            raise ModelError("deformation d3 and d4 must be positive")
        a = tuple(int(v) for v in self.anchor)
        if len(a) != 2:
            raise ModelError("anchor needs (ax, ay)")
        object.__setattr__(self, "deformation", d)
        object.__setattr__(self, "anchor", a)


@dataclass(frozen=True)
class DpmModel:
    class_name: str
    bias: float
    detection_threshold: float
    root: Filter
    parts: tuple

    def __post_init__(self):
        parts = tuple(self.parts)
        if len(parts) != NUM_PARTS:
            raise ModelError(f"model needs exactly {NUM_PARTS} parts, got {len(parts)}")
        object.__setattr__(self, "parts", parts)
        for name, f in [("root", self.root)] + [(f"part {i}", p.filter) for i, p in enumerate(parts)]:
            if f.w > MAX_TEMPLATE_CELLS or f.h > MAX_TEMPLATE_CELLS:
                raise ModelError(
                    f"{name} is {f.w}x{f.h} cells; the maximum template is "
                    f"{MAX_TEMPLATE_CELLS}x{MAX_TEMPLATE_CELLS} cells (128x128 px)"
                )
        for i, p in enumerate(parts):
            ax, ay = p.anchor
            if not (0 <= ax < 2 * self.root.w and 0 <= ay < 2 * self.root.h):
                raise ModelError(f"part {i} anchor {p.anchor} outside twice the root extent")

    def filters(self) -> list:
        return [self.root] + [p.filter for p in self.parts]

    def all_cell_weights(self) -> np.ndarray:
        return np.concatenate([f.weights.reshape(-1, FEATURE_DIM) for f in self.filters()])


# ---------------------------------------------------------------- JSON I/O


def model_to_dict(m: DpmModel) -> dict:
    def filt(f: Filter) -> dict:
        return {"w": f.w, "h": f.h, "weights": f.weights.tolist()}

    return {
        "class_name": m.class_name,
        "bias": m.bias,
        "detection_threshold": m.detection_threshold,
        "root": filt(m.root),
        "parts": [
            dict(filt(p.filter), anchor=list(p.anchor), **{"def": list(p.deformation)}) for p in m.parts
        ],
    }


def _filter_from(d: dict, what: str) -> Filter:
    try:
        w, h = int(d["w"]), int(d["h"])
        weights = np.asarray(d["weights"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelError(f"{what}: bad filter record ({exc})") from None
    if weights.shape != (h, w, FEATURE_DIM):
        raise ModelError(f"{what}: weights shape {weights.shape} does not match h={h}, w={w}")
    return Filter(weights)


def model_from_dict(d: dict) -> DpmModel:
    try:
        parts_raw = d["parts"]
        root = _filter_from(d["root"], "root")
        parts = []
        for i, p in enumerate(parts_raw):
            parts.append(PartSpec(_filter_from(p, f"part {i}"), tuple(p["anchor"]), tuple(p["def"])))
        return DpmModel(
            class_name=str(d["class_name"]),
            bias=float(d["bias"]),
            detection_threshold=float(d["detection_threshold"]),
            root=root,
            parts=tuple(parts),
        )
    except KeyError as exc:
        raise ModelError(f"missing field {exc}") from None
    except TypeError as exc:
        raise ModelError(f"schema violation: {exc}") from None


def load_model(path: str | os.PathLike) -> DpmModel:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ModelError(f"not a valid model file: {exc}") from None
    if not isinstance(d, dict):
        raise ModelError("model file must hold an object")
    return model_from_dict(d)


def save_model(m: DpmModel, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(m), fh, sort_keys=True)


def random_model(
    rng: np.random.Generator,
    root_size: tuple = (16, 8),
    part_size: tuple = (6, 6),
    class_name: str = "object",
    bias: float = 0.0,
    detection_threshold: float = 0.0,
    deformation: tuple = (0.0, 0.0, 0.1, 0.1),
) -> DpmModel:
    """Synthetic model with Gaussian weights; sizes are (w, h) in cells.

    Anchors are spread over a 3x3 layout inside the doubled root area.
    """
    rw, rh = root_size
    pw, ph = part_size
    root = Filter(rng.normal(size=(rh, rw, FEATURE_DIM)))
    xs = np.linspace(0, max(2 * rw - pw, 0), 3).round().astype(int)
    ys = np.linspace(0, max(2 * rh - ph, 0), 3).round().astype(int)
    slots = [(int(xs[c]), int(ys[r])) for r in range(3) for c in range(3) if (r, c) != (1, 1)]
    parts = tuple(
        PartSpec(Filter(rng.normal(size=(ph, pw, FEATURE_DIM))), slots[i], deformation) for i in range(NUM_PARTS)
    )
    return DpmModel(class_name, bias, detection_threshold, root, parts)


# ----------------------------------------------------------- projection


@dataclass(frozen=True)
class Basis:
    """Orthonormal 13x13 change of coordinates; projected vector = matrix @ v."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (FEATURE_DIM, FEATURE_DIM):
            raise ValueError("basis must be 13x13")
        object.__setattr__(self, "matrix", m)

    def orthonormality_error(self) -> float:
        return float(np.max(np.abs(self.matrix.T @ self.matrix - np.eye(FEATURE_DIM))))

    def project(self, v: np.ndarray) -> np.ndarray:
        return np.asarray(v) @ self.matrix.T

    @classmethod
    def identity(cls) -> "Basis":
        return cls(np.eye(FEATURE_DIM))


def compute_basis(m: DpmModel) -> Basis:
    """PCA of the model's per-cell weight vectors, rows ordered by descending variance.

    Each row is signed so its largest-magnitude entry is positive.
    An all-zero model gets the identity.
    """
    x = m.all_cell_weights()
    if not np.any(x):
        return Basis.identity()
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / x.shape[0]
    if not np.any(cov):
        return Basis.identity()
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(-vals, kind="stable")
    rows = vecs[:, order].T.copy()
    for r in rows:
        j = int(np.argmax(np.abs(r)))
        if r[j] < 0:
            r *= -1.0
    return Basis(rows)


@dataclass(frozen=True)
class SparseFilter:
    """Projected filter; ``coeffs`` is dense (h, w, 13) with zeros where flags are clear."""

    coeffs: np.ndarray
    flags: np.ndarray  # (h, w) uint16, low 13 bits used

    @property
    def h(self) -> int:
        return self.coeffs.shape[0]

    @property
    def w(self) -> int:
        return self.coeffs.shape[1]

    @property
    def cells(self) -> int:
        return self.h * self.w

    def popcounts(self) -> np.ndarray:
        return np.array([[bin(int(f)).count("1") for f in row] for row in self.flags], dtype=np.int64)

    @property
    def nnz(self) -> int:
        return int(self.popcounts().sum())

    def packed(self, j: int, i: int) -> np.ndarray:
        """Nonzero coefficients of cell (j, i) in ascending component order."""
        f = int(self.flags[j, i])
        return np.array([self.coeffs[j, i, k] for k in range(FEATURE_DIM) if f >> k & 1])

    def storage_bytes(self) -> int:
        return 2 * self.cells + 4 * self.nnz

    @staticmethod
    def dense_storage_bytes(cells: int) -> int:
        return FEATURE_DIM * 4 * cells


@dataclass(frozen=True)
class CompiledModel:
    source: DpmModel
    basis: Basis
    root: SparseFilter
    parts: tuple
    min_zeros: int = MIN_ZEROS_DEFAULT

    @property
    def class_name(self) -> str:
        return self.source.class_name

    def sparse_filters(self) -> list:
        return [self.root] + list(self.parts)

    @property
    def total_cells(self) -> int:
        return sum(f.cells for f in self.sparse_filters())

    @property
    def zero_fraction(self) -> float:
        nnz = sum(f.nnz for f in self.sparse_filters())
        return 1.0 - nnz / (FEATURE_DIM * self.total_cells)

    @property
    def source_zero_fraction(self) -> float:
        x = self.source.all_cell_weights()
        return float(np.mean(x == 0))

    def weights_sparse_bytes(self) -> int:
        return sum(f.storage_bytes() for f in self.sparse_filters())

    def weights_dense_bytes(self) -> int:
        return SparseFilter.dense_storage_bytes(self.total_cells)


def _sparsify_cells(projected: np.ndarray, keep: int) -> tuple[np.ndarray, np.ndarray]:
    shape = projected.shape[:-1]
    flat = projected.reshape(-1, FEATURE_DIM)
    out = np.zeros_like(flat)
    flags = np.zeros(flat.shape[0], dtype=np.uint16)
    if keep > 0:
        # stable sort on -|c| keeps the lower index on ties
        order = np.argsort(-np.abs(flat), axis=1, kind="stable")[:, :keep]
        rows = np.arange(flat.shape[0])[:, None]
        out[rows, order] = flat[rows, order]
    out[np.abs(out) < 1e-12] = 0.0
    bits = (out != 0).astype(np.uint16) << np.arange(FEATURE_DIM, dtype=np.uint16)
    flags = bits.sum(axis=1, dtype=np.uint16)
    return out.reshape(projected.shape), flags.reshape(shape)


def sparsify(m: DpmModel, basis: Basis | None = None, min_zeros: int = MIN_ZEROS_DEFAULT) -> CompiledModel:
    """Project every cell's weights and keep the 13 - min_zeros largest magnitudes."""
    if not 0 <= min_zeros <= FEATURE_DIM:
        raise ValueError("min_zeros must be in [0, 13]")
    if basis is None:
        basis = compute_basis(m)
    keep = FEATURE_DIM - min_zeros
    sparse = []
    for f in m.filters():
        coeffs, flags = _sparsify_cells(basis.project(f.weights), keep)
        sparse.append(SparseFilter(coeffs, flags))
    return CompiledModel(m, basis, sparse[0], tuple(sparse[1:]), min_zeros)


def compile_model(m: DpmModel, min_zeros: int = MIN_ZEROS_DEFAULT) -> CompiledModel:
    return sparsify(m, compute_basis(m), min_zeros)


# --------------------------------------------------------- compiled files
#
# Layout (little-endian):
#   "DPMC" | version u8 | min_zeros u8 | name_len u16 | name utf-8
#   | bias f64 | detection_threshold f64 | basis 169 x f32 (row-major)
#   | 9 filter records (root, then parts 0..7):
#       w u16 | h u16 | per cell (row-major): word u16 (flag in low 13 bits)
#       followed by popcount(flag) f32 coefficients in ascending index order
#   | 8 part trailers: ax i16 | ay i16 | d1..d4 f64


def encode_compiled(cm: CompiledModel) -> bytes:
    src = cm.source
    name = src.class_name.encode("utf-8")
    out = [COMPILED_MAGIC, struct.pack("<BBH", COMPILED_VERSION, cm.min_zeros, len(name)), name]
    out.append(struct.pack("<dd", src.bias, src.detection_threshold))
    out.append(cm.basis.matrix.astype("<f4").tobytes())
    for sf in cm.sparse_filters():
        out.append(struct.pack("<HH", sf.w, sf.h))
        for j in range(sf.h):
            for i in range(sf.w):
                flag = int(sf.flags[j, i]) & FLAG_MASK
                out.append(struct.pack("<H", flag))
                out.append(sf.packed(j, i).astype("<f4").tobytes())
    for p in src.parts:
        out.append(struct.pack("<hh4d", p.anchor[0], p.anchor[1], *p.deformation))
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise CompiledFormatError("truncated compiled model")
        vals = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return vals

    def take_bytes(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CompiledFormatError("truncated compiled model")
        b = self.buf[self.pos : self.pos + n]
        self.pos += n
        return b

    def take_f32(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take_bytes(4 * n), dtype="<f4").astype(np.float64)


def decode_compiled(buf: bytes) -> CompiledModel:
    """Inverse of :func:`encode_compiled`.

    The source model's weights are reconstructed as basis^T @ coefficients,
    which is exact only for losslessly compiled models.
    """
    if buf[:4] != COMPILED_MAGIC:
        raise CompiledFormatError("bad compiled-model magic")
    r = _Reader(buf)
    r.pos = 4
    version, min_zeros, name_len = r.take("<BBH")
    if version != COMPILED_VERSION:
        raise CompiledFormatError(f"unsupported compiled-model version {version}")
    try:
        name = r.take_bytes(name_len).decode("utf-8")
    except UnicodeDecodeError:
        raise CompiledFormatError("class name is not utf-8") from None
    bias, thr = r.take("<dd")
    basis = Basis(r.take_f32(FEATURE_DIM * FEATURE_DIM).reshape(FEATURE_DIM, FEATURE_DIM))
    sparse = []
    for _ in range(1 + NUM_PARTS):
        w, h = r.take("<HH")
        if w < 1 or h < 1:
            raise CompiledFormatError("filter with zero extent")
        coeffs = np.zeros((h, w, FEATURE_DIM))
        flags = np.zeros((h, w), dtype=np.uint16)
        for j in range(h):
            for i in range(w):
                (word,) = r.take("<H")
                if word & ~FLAG_MASK:
                    raise CompiledFormatError("flag word uses reserved bits")
                idx = [k for k in range(FEATURE_DIM) if word >> k & 1]
                coeffs[j, i, idx] = r.take_f32(len(idx))
                flags[j, i] = word
        sparse.append(SparseFilter(coeffs, flags))
    trailers = [r.take("<hh4d") for _ in range(NUM_PARTS)]
    if r.pos != len(buf):
        raise CompiledFormatError("trailing bytes after compiled model")
    inv = basis.matrix.T
    try:
        root = Filter(sparse[0].coeffs @ inv.T)
        parts = tuple(
            PartSpec(Filter(sf.coeffs @ inv.T), (t[0], t[1]), t[2:]) for sf, t in zip(sparse[1:], trailers)
        )
        src = DpmModel(name, bias, thr, root, parts)
    except ModelError as exc:
        raise CompiledFormatError(f"invalid model in file: {exc}") from None
    return CompiledModel(src, basis, sparse[0], tuple(sparse[1:]), min_zeros)


def serialize_compiled(cm: CompiledModel, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_compiled(cm))


def load_compiled(path: str | os.PathLike) -> CompiledModel:
    with open(path, "rb") as fh:
        return decode_compiled(fh.read())


def load_any_model(path: str | os.PathLike, min_zeros: int = MIN_ZEROS_DEFAULT) -> CompiledModel:
    """Load a compiled DPMC file, or compile a JSON source model on the fly."""
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == COMPILED_MAGIC:
        return load_compiled(path)
    return compile_model(load_model(path), min_zeros)

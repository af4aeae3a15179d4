"""256-entry vector quantizer for feature storage and the line buffer model."""

from __future__ import annotations

import collections
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .frontend import FEATURE_DIM, QMAX
from .metrics import CostLedger

RAW_BITS_PER_CELL = 143  # 13 components x 11 bits
VQ_BITS_PER_CELL = 8
BYTES_PER_CELL_RAW = RAW_BITS_PER_CELL / 8  # 17.875
BYTES_PER_CELL_VQ = VQ_BITS_PER_CELL / 8
DEFAULT_BUFFER_CELLS = 32768

CODEBOOK_MAGIC = b"VQCB"
CODEBOOK_VERSION = 1


class CodebookFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Codebook:
    """k centers of dimension 13; centers are held at float32 precision."""

    centers: np.ndarray
    quantized_centers: np.ndarray
    distortion: float = float("nan")
    history: tuple = ()

    def __post_init__(self):
        c = np.asarray(self.centers, dtype=np.float32).astype(np.float64)
        if c.ndim != 2 or not 1 <= c.shape[0] <= 256:
            raise ValueError("codebook must have 1..256 centers")
        if not np.all(np.isfinite(c)):
            raise ValueError("codebook centers must be finite")
        object.__setattr__(self, "centers", c)
        object.__setattr__(self, "quantized_centers", np.asarray(self.quantized_centers, dtype=np.uint16))

    @classmethod
    def from_centers(cls, centers, scale: float = 4096.0, **kw) -> "Codebook":
        c = np.asarray(centers, dtype=np.float32).astype(np.float64)
        q = np.clip(np.floor(c * scale + 0.5), 0, QMAX).astype(np.uint16)
        return cls(c, q, **kw)

    @property
    def k(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    @property
    def storage_bytes(self) -> float:
        return self.k * self.dim * 11 / 8


@dataclass
class QuantizedGrid:
    indices: np.ndarray  # (rows, cols) uint8

    @property
    def rows(self) -> int:
        return self.indices.shape[0]

    @property
    def cols(self) -> int:
        return self.indices.shape[1]


# ---------------------------------------------------------------- training


def _sq_dists(x: np.ndarray, centers: np.ndarray, chunk: int = 4096) -> np.ndarray:
    out = np.empty((x.shape[0], centers.shape[0]))
    for s in range(0, x.shape[0], chunk):
        d = x[s : s + chunk, None, :] - centers[None, :, :]
        out[s : s + chunk] = np.einsum("nkd,nkd->nk", d, d)
    return out


def _assign(x: np.ndarray, centers: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    d = _sq_dists(x, centers)
    labels = np.argmin(d, axis=1)
    return labels, d[np.arange(x.shape[0]), labels]


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    idx = [int(rng.integers(n))]
    closest = np.einsum("nd,nd->n", x - x[idx[0]], x - x[idx[0]])
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            raise ValueError("too few distinct samples for the requested k")
        probs = closest / total
        nxt = int(rng.choice(n, p=probs))
        idx.append(nxt)
        d = x - x[nxt]
        closest = np.minimum(closest, np.einsum("nd,nd->n", d, d))
    return x[idx].copy()


def train_codebook(
    samples,
    k: int = 256,
    seed: int = 0,
    max_iter: int = 100,
    tol: float = 1e-5,
    scale: float = 4096.0,
) -> Codebook:
    """k-means++ seeding followed by Lloyd iterations.

    Stops when the relative distortion improvement drops below ``tol`` or after
    ``max_iter`` iterations. An empty cluster is reseeded with the sample
    farthest from its current center. Center order is the seeding order.
    The per-iteration distortion is returned in ``Codebook.history``.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("samples must be a 2-D array")
    if not 2 <= k <= 256:
        raise ValueError("k must be in [2, 256] so indices fit in 8 bits")
    if x.shape[0] < k:
        raise ValueError(f"need at least k={k} samples, got {x.shape[0]}")
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(x, k, rng)

    labels, d = _assign(x, centers)
    history = [float(d.sum())]
    for _ in range(max_iter):
        counts = np.bincount(labels, minlength=k)
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, x)
        new = centers.copy()
        filled = counts > 0
        new[filled] = sums[filled] / counts[filled, None]
        if not filled.all():
            # reseed empties with the worst-fit samples, one distinct sample each
            order = np.argsort(-d, kind="stable")
            taken = 0
            for c in np.flatnonzero(~filled):
                new[c] = x[order[taken]]
                taken += 1
        centers = new
        labels, d = _assign(x, centers)
        cur = float(d.sum())
        prev = history[-1]
        history.append(cur)
        if prev <= 0 or (prev - cur) / prev < tol:
            break

    return Codebook.from_centers(centers, scale=scale, distortion=history[-1], history=tuple(history))


# ------------------------------------------------------------ quantization


def quantize_cell(f, cb: Codebook, ledger: CostLedger | None = None) -> int:
    """Index of the nearest center (squared Euclidean); ties go to the lowest index."""
    f = np.asarray(f, dtype=np.float64)
    d = cb.centers - f
    dist = np.einsum("kd,kd->k", d, d)
    if ledger is not None:
        ledger.record("vq_quant", "mults", cb.k * cb.dim)
    return int(np.argmin(dist))


def quantize_grid(grid_values: np.ndarray, cb: Codebook, ledger: CostLedger | None = None) -> QuantizedGrid:
    rows, cols, dim = grid_values.shape
    flat = grid_values.reshape(-1, dim)
    if flat.shape[0]:
        labels, _ = _assign(flat, cb.centers)
    else:
        labels = np.zeros(0, dtype=np.intp)
    if ledger is not None:
        ledger.record("vq_quant", "mults", flat.shape[0] * cb.k * cb.dim)
    return QuantizedGrid(labels.astype(np.uint8).reshape(rows, cols))


def dequantize(idx, cb: Codebook) -> np.ndarray:
    """Center lookup; a memory read, so nothing is charged to the ledger."""
    idx_arr = np.asarray(idx)
    if np.any(idx_arr < 0) or np.any(idx_arr >= cb.k):
        raise IndexError("codeword index out of range")
    return cb.centers[idx_arr]


# ------------------------------------------------------------------- files


def encode_codebook(cb: Codebook) -> bytes:
    head = CODEBOOK_MAGIC + struct.pack("<BHB", CODEBOOK_VERSION, cb.k, cb.dim)
    return (
        head
        + cb.centers.astype("<f4").tobytes()
        + cb.quantized_centers.astype("<u2").tobytes()
    )


def decode_codebook(buf: bytes) -> Codebook:
    if buf[:4] != CODEBOOK_MAGIC:
        raise CodebookFormatError("bad codebook magic")
    if len(buf) < 8:
        raise CodebookFormatError("truncated codebook header")
    version, k, dim = struct.unpack_from("<BHB", buf, 4)
    if version != CODEBOOK_VERSION:
        raise CodebookFormatError(f"unsupported codebook version {version}")
    n = k * dim
    need = 8 + 4 * n + 2 * n
    if len(buf) != need:
        raise CodebookFormatError(f"codebook payload is {len(buf)} bytes, expected {need}")
    centers = np.frombuffer(buf, dtype="<f4", count=n, offset=8).reshape(k, dim)
    q = np.frombuffer(buf, dtype="<u2", count=n, offset=8 + 4 * n).reshape(k, dim)
    return Codebook(centers.astype(np.float64), q.copy())


def save_codebook(cb: Codebook, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_codebook(cb))


def load_codebook(path: str | os.PathLike) -> Codebook:
    with open(path, "rb") as fh:
        return decode_codebook(fh.read())


# ------------------------------------------------------------ line buffer


@dataclass
class LineBufferModel:
    """Row-granular ring buffer of quantized feature cells.

    Only sizes are tracked. ``raw_write_bytes_total`` is what the 143-bit
    unquantized features would have cost, kept for ratio reporting.
    """

    capacity_cells: int = DEFAULT_BUFFER_CELLS
    occupancy: int = 0
    bytes_per_cell_raw: float = BYTES_PER_CELL_RAW
    bytes_per_cell_vq: float = BYTES_PER_CELL_VQ
    write_bytes_total: float = 0.0
    raw_write_bytes_total: float = 0.0
    evicted_rows: int = 0
    _rows: collections.deque = field(default_factory=collections.deque, repr=False)

    @property
    def capacity_bytes_raw(self) -> float:
        return self.capacity_cells * self.bytes_per_cell_raw

    @property
    def capacity_bytes_vq(self) -> float:
        return self.capacity_cells * self.bytes_per_cell_vq

    def write_row(self, row) -> "LineBufferModel":
        n = len(row)
        if n > self.capacity_cells:
            raise ValueError(f"row of {n} cells exceeds buffer capacity {self.capacity_cells}")
        while self.occupancy + n > self.capacity_cells:
            self.occupancy -= self._rows.popleft()
            self.evicted_rows += 1
        self._rows.append(n)
        self.occupancy += n
        self.write_bytes_total += n * self.bytes_per_cell_vq
        self.raw_write_bytes_total += n * self.bytes_per_cell_raw
        return self


def buffer_write(grid_row, lb: LineBufferModel) -> LineBufferModel:
    return lb.write_row(grid_row)


def storage_ratio_per_cell() -> float:
    return RAW_BITS_PER_CELL / VQ_BITS_PER_CELL


def overall_storage_ratio(capacity_cells: int = DEFAULT_BUFFER_CELLS, k: int = 256) -> float:
    raw = capacity_cells * BYTES_PER_CELL_RAW
    vq = capacity_cells * BYTES_PER_CELL_VQ + k * FEATURE_DIM * 11 / 8
    return raw / vq

"""Image ingest, scale pyramid and 13-D HOG cell features."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .metrics import CostLedger

FEATURE_DIM = 13
NUM_BINS = 9
CLIP = 0.2
EPS = 1e-4
TEXTURE_GAIN = 0.2357
QMAX = 2047  # 11-bit features

# Per-pixel mults: |g|^2 needs dx*dx and dy*dy; two bin-interpolation weights.
HOG_MULTS_PER_PIXEL = 4
# Per-cell mults: energy (9), four normalizations (36), texture gain (4), averaging (9).
HOG_MULTS_PER_CELL = 58
RESIZE_MULTS_PER_PIXEL = 4


class ImageFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Image:
    """8-bit image. ``data`` is (height, width) or (height, width, 3), uint8."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data)
        if d.dtype != np.uint8:
            raise ValueError("image data must be uint8")
        if d.ndim not in (2, 3) or (d.ndim == 3 and d.shape[2] != 3):
            raise ValueError("image must be HxW or HxWx3")
        object.__setattr__(self, "data", d)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return 1 if self.data.ndim == 2 else 3

    def validate(self, min_size: int = 8) -> None:
        if self.width < min_size or self.height < min_size:
            raise ValueError(f"image must be at least {min_size}x{min_size}")

    def luma(self) -> "Image":
        """ITU-R BT.601 luma; identity for grayscale."""
        if self.channels == 1:
            return self
        rgb = self.data.astype(np.float64)
        y = 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]
        return Image(_round_half_up_u8(y))


@dataclass(frozen=True)
class PyramidConfig:
    levels: int = 12
    levels_per_octave: int = 3
    cell_size: int = 8
    quant_scale: float = 4096.0

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.levels_per_octave < 1:
            raise ValueError("levels_per_octave must be >= 1")
        if self.cell_size < 2:
            raise ValueError("cell_size must be >= 2")
        if not self.quant_scale > 0:
            raise ValueError("quant_scale must be positive")

    def scale(self, k: int) -> float:
        return 2.0 ** (-k / self.levels_per_octave)


@dataclass
class CellGrid:
    """Per-cell features, shape (rows, cols, 13)."""

    values: np.ndarray
    quantized_values: np.ndarray | None = None

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def dim(self) -> int:
        return self.values.shape[2]

    @property
    def num_cells(self) -> int:
        return self.rows * self.cols


@dataclass
class FeaturePyramid:
    levels: list
    scale_of_level: list
    image_size: tuple = (0, 0)  # (width, height) of level 0
    cell_size: int = 8
    levels_per_octave: int = 3
    level_sizes: list = field(default_factory=list)  # (width, height) per level

    def __len__(self) -> int:
        return len(self.levels)

    @property
    def total_cells(self) -> int:
        return sum(g.num_cells for g in self.levels)

    def cell_counts(self) -> list:
        return [g.num_cells for g in self.levels]


# --------------------------------------------------------------------- I/O


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        c = buf[pos : pos + 1]
        if c == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise ImageFormatError("truncated header")
    return buf[start:pos], pos


def load_image(path: str | os.PathLike) -> Image:
    """Decode a binary PGM (P5) or PPM (P6) file with maxval 255."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 2:
        raise ImageFormatError("file too short")
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"unsupported magic number {magic!r}")
    pos = 2
    fields = []
    try:
        for _ in range(3):
            tok, pos = _read_token(buf, pos)
            fields.append(int(tok))
    except ValueError as exc:
        raise ImageFormatError(f"malformed header: {exc}") from None
    width, height, maxval = fields
    if width <= 0 or height <= 0:
        raise ImageFormatError("malformed header: non-positive dimensions")
    if maxval != 255:
        raise ImageFormatError("only maxval 255 is supported")
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise ImageFormatError("malformed header: missing separator")
    pos += 1
    channels = 1 if magic == b"P5" else 3
    nbytes = width * height * channels
    payload = buf[pos : pos + nbytes]
    if len(payload) != nbytes:
        raise ImageFormatError("truncated pixel data")
    data = np.frombuffer(payload, dtype=np.uint8).copy()
    shape = (height, width) if channels == 1 else (height, width, 3)
    return Image(data.reshape(shape))


def encode_image(img: Image) -> bytes:
    magic = b"P5" if img.channels == 1 else b"P6"
    header = magic + f"\n{img.width} {img.height}\n255\n".encode("ascii")
    return header + np.ascontiguousarray(img.data).tobytes()


def save_image(img: Image, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_image(img))


# ----------------------------------------------------------------- pyramid


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _round_half_up_u8(a: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(a + 0.5), 0, 255).astype(np.uint8)


def level_dims(width: int, height: int, k: int, cfg: PyramidConfig) -> tuple[int, int]:
    s = cfg.scale(k)
    return _round_half_up(width * s), _round_half_up(height * s)


def _resize_axis(a: np.ndarray, n_out: int, axis: int) -> np.ndarray:
    n_in = a.shape[axis]
    if n_in == n_out:
        return a
    ratio = n_in / n_out
    src = (np.arange(n_out) + 0.5) * ratio - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    a_lo = np.take(a, lo, axis=axis)
    a_hi = np.take(a, hi, axis=axis)
    shape = [1] * a.ndim
    shape[axis] = n_out
    frac = frac.reshape(shape)
    return a_lo * (1.0 - frac) + a_hi * frac


def resize_bilinear(img: Image, width: int, height: int) -> Image:
    """Separable bilinear resampling with pixel-center alignment."""
    a = img.data.astype(np.float64)
    a = _resize_axis(a, height, 0)
    a = _resize_axis(a, width, 1)
    return Image(_round_half_up_u8(a))


def build_pyramid(img: Image, cfg: PyramidConfig = PyramidConfig(), ledger: CostLedger | None = None) -> list:
    """Return up to ``cfg.levels`` downscaled copies; level k is scaled by 2^(-k/levels_per_octave).

    Each level is resampled from the previous one. Levels narrower or shorter
    than two cells are dropped, so tiny inputs give a shorter pyramid.
    """
    img.validate()
    base = img.luma()
    out = []
    prev = base
    for k in range(cfg.levels):
        w, h = level_dims(base.width, base.height, k, cfg)
        if w < 2 * cfg.cell_size or h < 2 * cfg.cell_size:
            break
        if k == 0:
            cur = base
        else:
            cur = resize_bilinear(prev, w, h)
            if ledger is not None:
                ledger.record("hog", "mults", RESIZE_MULTS_PER_PIXEL * w * h)
        out.append(cur)
        prev = cur
    return out


# -------------------------------------------------------------------- HOG


def _gradients(gray: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p = np.pad(gray.astype(np.float64), 1, mode="edge")
    dx = p[1:-1, 2:] - p[1:-1, :-2]
    dy = p[2:, 1:-1] - p[:-2, 1:-1]
    return dx, dy


def orientation_histograms(gray: np.ndarray, cell_size: int = 8) -> np.ndarray:
    """Contrast-insensitive 9-bin histograms per cell, shape (rows, cols, 9)."""
    h, w = gray.shape
    rows, cols = h // cell_size, w // cell_size
    if rows == 0 or cols == 0:
        return np.zeros((rows, cols, NUM_BINS))
    dx, dy = _gradients(gray)
    dx = dx[: rows * cell_size, : cols * cell_size]
    dy = dy[: rows * cell_size, : cols * cell_size]
    mag = np.sqrt(dx * dx + dy * dy)
    ang = np.mod(np.arctan2(dy, dx), np.pi)
    ang[ang >= np.pi] = 0.0
    pos = ang / (np.pi / NUM_BINS) - 0.5
    lo = np.floor(pos)
    frac = pos - lo
    lo = lo.astype(np.intp) % NUM_BINS
    hi = (lo + 1) % NUM_BINS

    r_idx = np.arange(rows * cell_size) // cell_size
    c_idx = np.arange(cols * cell_size) // cell_size
    cell = (r_idx[:, None] * cols + c_idx[None, :]) * NUM_BINS
    n = rows * cols * NUM_BINS
    hist = np.bincount((cell + lo).ravel(), weights=(mag * (1.0 - frac)).ravel(), minlength=n)
    hist += np.bincount((cell + hi).ravel(), weights=(mag * frac).ravel(), minlength=n)
    return hist.reshape(rows, cols, NUM_BINS)


def features_from_histograms(hist: np.ndarray) -> np.ndarray:
    """Normalize, clip and reduce (rows, cols, 9) histograms to 13-D features."""
    rows, cols, _ = hist.shape
    if rows == 0 or cols == 0:
        return np.zeros((rows, cols, FEATURE_DIM))
    energy = np.einsum("rcb,rcb->rc", hist, hist)
    e = np.pad(energy, 1, mode="edge")
    # block[a, b] sums the 2x2 padded cells with top-left corner (a, b)
    block = e[:-1, :-1] + e[1:, :-1] + e[:-1, 1:] + e[1:, 1:]
    inv = 1.0 / np.sqrt(block + EPS)
    norms = (
        inv[:-1, :-1],  # up-left block
        inv[:-1, 1:],  # up-right
        inv[1:, :-1],  # down-left
        inv[1:, 1:],  # down-right
    )
    out = np.empty((rows, cols, FEATURE_DIM))
    bins = np.zeros((rows, cols, NUM_BINS))
    for n, nrm in enumerate(norms):
        clipped = np.minimum(hist * nrm[..., None], CLIP)
        bins += clipped
        out[..., NUM_BINS + n] = TEXTURE_GAIN * clipped.sum(axis=-1)
    out[..., :NUM_BINS] = 0.25 * bins
    return out


def compute_cell_features(level: Image, cell_size: int = 8, ledger: CostLedger | None = None) -> CellGrid:
    """13-D HOG features per ``cell_size`` cell; grid is floor(w/cs) x floor(h/cs)."""
    gray = level.luma().data
    hist = orientation_histograms(gray, cell_size)
    grid = CellGrid(features_from_histograms(hist))
    if ledger is not None:
        pixels = grid.num_cells * cell_size * cell_size
        ledger.record("hog", "mults", HOG_MULTS_PER_PIXEL * pixels + HOG_MULTS_PER_CELL * grid.num_cells)
        ledger.record("hog", "cells", grid.num_cells)
    return grid


def quantize_features(grid: CellGrid, scale: float = 4096.0) -> CellGrid:
    """Attach 11-bit fixed-point copies; real values are kept for reference scoring."""
    if not scale > 0:
        raise ValueError("scale must be positive")
    q = np.clip(np.floor(grid.values * scale + 0.5), 0, QMAX).astype(np.uint16)
    return CellGrid(grid.values, q)


def pyramid_features(
    img: Image, cfg: PyramidConfig = PyramidConfig(), ledger: CostLedger | None = None
) -> FeaturePyramid:
    levels = build_pyramid(img, cfg, ledger)
    grids = []
    for lvl in levels:
        grids.append(quantize_features(compute_cell_features(lvl, cfg.cell_size, ledger), cfg.quant_scale))
    if ledger is not None:
        cs = cfg.cell_size
        for lvl, g in zip(levels, grids):
            # cs pixel rows per cell row plus a 2-row gradient halo, 8-bit pixels
            ledger.add_storage("pixel_line_buffers", (cs + 2) * lvl.width)
            # three cell rows of 16-bit bins for 2x2 block normalization
            ledger.add_storage("hist_line_buffers", 3 * g.cols * NUM_BINS * 2)
    return FeaturePyramid(
        levels=grids,
        scale_of_level=[cfg.scale(k) for k in range(len(grids))],
        image_size=(img.width, img.height),
        cell_size=cfg.cell_size,
        levels_per_octave=cfg.levels_per_octave,
        level_sizes=[(lvl.width, lvl.height) for lvl in levels],
    )


def pyramid_from_grids(grids, cell_size: int = 8, levels_per_octave: int = 3) -> FeaturePyramid:
    """Wrap precomputed (rows, cols, 13) arrays as a pyramid (synthetic inputs, tests)."""
    cgs = [g if isinstance(g, CellGrid) else CellGrid(np.asarray(g, dtype=np.float64)) for g in grids]
    scales = [2.0 ** (-k / levels_per_octave) for k in range(len(cgs))]
    sizes = [(g.cols * cell_size, g.rows * cell_size) for g in cgs]
    return FeaturePyramid(
        levels=cgs,
        scale_of_level=scales,
        image_size=sizes[0] if sizes else (0, 0),
        cell_size=cell_size,
        levels_per_octave=levels_per_octave,
        level_sizes=sizes,
    )

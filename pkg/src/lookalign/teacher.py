"""Teacher attention maps: a morphological oracle built from the clean digit, and
a binary bundle format for maps produced elsewhere (e.g. by a vision-language model).

Masks are boolean arrays over the last two axes, so every morphology op works on
a single 28x28 mask or on an N x 28 x 28 stack alike.
"""
from __future__ import annotations

import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import avg_pool2d

log = logging.getLogger(__name__)

# foreground/background prompt lists used for the vision-language teacher; kept as metadata only
PROMPTS = {
    "colored": {"foreground": ["digit"], "background": ["Background", "dark", "black"]},
    "decoy": {
        "foreground": ["digit"],
        "background": ["Background", "dark", "black", "corner", "patch", "box", "corner patch"],
    },
}


@dataclass(frozen=True)
class MorphParams:
    dilation_radius: int = 1
    edge_band: bool = True
    threshold: float = 0.3
    eps: float = 1e-6

    def __post_init__(self):
        if self.dilation_radius < 0:
            raise ValueError("dilation radius must be nonnegative")
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")
        if self.eps <= 0:
            raise ValueError("eps must be positive")


@dataclass
class TeacherMap:
    grid: np.ndarray
    source_tag: str = "oracle"
    prompt_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if np.any(self.grid < 0):
            raise ValueError("teacher map has negative entries")
        # external maps are stored as float32
        tol = 1e-9 if self.source_tag == "oracle" else 1e-5
        if abs(self.grid.sum() - 1.0) > tol:
            raise ValueError(f"teacher map sums to {self.grid.sum()}, expected 1")


def oracle_mask(clean_digit: np.ndarray, threshold: float = 0.3) -> np.ndarray:
    return np.asarray(clean_digit) > threshold


def _shift_reduce(m: np.ndarray, r: int, fn) -> np.ndarray:
    # separable square structuring element; zero padding
    h, w = m.shape[-2:]
    p = np.zeros(m.shape[:-2] + (h + 2 * r, w + 2 * r), dtype=bool)
    p[..., r : r + h, r : r + w] = m
    rows = p[..., 0:h, :]
    for d in range(1, 2 * r + 1):
        rows = fn(rows, p[..., d : d + h, :])
    out = rows[..., 0:w]
    for d in range(1, 2 * r + 1):
        out = fn(out, rows[..., d : d + w])
    return out


def dilate(m: np.ndarray, r: int) -> np.ndarray:
    """1 iff some pixel within Chebyshev distance r is 1."""
    m = np.asarray(m, dtype=bool)
    return m.copy() if r == 0 else _shift_reduce(m, r, np.logical_or)


def erode(m: np.ndarray, r: int) -> np.ndarray:
    """1 iff every pixel within Chebyshev distance r is 1; outside the grid counts as 0."""
    m = np.asarray(m, dtype=bool)
    return m.copy() if r == 0 else _shift_reduce(m, r, np.logical_and)


def edge_band(m: np.ndarray, r: int = 1) -> np.ndarray:
    """Morphological gradient of half-width r, lightly dilated, interior excluded."""
    if r < 1:
        raise ValueError("edge band radius must be >= 1")
    m = np.asarray(m, dtype=bool)
    interior = erode(m, r)
    return dilate(dilate(m, r) & ~interior, 1) & ~interior


def normalize_map(m: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if np.any(m < 0):
        raise ValueError("cannot normalize a map with negative entries")
    u = m + eps
    return u / u.sum(axis=(-2, -1), keepdims=True)


def teacher_support(clean: np.ndarray, dataset: str, p: MorphParams) -> np.ndarray:
    """Binary support before normalization; works on one digit or a stack."""
    mask = oracle_mask(clean, p.threshold)
    if dataset == "decoy":
        return mask
    if dataset != "colored":
        raise ValueError(f"unknown dataset {dataset!r}")
    mask = dilate(mask, p.dilation_radius)
    return edge_band(mask, max(p.dilation_radius, 1)) if p.edge_band else mask


def build_teacher(example, dataset: str, p: MorphParams = MorphParams()) -> TeacherMap:
    """28x28 oracle teacher for one ``BiasedExample`` (or anything with ``clean_digit``)."""
    grid = normalize_map(teacher_support(example.clean_digit, dataset, p), p.eps)
    return TeacherMap(grid, "oracle", PROMPTS.get(dataset, {}))


def build_teachers(clean: np.ndarray, dataset: str, p: MorphParams = MorphParams()) -> np.ndarray:
    """Stacked N x 28 x 28 oracle teachers."""
    return normalize_map(teacher_support(clean, dataset, p), p.eps)


def downsample_teacher(grid: np.ndarray) -> np.ndarray:
    """28x28 (or N x 28 x 28) teacher to the 7x7 CAM grid, renormalized."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.shape[-2:] != (28, 28):
        raise ValueError(f"expected 28x28 teacher, got {grid.shape}")
    pooled = avg_pool2d(grid, 4)
    return pooled / pooled.sum(axis=(-2, -1), keepdims=True)


# ---------------------------------------------------------------- map bundles

ATTN_MAGIC = b"ATTN"
ATTN_VERSION = 1


class MapBundleError(ValueError):
    pass


def save_external_maps(maps, path) -> Path:
    """Little-endian: b"ATTN", u32 version, u32 count, u32 height, u32 width,
    float32 payload in example order, u32 CRC32 of the payload."""
    grids = np.stack([m.grid if isinstance(m, TeacherMap) else np.asarray(m) for m in maps])
    n, h, w = grids.shape
    payload = grids.astype("<f4").tobytes()
    path = Path(path)
    path.write_bytes(
        ATTN_MAGIC + struct.pack("<IIII", ATTN_VERSION, n, h, w) + payload + struct.pack("<I", zlib.crc32(payload))
    )
    return path


def load_external_maps(path, expected_count: int | None = None) -> list[TeacherMap]:
    buf = Path(path).read_bytes()
    if buf[:4] != ATTN_MAGIC:
        raise MapBundleError(f"{path}: bad magic {buf[:4]!r}")
    if len(buf) < 24:
        raise MapBundleError(f"{path}: truncated header")
    version, n, h, w = struct.unpack_from("<IIII", buf, 4)
    if version != ATTN_VERSION:
        raise MapBundleError(f"{path}: unsupported version {version}")
    size = n * h * w * 4
    if len(buf) != 20 + size + 4:
        raise MapBundleError(f"{path}: expected {20 + size + 4} bytes, found {len(buf)}")
    payload = buf[20 : 20 + size]
    (crc,) = struct.unpack_from("<I", buf, 20 + size)
    if zlib.crc32(payload) != crc:
        raise MapBundleError(f"{path}: CRC mismatch")
    if expected_count is not None and n != expected_count:
        raise MapBundleError(f"{path}: holds {n} maps but {expected_count} examples need teachers")
    grids = np.frombuffer(payload, "<f4").astype(np.float64).reshape(n, h, w)
    out = []
    for i, g in enumerate(grids):
        if not np.all(np.isfinite(g)) or np.any(g < 0):
            raise MapBundleError(f"{path}: map {i} has negative or non-finite entries")
        s = g.sum()
        if s <= 0:
            raise MapBundleError(f"{path}: map {i} has zero mass")
        if abs(s - 1.0) > 1e-3:
            log.warning("map %d sums to %.6g; renormalizing", i, s)
            g = g / s
        out.append(TeacherMap(g, "external"))
    return out

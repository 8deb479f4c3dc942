"""MNIST IDX parsing and deterministic ColoredMNIST / DecoyMNIST synthesis.

Every biased image keeps the clean source digit next to it so the oracle
teacher can be computed from it later. Splits are stored as arrays
(struct-of-arrays); indexing a ``BiasedSet`` yields a ``BiasedExample``.
"""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import SeededRng

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

# primaries, secondaries and the four half-saturated mixes between them
DEFAULT_PALETTE = (
    (1.0, 0.0, 0.0),
    (0.0, 1.0, 0.0),
    (0.0, 0.0, 1.0),
    (1.0, 1.0, 0.0),
    (1.0, 0.0, 1.0),
    (0.0, 1.0, 1.0),
    (1.0, 0.5, 0.0),
    (0.5, 1.0, 0.0),
    (0.0, 0.5, 1.0),
    (0.5, 0.0, 1.0),
)

PATCH = 4
CORNERS = ((0, 0), (0, 28 - PATCH), (28 - PATCH, 0), (28 - PATCH, 28 - PATCH))
DECOY_INTENSITIES = np.array([(255 - 25 * y) / 255 for y in range(10)])


class IdxParseError(ValueError):
    pass


class DataConfigError(ValueError):
    pass


@dataclass
class MnistRaw:
    images: np.ndarray  # N x 28 x 28 in [0, 1]
    labels: np.ndarray  # N ints

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise IdxParseError(f"count mismatch: {len(self.images)} images vs {len(self.labels)} labels")


def _header(buf: bytes, field_name: str, ndims: int, magic: int):
    if len(buf) < 4 + 4 * ndims:
        raise IdxParseError(f"{field_name}: truncated header")
    (got,) = struct.unpack_from(">I", buf, 0)
    if got != magic:
        raise IdxParseError(f"{field_name}: wrong magic 0x{got:08x}, expected 0x{magic:08x}")
    return struct.unpack_from(f">{ndims}I", buf, 4)


def parse_idx(images_bytes: bytes, labels_bytes: bytes) -> MnistRaw:
    n, rows, cols = _header(images_bytes, "images", 3, IMAGES_MAGIC)
    if (rows, cols) != (28, 28):
        raise IdxParseError(f"images: dims {rows}x{cols}, expected 28x28")
    (m,) = _header(labels_bytes, "labels", 1, LABELS_MAGIC)
    if n != m:
        raise IdxParseError(f"count: images file has {n} items, labels file has {m}")
    pix = np.frombuffer(images_bytes, np.uint8, offset=16)
    if pix.size != n * 784:
        raise IdxParseError(f"images: payload has {pix.size} bytes, expected {n * 784}")
    lab = np.frombuffer(labels_bytes, np.uint8, offset=8)
    if lab.size != n:
        raise IdxParseError(f"labels: payload has {lab.size} bytes, expected {n}")
    if np.any(lab > 9):
        raise IdxParseError("labels: value outside 0..9")
    return MnistRaw(pix.reshape(n, 28, 28).astype(np.float64) / 255.0, lab.astype(np.int64))


def _read(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def load_mnist(images_path, labels_path) -> MnistRaw:
    return parse_idx(_read(images_path), _read(labels_path))


@dataclass
class BiasedExample:
    image: np.ndarray  # 3 x 28 x 28
    label: int
    clean_digit: np.ndarray  # 28 x 28
    bias_meta: dict


@dataclass
class BiasedSet:
    images: np.ndarray  # N x 3 x 28 x 28
    labels: np.ndarray
    clean: np.ndarray  # N x 28 x 28
    meta: dict[str, np.ndarray] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> BiasedExample:
        return BiasedExample(
            self.images[i], int(self.labels[i]), self.clean[i], {k: int(v[i]) for k, v in self.meta.items()}
        )

    def subset(self, idx) -> "BiasedSet":
        idx = np.asarray(idx)
        return BiasedSet(self.images[idx], self.labels[idx], self.clean[idx], {k: v[idx] for k, v in self.meta.items()})


@dataclass
class DatasetSplit:
    train: BiasedSet
    val: BiasedSet
    test: BiasedSet
    provenance: dict


def split_train_val(labels, fraction: float = 0.1, seed: int = 0):
    """Stratified seeded split. Returns sorted (train_idx, val_idx)."""
    if not 0 < fraction < 1:
        raise DataConfigError(f"validation fraction must be in (0, 1), got {fraction}")
    labels = np.asarray(labels)
    rng = SeededRng(seed).child("split")
    val = []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        perm = rng.child(int(c)).permutation(len(idx))
        val.append(idx[perm[: int(round(fraction * len(idx)))]])
    val_idx = np.sort(np.concatenate(val))
    train_idx = np.setdiff1d(np.arange(len(labels)), val_idx)
    return train_idx, val_idx


def colorize(clean: np.ndarray, color_idx: np.ndarray, palette) -> np.ndarray:
    pal = np.asarray(palette, dtype=np.float64)
    return clean[:, None, :, :] * pal[color_idx][:, :, None, None]


def synth_colored_mnist(train_raw: MnistRaw, test_raw: MnistRaw, seed: int = 0,
                        palette=DEFAULT_PALETTE, val_fraction: float = 0.1) -> DatasetSplit:
    """Foreground-tinted digits. Train/val class y uses palette[y]; test uses palette[9 - y]."""
    pal = np.asarray(palette, dtype=np.float64)
    if pal.shape != (10, 3):
        raise DataConfigError(f"palette must be 10 RGB triples, got shape {pal.shape}")
    if len({tuple(c) for c in pal.tolist()}) != 10:
        raise DataConfigError("palette entries must be pairwise distinct")

    def build(raw, color_idx):
        return BiasedSet(colorize(raw.images, color_idx, pal), raw.labels.copy(), raw.images.copy(),
                         {"color": color_idx})

    full = build(train_raw, train_raw.labels.copy())
    tr, va = split_train_val(full.labels, val_fraction, seed)
    test = build(test_raw, 9 - test_raw.labels)
    prov = {"dataset": "colored", "seed": seed, "palette": pal.tolist(), "val_fraction": val_fraction}
    return DatasetSplit(full.subset(tr), full.subset(va), test, prov)


def add_decoy_patches(clean: np.ndarray, corner: np.ndarray, level: np.ndarray) -> np.ndarray:
    """Gray 4x4 patch of intensity DECOY_INTENSITIES[level] in the chosen corner.

    Nonzero digit pixels inside the patch region are kept.
    """
    out = clean.copy()
    for i, (r, c) in enumerate(CORNERS):
        sel = corner == i
        region = out[sel, r : r + PATCH, c : c + PATCH]
        fill = DECOY_INTENSITIES[level[sel]][:, None, None]
        out[sel, r : r + PATCH, c : c + PATCH] = np.where(region > 0, region, fill)
    return out


def synth_decoy_mnist(train_raw: MnistRaw, test_raw: MnistRaw, seed: int = 0,
                      val_fraction: float = 0.1) -> DatasetSplit:
    """Class-indicative corner patches in train/val, label-independent patches at test."""
    rng = SeededRng(seed).child("decoy")

    def build(raw, level, corner_rng):
        corner = corner_rng.integers(0, 4, len(raw.labels))
        gray = add_decoy_patches(raw.images, corner, level)
        return BiasedSet(np.repeat(gray[:, None], 3, axis=1), raw.labels.copy(), raw.images.copy(),
                         {"corner": corner, "intensity": level})

    full = build(train_raw, train_raw.labels.copy(), rng.child("train-corner"))
    tr, va = split_train_val(full.labels, val_fraction, seed)
    test_level = rng.child("test-level").integers(0, 10, len(test_raw.labels))
    test = build(test_raw, test_level, rng.child("test-corner"))
    prov = {"dataset": "decoy", "seed": seed, "patch": PATCH, "val_fraction": val_fraction}
    return DatasetSplit(full.subset(tr), full.subset(va), test, prov)


def synth(dataset: str, train_raw: MnistRaw, test_raw: MnistRaw, seed: int = 0, **kw) -> DatasetSplit:
    if dataset == "colored":
        return synth_colored_mnist(train_raw, test_raw, seed, **kw)
    if dataset == "decoy":
        return synth_decoy_mnist(train_raw, test_raw, seed, **kw)
    raise DataConfigError(f"unknown dataset {dataset!r}")


# ---------------------------------------------------------------- PPM


def to_bytes(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img) * 255), 0, 255).astype(np.uint8)


def write_ppm(path, rgb: np.ndarray) -> Path:
    """Binary P6 from a 3 x H x W array in [0, 1]."""
    path = Path(path)
    _, h, w = rgb.shape
    try:
        path.write_bytes(f"P6\n{w} {h}\n255\n".encode() + to_bytes(rgb).transpose(1, 2, 0).tobytes())
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return path


def read_ppm(path) -> np.ndarray:
    """Returns a 3 x H x W uint8 array from a P6 file written by ``write_ppm``."""
    buf = Path(path).read_bytes()
    magic, dims, maxval, payload = buf.split(b"\n", 3)
    if magic != b"P6" or maxval != b"255":
        raise ValueError(f"{path}: not an 8-bit P6 file")
    w, h = map(int, dims.split())
    return np.frombuffer(payload, np.uint8, h * w * 3).reshape(h, w, 3).transpose(2, 0, 1)


def export_examples_ppm(split: DatasetSplit, directory, count: int) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for part in ("train", "val", "test"):
        s = getattr(split, part)
        for i in range(min(count, len(s))):
            files.append(write_ppm(directory / f"{part}_{i:04d}_y{int(s.labels[i])}.ppm", s.images[i]))
    return files

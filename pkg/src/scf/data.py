"""Synthetic cover/stego images, pair-preserving splits and the SCFD file format.

Covers are box-blurred Gaussian fields stretched to the full 8-bit range.
Stegoes change ``ceil(payload * H * W)`` distinct pixels by +-1. Each sample
draws from its own RNG stream keyed by ``(seed, kind, pair_index)``, so any
single pair can be regenerated without producing the rest of the set.
"""
from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numkit import make_rng

MAGIC = b"SCFD"
VERSION = 1
_HEADER = struct.Struct("<4sBIHHBQ")
_RECORD = struct.Struct("<IB")
_CRC = struct.Struct("<I")

# RNG stream ids
COVER_STREAM = 1
EMBED_STREAM = 2
SPLIT_STREAM = 3

SPLIT_RATIO = (6, 1, 3)
SPLITS = ("train", "val", "test")


class DatasetFormatError(ValueError):
    """Raised when an SCFD file fails validation; ``field`` names the culprit."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass
class DatasetConfig:
    n_pairs: int = 2000
    image_size: int = 16
    payload: float = 0.4
    blur_radius: int = 2
    seed: int = 1

    def __post_init__(self):
        if self.n_pairs < 10:
            raise ValueError(f"n_pairs must be >= 10, got {self.n_pairs}")
        if not 0.0 < self.payload <= 1.0:
            raise ValueError(f"payload must be in (0, 1], got {self.payload}")
        if self.image_size < 1:
            raise ValueError(f"image_size must be positive, got {self.image_size}")
        if self.blur_radius < 0:
            raise ValueError(f"blur_radius must be >= 0, got {self.blur_radius}")


@dataclass
class ImageSample:
    pixels: np.ndarray
    label: int
    pair_id: int


def box_blur(field_: np.ndarray, radius: int) -> np.ndarray:
    """Valid-mode mean filter with a (2r+1)^2 window; output shrinks by 2r per axis."""
    if radius == 0:
        return field_.copy()
    k = 2 * radius + 1
    win = np.lib.stride_tricks.sliding_window_view(field_, (k, k))
    return win.mean(axis=(-2, -1))


def gen_cover(cfg: DatasetConfig, rng: np.random.Generator, pair_id: int = 0) -> ImageSample:
    n, r = cfg.image_size, cfg.blur_radius
    noise = rng.standard_normal((n + 2 * r, n + 2 * r))
    smooth = box_blur(noise, r)
    lo, hi = smooth.min(), smooth.max()
    if hi > lo:
        scaled = (smooth - lo) * (255.0 / (hi - lo))
    else:
        scaled = np.zeros_like(smooth)
    pixels = np.clip(np.rint(scaled), 0, 255).astype(np.uint8)
    return ImageSample(pixels, 0, pair_id)


def n_changes(payload: float, h: int, w: int) -> int:
    # round first so 0.4 * 256 = 102.4000...01 doesn't creep up through float error
    return int(math.ceil(round(payload * h * w, 9)))


def embed_pm1(cover: ImageSample, payload: float, rng: np.random.Generator) -> ImageSample:
    """+-1 embedding at ``ceil(payload * H * W)`` distinct uniformly chosen pixels."""
    if not 0.0 < payload <= 1.0:
        raise ValueError(f"payload must be in (0, 1], got {payload}")
    h, w = cover.pixels.shape
    k = n_changes(payload, h, w)
    flat = cover.pixels.astype(np.int16).ravel()
    pos = rng.choice(h * w, size=k, replace=False)
    step = np.where(rng.random(k) < 0.5, 1, -1)
    step = np.where(flat[pos] == 0, 1, np.where(flat[pos] == 255, -1, step))
    flat[pos] += step
    return ImageSample(flat.reshape(h, w).astype(np.uint8), 1, cover.pair_id)


def make_pair(cfg: DatasetConfig, k: int) -> tuple[ImageSample, ImageSample]:
    cover = gen_cover(cfg, make_rng(cfg.seed, COVER_STREAM, k), pair_id=k)
    stego = embed_pm1(cover, cfg.payload, make_rng(cfg.seed, EMBED_STREAM, k))
    return cover, stego


def split_pairs(pair_ids, seed: int) -> dict[str, np.ndarray]:
    """Shuffle the distinct pair ids and cut them 6:1:3."""
    ids = np.unique(np.asarray(pair_ids))
    if ids.size < 10:
        raise ValueError("need at least 10 pairs to split")
    ids = ids[make_rng(seed, SPLIT_STREAM).permutation(ids.size)]
    total = sum(SPLIT_RATIO)
    n_train = ids.size * SPLIT_RATIO[0] // total
    n_val = ids.size * SPLIT_RATIO[1] // total
    return {
        "train": np.sort(ids[:n_train]),
        "val": np.sort(ids[n_train:n_train + n_val]),
        "test": np.sort(ids[n_train + n_val:]),
    }


@dataclass
class Dataset:
    """Images in (cover_0, stego_0, cover_1, stego_1, ...) order plus split membership."""

    images: np.ndarray  # (N, H, W) uint8
    labels: np.ndarray  # (N,) uint8
    pair_ids: np.ndarray  # (N,) uint32
    payload: float
    seed: int
    splits: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.splits:
            self.splits = split_pairs(self.pair_ids, self.seed)

    def __len__(self):
        return self.images.shape[0]

    @property
    def image_size(self) -> int:
        return self.images.shape[1]

    def split_indices(self, name: str) -> np.ndarray:
        if name not in self.splits:
            raise KeyError(f"unknown split {name!r}; expected one of {SPLITS}")
        return np.flatnonzero(np.isin(self.pair_ids, self.splits[name]))

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(images, labels, pair_ids)`` of one split, in file order."""
        idx = self.split_indices(name)
        return self.images[idx], self.labels[idx].astype(np.intp), self.pair_ids[idx].astype(np.intp)

    def sample(self, i: int) -> ImageSample:
        return ImageSample(self.images[i], int(self.labels[i]), int(self.pair_ids[i]))


def build_dataset(cfg: DatasetConfig) -> Dataset:
    n, s = cfg.n_pairs, cfg.image_size
    images = np.empty((2 * n, s, s), dtype=np.uint8)
    for k in range(n):
        cover, stego = make_pair(cfg, k)
        images[2 * k] = cover.pixels
        images[2 * k + 1] = stego.pixels
    labels = np.tile(np.array([0, 1], dtype=np.uint8), n)
    pair_ids = np.repeat(np.arange(n, dtype=np.uint32), 2)
    return Dataset(images, labels, pair_ids, cfg.payload, cfg.seed)


def payload_code(payload: float) -> int:
    code = int(round(payload * 100))
    if not 1 <= code <= 100:
        raise ValueError(f"payload {payload} does not fit the file's percent field")
    return code


def dumps_dataset(ds: Dataset) -> bytes:
    n, h, w = ds.images.shape
    parts = [_HEADER.pack(MAGIC, VERSION, n, h, w, payload_code(ds.payload), int(ds.seed))]
    for i in range(n):
        parts.append(_RECORD.pack(int(ds.pair_ids[i]), int(ds.labels[i])))
        parts.append(np.ascontiguousarray(ds.images[i], dtype=np.uint8).tobytes())
    body = b"".join(parts)
    return body + _CRC.pack(zlib.crc32(body))


def loads_dataset(buf: bytes) -> Dataset:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise DatasetFormatError("magic", f"expected {MAGIC!r}, found {bytes(buf[:4])!r}")
    if len(buf) < 5 or buf[4] != VERSION:
        found = buf[4] if len(buf) > 4 else None
        raise DatasetFormatError("version", f"expected {VERSION}, found {found}")
    if len(buf) < _HEADER.size + _CRC.size:
        raise DatasetFormatError("checksum", "file too short to hold header and checksum")
    body, (crc,) = buf[:-_CRC.size], _CRC.unpack(buf[-_CRC.size:])
    if zlib.crc32(body) != crc:
        raise DatasetFormatError("checksum", "CRC32 mismatch (file truncated or corrupted)")
    _, _, n, h, w, code, seed = _HEADER.unpack_from(body, 0)
    rec = _RECORD.size + h * w
    if len(body) != _HEADER.size + n * rec:
        raise DatasetFormatError("count", f"header declares {n} images but body holds {len(body) - _HEADER.size} bytes")
    raw = np.frombuffer(body, dtype=np.uint8, offset=_HEADER.size).reshape(n, rec)
    meta = raw[:, :_RECORD.size].copy()
    pair_ids = meta[:, :4].copy().view("<u4").ravel().astype(np.uint32)
    labels = meta[:, 4].astype(np.uint8)
    if np.any(labels > 1):
        raise DatasetFormatError("label", "labels must be 0 or 1")
    images = raw[:, _RECORD.size:].reshape(n, h, w).copy()
    return Dataset(images, labels, pair_ids, code / 100.0, int(seed))


def save_dataset(path, ds: Dataset) -> None:
    Path(path).write_bytes(dumps_dataset(ds))


def load_dataset(path) -> Dataset:
    return loads_dataset(Path(path).read_bytes())

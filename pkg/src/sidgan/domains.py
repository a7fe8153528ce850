"""In-memory domain data and seed-deterministic sampling.

Every item is stored as a float32 array of shape (T, H, W, 3); still images
have T == 1. Sampling functions are pure in (data, seed).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensorio import DatasetManifest, ManifestSet, read_tensor

MIN_SIDE = 16


@dataclass(frozen=True)
class RgbImage:
    data: np.ndarray
    value_range: str = "symmetric"

    def __post_init__(self):
        check_image(self.data, self.value_range)


@dataclass(frozen=True)
class ShortExposureFrame:
    data: np.ndarray
    exposure_seconds: float
    gain_applied: float = 1.0
    value_range: str = "symmetric"

    def __post_init__(self):
        if self.exposure_seconds <= 0 or self.gain_applied <= 0:
            raise ValueError("exposure and gain must be positive")
        check_image(self.data, self.value_range)


@dataclass(frozen=True)
class VideoClip:
    frames: np.ndarray  # (T, H, W, 3)
    fps: float = 30.0
    static_flag: bool = False
    id: str = ""

    def __post_init__(self):
        f = np.asarray(self.frames)
        if f.ndim != 4 or f.shape[-1] != 3:
            raise ValueError(f"clip frames must be (T, H, W, 3), got {f.shape}")
        if self.fps <= 0:
            raise ValueError("fps must be positive")

    def __len__(self) -> int:
        return len(self.frames)


@dataclass(frozen=True)
class Sample:
    id: str
    data: np.ndarray  # (H, W, 3)
    frame: int = 0


@dataclass
class SampleBatch:
    domain_a_items: list[Sample] = field(default_factory=list)
    domain_b_items: list[Sample] = field(default_factory=list)
    domain_c_items: list[Sample] = field(default_factory=list)
    paired: bool = False

    def __post_init__(self):
        if self.paired:
            if len(self.domain_b_items) != len(self.domain_c_items):
                raise ValueError("paired batch needs equal numbers of B and C items")


def check_image(data, value_range: str = "symmetric") -> None:
    a = np.asarray(data)
    if a.ndim != 3 or a.shape[-1] != 3:
        raise ValueError(f"image must be (H, W, 3), got {a.shape}")
    if min(a.shape[:2]) < MIN_SIDE:
        raise ValueError(f"image sides must be >= {MIN_SIDE}")
    lo, hi = {"unit": (0.0, 1.0), "symmetric": (-1.0, 1.0)}[value_range]
    if a.size and (a.min() < lo - 1e-6 or a.max() > hi + 1e-6):
        raise ValueError(f"values outside declared {value_range} range")


@dataclass
class DomainData:
    """Realized samples of one domain: ids, frame stacks and pairing links."""

    domain: str
    ids: list[str]
    items: list[np.ndarray]
    exposures: list[float | None] = field(default_factory=list)
    pair_ids: list[str | None] = field(default_factory=list)
    static: list[bool] = field(default_factory=list)

    def __post_init__(self):
        n = len(self.ids)
        if len(self.items) != n:
            raise ValueError("ids and items differ in length")
        if len(set(self.ids)) != n:
            raise ValueError("duplicate ids")
        self.items = [_as_frames(x) for x in self.items]
        if not self.exposures:
            self.exposures = [None] * n
        if not self.pair_ids:
            self.pair_ids = [None] * n
        if not self.static:
            self.static = [False] * n
        self._index = {k: i for i, k in enumerate(self.ids)}

    def __len__(self) -> int:
        return len(self.ids)

    def index(self, item_id: str) -> int:
        return self._index[item_id]

    def get(self, item_id: str) -> np.ndarray:
        return self.items[self._index[item_id]]

    def subset(self, ids: Sequence[str]) -> "DomainData":
        idx = [self._index[k] for k in ids]
        return DomainData(
            self.domain,
            [self.ids[i] for i in idx],
            [self.items[i] for i in idx],
            [self.exposures[i] for i in idx],
            [self.pair_ids[i] for i in idx],
            [self.static[i] for i in idx],
        )

    @property
    def min_side(self) -> int:
        return min(min(x.shape[1:3]) for x in self.items)

    @classmethod
    def from_arrays(cls, domain: str, arrays, ids=None, **kw) -> "DomainData":
        arrays = list(arrays)
        if ids is None:
            ids = [f"{domain.lower()}{i:05d}" for i in range(len(arrays))]
        return cls(domain, list(ids), arrays, **kw)

    @classmethod
    def load(cls, manifests: ManifestSet, domain: str, split: str) -> "DomainData":
        m: DatasetManifest = manifests.get(domain, split)
        items = [read_item(manifests.resolve(e), e.frame_count) for e in m]
        return cls(
            domain,
            m.ids,
            items,
            [e.exposure_seconds for e in m],
            [e.pair_id for e in m],
            [bool(e.extra.get("static", False)) for e in m],
        )


def read_item(path, frame_count: int = 1) -> np.ndarray:
    """Load one manifest item as float32; a directory holds one frame_<t>.sgt per frame."""
    path = Path(path)
    if path.is_dir():
        return np.stack([read_tensor(path / f"frame_{t}.sgt") for t in range(frame_count)]).astype(np.float32)
    return read_tensor(path).astype(np.float32)


def _as_frames(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float32)
    if a.ndim == 3:
        a = a[None]
    if a.ndim != 4 or a.shape[-1] != 3:
        raise ValueError(f"expected (H, W, 3) or (T, H, W, 3), got {a.shape}")
    return a


def _crop_window(rng: np.random.Generator, h: int, w: int, crop: int) -> tuple[int, int]:
    if crop > h or crop > w:
        raise ValueError(f"crop {crop} larger than image {h}x{w}")
    return int(rng.integers(0, h - crop + 1)), int(rng.integers(0, w - crop + 1))


def _draw(rng, data: DomainData, crop: int) -> Sample:
    i = int(rng.integers(len(data)))
    frames = data.items[i]
    t = int(rng.integers(len(frames)))
    y, x = _crop_window(rng, *frames.shape[1:3], crop)
    return Sample(data.ids[i], frames[t, y : y + crop, x : x + crop], t)


def sample_unpaired(data_a: DomainData, data_b: DomainData, seed: int, crop: int) -> SampleBatch:
    """One random crop from each domain, drawn independently."""
    if len(data_a) == 0 or len(data_b) == 0:
        raise ValueError("empty domain")
    for d in (data_a, data_b):
        if crop > d.min_side:
            raise ValueError(f"crop {crop} larger than smallest {d.domain} image side {d.min_side}")
    rng = np.random.default_rng(seed)
    return SampleBatch(domain_a_items=[_draw(rng, data_a, crop)], domain_b_items=[_draw(rng, data_b, crop)])


def resolve_pair(data_b: DomainData, data_c: DomainData, b_id: str) -> tuple[np.ndarray, np.ndarray, str]:
    i = data_b.index(b_id)
    c_id = data_b.pair_ids[i]
    if c_id is None or c_id not in data_c._index:
        raise ValueError(f"B item {b_id} has no resolved pair")
    long_, short = data_b.items[i], data_c.get(c_id)
    if long_.shape[1:] != short.shape[1:]:
        raise ValueError(f"pair {b_id}/{c_id} shape mismatch: {long_.shape[1:]} vs {short.shape[1:]}")
    return long_, short, c_id


def paired_ids(data_b: DomainData) -> list[str]:
    return [k for k, p in zip(data_b.ids, data_b.pair_ids) if p is not None]


def sample_paired(data_b: DomainData, data_c: DomainData, seed: int, crop: int, b_id: str | None = None) -> SampleBatch:
    """Aligned (L, S) crops taken from the same spatial window."""
    rng = np.random.default_rng(seed)
    if b_id is None:
        candidates = paired_ids(data_b)
        if not candidates:
            raise ValueError("no resolved pairs")
        b_id = candidates[int(rng.integers(len(candidates)))]
    long_, short, c_id = resolve_pair(data_b, data_c, b_id)
    t = int(rng.integers(min(len(long_), len(short))))
    y, x = _crop_window(rng, *long_.shape[1:3], crop)
    win = np.s_[y : y + crop, x : x + crop]
    return SampleBatch(
        domain_b_items=[Sample(b_id, long_[t][win], t)],
        domain_c_items=[Sample(c_id, short[t][win], t)],
        paired=True,
    )


def epoch_order(n: int, seed: int, epoch: int, shuffle: bool = True) -> np.ndarray:
    """Visiting order of ``n`` items for one epoch; each index exactly once."""
    if not shuffle:
        return np.arange(n)
    rng = np.random.default_rng([seed, epoch])
    return rng.permutation(n)


def sample_two_frames(clip: VideoClip, seed: int):
    """Two distinct frames, uniform over unordered pairs; returns (f_i, f_j, i, j)."""
    n = len(clip)
    if n < 2:
        raise ValueError("clip needs at least two frames")
    pairs = list(combinations(range(n), 2))
    rng = np.random.default_rng(seed)
    i, j = pairs[int(rng.integers(len(pairs)))]
    if rng.integers(2):
        i, j = j, i
    return clip.frames[i], clip.frames[j], i, j


def resize_bilinear(img, height: int, width: int) -> np.ndarray:
    """Bilinear resize with half-pixel centres (no antialiasing)."""
    a = np.asarray(img, dtype=np.float64)
    h, w = a.shape[:2]

    def coords(n_out, n_in):
        c = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        c = np.clip(c, 0, n_in - 1)
        lo = np.floor(c).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, c - lo

    y0, y1, wy = coords(height, h)
    x0, x1, wx = coords(width, w)
    wy = wy.reshape(-1, 1, *([1] * (a.ndim - 2)))
    wx = wx.reshape(1, -1, *([1] * (a.ndim - 2)))
    top = a[y0][:, x0] * (1 - wx) + a[y0][:, x1] * wx
    bot = a[y1][:, x0] * (1 - wx) + a[y1][:, x1] * wx
    return (top * (1 - wy) + bot * wy).astype(np.float32)

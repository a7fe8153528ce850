"""Synthetic paired clips: A videos through G_AB (long) and then G_BC (short)."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch.nn as nn

from .domains import DomainData, VideoClip
from .tensorio import DatasetManifest, ManifestEntry, ManifestSet, save_manifest, write_tensor
from .training import translate


@dataclass(frozen=True)
class SyntheticPair:
    source_id: str
    long_frames: VideoClip
    short_frames: VideoClip
    generator_checkpoint_ids: tuple[str, str] = ("", "")

    def __post_init__(self):
        if self.long_frames.frames.shape != self.short_frames.frames.shape:
            raise ValueError("long and short clips must share length and spatial dims")


def _check_generator(g: nn.Module, name: str) -> None:
    spec = getattr(g, "spec", None)
    if spec is not None and (spec.in_channels != 3 or spec.out_channels != 3):
        raise ValueError(f"{name} maps {spec.in_channels}->{spec.out_channels} channels; need 3->3")


def synthesize_pair(clip: VideoClip, g_ab: nn.Module, g_bc: nn.Module,
                    checkpoint_ids: tuple[str, str] = ("", ""), divisor: int | None = None) -> SyntheticPair:
    """long[t] = G_AB(clip[t]); short[t] = G_BC(long[t]), frame by frame.

    Frames whose sides are not multiples of the generator divisor are
    reflect-padded for inference and cropped back.
    """
    _check_generator(g_ab, "g_ab")
    _check_generator(g_bc, "g_bc")
    frames = np.asarray(clip.frames, dtype=np.float32)
    if frames.size and (frames.min() < -1 - 1e-6 or frames.max() > 1 + 1e-6):
        raise ValueError("clip frames must be normalized to [-1, 1]")
    long_ = translate(g_ab, frames, divisor)
    short = translate(g_bc, long_, divisor)
    return SyntheticPair(
        clip.id,
        VideoClip(long_, clip.fps, static_flag=clip.static_flag, id=clip.id),
        VideoClip(short, clip.fps, static_flag=clip.static_flag, id=clip.id),
        tuple(checkpoint_ids),
    )


def write_pair(out_dir, pair: SyntheticPair) -> tuple[Path, Path]:
    """Write ``pairs/<source_id>/{long,short}/frame_<t>.sgt``; returns both directories."""
    base = Path(out_dir) / "pairs" / pair.source_id
    dirs = []
    for name, clip in (("long", pair.long_frames), ("short", pair.short_frames)):
        d = base / name
        for t, frame in enumerate(clip.frames):
            write_tensor(d / f"frame_{t}.sgt", np.asarray(frame, dtype=np.float32))
        dirs.append(d)
    return dirs[0], dirs[1]


def synthesize_dataset(data_a: DomainData, g_ab: nn.Module, g_bc: nn.Module, out_dir, count: int,
                       checkpoint_ids: tuple[str, str] = ("g_ab", "g_bc"), split: str = "train",
                       long_exposure: float = 1.0, short_exposure: float = 0.1) -> ManifestSet:
    """Translate the first ``count`` A clips and write a paired B/C manifest.

    Every entry records the generator checkpoint ids it came from.
    """
    if count > len(data_a):
        raise ValueError(f"requested {count} clips but only {len(data_a)} available")
    out_dir = Path(out_dir)
    b_entries, c_entries = [], []
    for i in range(count):
        clip = VideoClip(data_a.items[i], id=data_a.ids[i])
        pair = synthesize_pair(clip, g_ab, g_bc, checkpoint_ids)
        long_dir, short_dir = write_pair(out_dir, pair)
        extra = {"source_id": clip.id, "generators": list(checkpoint_ids), "static": False}
        n = len(clip)
        b_id, c_id = f"{clip.id}_long", f"{clip.id}_short"
        b_entries.append(ManifestEntry(b_id, str(long_dir.relative_to(out_dir)), "video", n,
                                       long_exposure, c_id, extra))
        c_entries.append(ManifestEntry(c_id, str(short_dir.relative_to(out_dir)), "video", n,
                                       short_exposure, b_id, extra))
    manifest = ManifestSet({
        ("B", split): DatasetManifest("B", split, tuple(b_entries)),
        ("C", split): DatasetManifest("C", split, tuple(c_entries)),
    }, out_dir)
    save_manifest(out_dir / "manifest.json", manifest)
    return manifest

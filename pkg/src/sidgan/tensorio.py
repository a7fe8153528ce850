"""On-disk tensors, dataset manifests and checkpoints.

Tensor files (``.sgt``) use a fixed little-endian layout::

    magic      4 bytes   b"SGT1"
    dtype      1 byte    1 = u8, 2 = u16, 3 = f32
    ndim       1 byte
    shape      ndim x u64 (little-endian)
    payload    row-major little-endian values

Manifests are JSON documents holding one section per (domain, split).
"""

from __future__ import annotations

import json
import os
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

MAGIC = b"SGT1"

DTYPE_CODES = {
    np.dtype(np.uint8): 1,
    np.dtype(np.uint16): 2,
    np.dtype(np.float32): 3,
}
CODE_DTYPES = {code: dt.newbyteorder("<") for dt, code in DTYPE_CODES.items()}

DOMAINS = ("A", "B", "C")
SPLITS = ("train", "val", "test")
KINDS = ("video", "image")


class TensorFormatError(ValueError):
    """Raised when a tensor file does not follow the ``.sgt`` layout."""


class ManifestError(ValueError):
    """Raised when a manifest violates its schema or pairing invariants."""


def encode_tensor(data) -> bytes:
    arr = np.asarray(data)
    if arr.dtype not in DTYPE_CODES:
        raise TypeError(f"unsupported dtype {arr.dtype}; expected one of u8, u16, f32")
    if arr.ndim > 255:
        raise TypeError("too many dimensions")
    header = MAGIC + struct.pack("<BB", DTYPE_CODES[arr.dtype], arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
    return header + payload


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 6:
        raise TensorFormatError("truncated header")
    if buf[:4] != MAGIC:
        raise TensorFormatError(f"bad magic {buf[:4]!r}")
    code, ndim = struct.unpack_from("<BB", buf, 4)
    if code not in CODE_DTYPES:
        raise TensorFormatError(f"unknown dtype code {code}")
    offset = 6 + 8 * ndim
    if len(buf) < offset:
        raise TensorFormatError("truncated shape")
    shape = struct.unpack_from(f"<{ndim}Q", buf, 6)
    dtype = CODE_DTYPES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    got = len(buf) - offset
    if got < expected:
        raise TensorFormatError(f"truncated payload: expected {expected} bytes, found {got}")
    if got > expected:
        raise TensorFormatError(f"shape/payload mismatch: expected {expected} bytes, found {got}")
    arr = np.frombuffer(buf, dtype=dtype, offset=offset, count=expected // dtype.itemsize)
    return arr.reshape(shape).astype(dtype.newbyteorder("="))


def write_tensor(path, data) -> None:
    """Write ``data`` (u8, u16 or f32) to ``path`` in ``.sgt`` layout."""
    blob = encode_tensor(data)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(blob)


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        return decode_tensor(f.read())


# ---------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    path: str
    kind: str = "image"
    frame_count: int = 1
    exposure_seconds: float | None = None
    pair_id: str | None = None
    extra: Mapping[str, object] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "id": self.id,
            "path": self.path,
            "kind": self.kind,
            "frame_count": self.frame_count,
        }
        if self.exposure_seconds is not None:
            d["exposure_seconds"] = self.exposure_seconds
        if self.pair_id is not None:
            d["pair_id"] = self.pair_id
        if self.extra:
            d["extra"] = dict(self.extra)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ManifestEntry":
        missing = {"id", "path"} - set(d)
        if missing:
            raise ManifestError(f"entry missing fields {sorted(missing)}")
        return cls(
            id=str(d["id"]),
            path=str(d["path"]),
            kind=str(d.get("kind", "image")),
            frame_count=int(d.get("frame_count", 1)),
            exposure_seconds=None if d.get("exposure_seconds") is None else float(d["exposure_seconds"]),
            pair_id=None if d.get("pair_id") is None else str(d["pair_id"]),
            extra=dict(d.get("extra", {})),
        )


@dataclass(frozen=True)
class DatasetManifest:
    """Samples of one domain within one split."""

    domain: str
    split: str
    entries: tuple[ManifestEntry, ...]

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def ids(self) -> list[str]:
        return [e.id for e in self.entries]

    def by_id(self, entry_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.id == entry_id:
                return e
        raise KeyError(entry_id)

    def validate(self) -> None:
        if self.domain not in DOMAINS:
            raise ManifestError(f"unknown domain {self.domain!r}")
        if self.split not in SPLITS:
            raise ManifestError(f"unknown split {self.split!r}")
        dupes = [k for k, n in Counter(self.ids).items() if n > 1]
        if dupes:
            raise ManifestError(f"duplicate id(s) in {self.domain}/{self.split}: {dupes}")
        for e in self.entries:
            if e.kind not in KINDS:
                raise ManifestError(f"entry {e.id}: unknown kind {e.kind!r}")
            if e.frame_count < 1:
                raise ManifestError(f"entry {e.id}: frame_count must be >= 1")
            if e.exposure_seconds is not None and e.exposure_seconds < 0:
                raise ManifestError(f"entry {e.id}: negative exposure")
            if self.domain in ("B", "C") and e.exposure_seconds is None:
                raise ManifestError(f"entry {e.id}: exposure_seconds required for domain {self.domain}")


@dataclass
class ManifestSet:
    """All manifest sections loaded from one file."""

    sections: dict[tuple[str, str], DatasetManifest]
    root: Path | None = None

    def get(self, domain: str, split: str) -> DatasetManifest:
        try:
            return self.sections[(domain, split)]
        except KeyError:
            return DatasetManifest(domain, split, ())

    def pairs(self, split: str) -> list[tuple[ManifestEntry, ManifestEntry]]:
        """Resolved (B, C) entry pairs for ``split``."""
        b, c = self.get("B", split), self.get("C", split)
        c_by_id = {e.id: e for e in c}
        return [(e, c_by_id[e.pair_id]) for e in b if e.pair_id is not None]

    def stats(self) -> dict[str, dict[str, int]]:
        """Per-split sample counts: N videos (A), M long (B), T short (C)."""
        out = {}
        for split in SPLITS:
            counts = {
                "N": len(self.get("A", split)),
                "M": len(self.get("B", split)),
                "T": len(self.get("C", split)),
                "pairs": len(self.pairs(split)),
            }
            if any(counts.values()):
                out[split] = counts
        return out

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        if p.is_absolute():
            return p
        base = self.root if self.root is not None else Path(os.environ.get("SIDGAN_DATA_ROOT", "."))
        return base / p

    def validate(self) -> None:
        for m in self.sections.values():
            m.validate()
        for split in SPLITS:
            _check_pairing(self.get("B", split), self.get("C", split))

    def to_dict(self) -> dict:
        return {
            "format": "sidgan-manifest/1",
            "sections": [
                {"domain": m.domain, "split": m.split, "entries": [e.to_dict() for e in m.entries]}
                for m in self.sections.values()
            ],
        }


def _check_pairing(b: DatasetManifest, c: DatasetManifest) -> None:
    c_ids = Counter(c.ids)
    b_refs = Counter(e.pair_id for e in b if e.pair_id is not None)
    c_refs = Counter(e.pair_id for e in c if e.pair_id is not None)
    b_ids = set(b.ids)
    for e in b:
        if e.pair_id is None:
            continue
        if c_ids[e.pair_id] != 1:
            raise ManifestError(f"{b.split}: B entry {e.id} has dangling pair_id {e.pair_id!r}")
        if b_refs[e.pair_id] > 1:
            raise ManifestError(f"{b.split}: C entry {e.pair_id!r} claimed by several B entries")
    for e in c:
        if e.pair_id is None:
            continue
        if e.pair_id not in b_ids:
            raise ManifestError(f"{c.split}: C entry {e.id} has dangling pair_id {e.pair_id!r}")
        if c_refs[e.pair_id] > 1:
            raise ManifestError(f"{c.split}: B entry {e.pair_id!r} claimed by several C entries")
        partner = b.by_id(e.pair_id)
        if partner.pair_id is not None and partner.pair_id != e.id:
            raise ManifestError(f"{c.split}: asymmetric pairing between {partner.id} and {e.id}")
    for e in b:
        if e.pair_id is None:
            continue
        partner = c.by_id(e.pair_id)
        if partner.pair_id is not None and partner.pair_id != e.id:
            raise ManifestError(f"{b.split}: asymmetric pairing between {e.id} and {partner.id}")
    for eb, ec in ((eb, c.by_id(eb.pair_id)) for eb in b if eb.pair_id is not None):
        if eb.exposure_seconds is not None and ec.exposure_seconds is not None:
            if not ec.exposure_seconds < eb.exposure_seconds:
                raise ManifestError(
                    f"{b.split}: short exposure {ec.exposure_seconds} not below long "
                    f"exposure {eb.exposure_seconds} for pair {eb.id}/{ec.id}"
                )


def manifest_from_dict(doc: Mapping, root=None) -> ManifestSet:
    if "sections" not in doc:
        raise ManifestError("manifest has no 'sections'")
    sections: dict[tuple[str, str], DatasetManifest] = {}
    for sec in doc["sections"]:
        domain, split = str(sec.get("domain")), str(sec.get("split"))
        if (domain, split) in sections:
            raise ManifestError(f"section {domain}/{split} declared twice")
        entries = tuple(ManifestEntry.from_dict(e) for e in sec.get("entries", []))
        sections[(domain, split)] = DatasetManifest(domain, split, entries)
    ms = ManifestSet(sections, Path(root) if root is not None else None)
    ms.validate()
    return ms


def load_manifest(path, root=None) -> ManifestSet:
    """Load and validate a manifest file.

    Relative entry paths resolve against ``root``, defaulting to the
    manifest's own directory.
    """
    path = Path(path)
    with open(path) as f:
        doc = json.load(f)
    return manifest_from_dict(doc, root if root is not None else path.parent)


def save_manifest(path, manifest: ManifestSet | Iterable[DatasetManifest]) -> None:
    if not isinstance(manifest, ManifestSet):
        manifest = ManifestSet({(m.domain, m.split): m for m in manifest})
    manifest.validate()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(manifest.to_dict(), f, indent=2)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class CheckpointRecord:
    epoch: int
    model_id: str
    metrics: dict[str, float] = field(default_factory=dict)
    path: Path | None = None
    # in-memory copies, used when no run directory is configured
    parameters: dict | None = None
    optimizer_state: dict | None = None


def flatten_state(state: Mapping) -> np.ndarray:
    """Concatenate every floating tensor of a state dict into one f32 vector."""
    parts = [np.asarray(_to_numpy(v), dtype=np.float32).ravel() for v in state.values()]
    if not parts:
        return np.zeros(0, dtype=np.float32)
    return np.concatenate(parts)


def unflatten_state(flat: np.ndarray, template: Mapping) -> dict:
    import torch

    out, pos = {}, 0
    for k, v in template.items():
        n = v.numel()
        if pos + n > flat.size:
            raise TensorFormatError("parameter blob shorter than model")
        out[k] = torch.from_numpy(flat[pos : pos + n].copy()).reshape(v.shape).to(v.dtype)
        pos += n
    if pos != flat.size:
        raise TensorFormatError("parameter blob longer than model")
    return out


def _to_numpy(v):
    if hasattr(v, "detach"):
        return v.detach().cpu().numpy()
    return np.asarray(v)


def checkpoint_dir(run_dir, epoch: int) -> Path:
    return Path(run_dir) / f"epoch_{epoch}"


def save_checkpoint(run_dir, epoch: int, models: Mapping, optimizers: Mapping | None = None,
                    metrics: Mapping[str, float] | None = None) -> Path:
    """Write ``<run_dir>/epoch_<N>/<model_id>.sgt`` for each model plus ``metrics.json``.

    Optimizer moments go to ``<name>.optim.sgt`` next to the models.
    """
    d = checkpoint_dir(run_dir, epoch)
    d.mkdir(parents=True, exist_ok=True)
    for model_id, module in models.items():
        write_tensor(d / f"{model_id}.sgt", flatten_state(module.state_dict()))
    for name, opt in (optimizers or {}).items():
        write_tensor(d / f"{name}.optim.sgt", _flatten_optimizer(opt))
    snapshot = {
        "epoch": epoch,
        "models": sorted(models),
        "metrics": {k: float(v) for k, v in (metrics or {}).items()},
    }
    with open(d / "metrics.json", "w") as f:
        json.dump(snapshot, f, indent=2, sort_keys=True)
    return d


def load_checkpoint(run_dir, epoch: int, models: Mapping, optimizers: Mapping | None = None) -> dict:
    """Restore model (and optionally optimizer) state in place; returns the metrics snapshot."""
    d = checkpoint_dir(run_dir, epoch)
    for model_id, module in models.items():
        flat = read_tensor(d / f"{model_id}.sgt")
        module.load_state_dict(unflatten_state(flat, module.state_dict()))
    for name, opt in (optimizers or {}).items():
        _restore_optimizer(opt, read_tensor(d / f"{name}.optim.sgt"))
    with open(d / "metrics.json") as f:
        return json.load(f)


def _flatten_optimizer(opt) -> np.ndarray:
    # layout per parameter: step, exp_avg..., exp_avg_sq...
    parts = []
    for group in opt.param_groups:
        for p in group["params"]:
            st = opt.state.get(p)
            if not st:
                parts.append(np.zeros(1 + 2 * p.numel(), dtype=np.float32))
                continue
            parts.append(np.array([float(st["step"])], dtype=np.float32))
            parts.append(_to_numpy(st["exp_avg"]).astype(np.float32).ravel())
            parts.append(_to_numpy(st["exp_avg_sq"]).astype(np.float32).ravel())
    return np.concatenate(parts) if parts else np.zeros(0, dtype=np.float32)


def _restore_optimizer(opt, flat: np.ndarray) -> None:
    import torch

    pos = 0
    for group in opt.param_groups:
        for p in group["params"]:
            n = p.numel()
            step = float(flat[pos])
            m = torch.from_numpy(flat[pos + 1 : pos + 1 + n].copy()).reshape(p.shape).to(p.dtype)
            v = torch.from_numpy(flat[pos + 1 + n : pos + 1 + 2 * n].copy()).reshape(p.shape).to(p.dtype)
            pos += 1 + 2 * n
            if step == 0.0:
                opt.state.pop(p, None)
                continue
            opt.state[p] = {"step": torch.tensor(step), "exp_avg": m, "exp_avg_sq": v}
    if pos != flat.size:
        raise TensorFormatError("optimizer blob does not match parameter layout")

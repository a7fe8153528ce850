"""Analytic toy domains for desk-scale experiments.

Domain A holds procedural RGB videos (moving shapes on smooth backgrounds).
B is a fixed colour-mixing matrix followed by a 1/2.2 gamma encoding of A,
and C is ``0.1 * B`` plus Gaussian noise, mimicking a short exposure.
Images are generated in [0, 1] and stored normalized to [-1, 1].
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .domains import DomainData
from .experiments import forward_input
from .isp import normalize
from .tensorio import DatasetManifest, ManifestEntry, ManifestSet, save_manifest, write_tensor
from .training import ForwardData

COLOR_MATRIX = np.array([
    [0.80, 0.15, 0.05],
    [0.10, 0.75, 0.15],
    [0.05, 0.20, 0.75],
])
GAMMA = 2.2
SHORT_SCALE = 0.1
NOISE_SIGMA = 0.01
LONG_EXPOSURE = 1.0
SHORT_EXPOSURE = 0.1


def _shapes(rng: np.random.Generator, size: int, n: int):
    out = []
    for _ in range(n):
        out.append({
            "kind": rng.choice(["disc", "rect"]),
            "cy": rng.uniform(0, size), "cx": rng.uniform(0, size),
            "r": rng.uniform(size / 12, size / 4),
            "color": rng.uniform(0, 1, 3),
            "vy": rng.uniform(-2, 2), "vx": rng.uniform(-2, 2),
        })
    return out


def _render(size: int, corners: np.ndarray, shapes, t: float) -> np.ndarray:
    u = np.linspace(0, 1, size)
    wy, wx = u[:, None, None], u[None, :, None]
    img = (corners[0] * (1 - wy) * (1 - wx) + corners[1] * (1 - wy) * wx
           + corners[2] * wy * (1 - wx) + corners[3] * wy * wx)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    for s in shapes:
        cy, cx = s["cy"] + s["vy"] * t, s["cx"] + s["vx"] * t
        if s["kind"] == "disc":
            m = (yy - cy) ** 2 + (xx - cx) ** 2 <= s["r"] ** 2
        else:
            m = (np.abs(yy - cy) <= s["r"]) & (np.abs(xx - cx) <= 0.6 * s["r"])
        img[m] = s["color"]
    return np.clip(img, 0, 1)


def procedural_video(rng: np.random.Generator, size: int = 64, frames: int = 7, static: bool = False) -> np.ndarray:
    """(T, H, W, 3) clip in [0, 1]; shapes drift unless ``static``."""
    corners = rng.uniform(0, 1, (4, 3))
    shapes = _shapes(rng, size, int(rng.integers(3, 7)))
    return np.stack([_render(size, corners, shapes, 0.0 if static else float(t)) for t in range(frames)])


def procedural_image(rng: np.random.Generator, size: int = 64) -> np.ndarray:
    return procedural_video(rng, size, 1, static=True)[0]


def a_to_b(img: np.ndarray) -> np.ndarray:
    """Colour matrix then gamma encoding; [0, 1] -> [0, 1]."""
    lin = np.clip(np.asarray(img, dtype=np.float64) @ COLOR_MATRIX.T, 0, 1)
    return lin ** (1.0 / GAMMA)


def b_to_c_clean(img: np.ndarray) -> np.ndarray:
    return SHORT_SCALE * np.asarray(img, dtype=np.float64)


def b_to_c(img: np.ndarray, rng: np.random.Generator, sigma: float = NOISE_SIGMA) -> np.ndarray:
    noisy = b_to_c_clean(img) + rng.normal(0, sigma, np.shape(img))
    return np.clip(noisy, 0, 1)


def _norm(x) -> np.ndarray:
    return normalize(np.asarray(x, dtype=np.float32))


def make_bc_pairs(n: int, size: int = 64, seed: int = 0, prefix: str = "p") -> tuple[DomainData, DomainData, np.ndarray]:
    """Paired long (B) / short (C) still images plus the clean analytic short targets.

    Returns normalized DomainData for B and C and the noise-free ``0.1 * B``
    in unit range, shape (n, H, W, 3).
    """
    rng = np.random.default_rng(seed)
    longs, shorts, clean = [], [], []
    for _ in range(n):
        b = a_to_b(procedural_image(rng, size))
        longs.append(_norm(b))
        shorts.append(_norm(b_to_c(b, rng)))
        clean.append(b_to_c_clean(b))
    b_ids = [f"{prefix}{i:04d}_L" for i in range(n)]
    c_ids = [f"{prefix}{i:04d}_S" for i in range(n)]
    data_b = DomainData("B", b_ids, longs, [LONG_EXPOSURE] * n, c_ids, [True] * n)
    data_c = DomainData("C", c_ids, shorts, [SHORT_EXPOSURE] * n, b_ids, [True] * n)
    return data_b, data_c, np.stack(clean).astype(np.float32)


def make_videos(n: int, size: int = 64, frames: int = 7, seed: int = 0, prefix: str = "v") -> DomainData:
    rng = np.random.default_rng(seed)
    clips = [_norm(procedural_video(rng, size, frames)) for _ in range(n)]
    return DomainData("A", [f"{prefix}{i:04d}" for i in range(n)], clips)


def make_long_images(n: int, size: int = 64, seed: int = 0, prefix: str = "l") -> DomainData:
    """Unpaired B images, generated from scenes independent of any A clip."""
    rng = np.random.default_rng(seed)
    imgs = [_norm(a_to_b(procedural_image(rng, size))) for _ in range(n)]
    return DomainData("B", [f"{prefix}{i:04d}" for i in range(n)], imgs, [LONG_EXPOSURE] * n)


def ev_scale_inputs(short_frames: np.ndarray, short_exposure: float = SHORT_EXPOSURE,
                    long_exposure: float = LONG_EXPOSURE, digital_gain: float = 1.0) -> np.ndarray:
    return forward_input(short_frames, short_exposure, long_exposure, digital_gain)


def make_static_clips(n: int, size: int = 64, frames: int = 7, seed: int = 0, prefix: str = "s") -> ForwardData:
    """Real-style static clips: one long ground truth, ``frames`` noisy short frames each."""
    rng = np.random.default_rng(seed)
    inputs, targets = [], []
    for _ in range(n):
        b = a_to_b(procedural_image(rng, size))
        shorts = np.stack([b_to_c(b, rng) for _ in range(frames)])
        inputs.append(ev_scale_inputs(_norm(shorts)))
        targets.append(_norm(b)[None])
    in_ids = [f"{prefix}{i:04d}_in" for i in range(n)]
    gt_ids = [f"{prefix}{i:04d}_gt" for i in range(n)]
    return ForwardData(
        DomainData("C", in_ids, inputs, [SHORT_EXPOSURE] * n, gt_ids, [True] * n),
        DomainData("B", gt_ids, targets, [LONG_EXPOSURE] * n, in_ids, [True] * n),
        static=True,
    )


def synthetic_forward_data(long_clips, short_clips, ids) -> ForwardData:
    """Dynamic ForwardData from synthesized (long, short) clip pairs."""
    in_ids = [f"{k}_in" for k in ids]
    gt_ids = [f"{k}_gt" for k in ids]
    inputs = [ev_scale_inputs(s) for s in short_clips]
    return ForwardData(
        DomainData("C", in_ids, inputs, [SHORT_EXPOSURE] * len(ids), gt_ids),
        DomainData("B", gt_ids, [np.asarray(x) for x in long_clips], [LONG_EXPOSURE] * len(ids), in_ids),
        static=False,
    )


def write_toy_dataset(root, n_videos: int = 40, n_long: int = 40, n_pairs: int = 40, n_val: int = 8,
                      n_static: int = 20, size: int = 64, frames: int = 7, seed: int = 0) -> Path:
    """Write a complete toy dataset (.sgt files + manifest.json) under ``root``.

    Sections: A videos (train/val), unpaired B images for the A-B CycleGAN
    (train, marked ``unpaired``), paired B/C stills (train/val) and static
    B/C clips for the forward model (``test`` split and extra ``clip`` role).
    """
    root = Path(root)
    sections: dict[tuple[str, str], list[ManifestEntry]] = {}

    def add(domain, split, entry):
        sections.setdefault((domain, split), []).append(entry)

    def put(rel, arr):
        write_tensor(root / rel, np.asarray(arr, dtype=np.float32))
        return rel

    for split, n, s in (("train", n_videos, seed), ("val", n_val, seed + 1)):
        vids = make_videos(n, size, frames, s, prefix=f"v{split[0]}")
        for k, x in zip(vids.ids, vids.items):
            add("A", split, ManifestEntry(k, put(f"A/{k}.sgt", x), "video", len(x)))
    longs = make_long_images(n_long, size, seed + 2)
    for k, x in zip(longs.ids, longs.items):
        add("B", "train", ManifestEntry(k, put(f"B/{k}.sgt", x[0]), "image", 1, LONG_EXPOSURE,
                                        extra={"role": "unpaired"}))
    for split, n, s in (("train", n_pairs, seed + 3), ("val", n_val, seed + 4)):
        b, c, _ = make_bc_pairs(n, size, s, prefix=f"p{split[0]}")
        for kb, kc, xb, xc in zip(b.ids, c.ids, b.items, c.items):
            add("B", split, ManifestEntry(kb, put(f"B/{kb}.sgt", xb[0]), "image", 1, LONG_EXPOSURE, kc,
                                          {"role": "paired"}))
            add("C", split, ManifestEntry(kc, put(f"C/{kc}.sgt", xc[0]), "image", 1, SHORT_EXPOSURE, kb,
                                          {"role": "paired", "ev_scaled": False}))
    for split, n, s in (("train", n_static, seed + 5), ("test", n_static, seed + 6)):
        rng = np.random.default_rng(s)
        for i in range(n):
            b = a_to_b(procedural_image(rng, size))
            shorts = np.stack([b_to_c(b, rng) for _ in range(frames)])
            kb, kc = f"s{split[0]}{i:04d}_L", f"s{split[0]}{i:04d}_S"
            add("B", split, ManifestEntry(kb, put(f"B/{kb}.sgt", _norm(b)), "image", 1, LONG_EXPOSURE, kc,
                                          {"role": "clip", "static": True}))
            add("C", split, ManifestEntry(kc, put(f"C/{kc}.sgt", _norm(shorts)), "video", frames, SHORT_EXPOSURE,
                                          kb, {"role": "clip", "static": True, "ev_scaled": False}))
    ms = ManifestSet({k: DatasetManifest(*k, tuple(v)) for k, v in sections.items()}, root)
    save_manifest(root / "manifest.json", ms)
    return root / "manifest.json"

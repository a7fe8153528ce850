"""Image, video and distribution metrics.

PSNR/SSIM/TPSNR/TSSIM compare images, E_warp measures temporal consistency
under an injected optical flow, and FID/KID compare feature sets produced by
an injected extractor.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Protocol

import numpy as np
import scipy.linalg
from scipy import ndimage

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
FID_EPS = 1e-6


def _pair(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    return x, y


def mse(x, y) -> float:
    x, y = _pair(x, y)
    return float(np.mean((x - y) ** 2))


def psnr(x, y, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at 100 dB for identical inputs."""
    if peak <= 0:
        raise ValueError("peak must be positive")
    err = mse(x, y)
    if err == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak**2 / err))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    out = ndimage.correlate1d(img, g, axis=0, mode="constant")
    out = ndimage.correlate1d(out, g, axis=1, mode="constant")
    r = len(g) // 2
    return out[r : img.shape[0] - r, r : img.shape[1] - r]


def ssim_map(x, y, peak: float = 1.0, window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Local SSIM over all fully-contained Gaussian windows of a 2-D image pair."""
    x, y = _pair(x, y)
    if x.ndim != 2:
        raise ValueError("ssim_map expects a single channel")
    if min(x.shape) < window:
        raise ValueError(f"image {x.shape} smaller than {window}x{window} window")
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    g = gaussian_window(window, sigma)
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return num / den


def ssim(x, y, peak: float = 1.0) -> float:
    """Mean SSIM (11x11 Gaussian window, sigma 1.5), averaged over channels.

    Accepts (H, W) or (H, W, C) arrays.
    """
    x, y = _pair(x, y)
    if x.ndim == 2:
        return float(ssim_map(x, y, peak).mean())
    if x.ndim != 3:
        raise ValueError(f"expected (H, W) or (H, W, C), got {x.shape}")
    return float(np.mean([ssim_map(x[..., c], y[..., c], peak).mean() for c in range(x.shape[-1])]))


def temporal_metrics(clip, peak: float = 1.0) -> tuple[float, float]:
    """Mean PSNR and SSIM over consecutive frame pairs of a (T, H, W, C) clip."""
    frames = np.asarray(clip)
    if len(frames) < 2:
        raise ValueError("temporal metrics need at least two frames")
    ps = [psnr(frames[t], frames[t - 1], peak) for t in range(1, len(frames))]
    ss = [ssim(frames[t], frames[t - 1], peak) for t in range(1, len(frames))]
    return float(np.mean(ps)), float(np.mean(ss))


# ---------------------------------------------------------------------------
# distribution distances


def _features(f) -> np.ndarray:
    a = np.asarray(f, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2 or a.shape[0] == 0:
        raise ValueError("feature set must be a non-empty (n, d) array")
    if not np.isfinite(a).all():
        raise ValueError("non-finite features")
    return a


def fid(features_x, features_y, eps: float = FID_EPS) -> float:
    """Frechet distance between Gaussians fitted to two feature sets.

    Covariances are regularized by ``eps * I``; the trace term uses the
    symmetric form sqrt(sqrt(Sx) Sy sqrt(Sx)).
    """
    fx, fy = _features(features_x), _features(features_y)
    if fx.shape[1] != fy.shape[1]:
        raise ValueError("feature dimensions differ")
    d = fx.shape[1]
    mu_x, mu_y = fx.mean(0), fy.mean(0)
    cov_x = np.atleast_2d(np.cov(fx, rowvar=False)) + eps * np.eye(d)
    cov_y = np.atleast_2d(np.cov(fy, rowvar=False)) + eps * np.eye(d)
    root_x = scipy.linalg.sqrtm(cov_x)
    middle = scipy.linalg.sqrtm(root_x @ cov_y @ root_x)
    tr_covmean = np.trace(np.real(middle))
    diff = mu_x - mu_y
    return float(diff @ diff + np.trace(cov_x) + np.trace(cov_y) - 2 * tr_covmean)


def polynomial_kernel(a: np.ndarray, b: np.ndarray, degree: int = 3, coef0: float = 1.0) -> np.ndarray:
    d = a.shape[1]
    return (a @ b.T / d + coef0) ** degree


def kid(features_x, features_y) -> float:
    """Unbiased MMD^2 with the cubic polynomial kernel (a.b/d + 1)^3."""
    fx, fy = _features(features_x), _features(features_y)
    m, n = len(fx), len(fy)
    if m < 2 or n < 2:
        raise ValueError("KID needs at least two samples per set")
    if fx.shape[1] != fy.shape[1]:
        raise ValueError("feature dimensions differ")
    kxx = polynomial_kernel(fx, fx)
    kyy = polynomial_kernel(fy, fy)
    kxy = polynomial_kernel(fx, fy)
    sxx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    syy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(sxx + syy - 2 * kxy.mean())


# ---------------------------------------------------------------------------
# temporal warping error


class FlowProvider(Protocol):
    def __call__(self, frame_t: np.ndarray, frame_prev: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return (flow (H, W, 2) as (dx, dy), validity mask (H, W))."""


def zero_flow(frame_t, frame_prev):
    h, w = frame_t.shape[:2]
    return np.zeros((h, w, 2)), np.ones((h, w), dtype=bool)


class PrecomputedFlow:
    """Replays stored flows, one per consecutive frame pair, in clip order."""

    def __init__(self, flows, masks=None):
        self.flows = np.asarray(flows, dtype=np.float64)
        self.masks = None if masks is None else np.asarray(masks, dtype=bool)
        self._t = 0

    def __call__(self, frame_t, frame_prev):
        if self._t >= len(self.flows):
            raise ValueError("more frame pairs than stored flows")
        fl = self.flows[self._t]
        mask = np.ones(fl.shape[:2], dtype=bool) if self.masks is None else self.masks[self._t]
        self._t += 1
        return fl, mask


def warp(frame: np.ndarray, flow: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Bilinearly sample ``frame`` at ``p + flow(p)``; out-of-bounds samples are invalid."""
    frame = np.asarray(frame, dtype=np.float64)
    h, w = frame.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    sy, sx = yy + flow[..., 1], xx + flow[..., 0]
    valid = (sy >= 0) & (sy <= h - 1) & (sx >= 0) & (sx <= w - 1)
    chans = frame[..., None] if frame.ndim == 2 else frame
    out = np.stack(
        [ndimage.map_coordinates(chans[..., c], [sy, sx], order=1, mode="nearest") for c in range(chans.shape[-1])],
        axis=-1,
    )
    return (out[..., 0] if frame.ndim == 2 else out), valid


def warp_error(clip, flow: FlowProvider = zero_flow) -> float:
    """Mean over t of the masked MSE between frame t and warped frame t-1."""
    frames = np.asarray(clip, dtype=np.float64)
    if len(frames) < 2:
        raise ValueError("warp error needs at least two frames")
    errs = []
    for t in range(1, len(frames)):
        cur, prev = frames[t], frames[t - 1]
        fl, mask = flow(cur, prev)
        fl = np.asarray(fl, dtype=np.float64)
        mask = np.asarray(mask, dtype=bool)
        if fl.shape != cur.shape[:2] + (2,) or mask.shape != cur.shape[:2]:
            raise ValueError(f"flow {fl.shape} / mask {mask.shape} do not match frame {cur.shape}")
        warped, inside = warp(prev, fl)
        m = mask & inside
        if not m.any():
            continue
        sq = (cur - warped) ** 2
        if sq.ndim == 3:
            sq = sq.mean(-1)
        errs.append(float(sq[m].sum() / m.sum()))
    return float(np.mean(errs)) if errs else 0.0


# ---------------------------------------------------------------------------
# feature extraction and reports


class FeatureExtractor:
    """Wraps a torch module mapping NCHW images to (N, d) feature vectors."""

    def __init__(self, module=None, batch_size: int = 32):
        if module is None:
            from .nets import RandomFeatureNet

            module = RandomFeatureNet(pooled=True)
        self.module = module.eval()
        self.batch_size = batch_size

    def __call__(self, images) -> np.ndarray:
        import torch

        if isinstance(images, torch.Tensor):
            x = images.detach().float()
        else:
            a = np.asarray(images, dtype=np.float32)
            x = torch.from_numpy(np.ascontiguousarray(a.transpose(0, 3, 1, 2)))
        out = []
        with torch.no_grad():
            for i in range(0, len(x), self.batch_size):
                out.append(self.module(x[i : i + self.batch_size]).reshape(len(x[i : i + self.batch_size]), -1))
        return torch.cat(out).double().numpy()


REPORT_COLUMNS = (
    "checkpoint_id", "split", "psnr", "ssim", "tpsnr", "tssim",
    "fid", "kid_raw", "kid_x100", "e_warp_x1e5", "sample_count",
)


@dataclass
class MetricReport:
    checkpoint_id: str
    split: str
    sample_count: int = 0
    psnr: float | None = None
    ssim: float | None = None
    tpsnr: float | None = None
    tssim: float | None = None
    fid: float | None = None
    kid: float | None = None
    e_warp: float | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for k in ("psnr", "ssim", "tpsnr", "tssim", "fid", "kid", "e_warp"):
            v = getattr(self, k)
            if v is not None and not math.isfinite(v):
                raise ValueError(f"metric {k} is not finite: {v}")

    @property
    def kid_x100(self) -> float | None:
        return None if self.kid is None else 100.0 * self.kid

    @property
    def e_warp_x1e5(self) -> float | None:
        return None if self.e_warp is None else self.e_warp * 1e5

    def row(self) -> dict:
        return {
            "checkpoint_id": self.checkpoint_id,
            "split": self.split,
            "psnr": self.psnr,
            "ssim": self.ssim,
            "tpsnr": self.tpsnr,
            "tssim": self.tssim,
            "fid": self.fid,
            "kid_raw": self.kid,
            "kid_x100": self.kid_x100,
            "e_warp_x1e5": self.e_warp_x1e5,
            "sample_count": self.sample_count,
        }

    def to_dict(self) -> dict:
        return asdict(self)


def write_reports(path, reports: Iterable[MetricReport]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=REPORT_COLUMNS)
        w.writeheader()
        for r in reports:
            w.writerow({k: ("" if v is None else v) for k, v in r.row().items()})


def read_reports(path) -> list[MetricReport]:
    out = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != REPORT_COLUMNS:
            raise ValueError(f"unexpected columns {reader.fieldnames}")
        for row in reader:
            def num(k):
                return None if row[k] == "" else float(row[k])

            e = num("e_warp_x1e5")
            out.append(
                MetricReport(
                    checkpoint_id=row["checkpoint_id"],
                    split=row["split"],
                    sample_count=int(row["sample_count"]),
                    psnr=num("psnr"),
                    ssim=num("ssim"),
                    tpsnr=num("tpsnr"),
                    tssim=num("tssim"),
                    fid=num("fid"),
                    kid=num("kid_raw"),
                    e_warp=None if e is None else e / 1e5,
                )
            )
    return out


def evaluate_images(preds: Iterable, targets: Iterable, peak: float = 1.0) -> tuple[float, float]:
    """Average PSNR and SSIM over matched image lists."""
    ps, ss = [], []
    for p, t in zip(preds, targets):
        ps.append(psnr(p, t, peak))
        ss.append(ssim(p, t, peak))
    if not ps:
        raise ValueError("no images to evaluate")
    return float(np.mean(ps)), float(np.mean(ss))


Extractor = Callable[[np.ndarray], np.ndarray]

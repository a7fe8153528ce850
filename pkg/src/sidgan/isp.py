"""RAW preprocessing: green-averaged packing, 2x2 binning, gain and EV scaling.

Black level is subtracted from every photosite before the two greens are
averaged. All arithmetic runs in float64 and results are cast to float32,
so outputs are reproducible bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# (row, col) of R, G1, G2, B inside one 2x2 block
CFA_LAYOUTS = {
    "RGGB": ((0, 0), (0, 1), (1, 0), (1, 1)),
    "BGGR": ((1, 1), (0, 1), (1, 0), (0, 0)),
    "GRBG": ((0, 1), (0, 0), (1, 1), (1, 0)),
    "GBRG": ((1, 0), (0, 0), (1, 1), (0, 1)),
}

UNIT = "unit"
SYMMETRIC = "symmetric"


@dataclass(frozen=True)
class RawFrame:
    mosaic: np.ndarray
    cfa_pattern: str = "RGGB"
    black_level: int = 0
    white_level: int = 1023
    exposure_seconds: float = 1.0

    def __post_init__(self):
        m = np.asarray(self.mosaic)
        if m.ndim != 2:
            raise ValueError(f"mosaic must be 2-D, got shape {m.shape}")
        if self.cfa_pattern not in CFA_LAYOUTS:
            raise ValueError(f"unknown CFA pattern {self.cfa_pattern!r}")
        if not 0 <= self.black_level < self.white_level:
            raise ValueError("require 0 <= black_level < white_level")
        if m.size and m.max() > self.white_level:
            raise ValueError("mosaic values exceed white_level")
        if self.exposure_seconds <= 0:
            raise ValueError("exposure_seconds must be positive")


@dataclass(frozen=True)
class IspConfig:
    digital_gain: float = 1.0
    target_range: str = SYMMETRIC
    bin: bool = True
    # records whether frames were denoised upstream (e.g. by VBM4D)
    denoised: bool = False

    def __post_init__(self):
        if not self.digital_gain > 0:
            raise ValueError("digital_gain must be positive")
        if self.target_range not in (UNIT, SYMMETRIC):
            raise ValueError(f"unknown target range {self.target_range!r}")


def pack_green_average(raw: RawFrame) -> np.ndarray:
    """Pack a Bayer mosaic into an (H/2, W/2, 3) RGB image in [0, 1].

    Each 2x2 CFA block becomes one pixel ``(R, (G1 + G2) / 2, B)`` after
    black-level subtraction and scaling by ``1 / (white - black)``.
    """
    m = np.asarray(raw.mosaic)
    h, w = m.shape
    if h % 2 or w % 2:
        raise ValueError(f"mosaic dimensions must be even, got {m.shape}")
    if raw.cfa_pattern not in CFA_LAYOUTS:
        raise ValueError(f"unknown CFA pattern {raw.cfa_pattern!r}")
    scale = float(raw.white_level - raw.black_level)
    lin = np.clip((m.astype(np.float64) - raw.black_level) / scale, 0.0, 1.0)
    (ry, rx), (g1y, g1x), (g2y, g2x), (by, bx) = CFA_LAYOUTS[raw.cfa_pattern]
    r = lin[ry::2, rx::2]
    g = (lin[g1y::2, g1x::2] + lin[g2y::2, g2x::2]) / 2.0
    b = lin[by::2, bx::2]
    return np.stack([r, g, b], axis=-1).astype(np.float32)


def bin2x2(img) -> np.ndarray:
    """Average each 2x2 block per channel, halving both spatial dims."""
    a = np.asarray(img)
    h, w = a.shape[:2]
    if h % 2 or w % 2:
        raise ValueError(f"spatial dimensions must be even, got {a.shape[:2]}")
    a = a.astype(np.float64)
    out = (a[0::2, 0::2] + a[0::2, 1::2] + a[1::2, 0::2] + a[1::2, 1::2]) / 4.0
    return out.astype(np.float32)


def apply_gain_and_ev(img, short_exposure: float, long_exposure: float, digital_gain: float = 1.0) -> np.ndarray:
    """Scale by ``digital_gain * long/short`` in linear light and clip to [0, 1]."""
    if short_exposure <= 0 or long_exposure <= 0:
        raise ValueError("exposures must be positive")
    if digital_gain <= 0:
        raise ValueError("digital_gain must be positive")
    ratio = float(long_exposure) / float(short_exposure)
    out = np.asarray(img, dtype=np.float64) * float(digital_gain) * ratio
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def normalize(img, target: str = SYMMETRIC, tol: float = 1e-6) -> np.ndarray:
    a = np.asarray(img, dtype=np.float32)
    if a.size and (a.min() < -tol or a.max() > 1 + tol):
        raise ValueError("input outside [0, 1]")
    if target == UNIT:
        return a
    if target == SYMMETRIC:
        return 2.0 * a - 1.0
    raise ValueError(f"unknown target range {target!r}")


def denormalize(img, source: str = SYMMETRIC) -> np.ndarray:
    a = np.asarray(img, dtype=np.float32)
    if source == UNIT:
        return a
    if source == SYMMETRIC:
        return (a + 1.0) / 2.0
    raise ValueError(f"unknown range {source!r}")


def preprocess(raw: RawFrame, cfg: IspConfig, long_exposure: float | None = None) -> np.ndarray:
    """Full pipeline: pack, optional bin, gain/EV scaling, normalization.

    Without ``long_exposure`` no EV scaling is applied (ratio 1).
    """
    img = pack_green_average(raw)
    if cfg.bin:
        img = bin2x2(img)
    target = raw.exposure_seconds if long_exposure is None else long_exposure
    img = apply_gain_and_ev(img, raw.exposure_seconds, target, cfg.digital_gain)
    return normalize(img, cfg.target_range)

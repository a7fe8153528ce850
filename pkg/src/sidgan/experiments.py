"""Real-fraction ablation for the forward model and manifest-backed forward data."""

from __future__ import annotations

import copy
import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch.nn as nn

from .domains import DomainData, read_item
from .isp import apply_gain_and_ev, denormalize, normalize
from .nets import ModelBundle
from .tensorio import ManifestSet
from .training import ForwardData, ForwardTrainConfig, TrainPlan, evaluate_forward, train_forward

DEFAULT_FRACTIONS = (0.02, 0.05, 0.10, 0.20, 0.40, 0.60, 0.80, 1.00)
ARMS = {False: "real_only", True: "synthetic"}
ABLATION_COLUMNS = ("fraction", "arm", "n_real", "n_synthetic", "psnr", "ssim", "tpsnr", "tssim")


@dataclass(frozen=True)
class AblationSpec:
    real_fractions: tuple[float, ...] = DEFAULT_FRACTIONS
    with_synthetic: tuple[bool, ...] = (False, True)

    def __post_init__(self):
        fr = tuple(float(f) for f in self.real_fractions)
        object.__setattr__(self, "real_fractions", fr)
        object.__setattr__(self, "with_synthetic", tuple(bool(w) for w in self.with_synthetic))
        if not fr:
            raise ValueError("no real fractions given")
        if any(not 0 < f <= 1 for f in fr):
            raise ValueError("real fractions must lie in (0, 1]")
        if any(b <= a for a, b in zip(fr, fr[1:])):
            raise ValueError("real fractions must be strictly increasing")
        if not self.with_synthetic or len(set(self.with_synthetic)) != len(self.with_synthetic):
            raise ValueError("with_synthetic must list distinct arms")


def nested_subsets(ids: Sequence[str], fractions: Sequence[float], seed: int) -> list[list[str]]:
    """One permutation per seed; fraction f keeps its first ceil(f * n) ids (at least one)."""
    order = np.random.default_rng(seed).permutation(len(ids))
    out = []
    for f in fractions:
        k = max(1, math.ceil(f * len(ids) - 1e-9))
        out.append([ids[i] for i in order[:k]])
    return out


def run_ablation(
    spec: AblationSpec,
    real: ForwardData,
    synthetic: ForwardData | None,
    test: ForwardData,
    make_model: Callable[[], nn.Module],
    cfg: ForwardTrainConfig,
    phi=None,
    frame_index: int = 4,
) -> list[dict]:
    """Train one forward model per (fraction, arm) and score it on ``test``.

    The synthetic arm runs the full plan in ``cfg``; the real-only arm drops
    the synthetic stage and keeps the two real stages. Both arms start from
    the same initialization for a given fraction.
    """
    stages = {s.stage_id: s for s in cfg.plan.stages}
    e1 = stages["train_real_static"].epochs
    e3 = stages["finetune_real_static"].epochs
    e2 = stages["finetune_synthetic_dynamic"].epochs if "finetune_synthetic_dynamic" in stages else 0
    if True in spec.with_synthetic and (synthetic is None or len(synthetic) == 0):
        raise ValueError("synthetic arm requested without synthetic clips")
    rows = []
    subsets = nested_subsets(real.ids, spec.real_fractions, cfg.seed)
    init = make_model()
    for frac, ids in zip(spec.real_fractions, subsets):
        for arm in spec.with_synthetic:
            plan = TrainPlan.three_step(e1, e2, e3) if arm else TrainPlan.real_only(e1, e3)
            model = copy.deepcopy(init)
            sources = {"real": real.subset(ids)}
            if arm:
                sources["synthetic"] = synthetic
            train_forward(ModelBundle(forward_model=model), sources, replace(cfg, plan=plan), phi)
            scores = evaluate_forward(model, test, frame_index)
            rows.append({
                "fraction": frac, "arm": ARMS[arm], "n_real": len(ids),
                "n_synthetic": len(synthetic) if arm else 0, **scores,
            })
    return rows


def write_ablation_csv(path, rows: Sequence[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, ABLATION_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in ABLATION_COLUMNS})


def read_ablation_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    ints = {"n_real", "n_synthetic"}
    return [{k: (v if k == "arm" else int(v) if k in ints else float(v)) for k, v in r.items()} for r in rows]


def plot_ablation(path, rows: Sequence[dict]) -> None:
    """PSNR and SSIM against real fraction, one curve per arm."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    for arm in dict.fromkeys(r["arm"] for r in rows):
        pts = sorted((r["fraction"], r["psnr"], r["ssim"]) for r in rows if r["arm"] == arm)
        x = [100 * p[0] for p in pts]
        axes[0].plot(x, [p[1] for p in pts], marker="o", label=arm)
        axes[1].plot(x, [p[2] for p in pts], marker="o", label=arm)
    for ax, name in zip(axes, ("PSNR (dB)", "SSIM")):
        ax.set_xlabel("real data (%)")
        ax.set_ylabel(name)
        ax.grid(alpha=0.3)
    axes[0].legend()
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)


# ---------------------------------------------------------------------------
# manifest-backed forward data


def forward_input(short_frames: np.ndarray, short_exposure: float, long_exposure: float,
                  digital_gain: float = 1.0) -> np.ndarray:
    """Normalized short frames -> EV-scaled, normalized forward-model input."""
    unit = np.clip(denormalize(short_frames), 0, 1)
    return normalize(apply_gain_and_ev(unit, short_exposure, long_exposure, digital_gain))


def forward_data(ms: ManifestSet, split: str, roles: Sequence[str] | None = None,
                 digital_gain: float = 1.0) -> ForwardData:
    """Clip pairs of ``split`` whose short side has several frames.

    Short clips not flagged ``ev_scaled`` are brightened by the long/short
    exposure ratio here.
    """
    pairs = [
        (b, c) for b, c in ms.pairs(split)
        if c.frame_count >= 2 and (roles is None or c.extra.get("role") in roles)
    ]
    if not pairs:
        raise ValueError(f"no multi-frame B/C pairs in split {split!r}")
    static = [bool(c.extra.get("static", False)) for _, c in pairs]
    if len(set(static)) != 1:
        raise ValueError("mixed static and dynamic clips; select them with roles")
    ins, outs = [], []
    for b, c in pairs:
        x = read_item(ms.resolve(c), c.frame_count)
        if not c.extra.get("ev_scaled", False):
            x = forward_input(x, c.exposure_seconds, b.exposure_seconds, digital_gain)
        ins.append(x)
        outs.append(read_item(ms.resolve(b), b.frame_count))
    b_ids = [b.id for b, _ in pairs]
    c_ids = [c.id for _, c in pairs]
    return ForwardData(
        DomainData("C", c_ids, ins, [c.exposure_seconds for _, c in pairs], b_ids, static),
        DomainData("B", b_ids, outs, [b.exposure_seconds for b, _ in pairs], c_ids, static),
        static=static[0],
    )

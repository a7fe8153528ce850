"""Desk-scale experiments on the analytic toy domains.

``bc_recovery`` trains the B-C CycleGAN with or without the supervised
term and scores G_BC against the noise-free ``0.1 * B`` map.
``ablation_direction`` chains an A-B CycleGAN, synthesis and the forward
model ablation at a small real fraction.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch

from . import metrics, toy
from .experiments import AblationSpec, run_ablation
from .isp import denormalize
from .losses import AB_WEIGHTS, LossWeights
from .nets import ModelBundle, PatchGanSpec, UNetSpec, build_unet
from .synthesis import synthesize_pair
from .domains import VideoClip
from .training import ForwardTrainConfig, TrainConfig, TrainPlan, train_cyclegan_ab, train_cyclegan_bc, translate

GENERATOR = UNetSpec(levels=3, base_width=8)
DISCRIMINATOR = PatchGanSpec(downsample_layers=3, base_width=8, input_patch=24)


@dataclass
class BcSetup:
    n_train: int = 200
    n_val: int = 20
    size: int = 64
    epochs: int = 200
    crop: int = 32
    base_lr: float = 2e-4
    batch_size: int = 8
    seed: int = 0

    def train_config(self) -> TrainConfig:
        constant = self.epochs * 3 // 4
        return TrainConfig(epochs_constant=constant, epochs_decay=self.epochs - constant, base_lr=self.base_lr,
                           batch_size=self.batch_size, crop=self.crop, seed=self.seed,
                           eval_interval=max(1, self.epochs // 10))


@dataclass
class BcResult:
    lambda2: float
    psnr: float
    bundle: ModelBundle
    seconds: float
    val_history: list[dict] = field(default_factory=list)


def analytic_psnr(g_bc, val_long: np.ndarray, clean_short: np.ndarray) -> float:
    """Mean PSNR (unit range) of G_BC(long) against the noise-free short images."""
    pred = denormalize(translate(g_bc, val_long))
    return float(np.mean([metrics.psnr(p, q) for p, q in zip(pred, clean_short)]))


def bc_recovery(lambda2: float, setup: BcSetup = BcSetup()) -> BcResult:
    train_b, train_c, _ = toy.make_bc_pairs(setup.n_train, setup.size, seed=setup.seed, prefix="t")
    val_b, val_c, clean = toy.make_bc_pairs(setup.n_val, setup.size, seed=setup.seed + 1, prefix="v")
    bundle = ModelBundle.build(GENERATOR, DISCRIMINATOR, seed=setup.seed)
    t0 = time.perf_counter()
    trace = train_cyclegan_bc(bundle, train_b, train_c, setup.train_config(), LossWeights(10.0, lambda2),
                              val_b=val_b, val_c=val_c)
    seconds = time.perf_counter() - t0
    score = analytic_psnr(bundle.g_bc, np.stack([x[0] for x in val_b.items]), clean)
    history = [{"epoch": r.epoch, **r.metrics} for r in trace.epochs if r.metrics]
    return BcResult(lambda2, score, bundle, seconds, history)


@dataclass
class AblationSetup:
    n_videos: int = 200
    n_long: int = 200
    n_real: int = 200
    n_test: int = 20
    n_synthetic: int = 90
    size: int = 64
    frames: int = 7
    ab_epochs: int = 20
    plan: tuple[int, int, int] = (40, 40, 20)
    forward_lr: float = 1e-3
    crop: int = 32
    batch_size: int = 8
    fraction: float = 0.02
    seed: int = 0


def train_toy_ab(setup: AblationSetup) -> ModelBundle:
    """A-B CycleGAN on procedural video frames vs independent long images."""
    a = toy.make_videos(setup.n_videos, setup.size, 1, seed=setup.seed + 10, prefix="a")
    b = toy.make_long_images(setup.n_long, setup.size, seed=setup.seed + 11)
    bundle = ModelBundle.build(GENERATOR, DISCRIMINATOR, seed=setup.seed)
    constant = setup.ab_epochs * 3 // 4
    cfg = TrainConfig(epochs_constant=constant, epochs_decay=setup.ab_epochs - constant, base_lr=2e-4,
                      batch_size=8, crop=setup.crop, seed=setup.seed, eval_interval=setup.ab_epochs)
    train_cyclegan_ab(bundle, a, b, cfg, AB_WEIGHTS)
    return bundle


def synthetic_clips(g_ab, g_bc, setup: AblationSetup):
    vids = toy.make_videos(setup.n_synthetic, setup.size, setup.frames, seed=setup.seed + 12, prefix="y")
    longs, shorts = [], []
    for k, frames in zip(vids.ids, vids.items):
        pair = synthesize_pair(VideoClip(frames, id=k), g_ab, g_bc)
        longs.append(pair.long_frames.frames)
        shorts.append(pair.short_frames.frames)
    return toy.synthetic_forward_data(longs, shorts, vids.ids)


def ablation_direction(g_ab, g_bc, setup: AblationSetup = AblationSetup()) -> list[dict]:
    """Both arms of the real-fraction ablation at ``setup.fraction``; one row per arm."""
    real = toy.make_static_clips(setup.n_real, setup.size, setup.frames, seed=setup.seed + 20, prefix="r")
    test = toy.make_static_clips(setup.n_test, setup.size, setup.frames, seed=setup.seed + 21, prefix="q")
    synthetic = synthetic_clips(g_ab, g_bc, setup)
    total = sum(setup.plan)
    cfg = ForwardTrainConfig(total_epochs=total, lr_phase1=setup.forward_lr, lr_phase2=setup.forward_lr / 10,
                             phase_boundary=total * 3 // 4, plan=TrainPlan.three_step(*setup.plan),
                             batch_size=setup.batch_size, crop=setup.crop, seed=setup.seed)

    def make_model():
        torch.manual_seed(setup.seed)
        return build_unet(GENERATOR)

    return run_ablation(AblationSpec((setup.fraction,)), real, synthetic, test, make_model, cfg)

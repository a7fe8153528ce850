"""Trainers for the two CycleGANs and the three-stage forward model.

The A-B and B-C CycleGANs are optimized independently. Each batch updates
the discriminators first and then the generators. All randomness (data
order, crops, discriminator patches) is derived from ``cfg.seed`` so reruns
reproduce the loss trace exactly.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import metrics
from .domains import DomainData, VideoClip, epoch_order, paired_ids, resolve_pair, sample_two_frames
from .isp import denormalize
from .losses import (
    AB_WEIGHTS,
    BC_WEIGHTS,
    LossWeights,
    forward_losses,
    gan_loss_d,
    gan_loss_g,
    l1,
    total_ab_objective,
    total_bc_objective,
)
from .nets import ModelBundle, PatchDiscriminator, RandomFeatureNet, random_patch
from .tensorio import CheckpointRecord, save_checkpoint

log = logging.getLogger(__name__)

STAGES = ("train_real_static", "finetune_synthetic_dynamic", "finetune_real_static")


@dataclass
class OptimizerConfig:
    beta1: float = 0.5
    beta2: float = 0.999


@dataclass
class TrainConfig:
    epochs_constant: int = 50
    epochs_decay: int = 20
    base_lr: float = 1e-4
    batch_size: int = 1
    crop: int = 256
    seed: int = 0
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    eval_interval: int = 5
    replay_buffer: int = 0  # 0 disables the fake-image history

    def __post_init__(self):
        if isinstance(self.optimizer, Mapping):
            self.optimizer = OptimizerConfig(**self.optimizer)
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.crop % 16:
            raise ValueError("crop must be divisible by 16")
        if self.base_lr < 0:
            raise ValueError("base_lr must be nonnegative")

    @property
    def total_epochs(self) -> int:
        return self.epochs_constant + self.epochs_decay


@dataclass
class Stage:
    stage_id: str
    epochs: int
    data_source: str

    def __post_init__(self):
        if self.stage_id not in STAGES:
            raise ValueError(f"unknown stage {self.stage_id!r}")


@dataclass
class TrainPlan:
    stages: list[Stage]

    def __post_init__(self):
        self.stages = [s if isinstance(s, Stage) else Stage(**s) for s in self.stages]

    @property
    def total_epochs(self) -> int:
        return sum(s.epochs for s in self.stages)

    @classmethod
    def three_step(cls, e1: int, e2: int, e3: int, real: str = "real", synthetic: str = "synthetic") -> "TrainPlan":
        return cls([
            Stage("train_real_static", e1, real),
            Stage("finetune_synthetic_dynamic", e2, synthetic),
            Stage("finetune_real_static", e3, real),
        ])

    @classmethod
    def real_only(cls, e1: int, e3: int, real: str = "real") -> "TrainPlan":
        return cls([Stage("train_real_static", e1, real), Stage("finetune_real_static", e3, real)])

    def is_paper_order(self) -> bool:
        return [s.stage_id for s in self.stages] == list(STAGES)


@dataclass
class ForwardTrainConfig:
    total_epochs: int = 1000
    lr_phase1: float = 1e-4
    lr_phase2: float = 1e-5
    phase_boundary: int = 500
    real_synth_ratio: tuple[int, int] = (1, 45)
    plan: TrainPlan = field(default_factory=lambda: TrainPlan.three_step(300, 400, 300))
    batch_size: int = 1
    crop: int = 256
    seed: int = 0
    optimizer: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(0.9, 0.999))
    reset_optimizer: bool = True
    loss_weights: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if isinstance(self.optimizer, Mapping):
            self.optimizer = OptimizerConfig(**self.optimizer)
        if isinstance(self.plan, Mapping):
            self.plan = TrainPlan(**self.plan)
        self.real_synth_ratio = tuple(self.real_synth_ratio)
        self.loss_weights = tuple(self.loss_weights)
        if self.phase_boundary > self.total_epochs:
            raise ValueError("phase_boundary exceeds total_epochs")
        if min(self.real_synth_ratio) <= 0:
            raise ValueError("real_synth_ratio entries must be positive")

    def synthetic_count(self, real_count: int) -> int:
        """Number of synthetic clips matching ``real_synth_ratio`` for ``real_count`` real clips."""
        r, s = self.real_synth_ratio
        return real_count * s // r


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    losses: dict[str, float]
    seconds: float
    stage: str | None = None
    metrics: dict[str, float] = field(default_factory=dict)


@dataclass
class TrainTrace:
    kind: str
    epochs: list[EpochRecord] = field(default_factory=list)
    checkpoints: list[CheckpointRecord] = field(default_factory=list)
    stage_boundaries: list[tuple[str, int]] = field(default_factory=list)
    sample_log: list[tuple[int, str, str]] = field(default_factory=list)

    def loss_table(self, n_epochs: int | None = None) -> list[dict[str, float]]:
        return [dict(r.losses) for r in self.epochs[:n_epochs]]

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "epochs": [asdict(r) for r in self.epochs],
            "checkpoints": [
                {"epoch": c.epoch, "model_id": c.model_id, "metrics": c.metrics,
                 "path": None if c.path is None else str(c.path)}
                for c in self.checkpoints
            ],
            "stage_boundaries": [list(b) for b in self.stage_boundaries],
            "sample_log": [list(s) for s in self.sample_log],
        }

    def save(self, out_dir) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "trace.json", "w") as f:
            json.dump(self.to_dict(), f, indent=1)
        keys = sorted({k for r in self.epochs for k in r.losses})
        with open(out_dir / "losses.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["epoch", "stage", "lr", *keys, "seconds"])
            for r in self.epochs:
                w.writerow([r.epoch, r.stage or "", r.lr, *[r.losses.get(k, "") for k in keys], r.seconds])


# ---------------------------------------------------------------------------
# schedules


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Constant ``base_lr``, then linear decay to zero over ``epochs_decay`` epochs."""
    if not 0 <= epoch < cfg.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.total_epochs})")
    if epoch < cfg.epochs_constant:
        return cfg.base_lr
    return cfg.base_lr * (1.0 - (epoch - cfg.epochs_constant) / cfg.epochs_decay)


def forward_lr_at_epoch(cfg: ForwardTrainConfig, epoch: int) -> float:
    if not 0 <= epoch < cfg.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.total_epochs})")
    return cfg.lr_phase1 if epoch < cfg.phase_boundary else cfg.lr_phase2


def _set_lr(opt: torch.optim.Optimizer, lr: float) -> None:
    for g in opt.param_groups:
        g["lr"] = lr


def _adam(params, lr: float, oc: OptimizerConfig) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=lr, betas=(oc.beta1, oc.beta2))


# ---------------------------------------------------------------------------
# batching helpers


def to_nchw(images) -> torch.Tensor:
    a = np.ascontiguousarray(np.asarray(images, dtype=np.float32).transpose(0, 3, 1, 2))
    return torch.from_numpy(a)


def to_nhwc(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy().transpose(0, 2, 3, 1)


def _crop(frames: np.ndarray, rng: np.random.Generator, crop: int, t: int | None = None):
    if t is None:
        t = int(rng.integers(len(frames)))
    h, w = frames.shape[1:3]
    if crop > min(h, w):
        raise ValueError(f"crop {crop} larger than image {h}x{w}")
    y, x = int(rng.integers(0, h - crop + 1)), int(rng.integers(0, w - crop + 1))
    return t, (y, x)


def unpaired_batches(data_x: DomainData, data_y: DomainData, seed: int, epoch: int, crop: int, batch_size: int):
    """One epoch: a pass over the smaller domain, partners drawn without replacement."""
    if len(data_x) == 0 or len(data_y) == 0:
        raise ValueError("empty domain")
    n = min(len(data_x), len(data_y))
    rng = np.random.default_rng([seed, epoch, 11])
    ox = rng.permutation(len(data_x))[:n]
    oy = rng.permutation(len(data_y))[:n]
    for s in range(0, n, batch_size):
        xs, ys, ids = [], [], []
        for i, j in zip(ox[s : s + batch_size], oy[s : s + batch_size]):
            fx, fy = data_x.items[i], data_y.items[j]
            t, (y0, x0) = _crop(fx, rng, crop)
            xs.append(fx[t, y0 : y0 + crop, x0 : x0 + crop])
            t, (y0, x0) = _crop(fy, rng, crop)
            ys.append(fy[t, y0 : y0 + crop, x0 : x0 + crop])
            ids += [data_x.ids[i], data_y.ids[j]]
        yield to_nchw(np.stack(xs)), to_nchw(np.stack(ys)), ids


def paired_batches(data_b: DomainData, data_c: DomainData, seed: int, epoch: int, crop: int, batch_size: int):
    """One epoch over every resolved (L, S) pair; both crops share one window."""
    keys = paired_ids(data_b)
    if not keys:
        raise ValueError("no resolved B-C pairs")
    order = epoch_order(len(keys), seed, epoch)
    rng = np.random.default_rng([seed, epoch, 13])
    for s in range(0, len(keys), batch_size):
        ls, ss, ids = [], [], []
        for k in order[s : s + batch_size]:
            long_, short, c_id = resolve_pair(data_b, data_c, keys[k])
            t, (y0, x0) = _crop(long_, rng, crop, t=None if len(long_) == len(short) else 0)
            win = np.s_[y0 : y0 + crop, x0 : x0 + crop]
            ls.append(long_[min(t, len(long_) - 1)][win])
            ss.append(short[min(t, len(short) - 1)][win])
            ids += [keys[k], c_id]
        yield to_nchw(np.stack(ls)), to_nchw(np.stack(ss)), ids


class ReplayBuffer:
    """History of generated images for discriminator updates."""

    def __init__(self, size: int, generator: torch.Generator):
        self.size = size
        self.items: list[torch.Tensor] = []
        self.g = generator

    def __call__(self, batch: torch.Tensor) -> torch.Tensor:
        if self.size <= 0:
            return batch
        out = []
        for img in batch.detach():
            img = img.unsqueeze(0)
            if len(self.items) < self.size:
                self.items.append(img.clone())
                out.append(img)
            elif torch.rand(1, generator=self.g).item() > 0.5:
                k = int(torch.randint(0, self.size, (1,), generator=self.g))
                out.append(self.items[k].clone())
                self.items[k] = img.clone()
            else:
                out.append(img)
        return torch.cat(out)


def translate(g: nn.Module, images, divisor: int | None = None, batch_size: int = 16) -> np.ndarray:
    """Full-frame inference: reflect-pad to a multiple of ``divisor``, run, crop back.

    ``images`` is (N, H, W, 3) in [-1, 1]; returns the same layout.
    """
    if divisor is None:
        spec = getattr(g, "spec", None)
        divisor = spec.divisor if spec is not None else 1
    x = to_nchw(images)
    h, w = x.shape[-2:]
    ph, pw = (-h) % divisor, (-w) % divisor
    out = []
    was_training = g.training
    g.eval()
    with torch.no_grad():
        for i in range(0, len(x), batch_size):
            xb = x[i : i + batch_size]
            if ph or pw:
                xb = F.pad(xb, (0, pw, 0, ph), mode="reflect")
            out.append(g(xb)[..., :h, :w])
    g.train(was_training)
    return to_nhwc(torch.cat(out))


def _disc_view(d: nn.Module, x: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    if isinstance(d, PatchDiscriminator):
        x = random_patch(x, d.spec.input_patch, gen)
    return d(x)


def _snapshot(modules: Mapping[str, nn.Module]) -> dict:
    return {k: copy.deepcopy(m.state_dict()) for k, m in modules.items()}


# ---------------------------------------------------------------------------
# CycleGAN trainers


class _CycleGAN:
    """Shared update logic for the A-B (identity) and B-C (supervised) objectives."""

    def __init__(self, g_xy, g_yx, d_x, d_y, cfg: TrainConfig, weights: LossWeights, mode: str):
        self.g_xy, self.g_yx, self.d_x, self.d_y = g_xy, g_yx, d_x, d_y
        self.cfg, self.weights, self.mode = cfg, weights, mode
        oc = cfg.optimizer
        self.opt_g = _adam(list(g_xy.parameters()) + list(g_yx.parameters()), cfg.base_lr, oc)
        self.opt_d = _adam(list(d_x.parameters()) + list(d_y.parameters()), cfg.base_lr, oc)
        self.gen = torch.Generator().manual_seed(cfg.seed)
        self.pool_x = ReplayBuffer(cfg.replay_buffer, self.gen)
        self.pool_y = ReplayBuffer(cfg.replay_buffer, self.gen)

    def set_lr(self, lr: float) -> None:
        _set_lr(self.opt_g, lr)
        _set_lr(self.opt_d, lr)

    def discriminator_step(self, x, y) -> dict[str, float]:
        with torch.no_grad():
            fake_y = self.pool_y(self.g_xy(x))
            fake_x = self.pool_x(self.g_yx(y))
        gen = self.gen
        loss_dx = gan_loss_d(_disc_view(self.d_x, x, gen), _disc_view(self.d_x, fake_x, gen))
        loss_dy = gan_loss_d(_disc_view(self.d_y, y, gen), _disc_view(self.d_y, fake_y, gen))
        self.opt_d.zero_grad(set_to_none=True)
        (loss_dx + loss_dy).backward()
        self.opt_d.step()
        return {"d_x": loss_dx.item(), "d_y": loss_dy.item()}

    def generator_step(self, x, y, paired: bool) -> dict[str, float]:
        gen = self.gen
        fake_y = self.g_xy(x)
        fake_x = self.g_yx(y)
        for p in list(self.d_x.parameters()) + list(self.d_y.parameters()):
            p.requires_grad_(False)
        try:
            adv_xy = gan_loss_g(_disc_view(self.d_y, fake_y, gen))
            adv_yx = gan_loss_g(_disc_view(self.d_x, fake_x, gen))
        finally:
            for p in list(self.d_x.parameters()) + list(self.d_y.parameters()):
                p.requires_grad_(True)
        cyc = l1(self.g_xy(fake_x), y) + l1(self.g_yx(fake_y), x)
        if self.mode == "identity":
            idt = l1(self.g_yx(x), x) + l1(self.g_xy(y), y)
            parts = {"gan_ab": adv_xy, "gan_ba": adv_yx, "cycle": cyc, "identity": idt}
            total = total_ab_objective(parts, self.weights)
        else:
            sup = l1(fake_y, y) + l1(fake_x, x) if paired else torch.zeros(())
            parts = {"gan_bc": adv_xy, "gan_cb": adv_yx, "cycle": cyc, "supervised": sup}
            total = total_bc_objective(parts, self.weights)
        self.opt_g.zero_grad(set_to_none=True)
        total.backward()
        self.opt_g.step()
        out = {k: float(torch.as_tensor(v).detach()) for k, v in parts.items()}
        out["total"] = total.item()
        return out


def _mean_dicts(ds: Sequence[dict[str, float]]) -> dict[str, float]:
    keys = ds[0].keys()
    return {k: float(np.mean([d[k] for d in ds])) for k in keys}


def _eval_epochs(cfg: TrainConfig, eval_interval: int | None) -> set[int]:
    step = eval_interval or cfg.eval_interval
    last = cfg.total_epochs - 1
    return {e for e in range(cfg.total_epochs) if (e + 1) % step == 0} | {last}


def _first_frames(data: DomainData, limit: int | None = None) -> np.ndarray:
    items = data.items if limit is None else data.items[:limit]
    return np.stack([x[0] for x in items])


def _record_checkpoint(trace, run_dir, epoch, model_id, modules, opts, scores) -> CheckpointRecord:
    if run_dir is not None:
        path = save_checkpoint(run_dir, epoch, modules, opts, scores)
        rec = CheckpointRecord(epoch, model_id, scores, path)
    else:
        rec = CheckpointRecord(epoch, model_id, scores, None, _snapshot(modules))
    trace.checkpoints.append(rec)
    return rec


def train_cyclegan_ab(
    bundle: ModelBundle,
    data_a: DomainData,
    data_b: DomainData,
    cfg: TrainConfig,
    weights: LossWeights = AB_WEIGHTS,
    val_a: DomainData | None = None,
    val_b: DomainData | None = None,
    extractor: Callable | None = None,
    run_dir=None,
    eval_interval: int | None = None,
) -> TrainTrace:
    """Unpaired A-B CycleGAN (adversarial + cycle + identity); KID tracked on validation."""
    for name in ("g_ab", "g_ba", "d_a", "d_b"):
        if getattr(bundle, name) is None:
            raise ValueError(f"bundle lacks {name}")
    if len(data_a) == 0 or len(data_b) == 0:
        raise ValueError("empty training domain")
    torch.manual_seed(cfg.seed)
    gan = _CycleGAN(bundle.g_ab, bundle.g_ba, bundle.d_a, bundle.d_b, cfg, weights, "identity")
    trace = TrainTrace("cyclegan_ab")
    evals = _eval_epochs(cfg, eval_interval)
    if val_a is not None and val_b is not None:
        extractor = extractor or metrics.FeatureExtractor()
        real_b_feats = extractor(_first_frames(val_b))
    for epoch in range(cfg.total_epochs):
        t0 = time.perf_counter()
        lr = lr_at_epoch(cfg, epoch)
        gan.set_lr(lr)
        steps = []
        for x, y, ids in unpaired_batches(data_a, data_b, cfg.seed, epoch, cfg.crop, cfg.batch_size):
            d = gan.discriminator_step(x, y)
            g = gan.generator_step(x, y, paired=False)
            steps.append({**d, **g})
            trace.sample_log.extend((epoch, "ab", i) for i in ids)
        rec = EpochRecord(epoch, lr, _mean_dicts(steps), time.perf_counter() - t0)
        if epoch in evals:
            scores = {}
            if val_a is not None and val_b is not None:
                fake_b = translate(bundle.g_ab, _first_frames(val_a))
                k = metrics.kid(extractor(fake_b), real_b_feats)
                scores = {"kid": k, "kid_x100": 100 * k}
            rec.metrics = scores
            _record_checkpoint(
                trace, run_dir, epoch, "cyclegan_ab",
                {"g_ab": bundle.g_ab, "g_ba": bundle.g_ba, "d_a": bundle.d_a, "d_b": bundle.d_b},
                {"generators": gan.opt_g, "discriminators": gan.opt_d}, scores,
            )
            log.info("ab epoch %d %s %s", epoch, rec.losses, scores)
        trace.epochs.append(rec)
    if run_dir is not None:
        trace.save(run_dir)
    return trace


def bc_validation_scores(g_bc, g_cb, val_b: DomainData, val_c: DomainData) -> dict[str, float]:
    """PSNR/SSIM (unit range) of G_BC vs short and G_CB vs long over validation pairs."""
    keys = paired_ids(val_b)
    longs = np.stack([resolve_pair(val_b, val_c, k)[0][0] for k in keys])
    shorts = np.stack([resolve_pair(val_b, val_c, k)[1][0] for k in keys])
    pred_s = denormalize(translate(g_bc, longs))
    pred_l = denormalize(translate(g_cb, shorts))
    p_bc, s_bc = metrics.evaluate_images(pred_s, denormalize(shorts))
    p_cb, s_cb = metrics.evaluate_images(pred_l, denormalize(longs))
    return {"psnr_bc": p_bc, "ssim_bc": s_bc, "psnr_cb": p_cb, "ssim_cb": s_cb}


def train_cyclegan_bc(
    bundle: ModelBundle,
    data_b: DomainData,
    data_c: DomainData,
    cfg: TrainConfig,
    weights: LossWeights = BC_WEIGHTS,
    val_b: DomainData | None = None,
    val_c: DomainData | None = None,
    run_dir=None,
    eval_interval: int | None = None,
) -> TrainTrace:
    """Semi-supervised B-C CycleGAN (adversarial + cycle + supervised L1).

    With ``weights.lambda2 == 0`` the pairing is discarded and B and C are
    drawn independently, i.e. plain unpaired CycleGAN training.
    """
    for name in ("g_bc", "g_cb", "d_b", "d_c"):
        if getattr(bundle, name) is None:
            raise ValueError(f"bundle lacks {name}")
    supervised = weights.lambda2 > 0
    if supervised and not paired_ids(data_b):
        raise ValueError("semi-supervised training needs paired B-C data")
    torch.manual_seed(cfg.seed)
    gan = _CycleGAN(bundle.g_bc, bundle.g_cb, bundle.d_b, bundle.d_c, cfg, weights, "supervised")
    trace = TrainTrace("cyclegan_bc" if supervised else "cyclegan_bc_unpaired")
    evals = _eval_epochs(cfg, eval_interval)
    for epoch in range(cfg.total_epochs):
        t0 = time.perf_counter()
        lr = lr_at_epoch(cfg, epoch)
        gan.set_lr(lr)
        steps = []
        if supervised:
            batches = paired_batches(data_b, data_c, cfg.seed, epoch, cfg.crop, cfg.batch_size)
        else:
            batches = unpaired_batches(data_b, data_c, cfg.seed, epoch, cfg.crop, cfg.batch_size)
        for x, y, ids in batches:
            d = gan.discriminator_step(x, y)
            g = gan.generator_step(x, y, paired=supervised)
            steps.append({**d, **g})
            trace.sample_log.extend((epoch, "bc", i) for i in ids)
        rec = EpochRecord(epoch, lr, _mean_dicts(steps), time.perf_counter() - t0)
        if epoch in evals:
            scores = {}
            if val_b is not None and val_c is not None:
                scores = bc_validation_scores(bundle.g_bc, bundle.g_cb, val_b, val_c)
            rec.metrics = scores
            _record_checkpoint(
                trace, run_dir, epoch, "cyclegan_bc",
                {"g_bc": bundle.g_bc, "g_cb": bundle.g_cb, "d_b": bundle.d_b, "d_c": bundle.d_c},
                {"generators": gan.opt_g, "discriminators": gan.opt_d}, scores,
            )
            log.info("bc epoch %d %s %s", epoch, rec.losses, scores)
        trace.epochs.append(rec)
    if run_dir is not None:
        trace.save(run_dir)
    return trace


def select_model_by_kid(trace: TrainTrace | Sequence[CheckpointRecord], key: str = "kid") -> CheckpointRecord:
    """Checkpoint with the lowest KID; ties go to the earliest epoch."""
    cps = trace.checkpoints if isinstance(trace, TrainTrace) else list(trace)
    scored = [c for c in cps if key in c.metrics]
    if not scored:
        raise ValueError("no checkpoint carries a KID score")
    return min(scored, key=lambda c: (c.metrics[key], c.epoch))


def restore(record: CheckpointRecord, modules: Mapping[str, nn.Module]) -> None:
    """Load a checkpoint's parameters into ``modules`` (in memory or from disk)."""
    if record.parameters is not None:
        for k, m in modules.items():
            m.load_state_dict(record.parameters[k])
        return
    if record.path is None:
        raise ValueError("checkpoint has neither in-memory parameters nor a path")
    from .tensorio import load_checkpoint

    load_checkpoint(Path(record.path).parent, record.epoch, modules)


# ---------------------------------------------------------------------------
# forward model


@dataclass
class ForwardData:
    """Short-exposure input clips linked to long-exposure targets.

    ``inputs`` items are (T, H, W, 3); a target is either a single frame
    (static clip, shared ground truth) or T frames (dynamic clip).
    """

    inputs: DomainData
    targets: DomainData
    static: bool

    def __post_init__(self):
        for i, k in enumerate(self.inputs.ids):
            t_id = self.inputs.pair_ids[i]
            if t_id is None or t_id not in self.targets.ids:
                raise ValueError(f"input clip {k} has no target")
            x, y = self.inputs.items[i], self.targets.get(t_id)
            if x.shape[1:] != y.shape[1:]:
                raise ValueError(f"clip {k}: input/target frame shapes differ")
            if len(y) not in (1, len(x)):
                raise ValueError(f"clip {k}: target must have 1 or {len(x)} frames")
            if len(x) < 2:
                raise ValueError(f"clip {k}: need at least two input frames")

    def __len__(self) -> int:
        return len(self.inputs)

    @property
    def ids(self) -> list[str]:
        return self.inputs.ids

    def target_for(self, i: int) -> np.ndarray:
        return self.targets.get(self.inputs.pair_ids[i])

    def subset(self, ids: Sequence[str]) -> "ForwardData":
        inputs = self.inputs.subset(ids)
        return ForwardData(inputs, self.targets.subset(list(dict.fromkeys(inputs.pair_ids))), self.static)


def forward_batches(data: ForwardData, seed: int, epoch: int, crop: int, batch_size: int):
    order = epoch_order(len(data), seed, epoch)
    rng = np.random.default_rng([seed, epoch, 17])
    for s in range(0, len(data), batch_size):
        xi, xj, gi, gj, ids = [], [], [], [], []
        for k in order[s : s + batch_size]:
            frames = data.inputs.items[k]
            target = data.target_for(k)
            _, _, i, j = sample_two_frames(VideoClip(frames, static_flag=data.static), int(rng.integers(2**31)))
            _, (y0, x0) = _crop(frames, rng, crop, t=0)
            win = np.s_[y0 : y0 + crop, x0 : x0 + crop]
            xi.append(frames[i][win])
            xj.append(frames[j][win])
            gi.append(target[i if len(target) > 1 else 0][win])
            gj.append(target[j if len(target) > 1 else 0][win])
            ids.append(data.ids[k])
        yield to_nchw(np.stack(xi)), to_nchw(np.stack(xj)), to_nchw(np.stack(gi)), to_nchw(np.stack(gj)), ids


def train_forward(
    bundle: ModelBundle,
    sources: Mapping[str, ForwardData],
    cfg: ForwardTrainConfig,
    phi: Callable | None = None,
    run_dir=None,
    evaluate: Callable[[nn.Module], dict[str, float]] | None = None,
) -> TrainTrace:
    """Run the staged plan (train real, fine-tune synthetic, fine-tune real).

    ``sources`` maps each stage's ``data_source`` key to its clips. Every
    stage draws only from its own source; the trace records stage
    boundaries and the clip ids seen in each epoch.
    """
    model = bundle.forward_model
    if model is None:
        raise ValueError("bundle has no forward model")
    plan = cfg.plan
    if plan.total_epochs > cfg.total_epochs:
        raise ValueError("plan needs more epochs than total_epochs")
    for st in plan.stages:
        if st.epochs and (st.data_source not in sources or len(sources[st.data_source]) == 0):
            raise ValueError(f"stage {st.stage_id}: data source {st.data_source!r} is empty")
    phi = phi or RandomFeatureNet(seed=cfg.seed)
    torch.manual_seed(cfg.seed)
    trace = TrainTrace("forward")
    opt = _adam(model.parameters(), cfg.lr_phase1, cfg.optimizer)
    epoch = 0
    for si, st in enumerate(plan.stages):
        trace.stage_boundaries.append((st.stage_id, epoch))
        if si and cfg.reset_optimizer:
            opt = _adam(model.parameters(), cfg.lr_phase1, cfg.optimizer)
        data = sources.get(st.data_source)
        for _ in range(st.epochs):
            t0 = time.perf_counter()
            lr = forward_lr_at_epoch(cfg, epoch)
            _set_lr(opt, lr)
            steps = []
            for xi, xj, gi, gj, ids in forward_batches(data, cfg.seed, epoch, cfg.crop, cfg.batch_size):
                pi, pj = model(xi), model(xj)
                terms = forward_losses(pi, pj, gi, gj, phi, data.static)
                total = terms.weighted(cfg.loss_weights)
                if not torch.isfinite(total):
                    from .losses import TrainingDivergence

                    raise TrainingDivergence(f"forward loss diverged at epoch {epoch}")
                opt.zero_grad(set_to_none=True)
                total.backward()
                opt.step()
                steps.append({"l_a": terms.l_a.item(), "l_b": terms.l_b.item(),
                              "l_c": terms.l_c.item(), "total": total.item()})
                trace.sample_log.extend((epoch, st.stage_id, i) for i in ids)
            rec = EpochRecord(epoch, lr, _mean_dicts(steps), time.perf_counter() - t0, stage=st.stage_id)
            trace.epochs.append(rec)
            epoch += 1
        if st.epochs:
            scores = evaluate(model) if evaluate is not None else {}
            trace.epochs[-1].metrics = scores
            _record_checkpoint(trace, run_dir, epoch - 1, f"forward_{st.stage_id}",
                               {"forward_model": model}, {"forward": opt}, scores)
    if run_dir is not None:
        trace.save(run_dir)
    return trace


def forward_predict(model: nn.Module, clip: np.ndarray) -> np.ndarray:
    """Run the forward model on every frame of a (T, H, W, 3) clip."""
    return translate(model, clip)


def evaluate_forward(model: nn.Module, data: ForwardData, frame_index: int = 4) -> dict[str, float]:
    """Image-quality protocol: frame ``frame_index`` (0-based) of each output vs its ground truth.

    Also reports temporal PSNR/SSIM over the full output clips.
    """
    preds, gts, tp, ts = [], [], [], []
    for k in range(len(data)):
        frames = data.inputs.items[k]
        if len(frames) <= frame_index:
            raise ValueError(f"clip {data.ids[k]} has {len(frames)} frames; protocol needs frame {frame_index + 1}")
        out = denormalize(forward_predict(model, frames))
        target = data.target_for(k)
        preds.append(out[frame_index])
        gts.append(denormalize(target[frame_index if len(target) > 1 else 0]))
        p, s = metrics.temporal_metrics(out)
        tp.append(p)
        ts.append(s)
    psnr, ssim = metrics.evaluate_images(preds, gts)
    return {"psnr": psnr, "ssim": ssim, "tpsnr": float(np.mean(tp)), "tssim": float(np.mean(ts))}


def parameters_equal(a: nn.Module, b_state: Mapping[str, torch.Tensor]) -> bool:
    return all(torch.equal(v, b_state[k]) for k, v in a.state_dict().items())

"""Training objectives for both CycleGANs and the forward model.

The adversarial terms use binary cross-entropy on PatchGAN logits, with the
non-saturating generator form. Every L1 term is a mean absolute error.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import torch
import torch.nn.functional as F

Generator = Callable[[torch.Tensor], torch.Tensor]


class TrainingDivergence(FloatingPointError):
    """A loss term became NaN or infinite."""


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 6.0  # cycle consistency
    lambda2: float = 6.0  # identity (A-B) or supervised (B-C)

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be nonnegative")


AB_WEIGHTS = LossWeights(6.0, 6.0)
BC_WEIGHTS = LossWeights(10.0, 10.0)


@dataclass(frozen=True)
class ForwardLossTerms:
    l_a: torch.Tensor
    l_b: torch.Tensor
    l_c: torch.Tensor

    @property
    def total(self) -> torch.Tensor:
        return self.l_a + self.l_b + self.l_c

    def weighted(self, weights=(1.0, 1.0, 1.0)) -> torch.Tensor:
        wa, wb, wc = weights
        return wa * self.l_a + wb * self.l_b + wc * self.l_c


def l1(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
    return (x - y).abs().mean()


def gan_loss_d(d_real_logits: torch.Tensor, d_fake_logits: torch.Tensor) -> torch.Tensor:
    """Discriminator BCE: real patches -> 1, fake patches -> 0, averaged per term."""
    if d_real_logits.shape != d_fake_logits.shape:
        raise ValueError(
            f"real/fake logit grids differ: {tuple(d_real_logits.shape)} vs {tuple(d_fake_logits.shape)}"
        )
    real = F.binary_cross_entropy_with_logits(d_real_logits, torch.ones_like(d_real_logits))
    fake = F.binary_cross_entropy_with_logits(d_fake_logits, torch.zeros_like(d_fake_logits))
    return real + fake


def gan_loss_g(d_fake_logits: torch.Tensor) -> torch.Tensor:
    return F.binary_cross_entropy_with_logits(d_fake_logits, torch.ones_like(d_fake_logits))


def cycle_loss(g_fwd: Generator, g_bwd: Generator, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """|g_fwd(g_bwd(y)) - y| + |g_bwd(g_fwd(x)) - x|; ``g_fwd`` maps x's domain to y's."""
    return l1(g_fwd(g_bwd(y)), y) + l1(g_bwd(g_fwd(x)), x)


def identity_loss(g_ab: Generator, g_ba: Generator, v: torch.Tensor, l: torch.Tensor) -> torch.Tensor:
    """|G_BA(V) - V| + |G_AB(L) - L| for V from A and L from B."""
    if v.numel() == 0 or l.numel() == 0:
        raise ValueError("identity loss needs samples from both domains")
    return l1(g_ba(v), v) + l1(g_ab(l), l)


def supervised_loss(g_bc: Generator, g_cb: Generator, long_: torch.Tensor, short: torch.Tensor,
                    paired: bool = True) -> torch.Tensor:
    """|G_BC(L) - S| + |G_CB(S) - L| over aligned pairs."""
    if not paired:
        raise ValueError("supervised loss needs a paired batch")
    return l1(g_bc(long_), short) + l1(g_cb(short), long_)


def _check_finite(parts: Mapping[str, torch.Tensor | float]) -> None:
    for name, v in parts.items():
        t = torch.as_tensor(v)
        if not torch.isfinite(t).all():
            raise TrainingDivergence(f"non-finite loss term {name!r}: {t}")


def total_ab_objective(parts: Mapping[str, torch.Tensor | float], weights: LossWeights = AB_WEIGHTS):
    """gan_ba + gan_ab + lambda1 * cycle + lambda2 * identity."""
    _check_finite(parts)
    return (
        parts["gan_ba"]
        + parts["gan_ab"]
        + weights.lambda1 * parts["cycle"]
        + weights.lambda2 * parts["identity"]
    )


def total_bc_objective(parts: Mapping[str, torch.Tensor | float], weights: LossWeights = BC_WEIGHTS):
    """gan_cb + gan_bc + lambda1 * cycle + lambda2 * supervised (no identity term)."""
    _check_finite(parts)
    return (
        parts["gan_cb"]
        + parts["gan_bc"]
        + weights.lambda1 * parts["cycle"]
        + weights.lambda2 * parts["supervised"]
    )


def forward_losses(pred_i, pred_j, gt_i, gt_j, phi: Callable, static: bool) -> ForwardLossTerms:
    """Three perceptual L1 terms on two predicted frames.

    Static clips share one ground truth: l_a ties the two predictions
    together, l_b and l_c tie each to the ground truth. For dynamic clips
    l_a compares feature differences so true motion is not penalized.
    """
    if pred_i.shape != pred_j.shape or gt_i.shape != gt_j.shape or pred_i.shape != gt_i.shape:
        raise ValueError("prediction and ground-truth shapes must agree")
    if static and not torch.equal(gt_i, gt_j):
        raise ValueError("static clip requires identical ground truths")
    fi, fj = phi(pred_i), phi(pred_j)
    gi = phi(gt_i)
    gj = gi if static else phi(gt_j)
    if static:
        l_a = l1(fi, fj)
    else:
        l_a = l1(fi - fj, gi - gj)
    return ForwardLossTerms(l_a, l1(fi, gi), l1(fj, gj))

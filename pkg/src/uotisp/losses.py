"""Scalar training objectives for the unbalanced-OT adversarial framework.

All functions operate on generic batched tensors, so the same objectives
drive both the image pipeline and the 2D point-cloud experiments.  Pixel
norms use a *mean* reduction over elements, which keeps loss magnitudes
resolution-invariant (the content-cost weight tau means the same thing
at every patch size).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import torch
from torch import Tensor

DEFAULT_PHI_CLAMP = 20.0


def _check_finite(t: Tensor, name: str) -> None:
    if not torch.isfinite(t).all():
        raise ValueError(f"{name} contains non-finite values")


@dataclass(frozen=True)
class PenaltyPair:
    """Convex, non-decreasing penalty pair relaxing the transport constraints.

    ``phi1`` weighs the fake-side term, ``phi2`` the real-side term of the
    potential objective.  Inputs are clamped at ``clamp_max`` before the
    nonlinearity so an exponential pair cannot overflow.
    """

    name: str
    phi1: Callable[[Tensor], Tensor]
    phi2: Callable[[Tensor], Tensor]
    clamp_max: float = DEFAULT_PHI_CLAMP


def phi_exp(t: Tensor, clamp_max: float = DEFAULT_PHI_CLAMP) -> Tensor:
    """exp(min(t, clamp_max)); the default marginal-relaxation penalty."""
    t = torch.as_tensor(t)
    _check_finite(t, "phi_exp input")
    return torch.exp(torch.clamp(t, max=clamp_max))


def phi_softplus(t: Tensor, clamp_max: float = DEFAULT_PHI_CLAMP) -> Tensor:
    """softplus(min(t, clamp_max)); a flatter alternative to the exp pair."""
    t = torch.as_tensor(t)
    _check_finite(t, "phi_softplus input")
    return torch.nn.functional.softplus(torch.clamp(t, max=clamp_max))


def phi_identity(t: Tensor, clamp_max: float = DEFAULT_PHI_CLAMP) -> Tensor:
    """min(t, clamp_max); recovers the classical dual pairing below the clamp."""
    t = torch.as_tensor(t)
    _check_finite(t, "phi_identity input")
    return torch.clamp(t, max=clamp_max)


def exp_pair(clamp_max: float = DEFAULT_PHI_CLAMP) -> PenaltyPair:
    return PenaltyPair("exp", lambda t: phi_exp(t, clamp_max), lambda t: phi_exp(t, clamp_max), clamp_max)


def softplus_pair(clamp_max: float = DEFAULT_PHI_CLAMP) -> PenaltyPair:
    return PenaltyPair("softplus", lambda t: phi_softplus(t, clamp_max), lambda t: phi_softplus(t, clamp_max), clamp_max)


def identity_pair(clamp_max: float = DEFAULT_PHI_CLAMP) -> PenaltyPair:
    return PenaltyPair("identity", lambda t: phi_identity(t, clamp_max), lambda t: phi_identity(t, clamp_max), clamp_max)


PENALTIES: dict[str, Callable[[], PenaltyPair]] = {
    "exp": exp_pair,
    "softplus": softplus_pair,
    "identity": identity_pair,
}


def resolve_penalty(name: str) -> PenaltyPair:
    try:
        return PENALTIES[name]()
    except KeyError:
        raise KeyError(f"unknown penalty {name!r}; available: {sorted(PENALTIES)}") from None


def hinge(t: Tensor) -> Tensor:
    """Margin loss h(t) = max(0, 1 + t) used by the expert committee."""
    t = torch.as_tensor(t)
    _check_finite(t, "hinge input")
    return torch.relu(1.0 + t)


def _reduce(per_sample: Tensor, reduction: str) -> Tensor:
    if reduction == "mean":
        return per_sample.mean()
    if reduction == "none":
        return per_sample
    raise ValueError(f"unknown reduction {reduction!r}")


def unpaired_cost(generated: Tensor, anchor: Tensor, tau: float, reduction: str = "mean") -> Tensor:
    """Content cost tau * ||generated - anchor||^2 (mean over elements).

    ``anchor`` is the fixed preprocessing of the raw input (demosaiced RGB)
    in the image setting, or the input itself for 2D point experiments.
    With ``reduction="none"`` returns one cost per sample, as consumed by
    the potential/transport objectives.
    """
    if generated.shape != anchor.shape:
        raise ValueError(f"shape mismatch: {tuple(generated.shape)} vs {tuple(anchor.shape)}")
    if tau < 0:
        raise ValueError("tau must be >= 0")
    per_sample = (generated - anchor).pow(2).flatten(1).mean(dim=1) * tau
    return _reduce(per_sample, reduction)


def paired_cost(generated: Tensor, target: Tensor, reduction: str = "mean") -> Tensor:
    """L1 cost against the ground-truth target (mean absolute difference)."""
    if generated.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(generated.shape)} vs {tuple(target.shape)}")
    per_sample = (generated - target).abs().flatten(1).mean(dim=1)
    return _reduce(per_sample, reduction)


def r1_penalty(potential_fn: Callable[[Tensor], Tensor], real_batch: Tensor, gamma: float) -> Tensor:
    """Gradient penalty (gamma/2) * E_y ||grad_y P(y)||^2 on real samples.

    The squared norm sums over all elements of one sample; the expectation
    averages over the batch.  Differentiable w.r.t. the potential's
    parameters (double backward).
    """
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    y = real_batch.detach().requires_grad_(True)
    scores = potential_fn(y)
    if scores.shape != (y.shape[0],):
        raise ValueError(f"potential must map a batch to one scalar per sample, got {tuple(scores.shape)}")
    if not scores.requires_grad:  # constant potential
        return torch.zeros(())
    (grad,) = torch.autograd.grad(scores.sum(), y, create_graph=True, allow_unused=True)
    if grad is None:
        return torch.zeros(())
    per_sample = grad.flatten(1).pow(2).sum(dim=1)
    return 0.5 * gamma * per_sample.mean()


def potential_objective(cost: Tensor, pot_fake: Tensor, pot_real: Tensor, penalty: PenaltyPair, r1: Tensor | float = 0.0) -> Tensor:
    """Potential-side objective:

        mean phi1(-c + P(T(x))) + mean phi2(-P(y)) + r1

    ``cost``, ``pot_fake``, ``pot_real`` are per-sample vectors; ``r1`` is
    the precomputed gradient penalty.  Minimized w.r.t. the potential's
    parameters while the transport network is frozen.
    """
    if cost.numel() == 0 or pot_real.numel() == 0:
        raise ValueError("empty batch")
    if cost.shape != pot_fake.shape:
        raise ValueError("cost and pot_fake must have matching batch shapes")
    fake_term = penalty.phi1(-cost + pot_fake).mean()
    real_term = penalty.phi2(-pot_real).mean()
    return fake_term + real_term + r1


def transport_objective(cost: Tensor, pot_fake: Tensor) -> Tensor:
    """Transport-side objective mean(c - P(T(x))), potential frozen."""
    if cost.numel() == 0:
        raise ValueError("empty batch")
    if cost.shape != pot_fake.shape:
        raise ValueError("cost and pot_fake must have matching batch shapes")
    return (cost - pot_fake).mean()


def expert_disc_objective(real_scores: Sequence[Tensor], fake_scores: Sequence[Tensor]) -> Tensor:
    """Committee discriminator loss, summed over experts:

        sum_i [ mean h(-D_i(y)) + mean h(D_i(T(x))) ]
    """
    if len(real_scores) != len(fake_scores):
        raise ValueError(f"expert count mismatch: {len(real_scores)} real vs {len(fake_scores)} fake")
    total = torch.zeros(())
    for real, fake in zip(real_scores, fake_scores):
        total = total + hinge(-real).mean() + hinge(fake).mean()
    return total


def expert_gen_objective(fake_scores: Sequence[Tensor]) -> Tensor:
    """Generator-side committee loss sum_i mean(-D_i(T(x))); 0 for an empty committee."""
    total = torch.zeros(())
    for fake in fake_scores:
        _check_finite(fake, "expert score")
        total = total + (-fake).mean()
    return total


def total_transport_objective(lt: Tensor, lexp: Tensor, lam: float) -> Tensor:
    """Total generator loss lt + lam * lexp."""
    return lt + lam * lexp


@dataclass
class LossBreakdown:
    """Per-step record of every scalar loss term and the composed totals."""

    cost_term: float = 0.0
    potential_term: float = 0.0
    expert_term: float = 0.0
    potential_objective: float = 0.0
    expert_disc_objective: float = 0.0
    r1_term: float = 0.0
    total_transport: float = 0.0

    FIELDS = (
        "cost_term",
        "potential_term",
        "expert_term",
        "potential_objective",
        "expert_disc_objective",
        "r1_term",
        "total_transport",
    )

    @staticmethod
    def compose_total(cost_term: float, potential_term: float, expert_term: float, lam: float) -> float:
        """The recomposition identity: (cost - potential) + lam * expert."""
        return (cost_term - potential_term) + lam * expert_term

    def as_dict(self) -> dict[str, float]:
        return {name: float(getattr(self, name)) for name in self.FIELDS}

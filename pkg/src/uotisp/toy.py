"""2D point-cloud verification bed for the unbalanced-OT core.

Small enough that the transport behavior is checkable against exact
discrete solvers: a linear-programming oracle for balanced OT and a
convex-QP oracle for the soft-marginal (unbalanced) relaxation.  The
neural A/B experiment plants an outlier cluster in the target cloud and
measures how much source mass each training mode sends there.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
import torch.nn as nn
from scipy.optimize import linprog
from torch import Tensor

from . import losses
from .training import TrainConfig, NonFiniteLossError, cosine_lr, _frozen, _index_stream

MAX_ORACLE_CELLS = 10_000


@dataclass(frozen=True)
class PointCloud:
    """Weighted 2D point set."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=np.float64)
        w = np.asarray(self.weights, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 1:
            raise ValueError("points must be an Nx2 array with N >= 1")
        if w.shape != (pts.shape[0],):
            raise ValueError("weights must match the point count")
        if not np.isfinite(pts).all() or not np.isfinite(w).all():
            raise ValueError("points and weights must be finite")
        if (w < 0).any():
            raise ValueError("weights must be non-negative")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, points: np.ndarray) -> "PointCloud":
        pts = np.asarray(points, dtype=np.float64)
        return cls(pts, np.full(pts.shape[0], 1.0 / pts.shape[0]))


@dataclass
class TransportPlan:
    """A discrete coupling with its realized marginals and objective value."""

    matrix: np.ndarray
    source_marginal: np.ndarray
    target_marginal: np.ndarray
    divergence_cost: float


def squared_cost_matrix(source: PointCloud, target: PointCloud) -> np.ndarray:
    diff = source.points[:, None, :] - target.points[None, :, :]
    return np.einsum("nmd,nmd->nm", diff, diff)


def _check_size(n: int, m: int) -> None:
    if n * m > MAX_ORACLE_CELLS:
        raise ValueError(f"oracle limited to {MAX_ORACLE_CELLS} plan cells, got {n * m}")


def discrete_ot_oracle(source: PointCloud, target: PointCloud) -> TransportPlan:
    """Exact balanced OT plan for quadratic cost via linear programming.

    Masses are normalized to probability vectors internally; the solved
    plan satisfies both marginals to better than 1e-9.
    """
    n, m = source.points.shape[0], target.points.shape[0]
    _check_size(n, m)
    a = source.weights / source.weights.sum()
    b = target.weights / target.weights.sum()
    cost = squared_cost_matrix(source, target)

    a_eq = np.zeros((n + m, n * m))
    for i in range(n):
        a_eq[i, i * m : (i + 1) * m] = 1.0
    for j in range(m):
        a_eq[n + j, j::m] = 1.0
    res = linprog(cost.ravel(), A_eq=a_eq, b_eq=np.concatenate([a, b]), bounds=(0, None), method="highs")
    if not res.success:
        raise RuntimeError(f"LP solver failed: {res.message}")
    plan = res.x.reshape(n, m)
    return TransportPlan(
        matrix=plan,
        source_marginal=plan.sum(axis=1),
        target_marginal=plan.sum(axis=0),
        divergence_cost=float((cost * plan).sum()),
    )


def discrete_uot_oracle(source: PointCloud, target: PointCloud, relaxation: float) -> TransportPlan:
    """Soft-marginal transport: cost + relaxation * squared marginal deviation.

    Solved as a convex QP over the nonnegative plan; as relaxation grows the
    solution converges to the balanced plan.  ``divergence_cost`` holds the
    full objective value (transport cost plus penalty).
    """
    import cvxpy as cp

    if relaxation <= 0:
        raise ValueError("relaxation must be positive")
    n, m = source.points.shape[0], target.points.shape[0]
    _check_size(n, m)
    cost = squared_cost_matrix(source, target)
    pi = cp.Variable((n, m), nonneg=True)
    penalty = cp.sum_squares(cp.sum(pi, axis=1) - source.weights) + cp.sum_squares(cp.sum(pi, axis=0) - target.weights)
    problem = cp.Problem(cp.Minimize(cp.sum(cp.multiply(cost, pi)) + relaxation * penalty))
    problem.solve(solver="CLARABEL")
    if pi.value is None:
        raise RuntimeError(f"QP solver failed: status {problem.status}")
    plan = np.maximum(pi.value, 0.0)
    return TransportPlan(
        matrix=plan,
        source_marginal=plan.sum(axis=1),
        target_marginal=plan.sum(axis=0),
        divergence_cost=float(problem.value),
    )


def make_outlier_clouds(
    n_source: int,
    n_target: int,
    outlier_fraction: float,
    seed: int,
    sigma: float = 1.0,
    outlier_distance: float = 20.0,
) -> dict:
    """Source cluster at the origin; target = same core + planted outlier cluster.

    The outlier cluster sits at ``outlier_distance * sigma`` on the x-axis
    with exactly floor(fraction * n_target) samples.
    """
    rng = np.random.default_rng(seed)
    source = rng.normal(0.0, sigma, size=(n_source, 2))
    n_out = int(math.floor(outlier_fraction * n_target))
    core = rng.normal(0.0, sigma, size=(n_target - n_out, 2))
    center = np.array([outlier_distance * sigma, 0.0])
    outliers = center + rng.normal(0.0, 0.5 * sigma, size=(n_out, 2))
    target = np.concatenate([core, outliers]) if n_out else core
    return {
        "source": source.astype(np.float32),
        "target": target.astype(np.float32),
        "core_center": np.zeros(2),
        "outlier_center": center,
        "n_outliers": n_out,
        "sigma": sigma,
    }


def outlier_mass_statistic(mapped: np.ndarray, core_center: np.ndarray, outlier_center: np.ndarray) -> float:
    """Fraction of mapped points whose nearest planted mode is the outlier cluster."""
    d_core = np.linalg.norm(mapped - core_center, axis=1)
    d_out = np.linalg.norm(mapped - outlier_center, axis=1)
    return float((d_out < d_core).mean())


class ResidualMLP(nn.Module):
    """x + f(x); the identity start suits near-identity transport maps."""

    def __init__(self, width: int, out_dim: int = 2, residual: bool = True):
        super().__init__()
        self.residual = residual and out_dim == 2
        self.net = nn.Sequential(
            nn.Linear(2, width), nn.LeakyReLU(0.2), nn.Linear(width, width), nn.LeakyReLU(0.2), nn.Linear(width, out_dim)
        )

    def forward(self, x: Tensor) -> Tensor:
        out = self.net(x)
        return x + out if self.residual else out


def _build_mlp(width: int, out_dim: int, seed: int, residual: bool) -> nn.Module:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return ResidualMLP(width, out_dim, residual)


@dataclass
class ToyResult:
    transport: nn.Module
    potential: nn.Module
    mapped: np.ndarray
    statistic: float
    config: TrainConfig


def train_toy_map(
    source: np.ndarray,
    target: np.ndarray,
    config: TrainConfig,
    core_center: np.ndarray,
    outlier_center: np.ndarray,
) -> ToyResult:
    """Train the 2D transport/potential pair and measure outlier attraction.

    Vector variant of the image loop: identity anchor in the content cost,
    committee disabled (the experts are image-specific), same alternating
    N:1 schedule, penalties and optimizer settings.
    """
    if config.experts_enabled:
        raise ValueError("the 2D bed runs without the expert committee")
    cfg = config
    src = torch.as_tensor(source, dtype=torch.float32)
    tgt = torch.as_tensor(target, dtype=torch.float32)
    transport = _build_mlp(cfg.transport_width, 2, cfg.seed, residual=True)
    potential = _build_mlp(cfg.potential_width, 1, cfg.seed + 1, residual=False)
    opt_t = torch.optim.Adam(transport.parameters(), lr=cfg.lr_transport, betas=(cfg.beta1, cfg.beta2))
    opt_p = torch.optim.Adam(potential.parameters(), lr=cfg.lr_potential, betas=(cfg.beta1, cfg.beta2))
    penalty = losses.resolve_penalty(cfg.penalty)

    def pot(x: Tensor) -> Tensor:
        return potential(x).squeeze(1)

    steps_per_epoch = max(src.shape[0] // cfg.batch, 1)
    for epoch in range(cfg.epochs):
        total = max(cfg.epochs, 1)
        for group in opt_t.param_groups:
            group["lr"] = cosine_lr(epoch, total, cfg.lr_transport, cfg.lr_transport * cfg.lr_min_ratio)
        for group in opt_p.param_groups:
            group["lr"] = cosine_lr(epoch, total, cfg.lr_potential, cfg.lr_potential * cfg.lr_min_ratio)
        x_stream = _toy_stream(src.shape[0], cfg.batch, cfg.seed, epoch, 0)
        y_stream = _toy_stream(tgt.shape[0], cfg.batch, cfg.seed, epoch, 1)
        for _ in range(steps_per_epoch):
            for _ in range(cfg.n_inner):
                bx = src[next(x_stream)]
                by = tgt[next(y_stream)]
                with torch.no_grad():
                    fake = transport(bx)
                cost = losses.unpaired_cost(fake, bx, cfg.tau, reduction="none")
                r1 = losses.r1_penalty(pot, by, cfg.gamma) if cfg.gamma > 0 else torch.zeros(())
                pot_fake = pot(fake)
                pot_real = pot(by)
                if cfg.adversarial == "hinge_gan":
                    loss_p = losses.hinge(-pot_real).mean() + losses.hinge(pot_fake).mean() + r1
                else:
                    loss_p = losses.potential_objective(cost, pot_fake, pot_real, penalty, r1)
                if not torch.isfinite(loss_p):
                    raise NonFiniteLossError("potential objective became non-finite")
                opt_p.zero_grad(set_to_none=True)
                loss_p.backward()
                opt_p.step()
            bx = src[next(x_stream)]
            fake = transport(bx)
            cost = losses.unpaired_cost(fake, bx, cfg.tau, reduction="none")
            with _frozen(potential):
                loss_t = losses.transport_objective(cost, pot(fake))
                if not torch.isfinite(loss_t):
                    raise NonFiniteLossError("transport objective became non-finite")
                opt_t.zero_grad(set_to_none=True)
                loss_t.backward()
                opt_t.step()

    with torch.no_grad():
        mapped = transport(src).numpy()
    stat = outlier_mass_statistic(mapped, np.asarray(core_center), np.asarray(outlier_center))
    return ToyResult(transport=transport, potential=potential, mapped=mapped, statistic=stat, config=cfg)


def _toy_stream(n: int, batch: int, seed: int, epoch: int, stream: int) -> Iterator[np.ndarray]:
    return _index_stream(n, batch, int(np.random.SeedSequence((seed, 31, epoch, stream)).generate_state(1)[0]))


def plot_toy_scatter(
    source: np.ndarray,
    target: np.ndarray,
    mapped: np.ndarray,
    outlier_center: np.ndarray,
    path: str | Path,
    title: str = "",
) -> Path:
    """Scatter of source, target, and mapped points with the planted outlier marked."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 5))
    ax.scatter(target[:, 0], target[:, 1], s=8, c="tab:red", alpha=0.4, label="target")
    ax.scatter(source[:, 0], source[:, 1], s=8, c="tab:blue", alpha=0.4, label="source")
    ax.scatter(mapped[:, 0], mapped[:, 1], s=8, c="tab:green", alpha=0.5, label="mapped")
    ax.scatter(*outlier_center, marker="x", s=120, c="black", label="outlier cluster")
    ax.legend(loc="best")
    ax.set_aspect("equal")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)

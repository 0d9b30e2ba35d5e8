"""Alternating adversarial training loop.

Per outer iteration the potential and the expert committee take N update
steps (same batch within an inner step), then the transport network takes
one.  Learning rates follow cosine annealing; the final transport weights
are the stochastic weight average of the last ``swa_last`` epoch-end
snapshots.  Everything is deterministic per (config, seed): samplers are
re-seeded per epoch from the run seed, so a checkpoint resume reproduces
the uninterrupted run bit for bit.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
import torch.nn as nn
from torch import Tensor

from . import data, imaging, losses, networks
from .losses import LossBreakdown

MODES = ("paired", "unpaired")
ADVERSARIAL = ("uot", "hinge_gan")


class NonFiniteLossError(RuntimeError):
    """Raised when a training objective stops being finite."""


@dataclass(frozen=True)
class TrainConfig:
    """Full declarative description of one training run."""

    mode: str = "unpaired"
    adversarial: str = "uot"
    penalty: str = "exp"
    n_inner: int = 2
    gamma: float = 1.5
    tau: float = 1e-3
    lam: float = 1.0
    lr_transport: float = 1e-4
    lr_potential: float = 2e-4
    lr_experts: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    epochs: int = 60
    swa_last: int = 10
    batch: int = 16
    experts_enabled: tuple[str, ...] = ("color", "structure", "frequency")
    seed: int = 0
    transport_arch: str = "unet_small"
    transport_width: int = 16
    transport_depth: int = 2
    potential_width: int = 16
    potential_depth: int = 3
    expert_width: int = 12
    color_pretrain_epochs: int = 3
    collapse_threshold: float = 1e-3
    lr_min_ratio: float = 0.01
    grad_clip: float = 10.0
    # bridges the mean-reduction loss convention to the sum convention:
    # presets set this to the element count so tau keeps its literal value
    cost_scale: float = 1.0

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.adversarial not in ADVERSARIAL:
            raise ValueError(f"adversarial must be one of {ADVERSARIAL}")
        if self.n_inner < 1:
            raise ValueError("n_inner must be >= 1")
        if self.swa_last > self.epochs or self.swa_last < 0 or self.epochs < 0:
            raise ValueError("need 0 <= swa_last <= epochs")
        if min(self.lr_transport, self.lr_potential, self.lr_experts) <= 0:
            raise ValueError("learning rates must be positive")
        if min(self.gamma, self.tau, self.lam) < 0:
            raise ValueError("gamma, tau and lam must be >= 0")
        unknown = set(self.experts_enabled) - set(networks.EXPERT_NAMES)
        if unknown:
            raise ValueError(f"unknown experts: {sorted(unknown)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["experts_enabled"] = list(self.experts_enabled)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["experts_enabled"] = tuple(d.get("experts_enabled", ()))
        return cls(**d)

    def hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def cosine_lr(step: int, total: int, lr0: float, lr_min: float) -> float:
    """lr_min + (lr0 - lr_min) * (1 + cos(pi * step / total)) / 2."""
    if step < 0 or step > total:
        raise ValueError(f"step must lie in [0, {total}], got {step}")
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * step / total))


def swa_finalize(snapshots: list[dict[str, Tensor]]) -> dict[str, Tensor]:
    """Element-wise mean of parameter snapshots (state dicts)."""
    if not snapshots:
        raise ValueError("need at least one snapshot")
    keys = snapshots[0].keys()
    for snap in snapshots[1:]:
        if snap.keys() != keys:
            raise ValueError("snapshots disagree on parameter names")
        for k in keys:
            if snap[k].shape != snapshots[0][k].shape:
                raise ValueError(f"shape mismatch for {k}")
    out = {}
    for k in keys:
        stacked = torch.stack([snap[k].to(torch.float64) for snap in snapshots])
        out[k] = stacked.mean(dim=0).to(snapshots[0][k].dtype)
    return out


def detect_mode_collapse(outputs: Tensor, threshold: float = 1e-3) -> tuple[bool, float]:
    """Flag vanishing output diversity across distinct inputs.

    The statistic is the mean pairwise per-element RMS distance between the
    outputs; the flag fires on strict ``statistic < threshold``.
    """
    if outputs.shape[0] < 8:
        raise ValueError(f"need >= 8 outputs, got {outputs.shape[0]}")
    flat = outputs.flatten(1)
    dists = torch.pdist(flat) / math.sqrt(flat.shape[1])
    stat = float(dists.mean())
    return stat < threshold, stat


def _clip_and_step(opt: torch.optim.Optimizer, max_norm: float) -> None:
    # exp-shaped objectives spike; a norm clip keeps spikes from blowing up
    # the weights without changing the stationary points
    if max_norm > 0:
        params = [p for group in opt.param_groups for p in group["params"]]
        torch.nn.utils.clip_grad_norm_(params, max_norm)
    opt.step()


@contextmanager
def _frozen(*modules: nn.Module):
    saved = []
    for m in modules:
        for p in m.parameters():
            saved.append((p, p.requires_grad))
            p.requires_grad_(False)
    try:
        yield
    finally:
        for p, flag in saved:
            p.requires_grad_(flag)


@dataclass
class TrainState:
    """Everything the step functions mutate."""

    config: TrainConfig
    transport: nn.Module
    potential: nn.Module
    committee: dict[str, nn.Module]
    opt_transport: torch.optim.Optimizer
    opt_potential: torch.optim.Optimizer
    opt_experts: torch.optim.Optimizer | None
    penalty: losses.PenaltyPair
    pending_inner: int = 0
    last_fragments: dict = field(default_factory=dict)


def build_state(config: TrainConfig, target_corpus: Tensor | None = None) -> TrainState:
    """Construct networks and optimizers for a fresh run.

    ``target_corpus`` is required when the color expert is enabled: its
    encoder is pretrained on the target sRGB images before the adversarial
    loop starts.
    """
    spec = networks.NetworkSpec
    transport = networks.build_transport(
        spec("transport", config.transport_width, config.transport_depth, config.seed), config.transport_arch
    )
    potential = networks.build_potential(
        spec("potential", config.potential_width, config.potential_depth, config.seed + 1)
    )
    frozen_encoder = None
    if "color" in config.experts_enabled:
        if target_corpus is None:
            raise ValueError("color expert enabled but no target corpus given for pretraining")
        frozen_encoder, _ = networks.pretrain_color_encoder(
            target_corpus, epochs=config.color_pretrain_epochs, width=config.expert_width, seed=config.seed + 2
        )
    committee = networks.build_committee(
        config.experts_enabled, width=config.expert_width, seed=config.seed + 3, frozen_color_encoder=frozen_encoder
    )
    opt_t = torch.optim.Adam(transport.parameters(), lr=config.lr_transport, betas=(config.beta1, config.beta2))
    opt_p = torch.optim.Adam(potential.parameters(), lr=config.lr_potential, betas=(config.beta1, config.beta2))
    trainable = networks.trainable_parameters(committee)
    opt_e = (
        torch.optim.Adam(trainable, lr=config.lr_experts, betas=(config.beta1, config.beta2)) if trainable else None
    )
    return TrainState(
        config=config,
        transport=transport,
        potential=potential,
        committee=committee,
        opt_transport=opt_t,
        opt_potential=opt_p,
        opt_experts=opt_e,
        penalty=losses.resolve_penalty(config.penalty),
    )


def _cost_per_sample(state: TrainState, fake: Tensor, batch_x: Tensor, batch_y: Tensor | None) -> Tensor:
    cfg = state.config
    if cfg.mode == "paired":
        if batch_y is None:
            raise ValueError("paired mode needs the ground-truth batch")
        return losses.paired_cost(fake, batch_y, reduction="none") * cfg.cost_scale
    anchor = imaging.demosaic_bilinear(batch_x)
    return losses.unpaired_cost(fake, anchor, cfg.tau, reduction="none") * cfg.cost_scale


def _check_finite(value: Tensor, what: str) -> None:
    if not torch.isfinite(value).all():
        raise NonFiniteLossError(f"{what} became non-finite")


def potential_step(batch_x: Tensor, batch_y: Tensor, state: TrainState, fake: Tensor | None = None) -> dict:
    """One optimizer step on the potential network; transport frozen."""
    cfg = state.config
    if fake is None:
        with torch.no_grad():
            fake = state.transport(batch_x)
    fake = fake.detach()
    cost = _cost_per_sample(state, fake, batch_x, batch_y)
    r1 = losses.r1_penalty(state.potential, batch_y, cfg.gamma) if cfg.gamma > 0 else torch.zeros(())
    pot_fake = state.potential(fake)
    pot_real = state.potential(batch_y)
    _check_finite(pot_fake, "potential score on fakes")
    _check_finite(pot_real, "potential score on reals")
    if cfg.adversarial == "hinge_gan":
        loss = losses.hinge(-pot_real).mean() + losses.hinge(pot_fake).mean() + r1
    else:
        loss = losses.potential_objective(cost, pot_fake, pot_real, state.penalty, r1)
    _check_finite(loss, "potential objective")
    state.opt_potential.zero_grad(set_to_none=True)
    loss.backward()
    _clip_and_step(state.opt_potential, cfg.grad_clip)
    fragment = {"potential_objective": float(loss.detach()), "r1_term": float(r1.detach())}
    state.last_fragments.update(fragment)
    return fragment


def experts_step(batch_x: Tensor, batch_y: Tensor, state: TrainState, fake: Tensor | None = None) -> dict:
    """One optimizer step on the trainable committee parameters."""
    if not state.committee:
        fragment = {"expert_disc_objective": 0.0}
        state.last_fragments.update(fragment)
        state.pending_inner += 1
        return fragment
    if fake is None:
        with torch.no_grad():
            fake = state.transport(batch_x)
    fake = fake.detach()
    real_scores = networks.committee_score(state.committee, batch_y).scores
    fake_scores = networks.committee_score(state.committee, fake).scores
    loss = losses.expert_disc_objective(real_scores, fake_scores)
    _check_finite(loss, "expert discriminator objective")
    state.opt_experts.zero_grad(set_to_none=True)
    if loss.requires_grad:
        loss.backward()
        _clip_and_step(state.opt_experts, state.config.grad_clip)
    fragment = {"expert_disc_objective": float(loss.detach())}
    state.last_fragments.update(fragment)
    state.pending_inner += 1
    return fragment


def transport_step(batch_x: Tensor, state: TrainState, batch_y: Tensor | None = None) -> LossBreakdown:
    """One optimizer step on the transport network; emits the full breakdown."""
    cfg = state.config
    if state.pending_inner != cfg.n_inner:
        raise RuntimeError(
            f"transport_step requires exactly {cfg.n_inner} inner iterations, saw {state.pending_inner}"
        )
    state.pending_inner = 0
    fake = state.transport(batch_x)
    cost = _cost_per_sample(state, fake, batch_x, batch_y)
    with _frozen(state.potential, *state.committee.values()):
        pot_fake = state.potential(fake)
        fake_scores = networks.committee_score(state.committee, fake).scores
        lt = losses.transport_objective(cost, pot_fake)
        lexp = losses.expert_gen_objective(fake_scores)
        total = losses.total_transport_objective(lt, lexp, cfg.lam)
        _check_finite(total, "transport objective")
        state.opt_transport.zero_grad(set_to_none=True)
        total.backward()
        _clip_and_step(state.opt_transport, cfg.grad_clip)
    cost_term = float(cost.detach().mean())
    potential_term = float(pot_fake.detach().mean())
    expert_term = float(lexp.detach())
    return LossBreakdown(
        cost_term=cost_term,
        potential_term=potential_term,
        expert_term=expert_term,
        potential_objective=state.last_fragments.get("potential_objective", 0.0),
        expert_disc_objective=state.last_fragments.get("expert_disc_objective", 0.0),
        r1_term=state.last_fragments.get("r1_term", 0.0),
        total_transport=LossBreakdown.compose_total(cost_term, potential_term, expert_term, cfg.lam),
    )


@dataclass
class Checkpoint:
    """Serializable snapshot: parameters, optimizer states, progress, logs."""

    config: TrainConfig
    epoch: int
    transport_state: dict
    potential_state: dict
    committee_state: dict
    color_encoder_state: dict | None
    optimizer_states: dict
    swa_snapshots: list
    swa_transport_state: dict | None
    log_rows: list
    collapse_log: list
    metrics: dict = field(default_factory=dict)

    def inference_transport_state(self) -> dict:
        return self.swa_transport_state if self.swa_transport_state is not None else self.transport_state

    def build_transport(self) -> nn.Module:
        cfg = self.config
        net = networks.build_transport(
            networks.NetworkSpec("transport", cfg.transport_width, cfg.transport_depth, cfg.seed),
            cfg.transport_arch,
        )
        net.load_state_dict(self.inference_transport_state())
        net.eval()
        return net


def save_checkpoint(ckpt: Checkpoint, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "config": ckpt.config.to_dict(),
        "config_hash": ckpt.config.hash(),
        "epoch": ckpt.epoch,
        "metrics": ckpt.metrics,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    torch.save(ckpt.transport_state, out / "transport.pt")
    torch.save(ckpt.potential_state, out / "potential.pt")
    torch.save(ckpt.committee_state, out / "committee.pt")
    torch.save(
        {
            "color_encoder": ckpt.color_encoder_state,
            "optimizers": ckpt.optimizer_states,
            "swa_snapshots": ckpt.swa_snapshots,
            "swa_transport": ckpt.swa_transport_state,
            "log_rows": ckpt.log_rows,
            "collapse_log": ckpt.collapse_log,
        },
        out / "training_state.pt",
    )
    write_loss_log(ckpt.log_rows, out / "loss_log.csv")
    return out


def load_checkpoint(in_dir: str | Path) -> Checkpoint:
    src = Path(in_dir)
    manifest = json.loads((src / "manifest.json").read_text())
    extra = torch.load(src / "training_state.pt", weights_only=False)
    return Checkpoint(
        config=TrainConfig.from_dict(manifest["config"]),
        epoch=manifest["epoch"],
        transport_state=torch.load(src / "transport.pt", weights_only=True),
        potential_state=torch.load(src / "potential.pt", weights_only=True),
        committee_state=torch.load(src / "committee.pt", weights_only=True),
        color_encoder_state=extra["color_encoder"],
        optimizer_states=extra["optimizers"],
        swa_snapshots=extra["swa_snapshots"],
        swa_transport_state=extra["swa_transport"],
        log_rows=extra["log_rows"],
        collapse_log=extra["collapse_log"],
        metrics=manifest.get("metrics", {}),
    )


LOG_COLUMNS = ("epoch", "step") + LossBreakdown.FIELDS + ("lr_transport",)


def write_loss_log(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)


def _epoch_seed(seed: int, epoch: int, stream: int) -> int:
    return int(np.random.SeedSequence((seed, 977, epoch, stream)).generate_state(1)[0])


def _index_stream(n: int, batch: int, seed: int) -> Iterator[np.ndarray]:
    rng = np.random.default_rng(seed)
    while True:
        perm = rng.permutation(n)
        for start in range(0, n - batch + 1, batch):
            yield perm[start : start + batch]


def _collapse_probe(state: TrainState, corpus: data.Corpus) -> tuple[bool, float]:
    n_probe = min(16, len(corpus))
    with torch.no_grad():
        outputs = state.transport(corpus.raw[:n_probe])
    return detect_mode_collapse(outputs, state.config.collapse_threshold)


def _snapshot(module: nn.Module) -> dict:
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def _make_checkpoint(state: TrainState, epoch: int, swa_snaps: list, swa_state: dict | None, log_rows: list, collapse_log: list) -> Checkpoint:
    committee_state = {name: _snapshot(m) for name, m in state.committee.items()}
    color_state = None
    if "color" in state.committee:
        color_state = {k: v.detach().clone() for k, v in state.committee["color"].encoder.state_dict().items()}
    return Checkpoint(
        config=state.config,
        epoch=epoch,
        transport_state=_snapshot(state.transport),
        potential_state=_snapshot(state.potential),
        committee_state=committee_state,
        color_encoder_state=color_state,
        optimizer_states={
            "transport": state.opt_transport.state_dict(),
            "potential": state.opt_potential.state_dict(),
            "experts": state.opt_experts.state_dict() if state.opt_experts else None,
        },
        swa_snapshots=list(swa_snaps),
        swa_transport_state=swa_state,
        log_rows=list(log_rows),
        collapse_log=list(collapse_log),
        metrics={
            "last_breakdown": log_rows[-1] if log_rows else None,
            "collapse_ever": any(entry["flag"] for entry in collapse_log),
        },
    )


def _restore_state(state: TrainState, ckpt: Checkpoint) -> None:
    state.transport.load_state_dict(ckpt.transport_state)
    state.potential.load_state_dict(ckpt.potential_state)
    for name, m in state.committee.items():
        m.load_state_dict(ckpt.committee_state[name])
    state.opt_transport.load_state_dict(ckpt.optimizer_states["transport"])
    state.opt_potential.load_state_dict(ckpt.optimizer_states["potential"])
    if state.opt_experts and ckpt.optimizer_states["experts"]:
        state.opt_experts.load_state_dict(ckpt.optimizer_states["experts"])


def _set_lr(opt: torch.optim.Optimizer | None, lr: float) -> None:
    if opt is None:
        return
    for group in opt.param_groups:
        group["lr"] = lr


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log_rows: list
    collapse_log: list

    @property
    def collapsed(self) -> bool:
        return any(entry["flag"] for entry in self.collapse_log)


def train(
    config: TrainConfig,
    corpus: data.Corpus,
    out_dir: str | Path | None = None,
    resume_from: Checkpoint | str | Path | None = None,
    stop_after_epoch: int | None = None,
) -> TrainResult:
    """Run the full alternating loop on a generated corpus.

    ``resume_from`` continues a run from a saved checkpoint and reproduces
    the uninterrupted run exactly; ``stop_after_epoch`` halts early at an
    epoch boundary (producing a resumable checkpoint).  On a non-finite
    loss the current state is checkpointed (when ``out_dir`` is given) and
    the error re-raised.  Collapse detection only records; the run
    continues.
    """
    cfg = config
    state = build_state(cfg, target_corpus=corpus.srgb if "color" in cfg.experts_enabled else None)
    start_epoch = 0
    log_rows: list[dict] = []
    collapse_log: list[dict] = []
    swa_snaps: list[dict] = []
    if resume_from is not None:
        ckpt = resume_from if isinstance(resume_from, Checkpoint) else load_checkpoint(resume_from)
        if ckpt.config.hash() != cfg.hash():
            raise ValueError("checkpoint config does not match the requested config")
        _restore_state(state, ckpt)
        start_epoch = ckpt.epoch
        log_rows = list(ckpt.log_rows)
        collapse_log = list(ckpt.collapse_log)
        swa_snaps = list(ckpt.swa_snapshots)

    steps_per_epoch = len(corpus) // cfg.batch
    if cfg.epochs > 0 and steps_per_epoch < 1:
        raise ValueError("corpus smaller than one batch")

    mode_paired = cfg.mode == "paired"
    try:
        for epoch in range(start_epoch, cfg.epochs):
            total = max(cfg.epochs, 1)
            _set_lr(state.opt_transport, cosine_lr(epoch, total, cfg.lr_transport, cfg.lr_transport * cfg.lr_min_ratio))
            _set_lr(state.opt_potential, cosine_lr(epoch, total, cfg.lr_potential, cfg.lr_potential * cfg.lr_min_ratio))
            _set_lr(state.opt_experts, cosine_lr(epoch, total, cfg.lr_experts, cfg.lr_experts * cfg.lr_min_ratio))

            if mode_paired:
                joint = _index_stream(len(corpus), cfg.batch, _epoch_seed(cfg.seed, epoch, 0))
                x_idx = joint
                y_idx = None
            else:
                x_idx = _index_stream(len(corpus), cfg.batch, _epoch_seed(cfg.seed, epoch, 0))
                y_idx = _index_stream(len(corpus.srgb), cfg.batch, _epoch_seed(cfg.seed, epoch, 1))

            for step in range(steps_per_epoch):
                for _ in range(cfg.n_inner):
                    xi = next(x_idx)
                    bx = corpus.raw[xi]
                    by = corpus.srgb[xi] if mode_paired else corpus.srgb[next(y_idx)]
                    with torch.no_grad():
                        fake = state.transport(bx)
                    potential_step(bx, by, state, fake=fake)
                    experts_step(bx, by, state, fake=fake)
                xi = next(x_idx)
                bx = corpus.raw[xi]
                by = corpus.srgb[xi] if mode_paired else None
                breakdown = transport_step(bx, state, batch_y=by)
                row = {"epoch": epoch, "step": step, **breakdown.as_dict(),
                       "lr_transport": state.opt_transport.param_groups[0]["lr"]}
                log_rows.append(row)

            if len(corpus) >= 8:
                flag, stat = _collapse_probe(state, corpus)
                collapse_log.append({"epoch": epoch, "stat": stat, "flag": bool(flag)})
            if epoch >= cfg.epochs - cfg.swa_last:
                swa_snaps.append(_snapshot(state.transport))
            if stop_after_epoch is not None and epoch + 1 >= stop_after_epoch and epoch + 1 < cfg.epochs:
                partial = _make_checkpoint(state, epoch + 1, swa_snaps, None, log_rows, collapse_log)
                if out_dir is not None:
                    save_checkpoint(partial, out_dir)
                return TrainResult(checkpoint=partial, log_rows=log_rows, collapse_log=collapse_log)
    except NonFiniteLossError:
        if out_dir is not None:
            aborted = _make_checkpoint(state, epoch, swa_snaps, None, log_rows, collapse_log)
            aborted.metrics["aborted"] = True
            save_checkpoint(aborted, out_dir)
        raise

    swa_state = swa_finalize(swa_snaps) if swa_snaps else None
    final = _make_checkpoint(state, cfg.epochs, swa_snaps, swa_state, log_rows, collapse_log)
    if out_dir is not None:
        save_checkpoint(final, out_dir)
    return TrainResult(checkpoint=final, log_rows=log_rows, collapse_log=collapse_log)

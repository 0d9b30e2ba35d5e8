"""Network zoo: transport backbone, potential, and the expert committee.

All builders are seed-deterministic (equal spec -> bit-identical initial
parameters) and buildable for any input size that is a multiple of 16 in
[32, 128].  None of the score networks use batch statistics, so scores
are strictly per-sample.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from . import imaging

EXPERT_NAMES = ("color", "structure", "frequency")


@dataclass(frozen=True)
class NetworkSpec:
    kind: str
    width: int = 16
    depth: int = 2
    seed: int = 0

    def __post_init__(self) -> None:
        if self.width < 1 or self.depth < 1:
            raise ValueError("width and depth must be >= 1")


def _seeded(seed: int, build: Callable[[], nn.Module]) -> nn.Module:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return build()


def _conv(cin: int, cout: int, k: int = 3, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2)


def _sn(module: nn.Module) -> nn.Module:
    # spectral norm bounds the experts' Lipschitz constant, the usual
    # companion of the hinge objective; keeps their generator gradients O(1)
    return nn.utils.spectral_norm(module)


def clamp01_ste(x: Tensor) -> Tensor:
    """Clamped linear ramp to [0, 1] with a straight-through backward.

    The forward pass is an exact clamp; the backward pass is the identity,
    so pixels pushed onto the boundary by the adversary keep a recovery
    gradient (a hard clamp would freeze them, a sigmoid would vanish).
    """
    return x + (x.clamp(0.0, 1.0) - x).detach()


class TransportUNet(nn.Module):
    """Small encoder-decoder with skip connections and a 2x upsampling head.

    Maps packed raw ``B x 4 x H/2 x W/2`` to sRGB ``B x 3 x H x W``.  The
    output range squash is a clamped linear ramp (full gradient everywhere,
    unlike a sigmoid); the head bias starts at mid-range so fresh networks
    do not sit on the clamp boundary.
    """

    def __init__(self, width: int = 16, depth: int = 2):
        super().__init__()
        w = width
        self.stem = nn.Sequential(_conv(4, w), nn.LeakyReLU(0.2), _conv(w, w), nn.LeakyReLU(0.2))
        downs, ups = [], []
        ch = w
        for _ in range(depth - 1):
            downs.append(
                nn.Sequential(nn.Conv2d(ch, ch * 2, 4, 2, 1), nn.LeakyReLU(0.2), _conv(ch * 2, ch * 2), nn.LeakyReLU(0.2))
            )
            ups.append(nn.Sequential(_conv(ch * 2, ch), nn.LeakyReLU(0.2)))
            ch *= 2
        self.downs = nn.ModuleList(downs)
        self.ups = nn.ModuleList(ups)
        self.fuse = nn.ModuleList([nn.Sequential(_conv(2 * (ch // 2**(i + 1)), ch // 2**(i + 1)), nn.LeakyReLU(0.2)) for i in range(depth - 1)])
        self.head = nn.Sequential(_conv(w, w), nn.LeakyReLU(0.2), _conv(w, 3))
        with torch.no_grad():
            self.head[-1].bias.fill_(0.5)

    def forward(self, raw: Tensor) -> Tensor:
        if raw.dim() != 4 or raw.shape[1] != 4:
            raise ValueError(f"expected Bx4xhxw raw batch, got {tuple(raw.shape)}")
        x = self.stem(raw)
        skips = [x]
        for down in self.downs:
            x = down(x)
            skips.append(x)
        for i, up in enumerate(reversed(self.ups)):
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = up(x)
            skip = skips[len(self.downs) - 1 - i]
            x = self.fuse[i](torch.cat([x, skip], dim=1))
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        return clamp01_ste(self.head(x))


class PotentialNet(nn.Module):
    """Convolutional encoder with a small MLP head -> one scalar per sample."""

    def __init__(self, width: int = 16, depth: int = 3):
        super().__init__()
        layers: list[nn.Module] = []
        ch = 3
        for i in range(depth):
            nxt = width * 2**i
            layers += [nn.Conv2d(ch, nxt, 4, 2, 1), nn.LeakyReLU(0.2)]
            ch = nxt
        self.encoder = nn.Sequential(*layers)
        self.mlp = nn.Sequential(nn.Linear(ch, ch), nn.LeakyReLU(0.2), nn.Linear(ch, 1))

    def forward(self, srgb: Tensor) -> Tensor:
        if srgb.dim() != 4 or srgb.shape[1] != 3:
            raise ValueError(f"expected Bx3xHxW batch, got {tuple(srgb.shape)}")
        feats = self.encoder(srgb).mean(dim=(2, 3))
        return self.mlp(feats).squeeze(1)


class ColorizationNet(nn.Module):
    """Predicts chroma (a*, b*)/110 from L*/100; its encoder seeds the color expert."""

    def __init__(self, width: int = 12):
        super().__init__()
        w = width
        self.encoder = nn.Sequential(
            nn.Conv2d(1, w, 3, 2, 1), nn.LeakyReLU(0.2), nn.Conv2d(w, 2 * w, 3, 2, 1), nn.LeakyReLU(0.2)
        )
        self.decoder = nn.Sequential(
            nn.Upsample(scale_factor=2, mode="nearest"), _conv(2 * w, w), nn.LeakyReLU(0.2),
            nn.Upsample(scale_factor=2, mode="nearest"), _conv(w, w), nn.LeakyReLU(0.2), _conv(w, 2),
        )

    def forward(self, lum: Tensor) -> Tensor:
        return self.decoder(self.encoder(lum))


def _spatial_stats(x: Tensor) -> Tensor:
    # mean and a smooth std per channel; gradient-safe at zero variance
    flat = x.flatten(2)
    mean = flat.mean(dim=2)
    var = flat.var(dim=2, unbiased=False)
    return torch.cat([mean, torch.sqrt(var + 1e-8)], dim=1)


class ColorExpert(nn.Module):
    """Judges color plausibility: frozen luminance encoder + chroma statistics.

    The pretrained encoder reads L* only; pooled (a*, b*) moments join its
    features in a trainable fusion head, so the verdict can penalize chroma
    while conditioning on structure.
    """

    def __init__(self, frozen_encoder: nn.Module, width: int = 12):
        super().__init__()
        self.encoder = frozen_encoder
        for p in self.encoder.parameters():
            p.requires_grad_(False)
        feat_ch = _encoder_channels(frozen_encoder)
        self.fusion = nn.Sequential(_sn(nn.Linear(feat_ch + 4, width)), nn.LeakyReLU(0.2), _sn(nn.Linear(width, 1)))

    def forward(self, srgb: Tensor) -> Tensor:
        lab = imaging.rgb_to_lab(srgb)
        lum = lab[:, 0:1] / 100.0
        chroma = lab[:, 1:3] / 110.0
        feats = self.encoder(lum).mean(dim=(2, 3))
        fused = torch.cat([feats, _spatial_stats(chroma)], dim=1)
        return self.fusion(fused).squeeze(1)


def _encoder_channels(encoder: nn.Module) -> int:
    convs = [m for m in encoder.modules() if isinstance(m, nn.Conv2d)]
    if not convs:
        raise ValueError("encoder has no conv layers")
    return convs[-1].out_channels


class StructureExpert(nn.Module):
    """Patch classifier shared across full, 1/2 and 1/4 resolution.

    Per-patch logits are averaged within and across scales into one scalar
    per sample; each patch sees an 18x18 receptive field at its scale.
    """

    MIN_INPUT = 32

    def __init__(self, width: int = 16):
        super().__init__()
        w = width
        self.classifier = nn.Sequential(
            _sn(nn.Conv2d(3, w, 4, 2, 1)), nn.LeakyReLU(0.2),
            _sn(nn.Conv2d(w, 2 * w, 4, 2, 1)), nn.LeakyReLU(0.2),
            _sn(_conv(2 * w, 1)),
        )

    def forward(self, srgb: Tensor) -> Tensor:
        if min(srgb.shape[-2:]) < self.MIN_INPUT:
            raise ValueError(f"structure expert needs inputs >= {self.MIN_INPUT}px, got {tuple(srgb.shape[-2:])}")
        scores = []
        x = srgb
        for _ in range(3):
            scores.append(self.classifier(x).mean(dim=(1, 2, 3)))
            x = F.avg_pool2d(x, 2)
        return torch.stack(scores, dim=0).mean(dim=0)


class FrequencyExpert(nn.Module):
    """Scores the centered log-magnitude spectrum of the grayscale image.

    The spectrum is standardized per sample before the conv stack, which
    keeps the unnormalized DFT scale out of the classifier.
    """

    def __init__(self, width: int = 12):
        super().__init__()
        w = width
        self.classifier = nn.Sequential(
            _sn(nn.Conv2d(1, w, 3, 2, 1)), nn.LeakyReLU(0.2), _sn(nn.Conv2d(w, 2 * w, 3, 2, 1)), nn.LeakyReLU(0.2)
        )
        self.head = _sn(nn.Linear(2 * w, 1))

    def forward(self, srgb: Tensor) -> Tensor:
        spec = imaging.fft_log_magnitude(imaging.to_grayscale(srgb))
        mu = spec.mean(dim=(2, 3), keepdim=True)
        sd = torch.sqrt(spec.var(dim=(2, 3), keepdim=True, unbiased=False) + 1e-8)
        feats = self.classifier((spec - mu) / sd).mean(dim=(2, 3))
        return self.head(feats).squeeze(1)


def build_transport(spec: NetworkSpec, arch: str = "unet_small") -> nn.Module:
    try:
        builder = TRANSPORT_REGISTRY[arch]
    except KeyError:
        raise KeyError(f"unknown transport arch {arch!r}; available: {sorted(TRANSPORT_REGISTRY)}") from None
    return _seeded(spec.seed, lambda: builder(spec))


def build_potential(spec: NetworkSpec) -> nn.Module:
    return _seeded(spec.seed, lambda: PotentialNet(spec.width, spec.depth))


def build_color_expert(frozen_encoder: nn.Module, spec: NetworkSpec) -> nn.Module:
    return _seeded(spec.seed, lambda: ColorExpert(frozen_encoder, spec.width))


def build_structure_expert(spec: NetworkSpec) -> nn.Module:
    return _seeded(spec.seed, lambda: StructureExpert(spec.width))


def build_frequency_expert(spec: NetworkSpec) -> nn.Module:
    return _seeded(spec.seed, lambda: FrequencyExpert(spec.width))


TRANSPORT_REGISTRY: dict[str, Callable[[NetworkSpec], nn.Module]] = {
    "unet_small": lambda spec: TransportUNet(spec.width, spec.depth),
}


def pretrain_color_encoder(
    corpus: Tensor,
    epochs: int,
    width: int = 12,
    seed: int = 0,
    batch: int = 16,
    lr: float = 2e-3,
) -> tuple[nn.Module, list[float]]:
    """Train chroma-from-luminance regression and return the frozen encoder.

    Returns ``(encoder, history)`` where ``history[k]`` is the validation
    L2 after k epochs (index 0 = before training).  Deterministic per seed.
    """
    import numpy as np

    n = corpus.shape[0]
    if n < 64:
        raise ValueError(f"colorization pretraining needs >= 64 images, got {n}")
    net = _seeded(seed, lambda: ColorizationNet(width))
    opt = torch.optim.Adam(net.parameters(), lr=lr)

    lab = imaging.rgb_to_lab(corpus)
    lum = lab[:, 0:1] / 100.0
    chroma = lab[:, 1:3] / 110.0
    n_val = max(8, n // 10)
    val_l, val_c = lum[-n_val:], chroma[-n_val:]
    train_l, train_c = lum[:-n_val], chroma[:-n_val]

    def val_loss() -> float:
        with torch.no_grad():
            return float(F.mse_loss(net(val_l), val_c))

    history = [val_loss()]
    for epoch in range(epochs):
        order = np.random.default_rng(np.random.SeedSequence((seed, epoch))).permutation(train_l.shape[0])
        for start in range(0, len(order) - batch + 1, batch):
            idx = order[start : start + batch]
            opt.zero_grad(set_to_none=True)
            loss = F.mse_loss(net(train_l[idx]), train_c[idx])
            loss.backward()
            opt.step()
        history.append(val_loss())

    encoder = net.encoder
    for p in encoder.parameters():
        p.requires_grad_(False)
    encoder.eval()
    return encoder, history


def build_committee(
    enabled: Iterable[str],
    width: int = 16,
    seed: int = 0,
    frozen_color_encoder: nn.Module | None = None,
) -> dict[str, nn.Module]:
    """Build the enabled experts in canonical (color, structure, frequency) order."""
    enabled = set(enabled)
    unknown = enabled - set(EXPERT_NAMES)
    if unknown:
        raise ValueError(f"unknown experts {sorted(unknown)}; available: {EXPERT_NAMES}")
    committee: dict[str, nn.Module] = {}
    for offset, name in enumerate(EXPERT_NAMES):
        if name not in enabled:
            continue
        spec = NetworkSpec(kind=f"{name}_expert", width=width, depth=2, seed=seed + offset)
        if name == "color":
            if frozen_color_encoder is None:
                raise ValueError("color expert requires a pretrained frozen encoder")
            committee[name] = build_color_expert(frozen_color_encoder, spec)
        elif name == "structure":
            committee[name] = build_structure_expert(spec)
        else:
            committee[name] = build_frequency_expert(spec)
    return committee


@dataclass
class CommitteeScores:
    """Per-expert logits with expert identity labels."""

    labels: list[str]
    scores: list[Tensor]

    def __len__(self) -> int:
        return len(self.labels)


def committee_score(committee: dict[str, nn.Module], batch: Tensor) -> CommitteeScores:
    """Evaluate every enabled expert; an empty committee gives empty scores."""
    labels, scores = [], []
    for name, expert in committee.items():
        labels.append(name)
        scores.append(expert(batch))
    return CommitteeScores(labels=labels, scores=scores)


def trainable_parameters(committee: dict[str, nn.Module]) -> list[nn.Parameter]:
    params: list[nn.Parameter] = []
    for expert in committee.values():
        params.extend(p for p in expert.parameters() if p.requires_grad)
    return params

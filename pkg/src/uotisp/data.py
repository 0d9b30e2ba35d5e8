"""Synthetic paired raw/sRGB corpus and batch sampling.

Scenes are procedural (gradients, shapes, sinusoidal textures, noise
fields) so each run regenerates its corpus bit-identically from a seed.
The camera forward model produces the raw domain: inverse gamma, a 3x3
color mixing matrix, exposure, Bayer mosaicing and heteroscedastic
Gaussian noise.  Outlier corruption touches target sRGB images only.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from torch import Tensor

from . import imaging

DEFAULT_COLOR_MATRIX = np.array(
    [
        [0.80, 0.15, 0.05],
        [0.10, 0.75, 0.15],
        [0.05, 0.20, 0.75],
    ]
)

DEFAULT_CORRUPTION_OPS = (
    ("jitter_hue", -60.0, 60.0),
    ("shift_contrast", 0.3, 1.7),
    ("shift_brightness", -0.35, 0.35),
)


@dataclass(frozen=True)
class CameraModel:
    """Parametric sRGB -> sensor forward model."""

    color_matrix: np.ndarray = field(default_factory=lambda: DEFAULT_COLOR_MATRIX.copy())
    gamma: float = 2.2
    noise_read: float = 0.01
    noise_shot: float = 0.005
    exposure: float = 1.0

    def __post_init__(self) -> None:
        m = np.asarray(self.color_matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError("color_matrix must be 3x3")
        if np.linalg.cond(m) >= 1e3:
            raise ValueError("color_matrix is ill-conditioned")
        if self.gamma <= 0 or self.exposure <= 0:
            raise ValueError("gamma and exposure must be positive")
        if self.noise_read < 0 or self.noise_shot < 0:
            raise ValueError("noise parameters must be non-negative")
        object.__setattr__(self, "color_matrix", m)

    def to_dict(self) -> dict:
        return {
            "color_matrix": self.color_matrix.tolist(),
            "gamma": self.gamma,
            "noise_read": self.noise_read,
            "noise_shot": self.noise_shot,
            "exposure": self.exposure,
        }


@dataclass(frozen=True)
class CorruptionSpec:
    """Outlier injection: which fraction of targets gets which random ops."""

    fraction: float
    ops: Sequence[tuple[str, float, float]] = DEFAULT_CORRUPTION_OPS
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.fraction <= 1.0:
            raise ValueError("fraction must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {"fraction": self.fraction, "ops": [list(op) for op in self.ops], "seed": self.seed}


def _draw_scene(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")

    # smooth two-color gradient base with random orientation
    c0, c1 = rng.random(3), rng.random(3)
    angle = rng.uniform(0, 2 * np.pi)
    t = (np.cos(angle) * xx + np.sin(angle) * yy + 1.0) / 2.0
    img = c0[:, None, None] * (1 - t) + c1[:, None, None] * t

    # colored shapes: rectangles and soft-edged ellipses
    for _ in range(rng.integers(2, 5)):
        color = rng.random(3)
        cy, cx = rng.uniform(0.1, 0.9, 2)
        ry, rx = rng.uniform(0.08, 0.35, 2)
        if rng.random() < 0.5:
            mask = (np.abs(yy - cy) < ry) & (np.abs(xx - cx) < rx)
            img[:, mask] = color[:, None]
        else:
            d = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2
            soft = np.clip(1.5 - 1.5 * d, 0.0, 1.0)
            img = img * (1 - soft) + color[:, None, None] * soft

    # sinusoidal texture band for frequency content
    freq = rng.uniform(2.0, float(min(h, w)) / 4.0)
    phase = rng.uniform(0, 2 * np.pi)
    axis = xx if rng.random() < 0.5 else yy
    amp = rng.uniform(0.05, 0.25)
    band = slice(*sorted(rng.integers(0, h, 2))) if rng.random() < 0.5 else slice(None)
    texture = amp * np.sin(2 * np.pi * freq * axis + phase)
    img[:, band, :] += texture[None, band, :]

    img += rng.normal(0.0, rng.uniform(0.005, 0.03), size=img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_scenes(count: int, size: tuple[int, int], seed: int) -> Tensor:
    """Deterministic-per-seed procedural sRGB scenes, stacked N x 3 x H x W."""
    h, w = size
    if count < 1:
        raise ValueError("count must be >= 1")
    if h < 16 or w < 16 or h % 2 or w % 2:
        raise ValueError(f"size must be even and >= 16, got {h}x{w}")
    children = np.random.SeedSequence(seed).spawn(count)
    scenes = [_draw_scene(np.random.default_rng(c), h, w) for c in children]
    return torch.from_numpy(np.stack(scenes)).to(torch.float32)


def camera_forward(gt: Tensor, cam: CameraModel, seed: int) -> Tensor:
    """Render a ground-truth sRGB image (or batch) to a packed noisy raw.

    inverse gamma -> color matrix -> exposure -> mosaic -> noise with
    variance read^2 + shot * signal -> clamp to [0, 1].
    """
    batch = gt.unsqueeze(0) if gt.dim() == 3 else gt
    linear = batch.clamp(0, 1).pow(cam.gamma)
    m = torch.from_numpy(cam.color_matrix).to(batch.dtype)
    sensor = imaging._mix_channels(linear, m) * cam.exposure
    raw = imaging.mosaic(sensor.clamp(0, 1))
    if cam.noise_read > 0 or cam.noise_shot > 0:
        rng = np.random.default_rng(seed)
        std = torch.sqrt(cam.noise_read**2 + cam.noise_shot * raw.clamp(min=0))
        noise = torch.from_numpy(rng.standard_normal(tuple(raw.shape))).to(batch.dtype)
        raw = raw + std * noise
    raw = raw.clamp(0.0, 1.0)
    return raw.squeeze(0) if gt.dim() == 3 else raw


def _apply_op(img: np.ndarray, name: str, value: float) -> np.ndarray:
    # img is HxWx3 in [0,1]
    if name == "jitter_hue":
        hsv = rgb_to_hsv(img)
        hsv[..., 0] = (hsv[..., 0] + value / 360.0) % 1.0
        return hsv_to_rgb(hsv)
    if name == "shift_contrast":
        return (img - 0.5) * value + 0.5
    if name == "shift_brightness":
        return img + value
    raise ValueError(f"unknown corruption op {name!r}")


def corrupt_targets(corpus: Tensor, spec: CorruptionSpec) -> tuple[Tensor, np.ndarray]:
    """Corrupt exactly floor(fraction * N) target images; returns (corpus, mask).

    Untouched images are bit-identical to the input.  Every op in the spec
    is applied with a magnitude drawn uniformly from its range.
    """
    n = corpus.shape[0]
    n_corrupt = int(np.floor(spec.fraction * n))
    rng = np.random.default_rng(spec.seed)
    mask = np.zeros(n, dtype=bool)
    if n_corrupt == 0:
        return corpus.clone(), mask
    chosen = rng.choice(n, size=n_corrupt, replace=False)
    mask[chosen] = True
    out = corpus.clone()
    for idx in chosen:
        img = out[idx].permute(1, 2, 0).numpy().astype(np.float64)
        for name, lo, hi in spec.ops:
            img = _apply_op(img, name, float(rng.uniform(lo, hi)))
        img = np.clip(img, 0.0, 1.0)
        out[idx] = torch.from_numpy(img).permute(2, 0, 1).to(corpus.dtype)
    return out, mask


def _permutation_stream(n: int, seed_seq: np.random.SeedSequence) -> Iterator[np.ndarray]:
    rng = np.random.default_rng(seed_seq)
    while True:
        yield rng.permutation(n)


def unpaired_sampler(
    raw_corpus: Tensor, srgb_corpus: Tensor, batch: int, seed: int
) -> Iterator[tuple[Tensor, Tensor]]:
    """Infinite stream of (raw batch, sRGB batch) with independent shuffles.

    Each side consumes back-to-back permutations drawn from independent
    sub-seeds, so within one corpus pass no index repeats on either side.
    """
    if raw_corpus.shape[0] == 0 or srgb_corpus.shape[0] == 0:
        raise ValueError("corpora must be nonempty")
    if batch > raw_corpus.shape[0] or batch > srgb_corpus.shape[0]:
        raise ValueError("batch size exceeds corpus size")
    raw_seed, srgb_seed = np.random.SeedSequence(seed).spawn(2)
    raw_idx = _batch_indices(raw_corpus.shape[0], batch, raw_seed)
    srgb_idx = _batch_indices(srgb_corpus.shape[0], batch, srgb_seed)
    for ri, si in zip(raw_idx, srgb_idx):
        yield raw_corpus[ri], srgb_corpus[si]


def _batch_indices(n: int, batch: int, seed_seq: np.random.SeedSequence) -> Iterator[np.ndarray]:
    for perm in _permutation_stream(n, seed_seq):
        for start in range(0, n - batch + 1, batch):
            yield perm[start : start + batch]


def paired_sampler(
    raw_corpus: Tensor, srgb_corpus: Tensor, batch: int, seed: int
) -> Iterator[tuple[Tensor, Tensor]]:
    """Infinite stream of aligned (raw, ground-truth sRGB) batches."""
    if raw_corpus.shape[0] != srgb_corpus.shape[0]:
        raise ValueError("paired corpora must have equal length")
    if batch > raw_corpus.shape[0]:
        raise ValueError("batch size exceeds corpus size")
    for idx in _batch_indices(raw_corpus.shape[0], batch, np.random.SeedSequence(seed)):
        yield raw_corpus[idx], srgb_corpus[idx]


@dataclass
class Corpus:
    """A generated dataset: packed raws, training targets, clean ground truth."""

    raw: Tensor
    srgb: Tensor
    clean_srgb: Tensor
    corruption_mask: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.raw.shape[0]


def generate_corpus(
    count: int,
    size: tuple[int, int],
    camera: CameraModel,
    seed: int,
    corruption: CorruptionSpec | None = None,
    corrupt_sources: bool = False,
) -> Corpus:
    """Scenes + camera renders + optional target-side outlier corruption.

    Outliers live in the target domain only; ``corrupt_sources`` exists for
    exploratory runs and additionally re-renders raws from the corrupted
    scenes.
    """
    scenes = generate_scenes(count, size, seed)
    raw_seeds = np.random.SeedSequence((seed, 1)).spawn(count)
    targets = scenes
    mask = np.zeros(count, dtype=bool)
    if corruption is not None and corruption.fraction > 0:
        targets, mask = corrupt_targets(scenes, corruption)
    source_scenes = targets if corrupt_sources else scenes
    raws = torch.stack(
        [camera_forward(source_scenes[i], camera, _seed_int(raw_seeds[i])) for i in range(count)]
    )
    meta = {
        "count": count,
        "size": list(size),
        "seed": seed,
        "camera": camera.to_dict(),
        "corruption": corruption.to_dict() if corruption else None,
        "corrupt_sources": corrupt_sources,
    }
    return Corpus(raw=raws, srgb=targets, clean_srgb=scenes, corruption_mask=mask, meta=meta)


def _seed_int(seq: np.random.SeedSequence) -> int:
    return int(seq.generate_state(1)[0])


def save_corpus(corpus: Corpus, out_dir: str | Path) -> Path:
    """Persist as PNGs (8-bit sRGB, 16-bit raw mosaics) plus a JSON manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(len(corpus)):
        imaging.write_png(out / f"srgb_{i:05d}.png", corpus.srgb[i], bit_depth=8)
        imaging.write_png(out / f"clean_{i:05d}.png", corpus.clean_srgb[i], bit_depth=8)
        flat = imaging.unpack_mosaic(corpus.raw[i])
        imaging.write_png(out / f"raw_{i:05d}.png", flat, bit_depth=16)
    manifest = dict(corpus.meta)
    manifest["corruption_mask"] = corpus.corruption_mask.astype(int).tolist()
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return out


def load_corpus(in_dir: str | Path) -> Corpus:
    """Load a corpus saved by :func:`save_corpus` (PNG-quantized values)."""
    src = Path(in_dir)
    manifest = json.loads((src / "manifest.json").read_text())
    count = manifest["count"]
    srgb = torch.stack([imaging.read_png(src / f"srgb_{i:05d}.png") for i in range(count)])
    clean = torch.stack([imaging.read_png(src / f"clean_{i:05d}.png") for i in range(count)])
    raw = torch.stack(
        [imaging.pack_mosaic(imaging.read_png(src / f"raw_{i:05d}.png")) for i in range(count)]
    )
    mask = np.array(manifest.pop("corruption_mask"), dtype=bool)
    return Corpus(raw=raw, srgb=srgb, clean_srgb=clean, corruption_mask=mask, meta=manifest)

"""Image-quality metrics: PSNR, SSIM, CIELAB color error, corpus reports.

Conventions, stated once because absolute values depend on them: PSNR uses
peak 1.0 and is capped at 100 dB for identical images; SSIM is single-scale
on luminance (11x11 Gaussian window, sigma 1.5, K1=0.01, K2=0.03); the
color error is CIE76 — the plain Euclidean distance in CIELAB — averaged
over pixels.  A perceptual (LPIPS-style) column is deliberately absent
from reports.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from . import imaging

PSNR_CAP_DB = 100.0
METRIC_COLUMNS = ("psnr", "ssim", "delta_e")


def _check_pair(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def psnr(a: Tensor, b: Tensor) -> float:
    """10 log10(1 / MSE) with peak 1.0; identical inputs give the 100 dB cap."""
    _check_pair(a, b)
    mse = float((a.double() - b.double()).pow(2).mean())
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP_DB)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> Tensor:
    half = size // 2
    coords = torch.arange(-half, half + 1, dtype=torch.float64)
    g = torch.exp(-coords.pow(2) / (2 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim(a: Tensor, b: Tensor, size: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Single-scale SSIM on luminance with a Gaussian window, peak 1.0.

    The mean is taken over fully valid windows only, so border padding
    never enters the statistic.
    """
    _check_pair(a, b)
    if min(a.shape[-2:]) < size:
        raise ValueError(f"image too small for the {size}x{size} window")
    x = imaging.to_grayscale(a.double()) if a.shape[0] == 3 else a.double()
    y = imaging.to_grayscale(b.double()) if b.shape[0] == 3 else b.double()
    x = x.reshape(1, 1, *x.shape[-2:])
    y = y.reshape(1, 1, *y.shape[-2:])
    w = _gaussian_window(size, sigma).view(1, 1, size, size)

    mu_x = F.conv2d(x, w)
    mu_y = F.conv2d(y, w)
    mu_xx = F.conv2d(x * x, w)
    mu_yy = F.conv2d(y * y, w)
    mu_xy = F.conv2d(x * y, w)
    var_x = mu_xx - mu_x * mu_x
    var_y = mu_yy - mu_y * mu_y
    cov = mu_xy - mu_x * mu_y

    c1 = k1**2
    c2 = k2**2
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
    return float((num / den).mean())


def delta_e(a: Tensor, b: Tensor) -> float:
    """Mean per-pixel Euclidean CIELAB distance (CIE76)."""
    _check_pair(a, b)
    lab_a = imaging.rgb_to_lab(a.double())
    lab_b = imaging.rgb_to_lab(b.double())
    batched = lab_a if lab_a.dim() == 4 else lab_a.unsqueeze(0)
    batched_b = lab_b if lab_b.dim() == 4 else lab_b.unsqueeze(0)
    dist = (batched - batched_b).pow(2).sum(dim=1).sqrt()
    return float(dist.mean())


@dataclass
class MetricReport:
    """Aggregate metrics plus the per-image rows they were averaged from."""

    psnr: float
    ssim: float
    delta_e: float
    n_images: int
    rows: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"psnr": self.psnr, "ssim": self.ssim, "delta_e": self.delta_e, "n_images": self.n_images}

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=("index",) + METRIC_COLUMNS)
            writer.writeheader()
            writer.writerows(self.rows)

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def evaluate_pairs(predictions: Tensor, targets: Tensor) -> MetricReport:
    """Per-image metrics for aligned prediction/target stacks, then means."""
    if predictions.shape[0] == 0:
        raise ValueError("empty corpus")
    _check_pair(predictions, targets)
    rows = []
    for i in range(predictions.shape[0]):
        rows.append(
            {
                "index": i,
                "psnr": psnr(predictions[i], targets[i]),
                "ssim": ssim(predictions[i], targets[i]),
                "delta_e": delta_e(predictions[i], targets[i]),
            }
        )
    return MetricReport(
        psnr=float(np.mean([r["psnr"] for r in rows])),
        ssim=float(np.mean([r["ssim"] for r in rows])),
        delta_e=float(np.mean([r["delta_e"] for r in rows])),
        n_images=len(rows),
        rows=rows,
    )


def evaluate_corpus(transport: Callable[[Tensor], Tensor], corpus, batch: int = 16) -> MetricReport:
    """Run a frozen transport over a paired test corpus and score against truth."""
    n = len(corpus)
    if n == 0:
        raise ValueError("empty corpus")
    preds = []
    with torch.no_grad():
        for start in range(0, n, batch):
            preds.append(transport(corpus.raw[start : start + batch]))
    return evaluate_pairs(torch.cat(preds), corpus.clean_srgb)

"""Deterministic image-processing primitives.

Conventions
-----------
* sRGB images are ``3 x H x W`` float tensors in [0, 1], gamma encoded.
* Raw images are packed RGGB: ``4 x H/2 x W/2`` planes ordered
  R, G (on the red row), G (on the blue row), B, with R at the origin
  (even row, even column).  H and W must be even.
* Batched variants ``B x C x H x W`` are accepted everywhere.

The demosaicer is plain bilinear interpolation (mask-normalized
convolution) and deliberately nothing more: it is the fixed content
anchor of the unpaired cost, and any tone processing here would leak
target-domain style into that cost.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torch import Tensor

# Rec.601 luma weights
GRAY_WEIGHTS = (0.299, 0.587, 0.114)

# sRGB <-> XYZ (D65) matrices
_RGB_TO_XYZ = torch.tensor(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ],
    dtype=torch.float64,
)
_XYZ_TO_RGB = torch.linalg.inv(_RGB_TO_XYZ)
# reference white = matrix @ (1,1,1), so pure white lands exactly on L*=100
_D65_WHITE = _RGB_TO_XYZ.sum(dim=1)


def _with_batch(img: Tensor) -> tuple[Tensor, bool]:
    if img.dim() == 3:
        return img.unsqueeze(0), True
    if img.dim() == 4:
        return img, False
    raise ValueError(f"expected CxHxW or BxCxHxW, got shape {tuple(img.shape)}")


def validate_srgb(img: Tensor) -> None:
    batch, _ = _with_batch(img)
    if batch.shape[1] != 3:
        raise ValueError(f"sRGB image must have 3 channels, got {batch.shape[1]}")
    if not torch.isfinite(batch).all():
        raise ValueError("sRGB image contains non-finite values")
    if batch.min() < 0 or batch.max() > 1:
        raise ValueError("sRGB values must lie in [0, 1]")


def validate_raw(raw: Tensor) -> None:
    batch, _ = _with_batch(raw)
    if batch.shape[1] != 4:
        raise ValueError(f"packed raw must have 4 planes, got {batch.shape[1]}")
    if not torch.isfinite(batch).all():
        raise ValueError("raw image contains non-finite values")
    if batch.min() < 0 or batch.max() > 1:
        raise ValueError("raw values must lie in [0, 1]")


def mosaic(rgb: Tensor) -> Tensor:
    """Sample an RGGB Bayer pattern and pack it into 4 half-resolution planes."""
    batch, squeeze = _with_batch(rgb)
    _, _, h, w = batch.shape
    if h % 2 or w % 2:
        raise ValueError(f"image dimensions must be even, got {h}x{w}")
    r = batch[:, 0, 0::2, 0::2]
    g_r = batch[:, 1, 0::2, 1::2]
    g_b = batch[:, 1, 1::2, 0::2]
    b = batch[:, 2, 1::2, 1::2]
    packed = torch.stack([r, g_r, g_b, b], dim=1)
    return packed.squeeze(0) if squeeze else packed


def unpack_mosaic(raw: Tensor) -> Tensor:
    """Scatter packed planes back onto the full-resolution single-plane mosaic."""
    batch, squeeze = _with_batch(raw)
    b, _, hh, hw = batch.shape
    flat = batch.new_zeros((b, 1, hh * 2, hw * 2))
    flat[:, 0, 0::2, 0::2] = batch[:, 0]
    flat[:, 0, 0::2, 1::2] = batch[:, 1]
    flat[:, 0, 1::2, 0::2] = batch[:, 2]
    flat[:, 0, 1::2, 1::2] = batch[:, 3]
    return flat.squeeze(0) if squeeze else flat


def pack_mosaic(flat: Tensor) -> Tensor:
    """Inverse of :func:`unpack_mosaic`."""
    batch, squeeze = _with_batch(flat)
    if batch.shape[1] != 1:
        raise ValueError("flat mosaic must have a single plane")
    planes = torch.stack(
        [
            batch[:, 0, 0::2, 0::2],
            batch[:, 0, 0::2, 1::2],
            batch[:, 0, 1::2, 0::2],
            batch[:, 0, 1::2, 1::2],
        ],
        dim=1,
    )
    return planes.squeeze(0) if squeeze else planes


# Bilinear interpolation kernels; mask normalization handles the borders.
_KERNEL_RB = torch.tensor([[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]]) / 4.0
_KERNEL_G = torch.tensor([[0.0, 1.0, 0.0], [1.0, 4.0, 1.0], [0.0, 1.0, 0.0]]) / 4.0


def _interp(sparse: Tensor, mask: Tensor, kernel: Tensor) -> Tensor:
    k = kernel.to(sparse.dtype).view(1, 1, 3, 3)
    num = F.conv2d(sparse, k, padding=1)
    den = F.conv2d(mask, k, padding=1)
    return num / den


def demosaic_bilinear(raw: Tensor) -> Tensor:
    """Bilinear demosaic to a full-resolution RGB image, clamped to [0, 1].

    This is the fixed preprocessing (the anchor of the unpaired content
    cost).  Constant-color mosaics reproduce exactly, including borders.
    """
    batch, squeeze = _with_batch(raw)
    validate_raw(batch)
    b, _, hh, hw = batch.shape
    h, w = hh * 2, hw * 2
    dtype = batch.dtype

    def plane(channel_positions: list[int]) -> tuple[Tensor, Tensor]:
        sparse = batch.new_zeros((b, 1, h, w))
        mask = batch.new_zeros((1, 1, h, w))
        for p in channel_positions:
            rows = slice(0, None, 2) if p in (0, 1) else slice(1, None, 2)
            cols = slice(0, None, 2) if p in (0, 2) else slice(1, None, 2)
            sparse[:, 0, rows, cols] = batch[:, p]
            mask[:, 0, rows, cols] = 1.0
        return sparse, mask

    r_sparse, r_mask = plane([0])
    g_sparse, g_mask = plane([1, 2])
    b_sparse, b_mask = plane([3])

    red = _interp(r_sparse, r_mask, _KERNEL_RB.to(dtype))
    green = _interp(g_sparse, g_mask, _KERNEL_G.to(dtype))
    blue = _interp(b_sparse, b_mask, _KERNEL_RB.to(dtype))
    rgb = torch.cat([red, green, blue], dim=1).clamp(0.0, 1.0)
    return rgb.squeeze(0) if squeeze else rgb


def srgb_to_linear(srgb: Tensor) -> Tensor:
    """Two-piece sRGB transfer function (decode)."""
    low = srgb / 12.92
    high = ((srgb + 0.055) / 1.055).clamp(min=0).pow(2.4)
    return torch.where(srgb <= 0.04045, low, high)


def linear_to_srgb(linear: Tensor) -> Tensor:
    """Two-piece sRGB transfer function (encode)."""
    low = linear * 12.92
    # clamp to the branch threshold: where() evaluates the unused branch's
    # gradient too, and x^(1/2.4) has an infinite slope at 0
    high = 1.055 * linear.clamp(min=0.0031308).pow(1.0 / 2.4) - 0.055
    return torch.where(linear <= 0.0031308, low, high)


def _lab_f(t: Tensor) -> Tensor:
    delta = 6.0 / 29.0
    # same branch-gradient guard as linear_to_srgb: cube root blows up at 0
    return torch.where(t > delta**3, t.clamp(min=delta**3).pow(1.0 / 3.0), t / (3 * delta**2) + 4.0 / 29.0)


def _lab_f_inv(t: Tensor) -> Tensor:
    delta = 6.0 / 29.0
    return torch.where(t > delta, t.pow(3.0), 3 * delta**2 * (t - 4.0 / 29.0))


def _mix_channels(batch: Tensor, m: Tensor) -> Tensor:
    # elementwise 3x3 channel mixing; avoids threaded GEMM so results are
    # bit-reproducible run to run
    chans = [sum(m[i, j] * batch[:, j] for j in range(3)) for i in range(3)]
    return torch.stack(chans, dim=1)


def rgb_to_lab(srgb: Tensor) -> Tensor:
    """sRGB -> linear -> XYZ (D65) -> CIELAB.

    Returns L* in [0, 100] and a*, b* roughly in [-128, 127].  Fully
    differentiable; the color expert consumes this representation.
    """
    batch, squeeze = _with_batch(srgb)
    dtype = batch.dtype
    linear = srgb_to_linear(batch)
    xyz = _mix_channels(linear, _RGB_TO_XYZ.to(dtype))
    xyz = xyz / _D65_WHITE.to(dtype).view(1, 3, 1, 1)
    f = _lab_f(xyz)
    lum = 116.0 * f[:, 1] - 16.0
    a = 500.0 * (f[:, 0] - f[:, 1])
    bb = 200.0 * (f[:, 1] - f[:, 2])
    lab = torch.stack([lum, a, bb], dim=1)
    return lab.squeeze(0) if squeeze else lab


def lab_to_rgb(lab: Tensor) -> Tensor:
    """Inverse of :func:`rgb_to_lab`, clamped to [0, 1]."""
    batch, squeeze = _with_batch(lab)
    dtype = batch.dtype
    fy = (batch[:, 0] + 16.0) / 116.0
    fx = fy + batch[:, 1] / 500.0
    fz = fy - batch[:, 2] / 200.0
    xyz = torch.stack([_lab_f_inv(fx), _lab_f_inv(fy), _lab_f_inv(fz)], dim=1)
    xyz = xyz * _D65_WHITE.to(dtype).view(1, 3, 1, 1)
    linear = _mix_channels(xyz, _XYZ_TO_RGB.to(dtype))
    rgb = linear_to_srgb(linear).clamp(0.0, 1.0)
    return rgb.squeeze(0) if squeeze else rgb


def to_grayscale(srgb: Tensor) -> Tensor:
    """Luminance with fixed 0.299/0.587/0.114 weights; keeps a channel axis."""
    batch, squeeze = _with_batch(srgb)
    w = torch.tensor(GRAY_WEIGHTS, dtype=batch.dtype).view(1, 3, 1, 1)
    gray = (batch * w).sum(dim=1, keepdim=True)
    return gray.squeeze(0) if squeeze else gray


def fft_log_magnitude(gray: Tensor) -> Tensor:
    """log(1 + |DFT2|) of a single-plane image, DC bin shifted to the center.

    Unnormalized forward DFT; the spectrum is left unnormalized on purpose
    (the frequency expert standardizes its input internally).
    """
    batch, squeeze = _with_batch(gray)
    if batch.shape[1] != 1:
        raise ValueError("expected a single-plane image")
    if not torch.isfinite(batch).all():
        raise ValueError("input contains non-finite values")
    spectrum = torch.fft.fft2(batch, norm="backward")
    mag = torch.log1p(spectrum.abs())
    mag = torch.fft.fftshift(mag, dim=(-2, -1))
    return mag.squeeze(0) if squeeze else mag


def write_png(path: str | Path, image: Tensor | np.ndarray, bit_depth: int = 8) -> None:
    """Write an image tensor in [0, 1] as PNG.

    8-bit supports grayscale and RGB; 16-bit supports grayscale (used for
    raw mosaics).  Channel-first tensors are transposed automatically.
    """
    arr = image.detach().cpu().numpy() if isinstance(image, Tensor) else np.asarray(image)
    if arr.ndim == 3 and arr.shape[0] in (1, 3):
        arr = np.transpose(arr, (1, 2, 0))
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    arr = np.clip(arr, 0.0, 1.0)
    if bit_depth == 8:
        out = (arr * 255.0 + 0.5).astype(np.uint8)
        Image.fromarray(out).save(path)
    elif bit_depth == 16:
        if arr.ndim != 2:
            raise ValueError("16-bit PNG output supports single-plane images only")
        out = (arr * 65535.0 + 0.5).astype(np.uint16)
        Image.fromarray(out).save(path)
    else:
        raise ValueError("bit_depth must be 8 or 16")


def read_png(path: str | Path) -> Tensor:
    """Read a PNG written by :func:`write_png` back to a float tensor in [0, 1]."""
    img = Image.open(path)
    if img.mode == "I;16":
        arr = np.asarray(img, dtype=np.float64) / 65535.0
        return torch.from_numpy(arr).unsqueeze(0).to(torch.float32)
    arr = np.asarray(img.convert("RGB") if img.mode not in ("L", "RGB") else img, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        return torch.from_numpy(arr).unsqueeze(0).to(torch.float32)
    return torch.from_numpy(np.transpose(arr, (2, 0, 1))).to(torch.float32)

import math

import numpy as np
import pytest
import torch

from uotisp import imaging


def reference_rgb_to_lab(rgb):
    """Independent numpy evaluation of the sRGB -> CIELAB formulas."""
    rgb = np.asarray(rgb, dtype=np.float64)
    linear = np.where(rgb <= 0.04045, rgb / 12.92, ((rgb + 0.055) / 1.055) ** 2.4)
    m = np.array(
        [
            [0.4124564, 0.3575761, 0.1804375],
            [0.2126729, 0.7151522, 0.0721750],
            [0.0193339, 0.1191920, 0.9503041],
        ]
    )
    xyz = m @ linear
    xyz = xyz / m.sum(axis=1)
    delta = 6 / 29
    f = np.where(xyz > delta**3, np.cbrt(xyz), xyz / (3 * delta**2) + 4 / 29)
    return np.array([116 * f[1] - 16, 500 * (f[0] - f[1]), 200 * (f[1] - f[2])])


class TestMosaic:
    def test_constant_image(self):
        img = torch.full((3, 6, 6), 0.42)
        raw = imaging.mosaic(img)
        assert raw.shape == (4, 3, 3)
        assert torch.equal(raw, torch.full((4, 3, 3), 0.42))

    def test_pure_red(self):
        img = torch.zeros(3, 4, 4)
        img[0] = 1.0
        raw = imaging.mosaic(img)
        assert torch.equal(raw[0], torch.ones(2, 2))
        assert torch.equal(raw[1:], torch.zeros(3, 2, 2))

    def test_2x2_pattern_definition(self):
        img = torch.zeros(3, 2, 2)
        img[0, 0, 0] = 0.1  # R at even row, even col
        img[1, 0, 1] = 0.2  # G on the red row
        img[1, 1, 0] = 0.3  # G on the blue row
        img[2, 1, 1] = 0.4  # B at odd row, odd col
        raw = imaging.mosaic(img)
        assert raw[:, 0, 0].tolist() == pytest.approx([0.1, 0.2, 0.3, 0.4])

    def test_odd_dimensions_error(self):
        with pytest.raises(ValueError):
            imaging.mosaic(torch.zeros(3, 5, 4))

    def test_pack_unpack_roundtrip(self):
        raw = torch.rand(4, 8, 8)
        assert torch.equal(imaging.pack_mosaic(imaging.unpack_mosaic(raw)), raw)


class TestDemosaic:
    def test_constant_raw(self):
        raw = torch.full((4, 4, 4), 0.61)
        rgb = imaging.demosaic_bilinear(raw)
        assert rgb.shape == (3, 8, 8)
        assert torch.allclose(rgb, torch.full((3, 8, 8), 0.61), atol=0, rtol=0)

    def test_constant_color_roundtrip(self):
        color = torch.tensor([0.2, 0.5, 0.8]).view(3, 1, 1).expand(3, 8, 8)
        rgb = imaging.demosaic_bilinear(imaging.mosaic(color.contiguous()))
        assert torch.allclose(rgb, color, atol=1e-7)

    def test_linear_ramp_interior(self):
        h, w = 16, 16
        ramp = torch.linspace(0.1, 0.9, w).view(1, 1, w).expand(3, h, w).contiguous()
        rgb = imaging.demosaic_bilinear(imaging.mosaic(ramp))
        interior = (rgb - ramp).abs()[:, 2:-2, 2:-2]
        assert float(interior.max()) < 1e-6

    def test_output_in_range(self):
        raw = torch.rand(4, 8, 8)
        rgb = imaging.demosaic_bilinear(raw)
        assert float(rgb.min()) >= 0.0 and float(rgb.max()) <= 1.0

    def test_deterministic(self):
        raw = torch.rand(4, 8, 8)
        assert torch.equal(imaging.demosaic_bilinear(raw), imaging.demosaic_bilinear(raw))


class TestLab:
    def test_white(self):
        lab = imaging.rgb_to_lab(torch.ones(3, 2, 2, dtype=torch.float64))
        assert float(lab[0, 0, 0]) == pytest.approx(100.0, abs=1e-9)
        assert float(lab[1, 0, 0]) == pytest.approx(0.0, abs=1e-9)
        assert float(lab[2, 0, 0]) == pytest.approx(0.0, abs=1e-9)

    def test_black(self):
        lab = imaging.rgb_to_lab(torch.zeros(3, 2, 2, dtype=torch.float64))
        assert torch.allclose(lab, torch.zeros(3, 2, 2, dtype=torch.float64), atol=1e-9)

    def test_mid_gray_matches_reference(self):
        lab = imaging.rgb_to_lab(torch.full((3, 1, 1), 0.5, dtype=torch.float64))
        ref = reference_rgb_to_lab([0.5, 0.5, 0.5])
        assert float(lab[0, 0, 0]) == pytest.approx(ref[0], abs=1e-9)
        assert ref[0] == pytest.approx(53.39, abs=0.01)

    def test_random_pixels_match_reference(self):
        rng = np.random.default_rng(3)
        for rgb in rng.random((10, 3)):
            lab = imaging.rgb_to_lab(torch.tensor(rgb, dtype=torch.float64).view(3, 1, 1))
            ref = reference_rgb_to_lab(rgb)
            assert np.allclose(lab[:, 0, 0].numpy(), ref, atol=1e-8)

    def test_roundtrip_grid(self):
        axis = torch.linspace(0, 1, 17, dtype=torch.float64)
        r, g, b = torch.meshgrid(axis, axis, axis, indexing="ij")
        grid = torch.stack([r.flatten(), g.flatten(), b.flatten()]).view(3, 17, 17 * 17)
        back = imaging.lab_to_rgb(imaging.rgb_to_lab(grid))
        assert float((back - grid).abs().max()) < 1e-4


class TestGrayscale:
    def test_weights(self):
        white = imaging.to_grayscale(torch.ones(3, 2, 2))
        assert torch.allclose(white, torch.ones(1, 2, 2))
        assert float(imaging.to_grayscale(torch.zeros(3, 2, 2)).max()) == 0.0
        green = torch.zeros(3, 2, 2)
        green[1] = 1.0
        assert float(imaging.to_grayscale(green)[0, 0, 0]) == pytest.approx(0.587)


class TestFFT:
    def test_constant_image(self):
        v, h, w = 0.3, 8, 8
        spec = imaging.fft_log_magnitude(torch.full((1, h, w), v, dtype=torch.float64))
        center = float(spec[0, h // 2, w // 2])
        assert center == pytest.approx(math.log1p(v * h * w), rel=1e-9)
        rest = spec.clone()
        rest[0, h // 2, w // 2] = 0.0
        assert float(rest.abs().max()) < 1e-9

    def test_impulse_flat_spectrum(self):
        img = torch.zeros(1, 8, 8, dtype=torch.float64)
        img[0, 3, 5] = 1.0
        spec = imaging.fft_log_magnitude(img)
        assert torch.allclose(spec, torch.full_like(spec, math.log(2.0)), atol=1e-9)

    def test_cosine_spikes_match_direct_dft(self):
        h, w, k = 8, 8, 2
        x = torch.arange(w, dtype=torch.float64)
        img = torch.cos(2 * math.pi * k * x / w).view(1, 1, w).expand(1, h, w).contiguous()
        spec = imaging.fft_log_magnitude(img)
        # direct DFT summation oracle
        arr = img[0].numpy()
        direct = np.zeros((h, w), dtype=complex)
        for u in range(h):
            for v in range(w):
                for yy in range(h):
                    for xx in range(w):
                        direct[u, v] += arr[yy, xx] * np.exp(-2j * math.pi * (u * yy / h + v * xx / w))
        expected = np.fft.fftshift(np.log1p(np.abs(direct)))
        assert np.allclose(spec[0].numpy(), expected, atol=1e-8)
        peak = math.log1p(h * w / 2)
        assert float(spec[0, h // 2, w // 2 + k]) == pytest.approx(peak, rel=1e-9)
        assert float(spec[0, h // 2, w // 2 - k]) == pytest.approx(peak, rel=1e-9)

    def test_translation_invariance(self):
        img = torch.rand(1, 16, 16, dtype=torch.float64)
        spec = imaging.fft_log_magnitude(img)
        rolled = imaging.fft_log_magnitude(torch.roll(img, shifts=(3, 5), dims=(1, 2)))
        assert float((spec - rolled).abs().max()) < 1e-6


class TestPngIO:
    def test_rgb_8bit_roundtrip(self, tmp_path):
        img = torch.rand(3, 8, 8)
        path = tmp_path / "img.png"
        imaging.write_png(path, img, bit_depth=8)
        back = imaging.read_png(path)
        assert back.shape == (3, 8, 8)
        assert float((back - img).abs().max()) <= 0.5 / 255 + 1e-6

    def test_gray_16bit_roundtrip(self, tmp_path):
        img = torch.rand(1, 8, 8)
        path = tmp_path / "gray16.png"
        imaging.write_png(path, img, bit_depth=16)
        back = imaging.read_png(path)
        assert back.shape == (1, 8, 8)
        assert float((back - img).abs().max()) <= 0.5 / 65535 + 1e-7

    def test_16bit_rgb_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            imaging.write_png(tmp_path / "x.png", torch.rand(3, 4, 4), bit_depth=16)


class TestValidation:
    def test_srgb_range(self):
        with pytest.raises(ValueError):
            imaging.validate_srgb(torch.full((3, 2, 2), 1.5))
        imaging.validate_srgb(torch.rand(3, 2, 2))

    def test_raw_planes(self):
        with pytest.raises(ValueError):
            imaging.validate_raw(torch.rand(3, 2, 2))
        imaging.validate_raw(torch.rand(4, 2, 2))

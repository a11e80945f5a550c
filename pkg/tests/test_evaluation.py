import math

import numpy as np
import pytest
import torch

from dlf.bitstream import Container
from dlf.evaluation import (
    RDCurve,
    RDPoint,
    bd_rate,
    bd_rate_values,
    compute_bpp,
    ms_ssim,
    msssim_levels,
    psnr,
    render_ablation_report,
    render_report,
)
from reference_metrics import reference_bd_rate, reference_ms_ssim


class TestPsnr:
    def test_identical_capped(self):
        x = torch.rand(3, 32, 32)
        assert psnr(x, x.clone()) == 100.0

    def test_zero_vs_one(self):
        assert psnr(torch.zeros(3, 8, 8), torch.ones(3, 8, 8)) == pytest.approx(0.0, abs=1e-9)

    def test_uniform_offset(self):
        x = torch.full((3, 16, 16), 0.4)
        y = torch.full((3, 16, 16), 0.5)
        assert psnr(x, y) == pytest.approx(20.0, abs=1e-4)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            psnr(torch.zeros(3, 8, 8), torch.zeros(3, 8, 9))


class TestMsSsim:
    def test_identical_is_one(self):
        x = torch.rand(3, 200, 200)
        assert ms_ssim(x, x.clone()) == pytest.approx(1.0, abs=1e-9)

    def test_symmetry(self):
        g = torch.Generator().manual_seed(5)
        for _ in range(5):
            a = torch.rand(3, 180, 180, generator=g)
            b = (a + 0.1 * torch.randn(3, 180, 180, generator=g)).clamp(0, 1)
            assert abs(ms_ssim(a, b) - ms_ssim(b, a)) < 1e-9

    def test_matches_reference_implementation(self):
        g = torch.Generator().manual_seed(6)
        diffs = []
        for _ in range(20):
            base = torch.rand(3, 1, 1, generator=g) * torch.ones(3, 176, 176)
            a = (base + 0.2 * torch.rand(3, 176, 176, generator=g)).clamp(0, 1)
            noise = 0.15 * torch.randn(3, 176, 176, generator=g)
            blur = torch.nn.functional.avg_pool2d(a.unsqueeze(0), 3, 1, 1).squeeze(0)
            b = (0.5 * a + 0.5 * blur + noise).clamp(0, 1)
            got = ms_ssim(a, b)
            want = reference_ms_ssim(a.numpy().astype(np.float64),
                                     b.numpy().astype(np.float64))
            diffs.append(abs(got - want))
        assert max(diffs) < 1e-4

    def test_level_fallback_thresholds(self):
        assert msssim_levels(161) == 5
        assert msssim_levels(160) == 4
        assert msssim_levels(41) == 3
        assert msssim_levels(21) == 2
        assert msssim_levels(11) == 1
        assert msssim_levels(10) == 0

    def test_small_image_uses_fewer_scales(self):
        a = torch.rand(3, 64, 64)
        b = (a + 0.1 * torch.randn(3, 64, 64)).clamp(0, 1)
        got = ms_ssim(a, b)  # 64 -> 3 scales
        want = reference_ms_ssim(a.numpy().astype(np.float64),
                                 b.numpy().astype(np.float64), levels=3)
        assert got == pytest.approx(want, abs=1e-4)

    def test_too_small_errors(self):
        with pytest.raises(ValueError):
            ms_ssim(torch.rand(3, 8, 8), torch.rand(3, 8, 8))


class TestBpp:
    def test_example_70_bytes(self):
        c = Container(0, 256, 256, b"\0" * 48, b"")
        assert c.num_bytes == 70
        assert compute_bpp(c) == pytest.approx(70 * 8 / 65536, abs=1e-9)
        assert compute_bpp(c) == pytest.approx(0.008545, abs=5e-7)

    def test_semantic_payload_floor(self):
        # 32 tokens x 12 bits = 48 bytes; payload-only bpp at 256x256
        assert 48 * 8 / 65536 == pytest.approx(0.005859, abs=4e-7)
        # scale invariance at 512x512: 4 windows x 48 bytes
        assert 4 * 48 * 8 / (512 * 512) == pytest.approx(0.005859, abs=4e-7)

    def test_exactness(self):
        c = Container(0, 123, 77, b"ab", b"xyz")
        assert compute_bpp(c) * 123 * 77 / 8 == pytest.approx(c.num_bytes, rel=1e-12)

    def test_zero_area(self):
        with pytest.raises(ValueError):
            compute_bpp(Container(0, 0, 256, b"", b""))


def _curve(label, bpps, quals, metric="q"):
    return RDCurve(label, [RDPoint(b, {metric: q}) for b, q in zip(bpps, quals)])


class TestBdRate:
    def test_identical_curves_zero(self):
        a = _curve("a", [0.1, 0.2, 0.4, 0.8], [30, 32, 34, 36])
        b = _curve("b", [0.1, 0.2, 0.4, 0.8], [30, 32, 34, 36])
        assert bd_rate(a, b, "q") == pytest.approx(0.0, abs=1e-12)

    def test_halved_rates_minus_50(self):
        rates = np.array([0.11, 0.23, 0.45, 0.97])
        quals = np.array([29.0, 31.5, 33.2, 37.0])
        a = _curve("a", rates, quals)
        b = _curve("b", rates / 2, quals)
        assert bd_rate(a, b, "q") == pytest.approx(-50.0, abs=1e-9)

    def test_matches_dense_trapezoid_oracle(self):
        rng = np.random.default_rng(14)
        for _ in range(10):
            qa = np.sort(rng.uniform(25, 40, size=4))
            qa += np.arange(4) * 1e-3
            qt = np.sort(rng.uniform(25, 40, size=4))
            qt += np.arange(4) * 1e-3
            ra = np.sort(rng.uniform(0.05, 2.0, size=4))
            rt = np.sort(rng.uniform(0.05, 2.0, size=4))
            try:
                got = bd_rate_values(ra, qa, rt, qt)
            except ValueError:
                continue
            want = reference_bd_rate(ra, qa, rt, qt)
            assert got == pytest.approx(want, abs=0.05)

    def test_no_overlap_errors(self):
        a = _curve("a", [0.1, 0.2], [30, 31])
        b = _curve("b", [0.1, 0.2], [35, 36])
        with pytest.raises(ValueError):
            bd_rate(a, b, "q")

    def test_needs_two_points(self):
        a = _curve("a", [0.1], [30])
        b = _curve("b", [0.1, 0.2], [30, 31])
        with pytest.raises(ValueError):
            bd_rate(a, b, "q")

    def test_lower_better_orientation(self):
        # same rates, test has lower (better) metric values -> negative BD-rate
        a = _curve("a", [0.1, 0.2, 0.4], [0.5, 0.3, 0.2], metric="latent_mse")
        b = _curve("b", [0.1, 0.2, 0.4], [0.25, 0.15, 0.1], metric="latent_mse")
        assert bd_rate(a, b, "latent_mse") < 0

    def test_antisymmetry_of_uniform_scaling(self):
        rates = np.array([0.1, 0.2, 0.4, 0.8])
        quals = np.array([30.0, 32.0, 34.0, 36.0])
        a = _curve("a", rates, quals)
        b = _curve("b", rates * 2, quals)
        up = bd_rate(a, b, "q")
        down = bd_rate(b, a, "q")
        # log-rate antisymmetry: (1+up/100)*(1+down/100) == 1
        assert (1 + up / 100) * (1 + down / 100) == pytest.approx(1.0, abs=1e-9)


class TestCurveSerialization:
    def test_csv_round_trip(self):
        c = _curve("full", [0.1, 0.2], [30.5, 33.25])
        out = RDCurve.from_csv(c.to_csv())
        assert out.label == "full"
        assert out.bpps.tolist() == [0.1, 0.2]
        assert out.metric("q").tolist() == [30.5, 33.25]

    def test_report_rendering(self):
        a = _curve("full", [0.1, 0.2], [30.0, 33.0])
        b = _curve("no_detail", [0.05, 0.15], [29.0, 31.0])
        md = render_report(b, anchor=a)
        assert "BD-rate vs anchor `full`" in md
        md2 = render_ablation_report(a, [b])
        assert "no_detail" in md2 and "0.00%" in md2

    def test_identical_anchor_prints_zero(self):
        a = _curve("full", [0.1, 0.2], [30.0, 33.0])
        md = render_report(a, anchor=a)
        assert "0.00%" in md

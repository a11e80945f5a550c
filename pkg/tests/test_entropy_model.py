import math

import numpy as np
import pytest
import torch

from dlf.entropy_model import (
    P_MIN,
    CausalityError,
    QuadtreeContext,
    alphabet_pmf,
    build_cdf,
    coded_rate_bits,
    decode_detail,
    encode_detail,
    estimated_detail_bits,
    group_masks,
    interval_rate_bits,
    quadtree_schedule,
)


def make_context(channels=4, hidden=12, seed=0) -> QuadtreeContext:
    torch.manual_seed(seed)
    return QuadtreeContext(channels, hidden).eval()


class TestSchedule:
    def test_2x2_one_position_per_group(self):
        groups = quadtree_schedule(2, 2)
        assert [len(g[0]) for g in groups] == [1, 1, 1, 1]

    def test_4x4_four_positions_per_group(self):
        groups = quadtree_schedule(4, 4)
        assert [len(g[0]) for g in groups] == [4, 4, 4, 4]

    def test_1x1_degenerate(self):
        groups = quadtree_schedule(1, 1)
        assert [len(g[0]) for g in groups] == [1, 0, 0, 0]
        assert groups[0][0].tolist() == [0] and groups[0][1].tolist() == [0]

    def test_coverage_is_exact_partition(self):
        rng = np.random.default_rng(8)
        for _ in range(50):
            h2 = int(rng.integers(1, 20))
            w2 = int(rng.integers(1, 20))
            seen = np.zeros((h2, w2), dtype=int)
            for ys, xs in quadtree_schedule(h2, w2):
                seen[ys, xs] += 1
            assert (seen == 1).all()

    def test_invalid_dims(self):
        with pytest.raises(ValueError):
            quadtree_schedule(0, 3)


class TestPrediction:
    def test_group0_independent_of_symbols(self):
        ctx = make_context()
        filled = torch.zeros(1, 1, 4, 4)
        a = ctx.predict_group(torch.zeros(1, 4, 4, 4), filled, 0)
        b = ctx.predict_group(torch.randn(1, 4, 4, 4) * 50, filled, 0)
        assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])

    def test_causality_future_groups_do_not_leak(self):
        ctx = make_context()
        masks = group_masks(4, 4)
        filled = masks[0:1].clone()  # group 0 decoded
        base = torch.randn(1, 4, 4, 4)
        mu1, b1 = ctx.predict_group(base * filled, filled, 1)
        # perturb only group>=1 positions
        later = (1 - filled) * torch.randn(1, 4, 4, 4) * 100
        mu2, b2 = ctx.predict_group((base + later) * filled, filled, 1)
        assert torch.equal(mu1, mu2) and torch.equal(b1, b2)

    def test_earlier_group_perturbation_changes_prediction(self):
        ctx = make_context()
        masks = group_masks(4, 4)
        filled = masks[0:1].clone()
        zeros = torch.zeros(1, 4, 4, 4)
        perturbed = zeros.clone()
        ys, xs = quadtree_schedule(4, 4)[0]
        perturbed[0, :, ys[0], xs[0]] = 5.0
        mu1, _ = ctx.predict_group(zeros * filled, filled, 1)
        mu2, _ = ctx.predict_group(perturbed * filled, filled, 1)
        assert not torch.equal(mu1, mu2)

    def test_unfilled_earlier_group_raises(self):
        ctx = make_context()
        filled = torch.zeros(1, 1, 4, 4)  # nothing decoded
        with pytest.raises(CausalityError):
            ctx.predict_group(torch.zeros(1, 4, 4, 4), filled, 2)

    def test_determinism(self):
        ctx = make_context()
        masks = group_masks(6, 6)
        filled = (masks[0] + masks[1]).unsqueeze(0)
        vals = torch.randn(1, 4, 6, 6) * filled
        a = ctx.predict_group(vals, filled, 2)
        b = ctx.predict_group(vals, filled, 2)
        assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])


class TestRateEstimates:
    def test_half_mass_is_one_bit(self):
        pmf = np.array([0.5, 0.25, 0.25])
        assert -math.log2(pmf[0]) == pytest.approx(1.0)
        bits = coded_rate_bits(np.array([-1]), np.array([[0.5, 0.25, 0.25]]), 1)
        assert bits == pytest.approx(1.0)

    def test_uniform_256_is_8_bits(self):
        pmf = np.full((1, 256), 1.0 / 256.0)
        # symbol index 0 of a 256-symbol alphabet centered at -127 .. 128
        p = pmf[0, 0]
        assert -math.log2(p) == pytest.approx(8.0)

    def test_laplace_interval_example(self):
        # mu=0, b=1, symbol 0: mass = 1 - e^{-1/2} ~ 0.3935 -> 1.3455 bits
        bits = interval_rate_bits(torch.zeros(1), torch.zeros(1), torch.ones(1))
        mass = 1.0 - math.exp(-0.5)
        assert float(bits) == pytest.approx(-math.log2(mass), abs=1e-6)
        assert float(bits) == pytest.approx(1.3455, abs=1e-3)

    def test_p_min_floor_prevents_infinities(self):
        bits = interval_rate_bits(torch.tensor([1000.0]), torch.zeros(1),
                                  torch.full((1,), 0.01))
        assert math.isfinite(float(bits))
        assert float(bits) == pytest.approx(16.0, abs=1e-4)

    def test_rate_gradient_matches_finite_differences(self):
        torch.manual_seed(9)
        values = torch.randn(20, dtype=torch.float64) * 2
        mu = torch.randn(20, dtype=torch.float64, requires_grad=True)
        log_b = torch.randn(20, dtype=torch.float64, requires_grad=True)
        bits = interval_rate_bits(values, mu, torch.exp(log_b))
        bits.backward()
        eps = 1e-6
        for param, grad in ((mu, mu.grad), (log_b, log_b.grad)):
            fd = torch.zeros_like(param)
            for i in range(param.numel()):
                d = torch.zeros_like(param)
                d[i] = eps
                up = interval_rate_bits(values, (mu + d) if param is mu else mu,
                                        torch.exp((log_b + d) if param is log_b else log_b))
                dn = interval_rate_bits(values, (mu - d) if param is mu else mu,
                                        torch.exp((log_b - d) if param is log_b else log_b))
                fd[i] = (up - dn) / (2 * eps)
            rel = ((grad - fd).abs() / fd.abs().clamp_min(1e-6)).detach()
            assert float(rel.max()) < 1e-3


class TestAlphabetPmf:
    def test_rows_sum_to_one_with_floor(self):
        rng = np.random.default_rng(10)
        mu = rng.uniform(-100, 100, size=50)
        b = np.exp(rng.uniform(-6, 6, size=50))
        pmf = alphabet_pmf(mu, b, 127)
        np.testing.assert_allclose(pmf.sum(axis=1), 1.0, atol=1e-9)
        assert pmf.min() >= P_MIN * (1 - 1e-12)


class TestBuildCdf:
    def test_uniform_4(self):
        cdf = build_cdf(np.full(4, 0.25))
        assert np.diff(cdf).tolist() == [16384, 16384, 16384, 16384]

    def test_dyadic(self):
        cdf = build_cdf(np.array([0.5, 0.25, 0.25]))
        assert np.diff(cdf).tolist() == [32768, 16384, 16384]

    def test_min_width_small_alphabet_sweep(self):
        rng = np.random.default_rng(12)
        for alphabet in range(2, 40):
            for _ in range(25):
                raw = rng.uniform(0, 1, size=alphabet) ** 8  # very skewed
                raw[int(rng.integers(0, alphabet))] += 100.0
                pmf = raw / raw.sum()
                cdf = build_cdf(pmf)
                widths = np.diff(cdf)
                assert widths.min() >= 1
                assert widths.sum() == 1 << 16
                assert cdf[0] == 0 and (np.diff(cdf) > 0).all()

    def test_batched(self):
        pmf = np.stack([np.full(4, 0.25), np.array([0.7, 0.1, 0.1, 0.1])])
        cdf = build_cdf(pmf)
        assert cdf.shape == (2, 5)
        assert (cdf[:, -1] == 1 << 16).all()


class TestDetailCoding:
    def _random_symbols(self, ctx_channels, h2, w2, seed, spread=6):
        rng = np.random.default_rng(seed)
        return torch.from_numpy(
            rng.integers(-spread, spread + 1, size=(ctx_channels, h2, w2))
        ).long()

    def test_round_trip(self):
        ctx = make_context(channels=3)
        for seed in range(5):
            sym = self._random_symbols(3, 6, 5, seed)
            payload = encode_detail(ctx, sym, sym_max=127)
            out = decode_detail(ctx, payload, (3, 6, 5), sym_max=127)
            assert torch.equal(out, sym)

    def test_encoder_decoder_predictions_bit_identical(self):
        ctx = make_context(channels=2, seed=3)
        sym = self._random_symbols(2, 4, 4, seed=42)
        enc_trace: list = []
        dec_trace: list = []
        payload = encode_detail(ctx, sym, sym_max=127, trace=enc_trace)
        out = decode_detail(ctx, payload, (2, 4, 4), sym_max=127, trace=dec_trace)
        assert torch.equal(out, sym)
        assert len(enc_trace) == len(dec_trace) == 4
        for (gk_e, mu_e, b_e), (gk_d, mu_d, b_d) in zip(enc_trace, dec_trace):
            assert gk_e == gk_d
            assert np.array_equal(mu_e, mu_d)
            assert np.array_equal(b_e, b_d)

    def test_payload_close_to_estimate(self):
        # actual detail payload <= estimate + 64 bits + 1% on random latents
        ctx = make_context(channels=4, seed=5)
        rng = np.random.default_rng(13)
        for trial in range(20):
            h2 = int(rng.integers(1, 9))
            w2 = int(rng.integers(1, 9))
            sym = self._random_symbols(4, h2, w2, seed=100 + trial, spread=20)
            est = estimated_detail_bits(ctx, sym, sym_max=127)
            payload = encode_detail(ctx, sym, sym_max=127)
            assert len(payload) * 8 <= est + 64 + 0.01 * est

    def test_rate_bits_differentiable_through_context(self):
        ctx = make_context(channels=2, seed=6).train()
        values = torch.randn(2, 2, 4, 4, requires_grad=True)
        bits = ctx.rate_bits(values, sym_max=127)
        bits.backward()
        assert values.grad is not None
        assert all(p.grad is not None for p in ctx.parameters())

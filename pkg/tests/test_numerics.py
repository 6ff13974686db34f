import math

import numpy as np
import pytest

from abnn.numerics import (
    Rng,
    box_muller,
    cross_entropy,
    gaussian_sample,
    kl_gauss_std,
    sigmoid,
    softmax,
    softplus,
    softplus_inv,
    std_normal_cdf,
)


class TestRng:
    def test_same_seed_and_stream_is_bit_identical(self):
        a = Rng(42, 7).normal((4, 5))
        b = Rng(42, 7).normal((4, 5))
        assert np.array_equal(a, b)

    def test_distinct_streams_differ_and_look_standard(self):
        r = Rng(42)
        z1 = r.substream(1).normal(200_000)
        z2 = r.substream(2).normal(200_000)
        assert not np.array_equal(z1[:100], z2[:100])
        for z in (z1, z2):
            assert abs(z.mean()) < 0.01
            assert abs(z.var() - 1.0) < 0.02

    def test_substream_derivation_is_deterministic(self):
        assert Rng(1, 5).substream(3).stream_id == Rng(1, 5).substream(3).stream_id
        assert Rng(1, 5).substream(3).stream_id != Rng(1, 5).substream(4).stream_id


class TestBoxMuller:
    def test_quarter_turn_gives_zero(self):
        z1, _ = box_muller(0.5, 0.25)
        assert abs(z1) < 1e-12  # cos(pi/2)

    def test_half_turn_value(self):
        # sqrt(-2 ln 0.5) * cos(pi) = -1.1774100...
        z1, _ = box_muller(0.5, 0.5)
        assert z1 == pytest.approx(-1.1774100, abs=1e-7)

    def test_moments_of_a_million_draws(self):
        z = gaussian_sample(Rng(7), 10**6)
        assert z.shape == (1, 10**6)
        assert abs(z.mean()) < 0.005
        assert abs(z.var() - 1.0) < 0.01

    def test_rejects_empty_sample(self):
        with pytest.raises(ValueError):
            gaussian_sample(Rng(0), 0)


class TestSoftmax:
    def test_symmetric_logits(self):
        np.testing.assert_allclose(softmax([[0.0, 0.0]]), [[0.5, 0.5]])

    def test_log_two_logit(self):
        p = softmax([[math.log(2.0), 0.0]])
        np.testing.assert_allclose(p, [[2.0 / 3.0, 1.0 / 3.0]], atol=1e-15)

    def test_large_symmetric_logits_do_not_overflow(self):
        p = softmax([[1000.0, 1000.0]])
        np.testing.assert_allclose(p, [[0.5, 0.5]])

    def test_rows_sum_to_one_for_huge_ranges(self):
        rng = Rng(3)
        logits = rng.normal((50, 7)) * 1e6
        p = softmax(logits)
        assert np.abs(p.sum(axis=1) - 1.0).max() < 1e-12

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            softmax([[np.inf, 0.0]])


class TestKlGaussStd:
    def test_standard_normal_is_zero(self):
        assert kl_gauss_std(0.0, 1.0) == 0.0

    def test_unit_mean_shift(self):
        assert kl_gauss_std(1.0, 1.0) == pytest.approx(0.5, abs=1e-15)

    def test_doubled_scale(self):
        assert kl_gauss_std(0.0, 2.0) == pytest.approx(0.8068528, abs=1e-7)

    def test_rejects_nonpositive_sigma(self):
        with pytest.raises(ValueError):
            kl_gauss_std(0.0, 0.0)

    def test_nonnegative_and_matches_monte_carlo(self):
        # E_q[ln q - ln p] estimated by sampling must agree within 3 MC
        # standard errors for random (mu, sigma).
        rng = Rng(14)
        for i in range(20):
            u = rng.uniform(2)
            mu = -3.0 + 6.0 * u[0]
            sigma = 0.1 + 4.9 * u[1]
            closed = kl_gauss_std(mu, sigma)
            assert closed >= 0.0
            w = mu + sigma * rng.substream(i).normal(100_000)
            integrand = -np.log(sigma) - (w - mu) ** 2 / (2 * sigma**2) + w**2 / 2.0
            se = integrand.std(ddof=1) / np.sqrt(integrand.size)
            assert abs(closed - integrand.mean()) < 3.0 * se


class TestStdNormalCdf:
    def test_zero_is_exactly_half(self):
        assert std_normal_cdf(0.0) == 0.5

    def test_known_value(self):
        assert std_normal_cdf(0.7071068) == pytest.approx(0.7602499, abs=1e-7)

    def test_against_numerical_integration(self):
        # Trapezoid quadrature of the density as an independent oracle.
        for x in (-2.0, -0.5, 0.3, 1.7):
            grid = np.linspace(-12.0, x, 400_001)
            pdf = np.exp(-grid * grid / 2.0) / np.sqrt(2.0 * np.pi)
            assert std_normal_cdf(x) == pytest.approx(np.trapezoid(pdf, grid), abs=1e-7)

    def test_symmetry(self):
        rng = Rng(5)
        for x in rng.normal(50).ravel() * 3.0:
            assert std_normal_cdf(-x) == pytest.approx(1.0 - std_normal_cdf(x), abs=1e-12)


class TestCrossEntropy:
    def test_uniform_against_uniform(self):
        assert cross_entropy([[0.5, 0.5]], [[0.5, 0.5]]) == pytest.approx(math.log(2.0), abs=1e-12)

    def test_perfect_one_hot_is_near_zero(self):
        assert cross_entropy([[1.0, 0.0]], [[1.0, 0.0]]) < 1e-11

    def test_hand_computed_value(self):
        expected = -0.5 * (math.log(0.75) + math.log(0.25))
        assert cross_entropy([[0.75, 0.25]], [[0.5, 0.5]]) == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(0.8369882, abs=1e-7)

    def test_self_entropy(self):
        rng = Rng(9)
        p = softmax(rng.normal((20, 5)))
        entropy = float(-(p * np.log(p)).sum(axis=1).mean())
        assert cross_entropy(p, p) == pytest.approx(entropy, abs=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            cross_entropy([[1.0, 0.0]], [[1.0, 0.0, 0.0]])

    def test_rejects_non_distribution_rows(self):
        with pytest.raises(ValueError):
            cross_entropy([[0.9, 0.3]], [[0.5, 0.5]])


class TestLinkFunctions:
    def test_softplus_inverse_roundtrip(self):
        for y in (1e-4, 0.05, 1.0, 7.0, 100.0):
            assert softplus(softplus_inv(y)) == pytest.approx(y, rel=1e-12)

    def test_softplus_inv_of_one(self):
        assert softplus_inv(1.0) == pytest.approx(0.5413249, abs=1e-7)

    def test_sigmoid_matches_softplus_derivative(self):
        x = np.linspace(-20, 20, 101)
        h = 1e-6
        numeric = (softplus(x + h) - softplus(x - h)) / (2 * h)
        np.testing.assert_allclose(sigmoid(x), numeric, atol=1e-6)

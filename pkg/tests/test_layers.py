import numpy as np
import pytest

from abnn.layers import (
    RHO_MAX,
    RHO_MIN,
    BayesLinear,
    DenseLinear,
    relu_backward,
    relu_forward,
    softmax_ce_head,
)
from abnn.numerics import Rng, softplus, softplus_inv
from gradcheck import finite_diff_grads, max_rel_err


class TestDenseLinear:
    def test_identity_layer(self):
        layer = DenseLinear(3, 3)
        layer.W.value[...] = np.eye(3)
        x = Rng(0).normal((4, 3))
        np.testing.assert_array_equal(layer.forward(x), x)

    def test_scalar_affine(self):
        layer = DenseLinear(1, 1)
        layer.W.value[...] = [[2.0]]
        layer.b.value[...] = [[1.0]]
        np.testing.assert_array_equal(layer.forward([[3.0]]), [[7.0]])

    def test_backward_matches_finite_differences(self):
        rng = Rng(21)
        layer = DenseLinear(5, 4, rng)
        x = rng.normal((3, 5))
        target = np.eye(4)[np.array([0, 2, 1])]

        def loss():
            return softmax_ce_head(layer.forward(x), target)[0]

        layer.W.zero_grad()
        layer.b.zero_grad()
        _, dlogits = softmax_ce_head(layer.forward(x), target)
        layer.backward(dlogits)
        fd = finite_diff_grads(loss, layer.params())
        assert max_rel_err([layer.W.grad, layer.b.grad], fd) < 1e-6

    def test_shape_mismatch(self):
        layer = DenseLinear(3, 2)
        with pytest.raises(ValueError):
            layer.forward(np.zeros((2, 4)))


class TestBayesLinear:
    def test_zero_noise_recovers_mu(self):
        layer = BayesLinear(3, 3)
        layer.mu_W.value[...] = np.eye(3)
        layer.set_eps_zero()
        x = Rng(1).normal((5, 3))
        np.testing.assert_allclose(layer.forward(x), x, atol=1e-12)

    def test_softplus_of_zero_rho(self):
        layer = BayesLinear(2, 2, sigma_init=1.0)
        layer.rho_W.value.fill(0.0)
        np.testing.assert_allclose(layer.sigma_W(), np.log(2.0))

    def test_same_stream_gives_identical_noise(self):
        layer = BayesLinear(3, 2)
        layer.sample(Rng(5, 77))
        first = (layer.eps_W.copy(), layer.eps_b.copy())
        layer.sample(Rng(5, 77))
        np.testing.assert_array_equal(first[0], layer.eps_W)
        np.testing.assert_array_equal(first[1], layer.eps_b)

    def test_forward_without_sample_errors(self):
        layer = BayesLinear(2, 2)
        with pytest.raises(RuntimeError):
            layer.forward(np.zeros((1, 2)))

    def test_tiny_sigma_limit_matches_mean_network(self):
        layer = BayesLinear(4, 4, sigma_init=1e-4)
        layer.mu_W.value[...] = np.eye(4)
        layer.sample(Rng(3))
        x = Rng(4).normal((6, 4))
        np.testing.assert_allclose(layer.forward(x), x, atol=1e-3)

    def test_backward_matches_finite_differences_with_frozen_noise(self):
        rng = Rng(31)
        layer = BayesLinear(4, 3, sigma_init=0.7)
        layer.mu_W.value[...] = 0.4 * rng.normal((4, 3))
        layer.rho_W.value[...] += 0.3 * rng.normal((4, 3))
        layer.sample(rng.substream(1))
        x = rng.substream(2).normal((5, 4))
        target = np.eye(3)[np.array([0, 1, 2, 1, 0])]

        def loss():
            return softmax_ce_head(layer.forward(x), target)[0]

        for p in layer.params():
            p.zero_grad()
        _, dlogits = softmax_ce_head(layer.forward(x), target)
        layer.backward(dlogits)
        fd = finite_diff_grads(loss, layer.params())
        assert max_rel_err([p.grad for p in layer.params()], fd) < 1e-6

    def test_sigma_rho_derivative_at_zero(self):
        # d softplus / d rho at 0 is exactly 1/2.
        from abnn.numerics import sigmoid

        assert sigmoid(np.array(0.0)) == pytest.approx(0.5, abs=1e-15)

    def test_kl_zero_at_prior(self):
        layer = BayesLinear(3, 3, sigma_init=1.0)
        assert layer.kl() == pytest.approx(0.0, abs=1e-12)
        assert layer.rho_W.value[0, 0] == pytest.approx(softplus_inv(1.0))

    def test_kl_single_weight_value(self):
        layer = BayesLinear(1, 1, sigma_init=1.0)
        layer.mu_W.value[...] = 1.0
        # bias still at the prior: total KL is the weight's 0.5
        assert layer.kl() == pytest.approx(0.5, abs=1e-12)

    def test_kl_gradient_matches_finite_differences(self):
        rng = Rng(41)
        layer = BayesLinear(3, 2, sigma_init=0.8)
        layer.mu_W.value[...] = 0.5 * rng.normal((3, 2))
        layer.rho_W.value[...] += 0.4 * rng.normal((3, 2))
        for p in layer.params():
            p.zero_grad()
        layer.kl_backward(scale=1.0)
        fd = finite_diff_grads(layer.kl, layer.params())
        assert max_rel_err([p.grad for p in layer.params()], fd) < 1e-6

    def test_kl_independent_of_batch(self):
        layer = BayesLinear(3, 3)
        before = layer.kl()
        layer.sample(Rng(0))
        layer.forward(Rng(1).normal((9, 3)))
        assert layer.kl() == before

    def test_rho_clamp_bounds_sigma(self):
        layer = BayesLinear(2, 2)
        layer.rho_W.value.fill(1e6)
        layer.rho_b.value.fill(-1e6)
        layer.clamp_rho()
        assert layer.sigma_W().max() <= 1e2 * (1 + 1e-12)
        assert layer.sigma_b().min() >= 1e-4 * (1 - 1e-12)
        assert RHO_MIN == pytest.approx(softplus_inv(1e-4))
        assert RHO_MAX == pytest.approx(softplus_inv(1e2))


class TestRelu:
    def test_forward(self):
        np.testing.assert_array_equal(relu_forward(np.array([[-1.0, 2.0]])), [[0.0, 2.0]])

    def test_backward_mask(self):
        up = np.array([[1.0, 1.0]])
        np.testing.assert_array_equal(relu_backward(np.array([[-1.0, 2.0]]), up), [[0.0, 1.0]])

    def test_zero_input_has_zero_derivative(self):
        up = np.array([[1.0]])
        np.testing.assert_array_equal(relu_backward(np.array([[0.0]]), up), [[0.0]])

    def test_finite_differences_away_from_kink(self):
        rng = Rng(51)
        x = rng.normal((6, 5))
        x[np.abs(x) < 1e-3] = 0.1
        up = rng.normal((6, 5))
        analytic = relu_backward(x, up)
        h = 1e-5
        numeric = ((relu_forward(x + h) - relu_forward(x - h)) / (2 * h)) * up
        np.testing.assert_allclose(analytic, numeric, rtol=1e-6, atol=1e-9)


class TestSoftmaxCeHead:
    def test_one_hot_target_gradient(self):
        loss, dlogits = softmax_ce_head([[0.0, 0.0]], [[1.0, 0.0]])
        assert loss == pytest.approx(np.log(2.0), abs=1e-12)
        np.testing.assert_allclose(dlogits, [[-0.5, 0.5]], atol=1e-15)

    def test_uniform_target_is_stationary_at_uniform_logits(self):
        _, dlogits = softmax_ce_head([[0.0, 0.0]], [[0.5, 0.5]])
        np.testing.assert_allclose(dlogits, [[0.0, 0.0]], atol=1e-15)

    def test_gradient_matches_finite_differences(self):
        rng = Rng(61)
        logits = rng.normal((4, 5))
        target = np.eye(5)[np.array([1, 0, 4, 2])]

        class Box:
            pass

        box = Box()
        box.value = logits

        def loss():
            return softmax_ce_head(box.value, target)[0]

        _, dlogits = softmax_ce_head(logits, target)
        fd = finite_diff_grads(loss, [box])
        assert max_rel_err([dlogits], fd) < 1e-6

    def test_saturated_logits_stay_finite_and_exact(self):
        loss, dlogits = softmax_ce_head([[60.0, -60.0]], [[0.5, 0.5]])
        assert np.isfinite(loss)
        assert loss == pytest.approx(60.0, rel=1e-9)
        np.testing.assert_allclose(dlogits, [[0.5, -0.5]], atol=1e-12)

    def test_rejects_bad_targets(self):
        with pytest.raises(ValueError):
            softmax_ce_head([[0.0, 0.0]], [[0.9, 0.3]])
        with pytest.raises(ValueError):
            softmax_ce_head([[0.0, 0.0]], [[1.0, 0.0, 0.0]])

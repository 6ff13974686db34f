"""Layers with exact analytic forward/backward passes.

Two linear layers are provided: a deterministic affine layer for the
expectation (backbone) path and a Gaussian variational layer for the
distribution (attachment) path. Every backward pass is written against
the convention loss-gradient-in, input-gradient-out, with parameter
gradients accumulated in place; the test suite holds each of them to
central finite differences.
"""

from __future__ import annotations

import numpy as np

from .numerics import Rng, as_matrix, kl_gauss_std, sigmoid, softmax, softplus, softplus_inv

# Hard clamp on the variational scale. The OOD objective's maximizer is
# sigma -> infinity; training relies on the adversarial ID term to balance
# it, and this bound is the numerical guardrail well above any balanced
# value.
SIGMA_MIN = 1e-4
SIGMA_MAX = 1e2
RHO_MIN = softplus_inv(SIGMA_MIN)
RHO_MAX = softplus_inv(SIGMA_MAX)


class Param:
    """A named tensor with a matching gradient accumulator."""

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self):
        self.grad.fill(0.0)

    def __repr__(self):
        return f"Param({self.name}, shape={self.value.shape})"


class DenseLinear:
    """Affine map y = xW + b with cached input for the backward pass."""

    def __init__(self, in_dim: int, out_dim: int, rng: Rng | None = None, name: str = "dense"):
        if rng is None:
            w = np.zeros((in_dim, out_dim))
        else:
            # He initialization; the backbone is ReLU-activated.
            w = rng.normal((in_dim, out_dim)) * np.sqrt(2.0 / in_dim)
        self.W = Param(f"{name}.W", w)
        self.b = Param(f"{name}.b", np.zeros((1, out_dim)))
        self._x = None

    @property
    def in_dim(self):
        return self.W.value.shape[0]

    @property
    def out_dim(self):
        return self.W.value.shape[1]

    def params(self):
        return [self.W, self.b]

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = as_matrix(x, "x")
        if x.shape[1] != self.in_dim:
            raise ValueError(f"expected {self.in_dim} input columns, got {x.shape[1]}")
        self._x = x
        return x @ self.W.value + self.b.value

    def backward(self, upstream: np.ndarray) -> np.ndarray:
        if self._x is None:
            raise RuntimeError("backward before forward")
        self.W.grad += self._x.T @ upstream
        self.b.grad += upstream.sum(axis=0, keepdims=True)
        return upstream @ self.W.value.T


class BayesLinear:
    """Affine map with factorized Gaussian weights w = mu + softplus(rho) * eps.

    Biases are variational too, so the KL bookkeeping treats all
    parameters of the layer uniformly. A noise draw must be installed
    (``sample`` / ``set_eps_zero`` / ``set_eps``) before ``forward``.
    """

    def __init__(self, in_dim: int, out_dim: int, sigma_init: float = 1.0, name: str = "bayes"):
        rho0 = softplus_inv(sigma_init)
        self.mu_W = Param(f"{name}.mu_W", np.zeros((in_dim, out_dim)))
        self.rho_W = Param(f"{name}.rho_W", np.full((in_dim, out_dim), rho0))
        self.mu_b = Param(f"{name}.mu_b", np.zeros((1, out_dim)))
        self.rho_b = Param(f"{name}.rho_b", np.full((1, out_dim), rho0))
        self.eps_W = None
        self.eps_b = None
        self._x = None
        self._W_eff = None

    @property
    def in_dim(self):
        return self.mu_W.value.shape[0]

    @property
    def out_dim(self):
        return self.mu_W.value.shape[1]

    def params(self):
        return [self.mu_W, self.rho_W, self.mu_b, self.rho_b]

    def sigma_W(self) -> np.ndarray:
        return softplus(self.rho_W.value)

    def sigma_b(self) -> np.ndarray:
        return softplus(self.rho_b.value)

    def sample(self, rng: Rng):
        """Draw fresh per-weight noise and cache it for subsequent forwards."""
        self.eps_W = rng.normal(self.mu_W.value.shape)
        self.eps_b = rng.normal(self.mu_b.value.shape)

    def set_eps_zero(self):
        """Install zero noise: the layer becomes the mean network."""
        self.eps_W = np.zeros_like(self.mu_W.value)
        self.eps_b = np.zeros_like(self.mu_b.value)

    def get_eps(self):
        if self.eps_W is None:
            raise RuntimeError("no noise sampled")
        return self.eps_W, self.eps_b

    def set_eps(self, eps):
        eps_W, eps_b = eps
        if eps_W.shape != self.mu_W.value.shape or eps_b.shape != self.mu_b.value.shape:
            raise ValueError("noise shape mismatch")
        self.eps_W = eps_W
        self.eps_b = eps_b

    def forward(self, x: np.ndarray) -> np.ndarray:
        if self.eps_W is None:
            raise RuntimeError("forward without a sampled noise draw; call sample() first")
        x = as_matrix(x, "x")
        if x.shape[1] != self.in_dim:
            raise ValueError(f"expected {self.in_dim} input columns, got {x.shape[1]}")
        W_eff = self.mu_W.value + self.sigma_W() * self.eps_W
        b_eff = self.mu_b.value + self.sigma_b() * self.eps_b
        self._x = x
        self._W_eff = W_eff
        return x @ W_eff + b_eff

    def backward(self, upstream: np.ndarray) -> np.ndarray:
        if self._x is None:
            raise RuntimeError("backward before forward")
        dW_eff = self._x.T @ upstream
        db_eff = upstream.sum(axis=0, keepdims=True)
        # d sigma / d rho = sigmoid(rho)
        self.mu_W.grad += dW_eff
        self.rho_W.grad += dW_eff * self.eps_W * sigmoid(self.rho_W.value)
        self.mu_b.grad += db_eff
        self.rho_b.grad += db_eff * self.eps_b * sigmoid(self.rho_b.value)
        return upstream @ self._W_eff.T

    def kl(self) -> float:
        """Sum over weights and biases of KL(N(mu, sigma^2) || N(0, 1))."""
        return float(
            kl_gauss_std(self.mu_W.value, self.sigma_W()).sum()
            + kl_gauss_std(self.mu_b.value, self.sigma_b()).sum()
        )

    def kl_backward(self, scale: float = 1.0):
        """Accumulate scale * d KL / d params.

        dKL/dmu = mu and dKL/dsigma = sigma - 1/sigma, routed through the
        softplus link.
        """
        sW, sb = self.sigma_W(), self.sigma_b()
        self.mu_W.grad += scale * self.mu_W.value
        self.mu_b.grad += scale * self.mu_b.value
        self.rho_W.grad += scale * (sW - 1.0 / sW) * sigmoid(self.rho_W.value)
        self.rho_b.grad += scale * (sb - 1.0 / sb) * sigmoid(self.rho_b.value)

    def clamp_rho(self):
        """Keep sigma inside [SIGMA_MIN, SIGMA_MAX] after optimizer steps."""
        np.clip(self.rho_W.value, RHO_MIN, RHO_MAX, out=self.rho_W.value)
        np.clip(self.rho_b.value, RHO_MIN, RHO_MAX, out=self.rho_b.value)


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    # Derivative at exactly 0 is taken as 0.
    return upstream * (x > 0.0)


def softmax_ce_head(logits, target):
    """Fused softmax + cross-entropy.

    Returns (loss, dlogits) where loss is the batch-mean cross-entropy of
    softmax(logits) against the target probability rows and
    dlogits = (softmax(logits) - target) / batch. Log-probabilities are
    computed in log-sum-exp form, so the loss stays finite and exactly
    differentiable even for saturated logits.
    """
    z = as_matrix(logits, "logits")
    t = as_matrix(target, "target")
    if z.shape != t.shape:
        raise ValueError(f"shape mismatch: logits {z.shape} vs target {t.shape}")
    if np.any(np.abs(t.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("target rows must be probability vectors")
    zmax = z.max(axis=1, keepdims=True)
    zs = z - zmax
    lse = np.log(np.exp(zs).sum(axis=1, keepdims=True))
    logp = zs - lse
    loss = float(-(t * logp).sum(axis=1).mean())
    dlogits = (np.exp(logp) - t) / z.shape[0]
    return loss, dlogits

"""Deterministic numeric kernels shared by every other module.

All tensors are dense 2-D float64 numpy arrays (batch-major). Randomness
flows exclusively through :class:`Rng`, a counter-based generator with
explicit substream derivation, so Monte Carlo evaluation order can change
without changing the numbers drawn on any given stream.
"""

from __future__ import annotations

import math

import numpy as np

_MASK64 = (1 << 64) - 1

# Floor applied to probabilities before taking logs.
LOG_CLAMP = 1e-12


def _mix64(a: int, b: int) -> int:
    """Mix two integers into one well-spread 64-bit stream id.

    splitmix64 finalizer over a weighted blend; used to derive child
    stream ids so substreams never share generator state.
    """
    x = (a * 0x9E3779B97F4A7C15 + b + 0xD1B54A32D192ED03) & _MASK64
    x ^= x >> 30
    x = (x * 0xBF58476D1CE4E5B9) & _MASK64
    x ^= x >> 27
    x = (x * 0x94D049BB133111EB) & _MASK64
    x ^= x >> 31
    return x


class Rng:
    """Counter-based random stream identified by (seed, stream_id).

    The same (seed, stream_id) pair always reproduces the same sequence.
    Distinct stream ids give statistically independent streams derived by
    integer mixing, never by sharing state. An Rng is single-owner:
    concurrent consumers must each hold their own substream.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream_id,))
        self._gen = np.random.Generator(np.random.Philox(ss))

    def substream(self, k: int) -> "Rng":
        """Derive an independent child stream; deterministic in (self, k)."""
        return Rng(self.seed, _mix64(self.stream_id, int(k)))

    def uniform(self, n: int) -> np.ndarray:
        """n i.i.d. uniforms on [0, 1) as a 1-D array."""
        return self._gen.random(int(n))

    def normal(self, shape) -> np.ndarray:
        """Standard normal draws of the given shape via Box-Muller."""
        shape = (shape,) if np.isscalar(shape) else tuple(int(s) for s in shape)
        n = int(np.prod(shape)) if shape else 1
        m = (n + 1) // 2
        u = self._gen.random(2 * m)
        z1, z2 = box_muller(1.0 - u[:m], u[m:])
        return np.concatenate([z1, z2])[:n].reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(int(n))


def box_muller(u1, u2):
    """Box-Muller transform of a pair of uniforms.

    u1 must lie in (0, 1], u2 in [0, 1). Returns the pair
    (sqrt(-2 ln u1) cos(2 pi u2), sqrt(-2 ln u1) sin(2 pi u2)).
    """
    u1 = np.asarray(u1, dtype=np.float64)
    u2 = np.asarray(u2, dtype=np.float64)
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    return r * np.cos(theta), r * np.sin(theta)


def gaussian_sample(rng: Rng, n: int) -> np.ndarray:
    """i.i.d. standard normal draws as a 1 x n matrix.

    Deterministic per (seed, stream_id) of ``rng``.
    """
    if n < 1:
        raise ValueError(f"need n >= 1, got {n}")
    return rng.normal((1, int(n)))


def as_matrix(a, name: str = "array") -> np.ndarray:
    """Validate a dense 2-D float64 matrix with finite entries."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} contains non-finite entries")
    return m


def softmax(logits) -> np.ndarray:
    """Row-wise softmax with per-row max subtraction for stability.

    Rows of the result sum to 1 within 1e-12 for |logits| up to 1e6.
    """
    x = as_matrix(logits, "logits")
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def kl_gauss_std(mu, sigma):
    """KL(N(mu, sigma^2) || N(0, 1)) in closed form.

    Equals (mu^2 + sigma^2 - ln sigma^2 - 1) / 2, elementwise for array
    inputs. Nonnegative, zero iff (mu, sigma) = (0, 1).
    """
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0.0):
        raise ValueError("sigma must be > 0")
    out = 0.5 * (mu * mu + sigma * sigma - 2.0 * np.log(sigma) - 1.0)
    return float(out) if out.ndim == 0 else out


def std_normal_cdf(x: float) -> float:
    """Standard normal distribution function via erf; abs error < 1e-7.

    Exactly 0.5 at x = 0 and symmetric: cdf(-x) = 1 - cdf(x).
    """
    return 0.5 * (1.0 + math.erf(float(x) / math.sqrt(2.0)))


def sigmoid(x) -> np.ndarray:
    """Numerically stable logistic function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x) -> np.ndarray:
    """ln(1 + e^x), overflow-safe for large x."""
    return np.logaddexp(0.0, np.asarray(x, dtype=np.float64))


def softplus_inv(y: float) -> float:
    """Inverse of softplus: ln(e^y - 1) for y > 0."""
    y = float(y)
    if y <= 0.0:
        raise ValueError("softplus is positive; need y > 0")
    return y + math.log1p(-math.exp(-y))


def cross_entropy(pred, target) -> float:
    """Mean cross-entropy between rows of probability matrices.

    Both arguments are b x K with rows summing to 1 (within 1e-6);
    predictions are clamped to [1e-12, 1] before the log.
    """
    p = as_matrix(pred, "pred")
    t = as_matrix(target, "target")
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: pred {p.shape} vs target {t.shape}")
    for name, m in (("pred", p), ("target", t)):
        if np.any(np.abs(m.sum(axis=1) - 1.0) > 1e-6):
            raise ValueError(f"{name} rows must sum to 1 within 1e-6")
    logp = np.log(np.clip(p, LOG_CLAMP, 1.0))
    return float(-(t * logp).sum(axis=1).mean())

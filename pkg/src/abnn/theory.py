"""Executable checks of the probabilistic claims behind the training rule.

Each check pits a closed-form statement against an independent numerical
route (Monte Carlo, randomized enumeration, or an actual optimization
run) and reports a (statistic, bound, pass) triple:

  * label-variance ordering: one-hot labels on clear-membership inputs
    have strictly smaller per-class Bernoulli variance than the uniform
    1/K labels of fully unrelated inputs;
  * flip probability: for two logits x1 > x2 perturbed by independent
    N(0, sigma^2) noise, P(softmax picks class 1) equals
    Phi((x1 - x2) / (sigma * sqrt(2))) and decays to 1/2 as sigma grows;
  * KL sigma-gradient: the pathwise Monte Carlo derivative of
    KL(N(0, sigma^2) || N(0, 1)) with respect to sigma matches
    sigma - 1/sigma;
  * variance ascent: an isolated OOD-phase loop really does drive the
    attachment scales upward from any start above 1;
  * merge identity: the two-term (minimize-ID, maximize-alpha*OOD)
    objective equals its single merged form when both are evaluated on
    shared weight samples.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import BayesLinear, softmax_ce_head
from .model import AbnnModel, ModelConfig
from .numerics import Rng, kl_gauss_std, softmax, std_normal_cdf
from .training import Adam, TrainerConfig, merged_objective, pseudo_label


@dataclass
class DensityProfile:
    """Per-class density values at one input point, with margin parameters.

    A profile is in-distribution when the largest density beats every
    other by more than ``delta`` and exceeds ``epsilon``; it is full-OOD
    when every density is at most ``epsilon``.
    """

    f: np.ndarray
    delta: float
    epsilon: float = 1e-6

    def __post_init__(self):
        self.f = np.asarray(self.f, dtype=np.float64).ravel()
        if np.any(self.f < 0):
            raise ValueError("densities must be nonnegative")

    def is_id(self) -> bool:
        top = np.sort(self.f)
        return bool(top[-1] > self.epsilon and top[-1] > top[-2] + self.delta)

    def is_full_ood(self) -> bool:
        return bool(np.all(self.f <= self.epsilon))


def label_bernoulli_variance(profile: DensityProfile, regime: str) -> np.ndarray:
    """Per-class variance of one-hot label coordinates.

    ID regime: class probabilities are the normalized densities and each
    coordinate is Bernoulli(p_i) with variance p_i (1 - p_i). Full-OOD
    regime: the input is independent of every class, so p_i = 1/K.
    """
    K = profile.f.size
    if regime == "FULL":
        p = np.full(K, 1.0 / K)
    elif regime == "ID":
        s = profile.f.sum()
        if s == 0.0:
            raise ValueError("ID regime requires a nonzero density profile")
        p = profile.f / s
    else:
        raise ValueError("regime must be 'ID' or 'FULL'")
    return p * (1.0 - p)


def id_margin_floor(K: int) -> float:
    """Smallest unit-scale margin for which the variance ordering is forced.

    The dominant-class Bernoulli variance p(1-p) drops below the uniform
    baseline (1/K)(1-1/K) exactly when p > 1 - 1/K. With densities scaled
    to (0, 1], an additive margin delta makes the worst case
    p = 1 / (1 + (K-1)(1-delta)), which clears 1 - 1/K exactly when
    delta >= 1 - 1/(K-1)^2. Below that floor counterexamples exist for
    K >= 3 (e.g. K = 10, delta = 0.5, f = (1, 1/3, ..., 1/3)).
    """
    if K < 2:
        raise ValueError("K must be >= 2")
    return 1.0 - 1.0 / (K - 1) ** 2


def sample_id_profile(K: int, rng: Rng, delta: float | None = None) -> DensityProfile:
    """Random clear-membership profile on the unit density scale.

    Draws a margin above ``id_margin_floor(K)`` (unless given), a dominant
    density in (delta, 1], and the remaining densities in [0, max - delta).
    """
    u = rng.uniform(K + 3)
    floor = id_margin_floor(K)
    if delta is None:
        delta = floor + (0.05 + 0.95 * u[0]) * (1.0 - floor)
    elif delta < floor:
        raise ValueError(f"delta below the validity floor {floor:.6f} for K={K}")
    f_max = delta + (0.05 + 0.95 * u[1]) * (1.0 - delta)
    f = u[3 : 3 + K] * (f_max - delta)
    top = int(u[2] * K) % K
    f[top] = f_max
    return DensityProfile(f=f, delta=delta)


def softmax_flip_probability(x1: float, x2: float, sigma: float, n_mc: int, rng: Rng, cdf=std_normal_cdf):
    """Monte Carlo vs closed-form probability that noisy softmax keeps class 1.

    Perturbs both logits with independent N(0, sigma^2) noise and counts
    softmax(...)[0] > 1/2; the closed form is Phi((x1 - x2)/(sigma*sqrt(2)))
    since the difference of the two noises has standard deviation
    sigma * sqrt(2). sigma = 0 degenerates to the indicator of x1 > x2.
    """
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    if sigma == 0.0:
        p_closed = float(x1 > x2)
        p_hat = p_closed
        return p_hat, p_closed
    eps1 = rng.normal(n_mc)
    eps2 = rng.normal(n_mc)
    logits = np.column_stack([x1 + eps1 * sigma, x2 + eps2 * sigma])
    probs = softmax(logits)
    p_hat = float((probs[:, 0] > 0.5).mean())
    p_closed = float(cdf((x1 - x2) / (sigma * np.sqrt(2.0))))
    return p_hat, p_closed


def kl_sigma_gradient_check(sigma: float, n_mc: int, rng: Rng):
    """Pathwise MC estimate of d/dsigma KL(N(0, sigma^2) || N(0,1)) vs sigma - 1/sigma.

    With w = sigma * eps, the per-sample integrand ln q(w) - ln p(w) is
    -ln sigma - eps^2/2 + sigma^2 eps^2 / 2, whose sigma-derivative at
    fixed eps is sigma * eps^2 - 1/sigma; its expectation is the closed
    form.
    """
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    eps = rng.normal(n_mc)
    mc_grad = float((sigma * eps * eps - 1.0 / sigma).mean())
    closed = sigma - 1.0 / sigma
    return mc_grad, closed


def ood_ascent_drift(init_sigma: float, steps: int, cfg: TrainerConfig, rng: Rng) -> np.ndarray:
    """Mean attachment sigma per step of an isolated OOD-phase ascent.

    Runs the maximize-alpha*(KL + CE-to-uniform) update on a single
    Bayesian linear layer fed a fixed random batch. Returns the sigma
    trajectory including the initial value (length steps + 1).
    """
    if init_sigma <= 0:
        raise ValueError("init_sigma must be > 0")
    cfg.validate()
    kl_scale = cfg.kl_scale if cfg.kl_scale is not None else 1.0
    layer = BayesLinear(2, 2, sigma_init=init_sigma, name="toy")
    x = rng.substream(0).normal((8, 2))
    target = pseudo_label(2, 8)
    opt = Adam.from_config(layer.params(), cfg)
    sample_rng = rng.substream(1)

    def mean_sigma():
        return float(np.concatenate([layer.sigma_W().ravel(), layer.sigma_b().ravel()]).mean())

    traj = [mean_sigma()]
    for _ in range(steps):
        for p in layer.params():
            p.zero_grad()
        for _ in range(cfg.n_samples):
            layer.sample(sample_rng)
            _, dlogits = softmax_ce_head(layer.forward(x), target)
            layer.backward(dlogits * (-cfg.alpha / cfg.n_samples))
        layer.kl_backward(scale=-cfg.alpha * kl_scale)
        opt.step()
        layer.clamp_rho()
        traj.append(mean_sigma())
    return np.asarray(traj)


def merge_identity_check(trials: int, alpha: float, rng: Rng) -> float:
    """Max |two-term - merged| over random small models and batches."""
    if not (0.0 < alpha < 1.0):
        raise ValueError("alpha must be in (0, 1)")
    worst = 0.0
    for t in range(trials):
        sub = rng.substream(t)
        u = sub.uniform(4)
        cfg_m = ModelConfig(
            in_dim=2 + int(u[0] * 3),
            n_classes=2 + int(u[1] * 3),
            width=2 + int(u[2] * 4),
            n_blocks=1 + int(u[3] * 2),
        )
        model = AbnnModel(cfg_m, sub.substream(1))
        noise = sub.substream(2)
        for att in model.attachments:
            att.mu_W.value += 0.3 * noise.normal(att.mu_W.value.shape)
            att.rho_W.value += 0.5 * noise.normal(att.rho_W.value.shape)
            att.mu_b.value += 0.3 * noise.normal(att.mu_b.value.shape)
            att.rho_b.value += 0.5 * noise.normal(att.rho_b.value.shape)
        batch = sub.substream(3)
        x_id = batch.normal((3, cfg_m.in_dim))
        x_ood = batch.normal((3, cfg_m.in_dim))
        labels = np.zeros((3, cfg_m.n_classes))
        labels[np.arange(3), (batch.uniform(3) * cfg_m.n_classes).astype(int)] = 1.0
        cfg = TrainerConfig(alpha=alpha, n_samples=3, kl_scale=1.0)
        two_term, merged = merged_objective(model, x_id, labels, x_ood, cfg, sub.substream(4))
        worst = max(worst, abs(two_term - merged))
    return worst


# ---- check runner -------------------------------------------------------------


def _check(name, statistic, bound, op):
    ok = statistic <= bound if op == "<=" else statistic >= bound
    return {"check": name, "statistic": float(statistic), "bound": float(bound), "op": op, "pass": bool(ok)}


def run_all_checks(
    seed: int = 0,
    n_mc: int = 10**6,
    n_profiles: int = 10**4,
    ascent_steps: int = 500,
    merge_trials: int = 100,
    cdf=std_normal_cdf,
) -> list[dict]:
    """Run the full battery; each entry is {check, statistic, bound, op, pass}."""
    rng = Rng(seed, stream_id=777)
    checks = []

    # Closed-form Gaussian KL against a plain Monte Carlo estimate.
    worst_norm = 0.0
    kl_rng = rng.substream(0)
    for i in range(20):
        u = kl_rng.uniform(2)
        mu = -3.0 + 6.0 * u[0]
        sigma = 0.1 + 4.9 * u[1]
        w = mu + sigma * kl_rng.normal(n_mc // 10)
        integrand = -np.log(sigma) - ((w - mu) ** 2) / (2 * sigma**2) + (w**2) / 2.0
        mc = integrand.mean()
        se = integrand.std(ddof=1) / np.sqrt(integrand.size)
        closed = kl_gauss_std(mu, sigma)
        worst_norm = max(worst_norm, abs(closed - mc) / (3.0 * se))
    checks.append(_check("gaussian_kl_closed_form", worst_norm, 1.0, "<="))

    # Label-variance ordering and the posterior margin bound.
    counter, margin_violations = 0, 0
    prof_rng = rng.substream(1)
    for K in (2, 10):
        full_var = (1.0 / K) * (1.0 - 1.0 / K)
        for i in range(n_profiles):
            prof = sample_id_profile(K, prof_rng.substream(1000 * K + i))
            vars_id = label_bernoulli_variance(prof, "ID")
            if np.any(vars_id >= full_var):
                counter += 1
            p = prof.f / prof.f.sum()
            if p.max() <= (1.0 + prof.delta) / (K + prof.delta):
                margin_violations += 1
    checks.append(_check("label_variance_ordering", counter, 0, "<="))
    checks.append(_check("label_posterior_margin", margin_violations, 0, "<="))

    # Noisy-softmax flip probability: MC vs closed form, and decay to 1/2.
    flip_rng = rng.substream(2)
    worst_gap = 0.0
    for i, sigma in enumerate((1.0, 10.0, 100.0)):
        p_hat, p_closed = softmax_flip_probability(1.0, 0.0, sigma, n_mc, flip_rng.substream(i), cdf=cdf)
        worst_gap = max(worst_gap, abs(p_hat - p_closed))
    checks.append(_check("flip_probability_mc", worst_gap, 0.005, "<="))
    closed = [softmax_flip_probability(1.0, 0.0, s, 1, flip_rng.substream(10 + i), cdf=cdf)[1]
              for i, s in enumerate((0.1, 1.0, 10.0, 100.0))]
    gaps = np.asarray(closed) - 0.5
    checks.append(_check("flip_probability_monotone", float(np.diff(gaps).max()), 0.0, "<="))

    # KL sigma-gradient: pathwise MC vs sigma - 1/sigma.
    grad_rng = rng.substream(3)
    worst_ratio = 0.0
    for i, sigma in enumerate((0.5, 1.0, 2.0)):
        mc, closed_g = kl_sigma_gradient_check(sigma, n_mc, grad_rng.substream(i))
        tol = max(0.02, 0.02 * abs(closed_g))
        worst_ratio = max(worst_ratio, abs(mc - closed_g) / tol)
    checks.append(_check("kl_sigma_gradient", worst_ratio, 1.0, "<="))

    # Isolated OOD-phase ascent drifts sigma upward until the clamp.
    cfg = TrainerConfig(alpha=0.95, n_samples=5, lr=0.05, kl_scale=1.0)
    traj = ood_ascent_drift(1.5, ascent_steps, cfg, rng.substream(4))
    from .layers import SIGMA_MAX

    clamped = np.nonzero(traj >= SIGMA_MAX * 0.999)[0]
    upto = int(clamped[0]) + 1 if clamped.size else traj.size
    deltas = np.diff(traj[:upto])
    frac_up = float((deltas >= 0).mean()) if deltas.size else 1.0
    checks.append(_check("ood_ascent_final_sigma", float(traj[-1]), 10.0, ">="))
    checks.append(_check("ood_ascent_monotone", frac_up, 0.95, ">="))

    # Two-term vs merged objective, shared samples.
    merge_rng = rng.substream(5)
    worst_merge = max(
        merge_identity_check(merge_trials, 0.5, merge_rng.substream(0)),
        merge_identity_check(merge_trials, 0.95, merge_rng.substream(1)),
    )
    checks.append(_check("merge_identity", worst_merge, 1e-9, "<="))

    return checks

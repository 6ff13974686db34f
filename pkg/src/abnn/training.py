"""Three-phase adversarial training loop, Adam, and baseline modes.

Per minibatch the full procedure is:

  phase 1  freeze attachments; N times: sample attachment noise, take one
           Adam step on the backbone against the task cross-entropy;
  phase 2  freeze backbone; one Adam step on the attachments descending
           kl_scale * KL(q || prior) + mean_i CE(softmax(f_i(X_id)), one-hot);
  phase 3  keep backbone frozen; one Adam step on the attachments
           ASCENDING alpha * [kl_scale * KL(q || prior) + mean_i CE(..., uniform)]
           evaluated on the OOD pool, with the sigma clamp enforced after
           the step.

Mode ``bbp`` runs phases 1-2 only, ``oe`` trains a deterministic net on
CE(ID one-hot) + CE(OOD uniform), ``plain`` trains on CE(ID) alone.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .layers import Param, softmax_ce_head
from .model import AbnnModel, predict_mean
from .numerics import Rng

MODES = ("abnn", "bbp", "oe", "plain")


@dataclass
class TrainerConfig:
    alpha: float = 0.95
    n_samples: int = 5
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    epochs: int = 30
    kl_scale: float | None = None  # None: resolved to 1 / minibatches-per-epoch
    label_smoothing: float = 0.05  # keeps the task CE away from exact saturation
    mode: str = "abnn"
    seed: int = 0

    def validate(self):
        if not (0.0 < self.alpha <= 1.0):
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.kl_scale is not None and self.kl_scale <= 0:
            raise ValueError("kl_scale must be > 0")
        if not (0.0 <= self.label_smoothing < 1.0):
            raise ValueError("label_smoothing must be in [0, 1)")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")


class Adam:
    """Adam with bias correction over a fixed list of parameters."""

    def __init__(self, params: list[Param], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    @classmethod
    def from_config(cls, params, cfg: TrainerConfig):
        return cls(params, lr=cfg.lr, beta1=cfg.adam_beta1, beta2=cfg.adam_beta2, eps=cfg.adam_eps)

    def step(self):
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            g = p.grad
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            m_hat = self.m[i] / b1c
            v_hat = self.v[i] / b2c
            p.value -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def pseudo_label(K: int, batch: int) -> np.ndarray:
    """Uniform pseudo-label rows [1/K, ..., 1/K] for OOD samples."""
    if K < 2:
        raise ValueError("K must be >= 2")
    if batch < 1:
        raise ValueError("batch must be >= 1")
    return np.full((batch, K), 1.0 / K)


def one_hot(labels, K: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ValueError("labels out of range")
    out = np.zeros((labels.size, K))
    out[np.arange(labels.size), labels] = 1.0
    return out


# ---- pure phase objectives (finite-difference friendly) ----------------------


def sample_eps_sets(model: AbnnModel, rng: Rng, n: int):
    """Draw n attachment noise sets; each is reusable via model.set_noise."""
    sets = []
    for _ in range(n):
        model.sample_noise(rng)
        sets.append(model.get_noise())
    return sets


def phase1_objective(model, x, target, eps_sets, grad=False) -> float:
    """Mean task cross-entropy over fixed noise sets.

    With grad=True accumulates d(objective)/d(params) for ALL parameters;
    the caller decides which partition the optimizer may touch.
    """
    n = len(eps_sets)
    total = 0.0
    for eps in eps_sets:
        model.set_noise(eps)
        logits = model.forward_current(x)
        loss, dlogits = softmax_ce_head(logits, target)
        total += loss
        if grad:
            model.backward(dlogits / n)
    return total / n


def phase2_objective(model, x, target, kl_scale, eps_sets, grad=False) -> float:
    """kl_scale * KL(q || prior) + mean CE over fixed noise sets."""
    ce = phase1_objective(model, x, target, eps_sets, grad=grad)
    kl = model.attachment_kl()
    if grad:
        model.attachment_kl_backward(scale=kl_scale)
    return kl_scale * kl + ce


def phase3_objective(model, x_ood, alpha, kl_scale, eps_sets, grad=False) -> float:
    """OOD objective alpha * [kl_scale * KL + mean CE against uniform labels].

    Returns the value being MAXIMIZED. With grad=True the accumulated
    gradient is of the NEGATED objective, so a descent step on it ascends
    the objective.
    """
    n = len(eps_sets)
    target = pseudo_label(model.config.n_classes, np.asarray(x_ood).shape[0])
    total = 0.0
    for eps in eps_sets:
        model.set_noise(eps)
        logits = model.forward_current(x_ood)
        loss, dlogits = softmax_ce_head(logits, target)
        total += loss
        if grad:
            model.backward(dlogits * (-alpha / n))
    kl = model.attachment_kl()
    if grad:
        model.attachment_kl_backward(scale=-alpha * kl_scale)
    return alpha * (kl_scale * kl + total / n)


def merged_objective(model, batch_id, labels_onehot, batch_ood, cfg: TrainerConfig, rng: Rng):
    """Two-term vs merged form of the combined attachment objective.

    two_term = L_ID - alpha * L_OOD with L_* = kl_scale*KL + mean CE;
    merged   = (1-alpha)*kl_scale*KL + mean_i [CE_ID_i - alpha * CE_OOD_i].
    Both are evaluated on the SAME noise sets, so they agree to rounding.
    """
    ks = 1.0 if cfg.kl_scale is None else cfg.kl_scale
    eps_sets = sample_eps_sets(model, rng, cfg.n_samples)
    K = model.config.n_classes
    uniform = pseudo_label(K, np.asarray(batch_ood).shape[0])
    kl = model.attachment_kl()
    ce_id, ce_ood = [], []
    for eps in eps_sets:
        model.set_noise(eps)
        ce_id.append(softmax_ce_head(model.forward_current(batch_id), labels_onehot)[0])
        model.set_noise(eps)
        ce_ood.append(softmax_ce_head(model.forward_current(batch_ood), uniform)[0])
    ce_id = np.asarray(ce_id)
    ce_ood = np.asarray(ce_ood)
    two_term = (ks * kl + ce_id.mean()) - cfg.alpha * (ks * kl + ce_ood.mean())
    merged = (1.0 - cfg.alpha) * ks * kl + (ce_id - cfg.alpha * ce_ood).mean()
    return float(two_term), float(merged)


# ---- stateful trainer ---------------------------------------------------------


class Trainer:
    """Holds the model plus one Adam state per phase.

    Phase 3 maximizes by descending the negated objective; it gets its own
    Adam state so its moments never mix with the phase-2 minimization.
    """

    def __init__(self, model: AbnnModel, cfg: TrainerConfig, kl_scale: float | None = None):
        cfg.validate()
        self.model = model
        self.cfg = cfg
        self.kl_scale = kl_scale if kl_scale is not None else (cfg.kl_scale or 1.0)
        omega1, omega2 = model.partition_params()
        self.opt1 = Adam.from_config(omega1, cfg)
        self.opt2 = Adam.from_config(omega2, cfg)
        self.opt3 = Adam.from_config(omega2, cfg)

    def _require_freeze(self, expectation: bool):
        m = self.model
        if expectation and not (m.freeze_expectation and not m.freeze_distribution):
            raise RuntimeError("phase 2/3 requires freeze_expectation set (and only it)")
        if not expectation and not (m.freeze_distribution and not m.freeze_expectation):
            raise RuntimeError("phase 1 requires freeze_distribution set (and only it)")

    def phase1_step(self, batch_id, labels_onehot, rng: Rng) -> float:
        """N inner iterations, each resampling noise and updating omega1."""
        self._require_freeze(expectation=False)
        losses = []
        for _ in range(self.cfg.n_samples):
            self.model.sample_noise(rng)
            logits = self.model.forward_current(batch_id)
            loss, dlogits = softmax_ce_head(logits, labels_onehot)
            self.model.zero_grad()
            self.model.backward(dlogits)
            self.opt1.step()
            losses.append(loss)
        return float(np.mean(losses))

    def phase2_step(self, batch_id, labels_onehot, rng: Rng) -> float:
        self._require_freeze(expectation=True)
        eps_sets = sample_eps_sets(self.model, rng, self.cfg.n_samples)
        self.model.zero_grad()
        loss = phase2_objective(self.model, batch_id, labels_onehot, self.kl_scale, eps_sets, grad=True)
        self.opt2.step()
        self.model.clamp_attachment_sigma()
        return loss

    def phase3_step(self, batch_ood, rng: Rng) -> float:
        self._require_freeze(expectation=True)
        eps_sets = sample_eps_sets(self.model, rng, self.cfg.n_samples)
        self.model.zero_grad()
        objective = phase3_objective(
            self.model, batch_ood, self.cfg.alpha, self.kl_scale, eps_sets, grad=True
        )
        self.opt3.step()
        self.model.clamp_attachment_sigma()
        return objective

    def deterministic_step(self, batch_id, labels_onehot, batch_ood=None) -> float:
        """oe/plain step: zero noise, combined CE, one omega1 update."""
        self._require_freeze(expectation=False)
        self.model.set_noise_zero()
        self.model.zero_grad()
        loss, dlogits = softmax_ce_head(self.model.forward_current(batch_id), labels_onehot)
        self.model.backward(dlogits)
        if batch_ood is not None:
            uniform = pseudo_label(self.model.config.n_classes, np.asarray(batch_ood).shape[0])
            loss_ood, dlogits_ood = softmax_ce_head(self.model.forward_current(batch_ood), uniform)
            self.model.backward(dlogits_ood)
            loss += loss_ood
        self.opt1.step()
        return loss


def _freeze(model: AbnnModel, side: str):
    model.freeze_expectation = side == "expectation"
    model.freeze_distribution = side == "distribution"


def train_arrays(
    model: AbnnModel,
    x_train,
    y_train,
    cfg: TrainerConfig,
    x_ood=None,
    x_val=None,
    y_val=None,
):
    """Run the configured training mode over numpy arrays.

    Returns a list of per-epoch log dicts with keys epoch, phase1_loss,
    phase2_loss, phase3_loss, id_acc and mean_sigma (None where a phase
    does not apply to the mode). Deterministic given cfg.seed.
    """
    cfg.validate()
    x_train = np.asarray(x_train, dtype=np.float64)
    y_train = np.asarray(y_train, dtype=np.int64)
    needs_ood = cfg.mode in ("abnn", "oe")
    if needs_ood and x_ood is None:
        raise ValueError(f"mode {cfg.mode!r} requires an OOD training pool")
    K = model.config.n_classes
    n = x_train.shape[0]
    n_batches = max(1, (n + cfg.batch_size - 1) // cfg.batch_size)
    kl_scale = cfg.kl_scale if cfg.kl_scale is not None else 1.0 / n_batches
    trainer = Trainer(model, cfg, kl_scale=kl_scale)

    root = Rng(cfg.seed)
    shuffle_rng = root.substream(1)
    phase_rng = root.substream(2)
    ood_shuffle_rng = root.substream(3)

    if x_ood is not None:
        x_ood = np.asarray(x_ood, dtype=np.float64)

    log = []
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        if x_ood is not None:
            ood_order = ood_shuffle_rng.permutation(x_ood.shape[0])
            ood_pos = 0
        p1, p2, p3 = [], [], []
        for b in range(n_batches):
            idx = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            xb = x_train[idx]
            yb = one_hot(y_train[idx], K)
            if cfg.label_smoothing > 0.0:
                yb = yb * (1.0 - cfg.label_smoothing) + cfg.label_smoothing / K
            ob = None
            if x_ood is not None:
                take = []
                while len(take) < len(idx):
                    if ood_pos == len(ood_order):
                        ood_order = ood_shuffle_rng.permutation(x_ood.shape[0])
                        ood_pos = 0
                    take.append(ood_order[ood_pos])
                    ood_pos += 1
                ob = x_ood[np.asarray(take)]

            if cfg.mode in ("abnn", "bbp"):
                _freeze(model, "distribution")
                p1.append(trainer.phase1_step(xb, yb, phase_rng))
                _freeze(model, "expectation")
                p2.append(trainer.phase2_step(xb, yb, phase_rng))
                if cfg.mode == "abnn":
                    p3.append(trainer.phase3_step(ob, phase_rng))
            else:
                _freeze(model, "distribution")
                p3_batch = ob if cfg.mode == "oe" else None
                p1.append(trainer.deterministic_step(xb, yb, p3_batch))
        model.freeze_expectation = False
        model.freeze_distribution = False

        if x_val is not None and y_val is not None:
            acc = accuracy(model, x_val, y_val)
        else:
            acc = accuracy(model, x_train, y_train)
        log.append(
            {
                "epoch": epoch,
                "phase1_loss": float(np.mean(p1)) if p1 else None,
                "phase2_loss": float(np.mean(p2)) if p2 else None,
                "phase3_loss": float(np.mean(p3)) if p3 else None,
                "id_acc": acc,
                "mean_sigma": model.mean_attachment_sigma(),
            }
        )
    return log


def accuracy(model: AbnnModel, x, y) -> float:
    """Mean-network argmax accuracy."""
    probs = predict_mean(model, x)
    return float((probs.argmax(axis=1) == np.asarray(y, dtype=np.int64)).mean())


def train(model: AbnnModel, bundle, cfg: TrainerConfig):
    """Train on a DatasetBundle; see train_arrays for the log format."""
    ood = bundle.ood_train if cfg.mode in ("abnn", "oe") else None
    return train_arrays(
        model,
        bundle.id_train_x,
        bundle.id_train_y,
        cfg,
        x_ood=ood,
        x_val=bundle.id_test_x,
        y_val=bundle.id_test_y,
    )


def resolve_config(cfg: TrainerConfig, n_train: int) -> TrainerConfig:
    """Copy of cfg with kl_scale pinned to 1 / minibatches-per-epoch."""
    if cfg.kl_scale is not None:
        return cfg
    n_batches = max(1, (n_train + cfg.batch_size - 1) // cfg.batch_size)
    return replace(cfg, kl_scale=1.0 / n_batches)

"""The attachment-structured network.

An expectation module (embedding, residual MLP blocks, linear head) owns
the predictive task; one small Bayesian linear attachment rides on each
block and carries all the stochasticity. Attachments combine additively:

    h <- ReLU(h + linear2(ReLU(linear1(h)))) + bayes(h)

and are initialized with zero mean so that at initialization the model is
bitwise identical to the plain backbone. The (omega1, omega2) parameter
partition separates backbone parameters from attachment parameters; the
freeze flags gate which side a training phase may update.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .layers import BayesLinear, DenseLinear, relu_backward, relu_forward
from .numerics import Rng, as_matrix, softmax


@dataclass
class ModelConfig:
    in_dim: int
    n_classes: int
    width: int = 32
    n_blocks: int = 3
    sigma_init: float = 1.0
    attachment_scale: float | None = None  # None: 1/sqrt(width)

    def validate(self):
        if self.in_dim < 1 or self.width < 1 or self.n_blocks < 1:
            raise ValueError("in_dim, width and n_blocks must be >= 1")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.sigma_init <= 0:
            raise ValueError("sigma_init must be > 0")
        if self.attachment_scale is not None and self.attachment_scale <= 0:
            raise ValueError("attachment_scale must be > 0")

    def resolved_attachment_scale(self) -> float:
        if self.attachment_scale is not None:
            return float(self.attachment_scale)
        return 1.0 / float(np.sqrt(self.width))


class BackboneBlock:
    """Residual MLP block: out = ReLU(h + linear2(ReLU(linear1(h))))."""

    def __init__(self, width: int, rng: Rng, name: str):
        self.linear1 = DenseLinear(width, width, rng, name=f"{name}.linear1")
        self.linear2 = DenseLinear(width, width, rng, name=f"{name}.linear2")
        self._t1 = None
        self._s = None

    def params(self):
        return self.linear1.params() + self.linear2.params()

    def forward(self, h: np.ndarray) -> np.ndarray:
        t1 = self.linear1.forward(h)
        a1 = relu_forward(t1)
        t2 = self.linear2.forward(a1)
        s = h + t2
        self._t1 = t1
        self._s = s
        return relu_forward(s)

    def backward(self, upstream: np.ndarray) -> np.ndarray:
        ds = relu_backward(self._s, upstream)
        da1 = self.linear2.backward(ds)
        dt1 = relu_backward(self._t1, da1)
        dh = self.linear1.backward(dt1)
        return ds + dh


class AbnnModel:
    """Backbone block stack (omega1) plus per-block Bayesian attachments (omega2)."""

    def __init__(self, config: ModelConfig, rng: Rng):
        config.validate()
        self.config = config
        # Attachment contributions are scaled down so a unit-scale
        # variational sigma injects unit-scale (not sqrt(width)-scale)
        # noise per activation.
        self.attachment_scale = config.resolved_attachment_scale()
        self.embed = DenseLinear(config.in_dim, config.width, rng, name="embed")
        self.blocks = [BackboneBlock(config.width, rng, name=f"block{i}") for i in range(config.n_blocks)]
        self.attachments = [
            BayesLinear(config.width, config.width, sigma_init=config.sigma_init, name=f"attach{i}")
            for i in range(config.n_blocks)
        ]
        self.head = DenseLinear(config.width, config.n_classes, rng, name="head")
        self.freeze_expectation = False
        self.freeze_distribution = False

    # ---- parameter plumbing -------------------------------------------------

    def params(self):
        """All parameters in canonical checkpoint order."""
        out = self.embed.params()
        for blk in self.blocks:
            out += blk.params()
        for att in self.attachments:
            out += att.params()
        out += self.head.params()
        return out

    def partition_params(self):
        """Disjoint, exhaustive split into (omega1, omega2)."""
        omega1 = self.embed.params() + self.head.params()
        for blk in self.blocks:
            omega1 += blk.params()
        omega2 = []
        for att in self.attachments:
            omega2 += att.params()
        return omega1, omega2

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()

    # ---- noise handling -----------------------------------------------------

    def sample_noise(self, rng: Rng):
        for att in self.attachments:
            att.sample(rng)

    def set_noise_zero(self):
        for att in self.attachments:
            att.set_eps_zero()

    def get_noise(self):
        return [att.get_eps() for att in self.attachments]

    def set_noise(self, noise):
        for att, eps in zip(self.attachments, noise):
            att.set_eps(eps)

    # ---- forward / backward -------------------------------------------------

    def forward(self, x, rng: Rng | None = None, stochastic: bool = False) -> np.ndarray:
        """Logits for a batch; stochastic draws fresh attachment noise."""
        if stochastic:
            if rng is None:
                raise ValueError("stochastic forward needs an rng")
            self.sample_noise(rng)
        else:
            self.set_noise_zero()
        return self.forward_current(x)

    def forward_current(self, x) -> np.ndarray:
        """Forward pass reusing whatever attachment noise is installed."""
        x = as_matrix(x, "x")
        s = self.attachment_scale
        h = self.embed.forward(x)
        for blk, att in zip(self.blocks, self.attachments):
            h = blk.forward(h) + s * att.forward(h)
        return self.head.forward(h)

    def backward(self, dlogits: np.ndarray) -> np.ndarray:
        """Accumulate parameter gradients; returns the input gradient."""
        s = self.attachment_scale
        dh = self.head.backward(dlogits)
        for blk, att in zip(reversed(self.blocks), reversed(self.attachments)):
            dh = blk.backward(dh) + att.backward(s * dh)
        return self.embed.backward(dh)

    # ---- attachment helpers -------------------------------------------------

    def attachment_kl(self) -> float:
        return sum(att.kl() for att in self.attachments)

    def attachment_kl_backward(self, scale: float = 1.0):
        for att in self.attachments:
            att.kl_backward(scale)

    def clamp_attachment_sigma(self):
        for att in self.attachments:
            att.clamp_rho()

    def attachment_sigmas(self) -> np.ndarray:
        """All attachment sigma values flattened into one vector."""
        parts = []
        for att in self.attachments:
            parts.append(att.sigma_W().ravel())
            parts.append(att.sigma_b().ravel())
        return np.concatenate(parts)

    def mean_attachment_sigma(self) -> float:
        return float(self.attachment_sigmas().mean())


def predict_mc(model: AbnnModel, x, n_samples: int, rng: Rng) -> np.ndarray:
    """Mean softmax over n_samples stochastic forward passes.

    Each sample uses its own substream, so the result is bit-reproducible
    for a given rng regardless of evaluation order.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    x = as_matrix(x, "x")
    acc = np.zeros((x.shape[0], model.config.n_classes))
    for j in range(n_samples):
        acc += softmax(model.forward(x, rng=rng.substream(j), stochastic=True))
    return acc / n_samples


def predict_mean(model: AbnnModel, x) -> np.ndarray:
    """Softmax of the mean network (attachment noise forced to zero)."""
    return softmax(model.forward(x, stochastic=False))


# ---- checkpoint format -------------------------------------------------------

CHECKPOINT_VERSION = 1


def checkpoint_dict(model: AbnnModel, extra_config: dict | None = None) -> dict:
    """Serializable snapshot; parameters in canonical order."""
    config = asdict(model.config)
    if extra_config:
        config.update(extra_config)
    return {
        "version": CHECKPOINT_VERSION,
        "config": config,
        "params": [
            {
                "name": p.name,
                "shape": list(p.value.shape),
                "data": [float(v) for v in p.value.ravel()],
            }
            for p in model.params()
        ],
    }


def save_checkpoint(model: AbnnModel, path, extra_config: dict | None = None):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(checkpoint_dict(model, extra_config), fh)
        fh.write("\n")


def load_checkpoint(path):
    """Rebuild a model from a checkpoint file.

    Returns (model, config_dict); config_dict keeps any extra keys stored
    alongside the model fields (e.g. the training mode).
    """
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version: {doc.get('version')!r}")
    cfg_dict = dict(doc["config"])
    scale = cfg_dict.get("attachment_scale")
    model_cfg = ModelConfig(
        in_dim=int(cfg_dict["in_dim"]),
        n_classes=int(cfg_dict["n_classes"]),
        width=int(cfg_dict["width"]),
        n_blocks=int(cfg_dict["n_blocks"]),
        sigma_init=float(cfg_dict["sigma_init"]),
        attachment_scale=None if scale is None else float(scale),
    )
    model = AbnnModel(model_cfg, Rng(0))
    params = model.params()
    entries = doc["params"]
    if len(entries) != len(params):
        raise ValueError(f"checkpoint has {len(entries)} parameters, model expects {len(params)}")
    for p, entry in zip(params, entries):
        if entry["name"] != p.name:
            raise ValueError(f"parameter order mismatch: {entry['name']!r} vs {p.name!r}")
        shape = tuple(entry["shape"])
        if shape != p.value.shape:
            raise ValueError(f"shape mismatch for {p.name}: {shape} vs {p.value.shape}")
        data = np.asarray(entry["data"], dtype=np.float64)
        if data.size != p.value.size:
            raise ValueError(f"data length mismatch for {p.name}")
        p.value[...] = data.reshape(shape)
    return model, cfg_dict

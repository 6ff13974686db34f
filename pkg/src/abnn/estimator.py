"""scikit-learn estimator facade over the attachment-Bayesian trainer.

The classifier composes with pipelines, grid search and the usual
metrics: hyperparameters live in ``__init__``, ``fit`` owns all
validation and state, and fitted attributes carry the trailing
underscore. Inputs are expected roughly standardized (compose with
``StandardScaler`` when they are not).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .datasets import pseudo_ood
from .model import AbnnModel, ModelConfig, predict_mc, predict_mean
from .numerics import Rng
from .training import MODES, TrainerConfig, train_arrays

_PREDICT_STREAM = 0xE7A1


class AbnnClassifier(BaseEstimator, ClassifierMixin):
    """Classifier with OOD-aware predictive uncertainty.

    A deterministic backbone learns the task while small Bayesian
    attachment layers learn where to be uncertain, trained per minibatch
    in three phases: task loss on ID data (backbone), variational KL
    objective on ID data (attachments, minimized), and an alpha-scaled
    copy of that objective on OOD data (attachments, maximized).

    Parameters
    ----------
    mode : {'abnn', 'bbp', 'oe', 'plain'}
        'abnn' runs all three phases; 'bbp' skips the OOD phase; 'oe'
        trains a deterministic net on ID plus uniform-labeled OOD data;
        'plain' is a deterministic net on ID data alone.
    alpha : float
        Weight of the maximized OOD objective, in (0, 1].
    n_samples : int
        Weight samples per training phase.
    n_samples_eval : int
        Weight samples used for Monte Carlo prediction.
    lr, beta1, beta2, eps : float
        Adam settings (one optimizer state per phase).
    batch_size, epochs : int
        Minibatch geometry.
    kl_scale : float or None
        Weight of the KL term per minibatch; None uses
        1 / (minibatches per epoch).
    width, n_blocks : int
        Backbone geometry (residual MLP blocks of the given width).
    sigma_init : float
        Initial attachment scale (the variational prior is N(0, 1)).
    noise_std : float
        Scale of the Gaussian noise used to synthesize a pseudo-OOD pool
        when fit receives no explicit one.
    seed : int
        Seed for initialization, training and prediction streams.

    Attributes
    ----------
    classes_ : ndarray of shape (n_classes,)
        Sorted class labels seen in fit.
    model_ : AbnnModel
        The trained network.
    history_ : list of dict
        Per-epoch losses, ID accuracy and mean attachment sigma.
    """

    def __init__(
        self,
        mode="abnn",
        alpha=0.95,
        n_samples=5,
        n_samples_eval=5,
        lr=1e-3,
        beta1=0.9,
        beta2=0.999,
        eps=1e-8,
        batch_size=32,
        epochs=30,
        kl_scale=None,
        width=32,
        n_blocks=3,
        sigma_init=1.0,
        noise_std=1.0,
        seed=0,
    ):
        self.mode = mode
        self.alpha = alpha
        self.n_samples = n_samples
        self.n_samples_eval = n_samples_eval
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.batch_size = batch_size
        self.epochs = epochs
        self.kl_scale = kl_scale
        self.width = width
        self.n_blocks = n_blocks
        self.sigma_init = sigma_init
        self.noise_std = noise_std
        self.seed = seed

    def _trainer_config(self) -> TrainerConfig:
        cfg = TrainerConfig(
            alpha=self.alpha,
            n_samples=self.n_samples,
            lr=self.lr,
            adam_beta1=self.beta1,
            adam_beta2=self.beta2,
            adam_eps=self.eps,
            batch_size=self.batch_size,
            epochs=self.epochs,
            kl_scale=self.kl_scale,
            mode=self.mode,
            seed=self.seed,
        )
        cfg.validate()
        return cfg

    def fit(self, X, y, X_ood=None):
        """Fit the model on labeled ID data plus an optional OOD pool.

        Parameters
        ----------
        X : array-like of shape (n_samples, n_features)
        y : array-like of shape (n_samples,)
        X_ood : array-like of shape (m, n_features), optional
            Unlabeled OOD training pool. When the mode needs one and none
            is given, a pseudo-OOD pool is synthesized by adding Gaussian
            noise of scale ``noise_std`` to X.

        Returns
        -------
        self
        """
        X, y = check_X_y(X, y)
        X = np.asarray(X, dtype=np.float64)
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        cfg = self._trainer_config()
        self.classes_ = unique_labels(y)
        if self.classes_.size < 2:
            raise ValueError("need at least 2 classes")
        y_idx = np.searchsorted(self.classes_, y)

        rng = Rng(self.seed)
        if X_ood is None and self.mode in ("abnn", "oe"):
            X_ood = pseudo_ood(X, self.noise_std, rng.substream(91))
        elif X_ood is not None:
            X_ood = check_array(X_ood)
            if X_ood.shape[1] != X.shape[1]:
                raise ValueError("X_ood feature dimension differs from X")

        model_cfg = ModelConfig(
            in_dim=X.shape[1],
            n_classes=int(self.classes_.size),
            width=self.width,
            n_blocks=self.n_blocks,
            sigma_init=self.sigma_init,
        )
        self.model_ = AbnnModel(model_cfg, rng.substream(7))
        self.history_ = train_arrays(self.model_, X, y_idx, cfg, x_ood=X_ood)
        self.n_features_in_ = X.shape[1]
        return self

    def _proba(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        if self.mode in ("abnn", "bbp"):
            return predict_mc(self.model_, X, self.n_samples_eval, Rng(self.seed, _PREDICT_STREAM))
        return predict_mean(self.model_, X)

    def predict_proba(self, X):
        """Predictive class probabilities (MC-mean softmax for Bayesian modes)."""
        return self._proba(X)

    def predict(self, X):
        """Most probable class label per row."""
        return self.classes_[self._proba(X).argmax(axis=1)]

    def uncertainty(self, X):
        """Predictive uncertainty u = 1 - max class probability, in [0, 1)."""
        return 1.0 - self._proba(X).max(axis=1)

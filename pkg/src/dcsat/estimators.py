"""scikit-learn style wrappers around the training pipeline.

``LatentAutoencoder`` learns the latent codes and the warm-start generator,
``DCSATGenerator`` fine-tunes a generator against sensed targets. Both follow
the usual estimator contract (constructor stores hyperparameters only, fitted
state ends in an underscore) so they work with ``clone`` and ``get_params``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .attack import DEFAULT_QUERIES, evaluate_model
from .data import Dataset
from .network import GeneratorNet, init_generator
from .sensing import make_sampler
from .training import (
    TrainConfig,
    calibrate_eps,
    derive_seed,
    finetune_dcsat,
    train_autoencoder,
)

__all__ = ["LatentAutoencoder", "DCSATGenerator"]


def _check_unit_interval(x):
    x = check_array(x, dtype=np.float64)
    if x.min() < 0.0 or x.max() > 1.0:
        raise ValueError("signals must lie in [0, 1]")
    return x


class LatentAutoencoder(TransformerMixin, BaseEstimator):
    """Dense autoencoder ``n -> hidden -> latent -> hidden -> n``.

    ``transform`` gives latent codes, ``inverse_transform`` runs the decoder
    (the generator warm start, available as ``generator_``).
    """

    def __init__(
        self,
        hidden=100,
        latent=30,
        learning_rate=0.01,
        epochs=100,
        batch_size=50,
        optimizer="sgd_momentum",
        momentum=0.9,
        seed=0,
    ):
        self.hidden = hidden
        self.latent = latent
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.optimizer = optimizer
        self.momentum = momentum
        self.seed = seed

    def _config(self):
        return TrainConfig(
            learning_rate=self.learning_rate,
            epochs=self.epochs,
            batch_size=self.batch_size,
            optimizer=self.optimizer,
            momentum=self.momentum,
            seed=self.seed,
        )

    def fit(self, X, y=None):
        X = _check_unit_interval(X)
        enc, gen, _, hist = train_autoencoder(Dataset(X), self._config(), self.hidden, self.latent)
        self.encoder_, self.generator_, self.history_ = enc, gen, hist
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "encoder_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        return self.encoder_(X)

    def inverse_transform(self, Z):
        check_is_fitted(self, "generator_")
        Z = check_array(Z, dtype=np.float64)
        return self.generator_(Z)

    def score(self, X, y=None):
        """Negative mean squared reconstruction error."""
        X = check_array(X, dtype=np.float64)
        recon = self.inverse_transform(self.transform(X))
        return -float(np.mean(np.sum((X - recon) ** 2, axis=1)))


class DCSATGenerator(RegressorMixin, BaseEstimator):
    """Generator fine-tuned for adversarially robust sensing.

    ``fit(Z, X)`` takes latent codes and ambient signals; the sensing mask is
    drawn from ``seed`` and stays fixed. ``predict`` returns the sensed
    outputs ``Phi G(z)``, ``generate`` the ambient outputs ``G(z)``.

    Args:
        generator: warm-start net; when None a fresh ``k -> hidden -> n``
            sigmoid net is initialized from ``seed``.
        lam: weight of the fitting term; small values favour robustness.
        eps: latent attack radius; None calibrates it on the warm start so the
            linearized risk is ``target_ratio`` times the fitting loss.
        adversarial: False trains the plain fitting baseline.
    """

    def __init__(
        self,
        generator=None,
        lam=2e4,
        eps=None,
        sr=0.8,
        seed=0,
        learning_rate=0.05,
        epochs=30,
        batch_size=50,
        lipschitz_weight=None,
        nullspace_weight=None,
        optimizer="sgd_momentum",
        momentum=0.9,
        target_ratio=1.3,
        adversarial=True,
        hidden=100,
        monitor_samples=200,
    ):
        self.generator = generator
        self.lam = lam
        self.eps = eps
        self.sr = sr
        self.seed = seed
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.lipschitz_weight = lipschitz_weight
        self.nullspace_weight = nullspace_weight
        self.optimizer = optimizer
        self.momentum = momentum
        self.target_ratio = target_ratio
        self.adversarial = adversarial
        self.hidden = hidden
        self.monitor_samples = monitor_samples

    def _config(self, eps):
        return TrainConfig(
            lam=self.lam,
            eps=eps,
            sr=self.sr,
            seed=self.seed,
            learning_rate=self.learning_rate,
            epochs=self.epochs,
            batch_size=self.batch_size,
            lipschitz_weight=self.lipschitz_weight,
            nullspace_weight=self.nullspace_weight,
            optimizer=self.optimizer,
            momentum=self.momentum,
            monitor_samples=self.monitor_samples,
            target_ratio=self.target_ratio,
        )

    def _warm_start(self, k, n):
        if self.generator is None:
            return init_generator([k, self.hidden, n], ["sigmoid", "sigmoid"], derive_seed(self.seed, "init"))
        if not isinstance(self.generator, GeneratorNet):
            raise TypeError("generator must be a GeneratorNet")
        if self.generator.input_dim != k or self.generator.output_dim != n:
            raise ValueError(
                f"warm start maps {self.generator.input_dim} -> {self.generator.output_dim}, data is {k} -> {n}"
            )
        return self.generator

    def fit(self, Z, X):
        Z = check_array(Z, dtype=np.float64)
        X = _check_unit_interval(X)
        if Z.shape[0] != X.shape[0]:
            raise ValueError("Z and X hold different numbers of samples")
        warm = self._warm_start(Z.shape[1], X.shape[1])
        phi = make_sampler(X.shape[1], self.sr, derive_seed(self.seed, "mask"))
        y = phi.apply(X)
        eps = self.eps
        if eps is None:
            mon = slice(0, self.monitor_samples or None)
            eps = calibrate_eps(warm, phi, Z[mon], y[mon], self.target_ratio)
        net, hist = finetune_dcsat(warm, phi, Z, y, self._config(eps), adversarial=self.adversarial)
        self.net_, self.phi_, self.eps_, self.history_ = net, phi, float(eps), hist
        self.n_features_in_ = Z.shape[1]
        return self

    def _latents(self, Z):
        check_is_fitted(self, "net_")
        Z = check_array(Z, dtype=np.float64)
        if Z.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} latent features, got {Z.shape[1]}")
        return Z

    def generate(self, Z):
        return self.net_(self._latents(Z))

    def predict(self, Z):
        check_is_fitted(self, "net_")
        return self.phi_.apply(self.generate(Z))

    def score(self, Z, X, sample_weight=None):
        """Negative mean sensed fitting loss (higher is better)."""
        check_is_fitted(self, "net_")
        X = check_array(X, dtype=np.float64)
        resid = self.phi_.apply(X) - self.predict(Z)
        per = np.sum(resid**2, axis=1)
        return -float(np.average(per, weights=sample_weight))

    def evaluate(self, Z, X, n_queries=DEFAULT_QUERIES, seed=0):
        """Random-direction attack on held-out pairs; see :func:`evaluate_model`."""
        Z = self._latents(Z)
        X = check_array(X, dtype=np.float64)
        return evaluate_model(self.net_, self.phi_, Z, self.phi_.apply(X), self.eps_, n_queries, seed)

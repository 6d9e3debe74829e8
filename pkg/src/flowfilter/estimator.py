"""Scikit-learn style front end over the differentiable particle filter.

:class:`FlowFilter` hides the model builders, the training harness, and the
filter loop behind the familiar ``fit`` / ``predict`` / ``score`` triple so
the package can slot into pipelines and grid searches.  ``X`` is always a
stack of observation sequences with shape ``(n_sequences, n_steps, obs_dim)``;
the optional ``y`` holds the matching latent-state sequences when they are
known.  Hyperparameters follow the scikit-learn convention: stored verbatim
on ``__init__``, consumed only inside ``fit``.
"""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from flowfilter import autodiff as ad
from flowfilter import models as md
from flowfilter import training as tr
from flowfilter.autodiff import ParamStore
from flowfilter.filter import FilterConfig, run_filter

__all__ = ["FlowFilter"]

_VARIANTS = ("nf-dpf", "aesmc", "aesmc-bootstrap")


class FlowFilter(BaseEstimator):
    """Trainable particle filter for linear-Gaussian latent dynamics.

    The estimator learns the transition/observation coefficients (and, for
    the ``nf-dpf`` variant, a conditional normalizing-flow proposal) by
    stochastic gradient descent through an entropy-regularized transport
    resampler, then filters new sequences with the fitted model.

    Args:
        variant: model family -- "nf-dpf" (flow proposal), "aesmc"
            (Gaussian proposal), or "aesmc-bootstrap" (no learned proposal).
        state_dim: latent dimension d; observations must share it.
        n_particles: ensemble size used for training and prediction.
        resampler: "ot" (differentiable transport) or "multinomial".
        epsilon: entropy regularization of the transport resampler.
        iterations: gradient steps taken by :meth:`fit`.
        batch_size: sequences per gradient step (drawn from the training
            split without replacement).
        lr: Adam learning rate.
        loss: "elbo" (negative likelihood bound) or "rmse" (posterior-mean
            error; requires ``y`` at fit time).
        val_fraction: trailing fraction of ``X`` held out for validation.
        clip_norm: optional global gradient-norm clip.
        hidden: width of the flow conditioner networks.
        n_units: flow depth (planar layers for d=1, coupling units for d>1).
        seed: master seed for initialization, batching, and filtering.

    Attributes:
        spec_: fitted model specification.
        store_: parameter store backing ``spec_``.
        report_: :class:`flowfilter.training.TrainReport` for the fit.
        horizon_: number of transitions per training sequence.
    """

    def __init__(self, variant="nf-dpf", state_dim=1, n_particles=100,
                 resampler="ot", epsilon=0.5, iterations=200, batch_size=8,
                 lr=0.002, loss="elbo", val_fraction=0.2, clip_norm=None,
                 hidden=32, n_units=1, seed=0):
        self.variant = variant
        self.state_dim = state_dim
        self.n_particles = n_particles
        self.resampler = resampler
        self.epsilon = epsilon
        self.iterations = iterations
        self.batch_size = batch_size
        self.lr = lr
        self.loss = loss
        self.val_fraction = val_fraction
        self.clip_norm = clip_norm
        self.hidden = hidden
        self.n_units = n_units
        self.seed = seed

    # ------------------------------------------------------------------
    def _validate_sequences(self, arr, name: str, dim: int) -> np.ndarray:
        out = np.asarray(arr, dtype=np.float64)
        if out.ndim != 3:
            raise ValueError(
                f"{name} must have shape (n_sequences, n_steps, {dim}); "
                f"got ndim={out.ndim}"
            )
        if out.shape[-1] != dim:
            raise ValueError(
                f"{name} has trailing dimension {out.shape[-1]}, expected {dim}"
            )
        if out.shape[1] < 2:
            raise ValueError(f"{name} needs at least 2 time steps")
        if not np.all(np.isfinite(out)):
            raise ValueError(f"{name} contains non-finite values")
        return out

    def _filter_config(self) -> FilterConfig:
        return FilterConfig(
            n_particles=self.n_particles, resampler=self.resampler,
            epsilon=self.epsilon, seed=self.seed,
        )

    def _check_fitted(self):
        if not hasattr(self, "spec_"):
            raise NotFittedError(
                "this FlowFilter instance is not fitted yet; call fit first"
            )

    # ------------------------------------------------------------------
    def fit(self, X, y=None):
        """Train the model on a stack of observation sequences.

        Args:
            X: observations, shape (n_sequences, n_steps, state_dim).
            y: matching latent states (same leading shape); required for
                the "rmse" loss, otherwise only used for validation metrics.

        Returns:
            self.
        """
        if self.variant not in _VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; "
                             f"expected one of {_VARIANTS}")
        X = self._validate_sequences(X, "X", self.state_dim)
        n, steps = X.shape[0], X.shape[1]
        if y is not None:
            y = self._validate_sequences(y, "y", self.state_dim)
            if y.shape[:2] != X.shape[:2]:
                raise ValueError("X and y disagree on (n_sequences, n_steps)")
        elif self.loss == "rmse":
            raise ValueError('loss="rmse" requires latent states y at fit time')
        else:
            y = np.zeros((n, steps, self.state_dim))

        n_val = max(1, int(round(self.val_fraction * n)))
        if n - n_val < 1:
            raise ValueError(
                f"need at least one training sequence after holding out "
                f"{n_val} of {n} for validation"
            )
        train_ds = md.Dataset(y[: n - n_val], X[: n - n_val], None, self.seed)
        val_ds = md.Dataset(y[n - n_val:], X[n - n_val:], None, self.seed)

        self.store_ = ParamStore()
        rng = np.random.default_rng(np.random.SeedSequence([self.seed, 0xE57]))
        self.spec_ = md.make_lgssm_variant(
            self.variant, self.state_dim, self.store_, rng,
            hidden=self.hidden, n_units=self.n_units,
        )
        config = tr.TrainConfig(
            iterations=self.iterations,
            k_sequences=min(self.batch_size, n - n_val),
            horizon=steps - 1, lr=self.lr, loss=self.loss,
            val_every=max(1, self.iterations // 10), val_count=n_val,
            seed=self.seed, clip_norm=self.clip_norm,
            filter=self._filter_config(),
        )
        self.report_ = tr.train(self.spec_, self.store_, None, config,
                                dataset=train_ds, val_set=val_ds)
        self.horizon_ = steps - 1
        return self

    def predict(self, X) -> np.ndarray:
        """Posterior-mean state trajectories for new observation sequences.

        Returns:
            Array of shape (n_sequences, n_steps, state_dim).
        """
        self._check_fitted()
        X = self._validate_sequences(X, "X", self.state_dim)
        with ad.no_grad():
            _, tensors = run_filter(self.spec_, X, self._filter_config())
        return tensors.means.data

    def score(self, X, y=None) -> float:
        """Mean estimated log-likelihood per sequence (higher is better)."""
        self._check_fitted()
        X = self._validate_sequences(X, "X", self.state_dim)
        with ad.no_grad():
            _, tensors = run_filter(self.spec_, X, self._filter_config())
        return float(np.mean(tensors.loglik.data))

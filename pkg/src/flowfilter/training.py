"""Losses, Adam, and the training loop driving filter runs by gradient.

Each iteration filters a batch of K sequences on one tape, backpropagates
the chosen loss (negative evidence bound or trajectory RMSE) through the
filter — including the transport resampler — and applies a bias-corrected
Adam step.  Validation runs every few iterations on a held-out set with the
gradient-free multinomial filter, and the lowest-validation-loss checkpoint
is kept.
"""

import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import filter as flt
from . import models as md
from . import resampling as rs
from .autodiff import ParamStore, Tensor
from .filter import FilterConfig, FilterTensors

# SeedSequence stream tags (per-iteration data / filter noise / validation)
_DATA_STREAM = 0x7D47
_FILTER_STREAM = 0x7F17
_VAL_STREAM = 0x7A11

_ESS_GUARD_FLOOR = 2.0
_ESS_GUARD_PATIENCE = 5


class TrainingError(Exception):
    """Bad training configuration or an aborted run."""


# ---------------------------------------------------------------------------
# Losses and metrics
# ---------------------------------------------------------------------------

def elbo_loss(loglik) -> Tensor:
    """Negative mean of the per-sequence log-likelihood estimates.

    Accepts the on-tape ``FilterTensors`` of a batched run or the raw
    log-likelihood Tensor of shape ``(K,)``; minimizing this maximizes the
    evidence bound (1/K) sum_k log p_hat(y^k).
    """
    if isinstance(loglik, FilterTensors):
        loglik = loglik.loglik
    if not isinstance(loglik, Tensor):
        loglik = Tensor(np.asarray(loglik, dtype=np.float64))
    if not np.all(np.isfinite(loglik.data)):
        raise TrainingError("non-finite log-likelihood estimate in the batch")
    if loglik.data.size < 1:
        raise TrainingError("need at least one sequence")
    return -ad.mean(ad.reshape(loglik, (-1,)))


def rmse_loss(means, truth) -> Tensor:
    """Root mean square trajectory error sqrt((1/T) sum_t |x̄_t - x*_t|²).

    The sum runs over all T+1 steps but is normalized by the number of
    transitions T, matching the reported convention.  Batched inputs
    ``(B, T+1, d)`` average the per-sequence errors.
    """
    if isinstance(means, FilterTensors):
        means = means.means
    if not isinstance(means, Tensor):
        means = Tensor(np.asarray(means, dtype=np.float64))
    truth = np.asarray(truth, dtype=np.float64)
    if means.data.shape != truth.shape:
        raise TrainingError(
            f"posterior means {means.data.shape} and truth {truth.shape} disagree"
        )
    horizon = means.data.shape[-2] - 1
    if horizon < 1:
        raise TrainingError("RMSE needs at least one transition (T >= 1)")
    sq = ad.sum(ad.sum(ad.square(means - Tensor(truth)), axis=-1), axis=-1)
    per_seq = ad.sqrt(sq * (1.0 / horizon))
    return ad.mean(ad.reshape(per_seq, (-1,)))


def parameter_distance(store: ParamStore, theta_star: dict) -> float:
    """L2 norm of the stacked deviations theta - theta* over named entries."""
    total = 0.0
    for name, target in theta_star.items():
        diff = np.asarray(store[name].data, dtype=np.float64) - np.asarray(target)
        total += float(np.sum(diff * diff))
    return float(np.sqrt(total))


def trajectory_error(means: np.ndarray, reference: np.ndarray) -> float:
    """L2 distance between posterior-mean trajectories, averaged over a batch.

    Each trajectory ``(T+1, d)`` is flattened before taking the norm.
    """
    means = np.asarray(means, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if means.shape != reference.shape:
        raise TrainingError(
            f"trajectories {means.shape} and {reference.shape} disagree"
        )
    if means.ndim == 2:
        means, reference = means[None], reference[None]
    diffs = (means - reference).reshape(means.shape[0], -1)
    return float(np.mean(np.linalg.norm(diffs, axis=1)))


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Per-parameter moments and hyperparameters of one optimizer."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_store(cls, store: ParamStore, lr: float) -> "AdamState":
        state = cls(lr=lr)
        for name, tensor in store.items():
            state.m[name] = np.zeros_like(tensor.data)
            state.v[name] = np.zeros_like(tensor.data)
        return state

    def moment_arrays(self) -> dict:
        """Flat name -> array view of both moments (for checkpoints)."""
        out = {}
        for name, arr in self.m.items():
            out[f"adam_m.{name}"] = arr
        for name, arr in self.v.items():
            out[f"adam_v.{name}"] = arr
        return out

    def load_moment_arrays(self, arrays: dict, step: int) -> None:
        for name in self.m:
            self.m[name] = np.array(arrays[f"adam_m.{name}"], dtype=np.float64)
            self.v[name] = np.array(arrays[f"adam_v.{name}"], dtype=np.float64)
        self.step = int(step)


def global_grad_norm(grads: dict) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def adam_step(store: ParamStore, grads: dict, state: AdamState,
              clip_norm: float = None, strict: bool = False) -> bool:
    """One bias-corrected Adam update applied in place to the store.

    Non-finite gradients skip the whole step with a warning (or raise when
    ``strict``).  Returns True when a step was taken.
    """
    for name in store.names():
        if name not in grads:
            raise TrainingError(f"missing gradient for parameter {name!r}")
        if grads[name].shape != store[name].data.shape:
            raise TrainingError(
                f"gradient shape {grads[name].shape} does not match parameter "
                f"{name!r} {store[name].data.shape}"
            )
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        if strict:
            raise TrainingError("non-finite gradient")
        warnings.warn("skipping optimizer step: non-finite gradient",
                      RuntimeWarning, stacklevel=2)
        return False
    scale = 1.0
    if clip_norm is not None:
        norm = global_grad_norm(grads)
        if norm > clip_norm:
            scale = clip_norm / max(norm, 1e-32)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name, tensor in store.items():
        g = grads[name] * scale
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * (g * g)
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        tensor.data[...] = tensor.data - state.lr * m_hat / (np.sqrt(v_hat)
                                                             + state.eps)
    return True


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    """Training-run schedule and bookkeeping knobs."""

    iterations: int = 500
    k_sequences: int = 10
    horizon: int = 50
    lr: float = 0.002
    loss: str = "elbo"
    val_every: int = 10
    val_count: int = 10
    seed: int = 0
    clip_norm: float = None
    strict_grads: bool = False
    checkpoint_path: str = None
    filter: FilterConfig = None

    def __post_init__(self):
        if self.loss not in ("elbo", "rmse"):
            raise TrainingError(f"unknown loss kind {self.loss!r}")
        if self.iterations < 0 or self.k_sequences < 1 or self.val_every < 1:
            raise TrainingError("iterations >= 0, k_sequences >= 1, val_every >= 1")
        if self.filter is None:
            self.filter = FilterConfig()


@dataclass
class TrainReport:
    """Per-iteration training trace plus the validation history."""

    loss: np.ndarray
    seconds: np.ndarray
    val_iterations: list
    val_loss: list
    val_elbo: list
    val_mean_ess: list
    val_param_dist: list
    val_traj_err: list
    best_iteration: int
    best_val_loss: float
    checkpoint_path: str = None
    aborted: str = None
    final_lr: float = None
    skipped_steps: int = 0
    start_iteration: int = 0

    def __post_init__(self):
        n = len(self.val_iterations)
        for name in ("val_loss", "val_elbo", "val_mean_ess", "val_param_dist",
                     "val_traj_err"):
            if len(getattr(self, name)) != n:
                raise TrainingError(f"validation trace {name} has wrong length")
        if n and self.best_iteration >= 0 \
                and self.best_iteration not in self.val_iterations:
            raise TrainingError("best iteration was never validated")

    def to_json(self) -> dict:
        return {
            "loss": np.asarray(self.loss, dtype=float).tolist(),
            "seconds": np.asarray(self.seconds, dtype=float).tolist(),
            "val_iterations": list(self.val_iterations),
            "val_loss": [float(v) for v in self.val_loss],
            "val_elbo": [float(v) for v in self.val_elbo],
            "val_mean_ess": [float(v) for v in self.val_mean_ess],
            "val_param_dist": [float(v) for v in self.val_param_dist],
            "val_traj_err": [float(v) for v in self.val_traj_err],
            "best_iteration": int(self.best_iteration),
            "best_val_loss": float(self.best_val_loss),
            "checkpoint_path": self.checkpoint_path,
            "aborted": self.aborted,
            "final_lr": self.final_lr,
            "skipped_steps": int(self.skipped_steps),
            "start_iteration": int(self.start_iteration),
        }

    def save_json(self, path) -> None:
        import json

        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    def to_csv(self, path, comment: str = "") -> None:
        """One row per iteration; validation columns are blank off-cadence."""
        import csv

        val_at = {it: k for k, it in enumerate(self.val_iterations)}
        with open(path, "w", newline="") as fh:
            if comment:
                fh.write(f"# {comment}\n")
            writer = csv.writer(fh)
            writer.writerow(["iteration", "loss", "seconds", "val_loss",
                            "val_elbo", "val_mean_ess", "val_param_dist",
                            "val_traj_err"])
            for i in range(len(self.loss)):
                it = self.start_iteration + i
                row = [it, repr(float(self.loss[i])), repr(float(self.seconds[i]))]
                if it in val_at:
                    k = val_at[it]
                    row += [repr(float(self.val_loss[k])),
                            repr(float(self.val_elbo[k])),
                            repr(float(self.val_mean_ess[k])),
                            repr(float(self.val_param_dist[k])),
                            repr(float(self.val_traj_err[k]))]
                else:
                    row += ["", "", "", "", ""]
                writer.writerow(row)


def _derive_seed(base: int, stream: int, k: int) -> int:
    return int(np.random.SeedSequence([int(base), stream, int(k)])
               .generate_state(1)[0])


def _draw_batch(truth_spec, dataset, config: TrainConfig, iteration: int):
    """K training sequences: fresh simulations, or a draw from a fixed set."""
    seed = _derive_seed(config.seed, _DATA_STREAM, iteration)
    if dataset is not None:
        rng = np.random.default_rng(seed)
        idx = rng.choice(len(dataset), size=config.k_sequences, replace=False)
        sub = dataset.subset(idx)
        return sub.observations, sub.actions, sub.states
    sim = md.simulate_dataset(truth_spec, config.horizon, config.k_sequences,
                              seed=seed)
    return sim.observations, sim.actions, sim.states


def validate(spec, store: ParamStore, val_set, config: TrainConfig,
             kalman_means: np.ndarray = None) -> dict:
    """Metric suite on the held-out set (gradient-free multinomial filter).

    Returns val loss (per the training loss kind), mean ELBO, mean ESS,
    parameter distance to the generative truth, and the trajectory error
    against the reference means (exact filter when available, otherwise the
    true states).
    """
    fcfg = FilterConfig(
        n_particles=config.filter.n_particles, ess_min=config.filter.ess_min,
        resampler="multinomial", seed=_derive_seed(config.seed, _VAL_STREAM, 0),
    )
    with ad.no_grad():
        reports, tensors = flt.run_filter(spec, val_set.observations, fcfg,
                                          actions=val_set.actions)
    loglik = tensors.loglik.data
    mean_elbo = float(np.mean(loglik))
    mean_ess = float(np.mean([r.mean_ess() for r in reports]))
    means = tensors.means.data
    reference = kalman_means if kalman_means is not None else val_set.states
    traj_err = trajectory_error(means, reference)
    if spec.theta_star:
        param_dist = parameter_distance(store, spec.theta_star)
    else:
        param_dist = float("nan")
    if config.loss == "elbo":
        val_loss = -mean_elbo
    else:
        val_loss = float(np.mean(np.sqrt(
            np.sum((means - val_set.states) ** 2, axis=(-1, -2))
            / (means.shape[-2] - 1)
        )))
    return {"val_loss": val_loss, "elbo": mean_elbo, "mean_ess": mean_ess,
            "param_dist": param_dist, "traj_err": traj_err}


def save_training_state(path, store, state: AdamState, iteration: int,
                        config: TrainConfig) -> None:
    """Checkpoint parameters, optimizer moments, and the stream position."""
    ad.save_checkpoint(
        path, store,
        extra={"iteration": iteration, "adam_step": state.step,
               "lr": state.lr, "seed": config.seed, "loss": config.loss},
        arrays=state.moment_arrays(),
    )


def load_training_state(path, store: ParamStore, lr: float = None):
    """Restore parameters and optimizer state; returns (AdamState, extra)."""
    params, extra, arrays = ad.load_checkpoint(path)
    store.set_values(params)
    state = AdamState.for_store(store, lr if lr is not None else extra["lr"])
    if arrays:
        state.load_moment_arrays(arrays, extra.get("adam_step", 0))
    return state, extra


def train(spec, store: ParamStore, truth_spec, config: TrainConfig,
          dataset=None, val_set=None, start_iteration: int = 0,
          adam: AdamState = None) -> TrainReport:
    """Gradient-train the model's parameters through the filter.

    Args:
        spec: the learnable model (parameters live in ``store``).
        truth_spec: generative truth; supplies fresh training/validation
            simulations and the exact-filter reference for metrics.  May be
            None when both ``dataset`` and ``val_set`` are given.
        config: schedule, loss kind, learning rate, filter settings.
        dataset: optional fixed training pool sampled without replacement
            per iteration (otherwise fresh sequences are simulated).
        val_set: optional fixed validation Dataset (otherwise simulated once).
        start_iteration / adam: resume support; pass the values recovered by
            :func:`load_training_state`.

    The run aborts (with a partial report) after two consecutive non-finite
    losses, or when the mean ESS stays below 2 for 5 straight iterations
    twice (the learning rate is halved after the first streak).
    """
    if truth_spec is None and (dataset is None or val_set is None):
        raise TrainingError(
            "without a generative truth, provide both dataset and val_set"
        )
    if adam is None:
        adam = AdamState.for_store(store, config.lr)
    if val_set is None:
        val_set = md.simulate_dataset(
            truth_spec, config.horizon, config.val_count,
            seed=_derive_seed(config.seed, _VAL_STREAM, 1),
        )
    kalman_means = None
    if truth_spec is not None and truth_spec.kalman_coeffs is not None:
        refs = []
        for i in range(len(val_set)):
            traj = val_set[i]
            refs.append(md.kalman_filter(truth_spec, traj.observations,
                                         actions=traj.actions).means)
        kalman_means = np.stack(refs)

    losses, seconds = [], []
    val_iters, val_loss, val_elbo = [], [], []
    val_ess, val_dist, val_traj = [], [], []
    best_iter, best_loss = -1, np.inf
    aborted = None
    skipped = 0
    bad_loss_streak = 0
    low_ess_streak = 0
    lr_halved = False

    def run_validation(iteration: int) -> None:
        nonlocal best_iter, best_loss
        try:
            metrics = validate(spec, store, val_set, config, kalman_means)
        except (ad.NumericError, flt.DegenerateEnsembleError,
                rs.ResamplingError):
            metrics = {"val_loss": np.nan, "elbo": np.nan, "mean_ess": np.nan,
                       "param_dist": np.nan, "traj_err": np.nan}
        val_iters.append(iteration)
        val_loss.append(metrics["val_loss"])
        val_elbo.append(metrics["elbo"])
        val_ess.append(metrics["mean_ess"])
        val_dist.append(metrics["param_dist"])
        val_traj.append(metrics["traj_err"])
        if metrics["val_loss"] < best_loss:
            best_loss = metrics["val_loss"]
            best_iter = iteration
            if config.checkpoint_path:
                save_training_state(config.checkpoint_path, store, adam,
                                    iteration, config)

    run_validation(start_iteration)

    end = start_iteration + config.iterations
    for it in range(start_iteration, end):
        tic = time.perf_counter()
        ys, acts, states = _draw_batch(truth_spec, dataset, config, it)
        fcfg = FilterConfig(
            n_particles=config.filter.n_particles,
            ess_min=config.filter.ess_min, resampler=config.filter.resampler,
            epsilon=config.filter.epsilon, max_iter=config.filter.max_iter,
            tol=config.filter.tol,
            seed=_derive_seed(config.seed, _FILTER_STREAM, it),
        )
        tape = ad.Tape()
        try:
            with ad.use_tape(tape):
                store.watch(tape)
                reports, tensors = flt.run_filter(spec, ys, fcfg, actions=acts)
                if config.loss == "elbo":
                    loss = elbo_loss(tensors)
                else:
                    loss = rmse_loss(tensors, states)
            loss_val = float(loss.data)
            grads = ad.grad(loss, store)
        except (ad.NumericError, flt.DegenerateEnsembleError,
                rs.ResamplingError) as err:
            bad_loss_streak += 1
            skipped += 1
            losses.append(np.nan)
            seconds.append(time.perf_counter() - tic)
            if bad_loss_streak >= 2:
                aborted = f"diverged: {err}"
                break
            continue
        bad_loss_streak = 0
        if not adam_step(store, grads, adam, clip_norm=config.clip_norm,
                         strict=config.strict_grads):
            skipped += 1
        losses.append(loss_val)
        seconds.append(time.perf_counter() - tic)

        mean_ess = float(np.mean([r.mean_ess() for r in reports]))
        if mean_ess < _ESS_GUARD_FLOOR:
            low_ess_streak += 1
        else:
            low_ess_streak = 0
        if low_ess_streak >= _ESS_GUARD_PATIENCE:
            if lr_halved:
                aborted = "ensemble collapse persisted after halving the lr"
                break
            adam.lr *= 0.5
            lr_halved = True
            low_ess_streak = 0
            warnings.warn("mean ESS below 2 for 5 iterations; halving lr",
                          RuntimeWarning, stacklevel=2)

        if (it + 1 - start_iteration) % config.val_every == 0 or it + 1 == end:
            run_validation(it + 1)

    return TrainReport(
        loss=np.asarray(losses, dtype=np.float64),
        seconds=np.asarray(seconds, dtype=np.float64),
        val_iterations=val_iters, val_loss=val_loss, val_elbo=val_elbo,
        val_mean_ess=val_ess, val_param_dist=val_dist, val_traj_err=val_traj,
        best_iteration=best_iter, best_val_loss=best_loss,
        checkpoint_path=config.checkpoint_path, aborted=aborted,
        final_lr=adam.lr, skipped_steps=skipped,
        start_iteration=start_iteration,
    )

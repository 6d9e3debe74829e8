"""Particle filtering core: proposals, log-densities, weights, and the loop.

The filter keeps an ensemble of N weighted particles per sequence and runs
the usual propose / weight / gate / resample cycle.  Everything touching the
weights and states goes through :mod:`flowfilter.autodiff` tensors, so a
filter run recorded on a tape is differentiable end to end with respect to
any model parameter (including through the transport-based resampler).

Conventions:
  * log-weights are carried *unnormalized*; resampling resets them to 0,
  * the per-step likelihood increment is the ratio of unnormalized weight
    sums, which right after a reset reduces to logsumexp(lw) - log N,
  * all arrays may carry leading batch axes: states are ``(B, N, d_x)`` and
    log-weights ``(B, N)``, with B independent sequences filtered in step.
"""

import csv
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import resampling as rs
from .autodiff import Tensor
from .models import SsmSpec

# SeedSequence stream tags (proposal noise / resampling draws)
_NOISE_STREAM = 0xF1E9
_RESAMPLE_STREAM = 0xF15A


class FilterError(Exception):
    """Misconfigured or misused filter component."""


class DegenerateEnsembleError(FilterError):
    """Every particle in (at least) one ensemble carries zero weight."""


def _np_logsumexp(x: np.ndarray, axis=-1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):  # -inf rows probe as log(0)
        return np.squeeze(m, axis=axis) + np.log(
            np.sum(np.exp(x - m), axis=axis)
        )


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _expand(t: Tensor) -> Tensor:
    return ad.reshape(t, t.data.shape + (1,))


# ---------------------------------------------------------------------------
# Configuration and result containers
# ---------------------------------------------------------------------------

@dataclass
class FilterConfig:
    """Knobs of one filter run.

    Args:
        n_particles: ensemble size N (at least 2).
        ess_min: resampling threshold; default N/2.  Resampling triggers when
            the effective sample size drops strictly below this value.
        resampler: "ot" (entropy-regularized transport) or "multinomial".
        epsilon: transport regularization strength (ot only).
        max_iter / tol: fixed-point controls forwarded to the transport solver.
        seed: base seed for the per-step proposal/resampling noise streams.
    """

    n_particles: int = 100
    ess_min: float = None
    resampler: str = "ot"
    epsilon: float = 0.5
    max_iter: int = 100
    tol: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.n_particles < 2:
            raise FilterError("need at least 2 particles")
        if self.ess_min is None:
            self.ess_min = self.n_particles / 2.0
        if not 1.0 <= self.ess_min <= self.n_particles:
            raise FilterError(
                f"ess_min must lie in [1, N]; got {self.ess_min} with N={self.n_particles}"
            )
        if self.resampler not in ("ot", "multinomial"):
            raise FilterError(f"unknown resampler {self.resampler!r}")
        if self.resampler == "ot" and not self.epsilon > 0.0:
            raise FilterError("transport resampling needs epsilon > 0")
        if self.max_iter < 1 or self.tol < 0.0:
            raise FilterError("max_iter must be >= 1 and tol >= 0")


class ParticleEnsemble:
    """Weighted particle set at one time step.

    ``states`` is ``(..., N, d_x)`` and ``log_weights`` ``(..., N)``
    (unnormalized).  ``base`` and ``base_logdet`` cache the pre-flow sample
    points and the forward log-Jacobians from the proposing pass, so the
    proposal density can be scored without inverting the flow.
    """

    def __init__(self, states: Tensor, log_weights: Tensor, t: int,
                 base: Tensor = None, base_logdet: Tensor = None):
        states = _as_tensor(states)
        log_weights = _as_tensor(log_weights)
        if states.data.shape[:-1] != log_weights.data.shape:
            raise FilterError(
                f"states {states.data.shape} and log-weights "
                f"{log_weights.data.shape} disagree"
            )
        if states.data.shape[-2] < 2:
            raise FilterError("need at least 2 particles")
        lse = _np_logsumexp(log_weights.data, axis=-1)
        if not np.all(np.isfinite(lse)):
            raise DegenerateEnsembleError("ensemble log-weights sum to zero mass")
        self.states = states
        self.log_weights = log_weights
        self.t = int(t)
        self.base = base
        self.base_logdet = base_logdet

    @property
    def n(self) -> int:
        return self.states.data.shape[-2]

    def normalized_weights(self) -> np.ndarray:
        """Plain-array weights summing to 1 along the particle axis."""
        lw = self.log_weights.data
        w = np.exp(lw - _np_logsumexp(lw, axis=-1)[..., None])
        return w / np.sum(w, axis=-1, keepdims=True)

    def posterior_mean(self) -> Tensor:
        """Weighted particle mean (on tape), shape ``(..., d_x)``."""
        lw = self.log_weights
        w = ad.exp(lw - ad.logsumexp(lw, axis=-1, keepdims=True))
        return ad.sum(_expand(w) * self.states, axis=-2)


@dataclass
class RunReport:
    """Immutable per-sequence summary of one filter run.

    Arrays are indexed by time step 0..T; ``means`` is ``(T+1, d_x)``.
    ``loglik_cum`` must equal the prefix sums of ``loglik_inc``.
    """

    ess: np.ndarray
    loglik_inc: np.ndarray
    loglik_cum: np.ndarray
    means: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.ess = np.asarray(self.ess, dtype=np.float64)
        self.loglik_inc = np.asarray(self.loglik_inc, dtype=np.float64)
        self.loglik_cum = np.asarray(self.loglik_cum, dtype=np.float64)
        self.means = np.asarray(self.means, dtype=np.float64)
        n = self.ess.shape[0]
        if not (self.loglik_inc.shape[0] == self.loglik_cum.shape[0]
                == self.means.shape[0] == n):
            raise FilterError("report traces have inconsistent lengths")
        if not np.allclose(self.loglik_cum, np.cumsum(self.loglik_inc), atol=1e-9):
            raise FilterError("cumulative log-likelihood is not the prefix sum "
                              "of the increments")

    @property
    def T(self) -> int:
        return self.ess.shape[0] - 1

    @property
    def loglik(self) -> float:
        return float(self.loglik_cum[-1])

    def mean_ess(self) -> float:
        return float(np.mean(self.ess))

    def to_json(self) -> dict:
        return {
            "T": self.T,
            "loglik": self.loglik,
            "mean_ess": self.mean_ess(),
            "ess": self.ess.tolist(),
            "loglik_inc": self.loglik_inc.tolist(),
            "loglik_cum": self.loglik_cum.tolist(),
            "means": self.means.tolist(),
            "meta": self.meta,
        }

    def save_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    def to_csv(self, path, comment: str = "") -> None:
        """Columns: t, ess, loglik_inc, loglik_cum, mean_1..mean_dX."""
        d = self.means.shape[1]
        with open(path, "w", newline="") as fh:
            if comment:
                fh.write(f"# {comment}\n")
            writer = csv.writer(fh)
            writer.writerow(["t", "ess", "loglik_inc", "loglik_cum"]
                            + [f"mean_{j + 1}" for j in range(d)])
            for t in range(self.T + 1):
                writer.writerow(
                    [t, repr(float(self.ess[t])), repr(float(self.loglik_inc[t])),
                     repr(float(self.loglik_cum[t]))]
                    + [repr(float(v)) for v in self.means[t]]
                )


@dataclass
class FilterTensors:
    """On-tape outputs of a run: differentiate these, not the report."""

    loglik: Tensor     # (B,) cumulative log-likelihood estimates
    means: Tensor      # (B, T+1, d_x) posterior mean trajectories
    functionals: Optional[dict] = None   # name -> (B, T+1, k) off-tape arrays


# ---------------------------------------------------------------------------
# Proposals
# ---------------------------------------------------------------------------

def _check_last_dim(arr: np.ndarray, want: int, what: str) -> None:
    if arr.shape[-1] != want:
        raise FilterError(f"{what} has dimension {arr.shape[-1]}, expected {want}")


def _proposal_parts(spec: SsmSpec, t: int, prev_states, y_row, action):
    """Base kernel, its conditioning kwargs, and the flow for step ``t``.

    A proposal kernel distinct from the transition object is treated as
    observation-conditioned and is used at t=0 with ``x=None``; otherwise the
    initial distribution is the t=0 base.  The bootstrap proposal is the full
    dynamic model (transition base plus dynamic flow).
    """
    if spec.is_bootstrap:
        if t == 0:
            return spec.initial, {}, None
        return spec.transition, {"x": prev_states, "a": action}, spec.dynamic_flow
    observation_driven = spec.proposal is not spec.transition
    if t == 0:
        if observation_driven:
            return spec.proposal, {"x": None, "y": y_row}, spec.proposal_flow
        return spec.initial, {}, spec.proposal_flow
    kw = {"x": prev_states, "a": action}
    if observation_driven:
        kw["y"] = y_row
    return spec.proposal, kw, spec.proposal_flow


def _flow_cond(spec: SsmSpec, flow, y_row: Tensor, lead_shape):
    """Observation conditioning broadcast to the particle axis, if the flow
    wants one (the dynamic flow is unconditional by construction)."""
    if flow is None or flow is spec.dynamic_flow:
        return None
    return ad.broadcast_to(y_row, lead_shape + (spec.d_y,))


def propose_initial(spec: SsmSpec, y0, n: int, rng: np.random.Generator = None,
                    eps: Tensor = None) -> ParticleEnsemble:
    """Draw the t=0 ensemble (uniform placeholder weights, cached base).

    Args:
        y0: first observation, shape ``(d_y,)`` or ``(B, d_y)``.
        n: particle count.
        rng: noise source; ignored when ``eps`` is supplied.
        eps: optional standard-normal draws ``(..., n, d_x)`` for
            reproducibility and permutation tests.
    """
    y0 = _as_tensor(y0)
    _check_last_dim(y0.data, spec.d_y, "observation")
    batch = y0.data.shape[:-1]
    if eps is None:
        if rng is None:
            raise FilterError("provide either rng or eps")
        eps = Tensor(rng.standard_normal(batch + (n, spec.d_x)))
    else:
        eps = _as_tensor(eps)
    y_row = y0[..., None, :] if y0.ndim >= 1 else y0
    kernel, kw, flow = _proposal_parts(spec, 0, None, y_row, None)
    x_hat = kernel.sample(eps, **kw)
    lead = x_hat.data.shape[:-1]
    if flow is not None:
        x, logdet = flow.forward(x_hat, cond=_flow_cond(spec, flow, y_row, lead))
    else:
        x, logdet = x_hat, None
    zeros = Tensor(np.zeros(lead))
    return ParticleEnsemble(x, zeros, t=0, base=x_hat, base_logdet=logdet)


def propose_step(spec: SsmSpec, ensemble: ParticleEnsemble, y_t,
                 rng: np.random.Generator = None, eps: Tensor = None,
                 action=None) -> ParticleEnsemble:
    """Propose states for step t+1 from the current ensemble.

    Returns a new ensemble at ``t+1`` carrying the *pre-update* log-weights
    of the input plus the cached base points / forward log-Jacobians.
    """
    y_t = _as_tensor(y_t)
    _check_last_dim(y_t.data, spec.d_y, "observation")
    states = ensemble.states
    if eps is None:
        if rng is None:
            raise FilterError("provide either rng or eps")
        eps = Tensor(rng.standard_normal(states.data.shape))
    else:
        eps = _as_tensor(eps)
        if eps.data.shape != states.data.shape:
            raise FilterError(
                f"noise shape {eps.data.shape} does not match states "
                f"{states.data.shape}"
            )
    y_row = y_t[..., None, :]
    a_row = None
    if action is not None:
        a_row = _as_tensor(action)
        _check_last_dim(a_row.data, spec.d_x, "action")
        a_row = a_row[..., None, :]
    kernel, kw, flow = _proposal_parts(spec, ensemble.t + 1, states, y_row, a_row)
    x_hat = kernel.sample(eps, **kw)
    lead = x_hat.data.shape[:-1]
    if flow is not None:
        x, logdet = flow.forward(x_hat, cond=_flow_cond(spec, flow, y_row, lead))
    else:
        x, logdet = x_hat, None
    return ParticleEnsemble(x, ensemble.log_weights, t=ensemble.t + 1,
                            base=x_hat, base_logdet=logdet)


# ---------------------------------------------------------------------------
# The three log-densities
# ---------------------------------------------------------------------------

def dynamic_log_density(spec: SsmSpec, states: Tensor, prev_states: Tensor,
                        action=None) -> Tensor:
    """log density of the dynamic model at ``states`` given ``prev_states``.

    With a dynamic flow T the states are pulled back through T^-1 and scored
    under the base transition, picking up the inverse log-Jacobian.
    """
    states = _as_tensor(states)
    _check_last_dim(states.data, spec.d_x, "states")
    a_row = None if action is None else _as_tensor(action)[..., None, :]
    if spec.dynamic_flow is None:
        return spec.transition.log_density(states, x=prev_states, a=a_row)
    z, inv_logdet = spec.dynamic_flow.inverse(states)
    return spec.transition.log_density(z, x=prev_states, a=a_row) + inv_logdet


def proposal_log_density(spec: SsmSpec, ensemble: ParticleEnsemble, y,
                         prev_states: Tensor = None, action=None) -> Tensor:
    """log proposal density of the ensemble's states.

    Uses the cached pre-flow sample points from the proposing pass; states
    not produced by propose_initial/propose_step require an invertible
    proposal flow (the flow is inverted explicitly in that case).
    """
    y = _as_tensor(y)
    y_row = y[..., None, :]
    a_row = None if action is None else _as_tensor(action)[..., None, :]
    if spec.is_bootstrap:
        if ensemble.t == 0:
            return spec.initial.log_density(ensemble.states)
        return dynamic_log_density(spec, ensemble.states, prev_states,
                                   action=action)
    kernel, kw, flow = _proposal_parts(spec, ensemble.t, prev_states, y_row,
                                       a_row)
    if flow is None:
        return kernel.log_density(ensemble.states, **kw)
    base, logdet = ensemble.base, ensemble.base_logdet
    if base is None:
        if not flow.has_inverse:
            raise FilterError(
                "proposal density at foreign states needs an invertible "
                "proposal flow; re-propose or supply the cached base points"
            )
        lead = ensemble.states.data.shape[:-1]
        base, inv_logdet = flow.inverse(
            ensemble.states, cond=_flow_cond(spec, flow, y_row, lead)
        )
        logdet = -inv_logdet
    return kernel.log_density(base, **kw) - logdet


def measurement_log_density(spec: SsmSpec, y, states: Tensor) -> Tensor:
    """log p(y | x) per particle, shape ``(..., N)``.

    The flow-based measurement maps y to its base point conditioned on each
    particle and scores it under the standard normal, adding the forward
    log-Jacobian of the y -> z map.
    """
    y = _as_tensor(y)
    _check_last_dim(y.data, spec.d_y, "observation")
    states = _as_tensor(states)
    _check_last_dim(states.data, spec.d_x, "states")
    y_row = y[..., None, :]
    if spec.measurement is not None:
        return spec.measurement.log_density(y_row, x=states)
    lead = states.data.shape[:-1]
    y_full = ad.broadcast_to(y_row, lead + (spec.d_y,))
    z, logdet = spec.measurement_flow.forward(y_full, cond=states)
    return spec.measurement_base.log_density(z) + logdet


# ---------------------------------------------------------------------------
# Weights, ESS, and the filter loop
# ---------------------------------------------------------------------------

def update_log_weights(ensemble: ParticleEnsemble, dyn: Tensor, meas: Tensor,
                       prop: Tensor) -> Tensor:
    """New unnormalized log-weights: lw + meas + dyn - prop.

    At t=0 the carried weights are the zero placeholder and ``dyn`` is the
    log initial density, which reduces to the first-step weight formula.
    """
    dyn, meas, prop = _as_tensor(dyn), _as_tensor(meas), _as_tensor(prop)
    shape = ensemble.log_weights.data.shape
    for name, term in (("dyn", dyn), ("meas", meas), ("prop", prop)):
        if term.data.shape != shape:
            raise FilterError(
                f"{name} term has shape {term.data.shape}, expected {shape}"
            )
    candidate = (ensemble.log_weights.data + meas.data + dyn.data - prop.data)
    if not np.all(np.isfinite(_np_logsumexp(candidate, axis=-1))):
        raise DegenerateEnsembleError(
            "all updated log-weights are -inf in at least one ensemble"
        )
    return ensemble.log_weights + meas + dyn - prop


def ess(log_weights) -> np.ndarray:
    """Effective sample size 1 / sum(normalized weights squared), log-domain."""
    lw = log_weights.data if isinstance(log_weights, Tensor) else \
        np.asarray(log_weights, dtype=np.float64)
    return np.exp(2.0 * _np_logsumexp(lw, axis=-1) - _np_logsumexp(2.0 * lw, axis=-1))


def _resample(states: Tensor, log_weights: Tensor, trigger: np.ndarray,
              config: FilterConfig, rng: np.random.Generator):
    """Resample the triggered batch rows in place of the full tensors."""
    idx = np.nonzero(trigger)[0]
    if idx.size == 0:
        return states, log_weights
    sub_states = ad.take(states, idx, axis=0)
    sub_lw = ad.take(log_weights, idx, axis=0)
    if config.resampler == "ot":
        new_sub, _ = rs.ot_resample(sub_states, sub_lw, epsilon=config.epsilon,
                                    max_iter=config.max_iter, tol=config.tol)
    else:
        new_sub, _ = rs.multinomial_resample(sub_states, sub_lw, rng)
    states = ad.put_rows(states, idx, new_sub)
    zeros = Tensor(np.zeros(sub_lw.data.shape))
    log_weights = ad.put_rows(log_weights, idx, zeros)
    return states, log_weights


def run_filter(spec: SsmSpec, observations, config: FilterConfig,
               actions=None, functionals=None):
    """Run the full filter over one or more observation sequences.

    Args:
        observations: ``(T+1, d_y)`` for a single sequence or ``(B, T+1, d_y)``
            for a batch filtered in lock-step.
        actions: optional ``(T, d_x)`` / ``(B, T, d_x)`` control inputs
            (required iff the model has actions).
        config: particle count, resampler, threshold, and noise seed.
        functionals: optional ``{name: f}`` map; each ``f`` takes the particle
            array ``(B, N, d_x)`` and returns per-particle values ``(B, N, k)``
            whose weighted posterior means are collected per step (off-tape)
            into ``tensors.functionals[name]`` with shape ``(B, T+1, k)``.

    Returns:
        (report, tensors): ``report`` is a RunReport (or list of them for a
        batch); ``tensors`` carries the on-tape log-likelihood and posterior
        mean trajectory for gradient-based training.

    Each step t >= 1 gates on the effective sample size of the incoming
    weights (resampling strictly below ``ess_min`` and resetting log-weights
    to zero), proposes, reweights, and accumulates the likelihood increment
    logsumexp(lw_t) - logsumexp(lw_{t-1}) with the post-reset denominator.
    """
    ys = np.asarray(observations, dtype=np.float64)
    if ys.ndim == 2:
        ys = ys[None]
        squeeze = True
    elif ys.ndim == 3:
        squeeze = False
    else:
        raise FilterError(f"observations must be 2- or 3-dimensional, got {ys.ndim}")
    _check_last_dim(ys, spec.d_y, "observation")
    batch, horizon = ys.shape[0], ys.shape[1] - 1
    if spec.has_actions:
        if actions is None:
            raise FilterError("model has actions but none were given")
        acts = np.asarray(actions, dtype=np.float64)
        if acts.ndim == 2:
            acts = acts[None]
        if acts.shape != (batch, horizon, spec.d_x):
            raise FilterError(
                f"actions shape {acts.shape} does not match "
                f"({batch}, {horizon}, {spec.d_x})"
            )
    else:
        acts = None
    n = config.n_particles
    seed = int(config.seed)
    log_n = float(np.log(n))

    def noise(t: int) -> Tensor:
        r = np.random.default_rng(np.random.SeedSequence([seed, _NOISE_STREAM, t]))
        return Tensor(r.standard_normal((batch, n, spec.d_x)))

    func_traces = {name: [] for name in (functionals or {})}

    def collect(ensemble: ParticleEnsemble) -> None:
        if not functionals:
            return
        lw_now = ensemble.log_weights.data
        w = np.exp(lw_now - _np_logsumexp(lw_now, axis=-1)[..., None])
        for name, f in functionals.items():
            vals = np.asarray(f(ensemble.states.data), dtype=np.float64)
            func_traces[name].append(np.sum(w[..., None] * vals, axis=-2))

    # --- t = 0 -------------------------------------------------------------
    y0 = Tensor(ys[:, 0])
    ens = propose_initial(spec, y0, n, eps=noise(0))
    meas = measurement_log_density(spec, y0, ens.states)
    init = spec.initial.log_density(ens.states)
    prop = proposal_log_density(spec, ens, y0)
    lw = update_log_weights(ens, dyn=init, meas=meas, prop=prop)
    ens = ParticleEnsemble(ens.states, lw, t=0)

    carried = ad.logsumexp(lw, axis=-1)              # (B,), on tape
    inc = carried - log_n
    loglik = inc
    ess_now = ess(lw)

    ess_trace = [ess_now]
    inc_trace = [inc.data.copy()]
    mean_list = [ens.posterior_mean()]
    collect(ens)

    # --- t = 1..T ----------------------------------------------------------
    for t in range(1, horizon + 1):
        trigger = ess_now < config.ess_min
        states, lw_in = ens.states, ens.log_weights
        if np.any(trigger):
            r_rng = np.random.default_rng(
                np.random.SeedSequence([seed, _RESAMPLE_STREAM, t])
            )
            states, lw_in = _resample(states, lw_in, trigger, config, r_rng)
            carried = ad.logsumexp(lw_in, axis=-1)
        ens = ParticleEnsemble(states, lw_in, t=t - 1)

        y_t = Tensor(ys[:, t])
        a_t = Tensor(acts[:, t - 1]) if acts is not None else None
        proposed = propose_step(spec, ens, y_t, eps=noise(t), action=a_t)
        meas = measurement_log_density(spec, y_t, proposed.states)
        dyn = dynamic_log_density(spec, proposed.states, ens.states, action=a_t)
        prop = proposal_log_density(spec, proposed, y_t, prev_states=ens.states,
                                    action=a_t)
        lw = update_log_weights(proposed, dyn=dyn, meas=meas, prop=prop)
        ens = ParticleEnsemble(proposed.states, lw, t=t)

        new_carried = ad.logsumexp(lw, axis=-1)
        inc = new_carried - carried
        carried = new_carried
        loglik = loglik + inc
        ess_now = ess(lw)

        ess_trace.append(ess_now)
        inc_trace.append(inc.data.copy())
        mean_list.append(ens.posterior_mean())
        collect(ens)

    means = ad.concat([_insert_step_axis(m) for m in mean_list], axis=-2)
    extras = None
    if functionals:
        extras = {name: np.stack(tr, axis=1) for name, tr in func_traces.items()}
    tensors = FilterTensors(loglik=loglik, means=means, functionals=extras)

    ess_arr = np.stack(ess_trace, axis=1)            # (B, T+1)
    inc_arr = np.stack(inc_trace, axis=1)
    cum_arr = np.cumsum(inc_arr, axis=1)
    means_arr = means.data
    meta = {
        "n_particles": n, "ess_min": config.ess_min,
        "resampler": config.resampler, "epsilon": config.epsilon,
        "seed": seed, "label": spec.label,
    }
    reports = [
        RunReport(ess=ess_arr[b], loglik_inc=inc_arr[b], loglik_cum=cum_arr[b],
                  means=means_arr[b], meta=dict(meta, sequence=b))
        for b in range(batch)
    ]
    if squeeze:
        return reports[0], tensors
    return reports, tensors


def _insert_step_axis(m: Tensor) -> Tensor:
    """(B, d) -> (B, 1, d) so per-step means concatenate along time."""
    shape = m.data.shape
    return ad.reshape(m, shape[:-1] + (1,) + shape[-1:])

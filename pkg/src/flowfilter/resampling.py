"""Resamplers: differentiable entropy-regularized optimal transport and a
multinomial baseline.

The OT resampler solves the entropy-regularized transport problem between the
weighted ensemble (source marginal a = normalized weights) and the uniform
target (b = 1/N) with log-domain Sinkhorn iterations, then moves every
particle to its barycentric projection x~ = N P^T X.  All Sinkhorn iterations
are ordinary tape operations, so gradients flow through the unrolled solve —
no implicit differentiation.

Numerical conventions:

* the cost matrix is squared Euclidean distance normalized by its largest
  entry, so epsilon is scale-free (the normalizer itself stays on the tape);
* potentials are updated source-last, which makes the row marginals match
  ``a`` exactly (up to rounding) and hence preserves the weighted ensemble
  mean to machine precision;
* marginals are carried in log space end to end, so extremely degenerate but
  finite log-weights are handled without underflow.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from flowfilter import autodiff as ad
from flowfilter.autodiff import Tensor

_TINY = 1e-30


class ResamplingError(Exception):
    """Invalid resampler input (bad epsilon, non-simplex marginals, ...)."""


@dataclass
class TransportPlan:
    """An accepted entropy-regularized transport plan.

    ``log_plan`` lives on the tape (differentiable); ``plan`` is a detached
    snapshot.  Row sums approximate ``a``, column sums ``b``; ``converged``
    is False when the iteration budget ran out before the tolerance was met
    (a warning flag, not an error).
    """

    log_plan: Tensor          # (..., N, M)
    epsilon: float
    iterations: int
    row_error: float          # max over batch of sum_s |rowsum_s - a_s|
    col_error: float
    converged: bool

    @property
    def plan(self) -> np.ndarray:
        return np.exp(self.log_plan.data)

    def plan_tensor(self) -> Tensor:
        return ad.exp(self.log_plan)


def _expand(t: Tensor) -> Tensor:
    return ad.reshape(t, t.data.shape + (1,))


def _insert_axis(t: Tensor) -> Tensor:
    shape = t.data.shape
    return ad.reshape(t, shape[:-1] + (1, shape[-1]))


def _check_log_simplex(name: str, log_m: Tensor) -> None:
    if not np.all(np.isfinite(log_m.data)):
        raise ResamplingError(f"{name}: log-marginals must be finite")
    total = np.exp(log_m.data).sum(axis=-1)
    if np.max(np.abs(total - 1.0)) > 1e-6:
        raise ResamplingError(f"{name}: marginals must sum to 1 (got {total})")


def sinkhorn(cost: Tensor, a: Optional[Tensor] = None, b: Optional[Tensor] = None,
             epsilon: float = 0.1, max_iter: int = 100, tol: float = 1e-3,
             log_a: Optional[Tensor] = None, log_b: Optional[Tensor] = None
             ) -> TransportPlan:
    """Log-domain Sinkhorn plan between marginals a and b under ``cost``.

    Marginals are given either directly (strictly positive simplex vectors)
    or in log space (finite entries).  ``cost`` may carry leading batch axes:
    (..., N, M) with marginals (..., N) and (..., M); all batch members are
    iterated together and share one iteration count.

    Iterations stop when the L1 column-marginal violation drops below ``tol``
    (row marginals are exact by construction) or after ``max_iter`` sweeps;
    ``tol=0`` forces exactly ``max_iter`` sweeps, which makes the surrounding
    computation a fixed smooth function (useful for finite-difference
    checks).

    Raises:
        ResamplingError: epsilon <= 0, marginals not simplex/not positive.
    """
    if epsilon <= 0:
        raise ResamplingError(f"epsilon must be > 0, got {epsilon}")
    if (a is None) == (log_a is None) or (b is None) == (log_b is None):
        raise ResamplingError("provide each marginal exactly once (direct or log)")
    if not isinstance(cost, Tensor):
        cost = Tensor(cost)
    a = Tensor(a) if a is not None and not isinstance(a, Tensor) else a
    b = Tensor(b) if b is not None and not isinstance(b, Tensor) else b
    if log_a is None:
        if np.any(a.data <= 0):
            raise ResamplingError(
                "source marginal has non-positive entries; pass log_a for "
                "extremely small weights"
            )
        log_a = ad.log(a)
    if log_b is None:
        if np.any(b.data <= 0):
            raise ResamplingError("target marginal has non-positive entries")
        log_b = ad.log(b)
    _check_log_simplex("a", log_a)
    _check_log_simplex("b", log_b)

    M = cost * (-1.0 / epsilon)                     # (..., N, M)
    phi = log_a                                     # source potential / log a
    psi = log_b
    b_data = np.exp(log_b.data)
    iterations = 0
    converged = False
    for _ in range(max_iter):
        # The reduction over sources doubles as a convergence probe: with the
        # potentials of the previous sweep, the column marginal of the plan
        # is exp(psi + logsumexp_src(M + phi)), so the violation costs O(N)
        # extra instead of rebuilding the N x N plan off-tape.
        denom = ad.shift_logsumexp(M, _expand(phi), axis=-2)
        if iterations > 0 and tol > 0:
            col = np.exp(psi.data + denom.data)
            if np.max(np.abs(col - b_data).sum(axis=-1)) < tol:
                converged = True
                break
        iterations += 1
        psi = log_b - denom
        phi = log_a - ad.shift_logsumexp(M, _insert_axis(psi), axis=-1)
    log_plan_t = ad.addn(M, _expand(phi), _insert_axis(psi))
    plan = np.exp(log_plan_t.data)
    a_data = np.exp(log_a.data)
    row_err = float(np.max(np.abs(plan.sum(axis=-1) - a_data).sum(axis=-1)))
    col_err = float(np.max(np.abs(plan.sum(axis=-2) - b_data).sum(axis=-1)))
    if tol == 0:
        converged = col_err < 1e-3
    elif not converged:
        # The loop probes before each sweep, so convergence reached on the
        # very last allowed sweep is only visible in the realized marginals.
        converged = col_err < tol
    return TransportPlan(log_plan_t, epsilon, iterations, row_err, col_err, converged)


def _np_logsumexp(x: np.ndarray, axis: int) -> np.ndarray:
    mx = np.max(x, axis=axis, keepdims=True)
    return np.squeeze(mx, axis=axis) + np.log(np.sum(np.exp(x - mx), axis=axis))


def pairwise_sq_dists(states: Tensor) -> Tensor:
    """Squared Euclidean distances between rows: (..., N, d) -> (..., N, N)."""
    return ad.pairwise_sq_dists(states)


def normalized_cost(states: Tensor) -> Tensor:
    """Pairwise squared distances scaled into [0, 1] by the largest entry.

    The max stays on the tape so gradients account for the normalization;
    an all-identical ensemble (zero cost everywhere) degrades gracefully to
    the zero matrix instead of 0/0.
    """
    C = pairwise_sq_dists(states)
    peak = ad.maximum(ad.amax(C, axis=(-1, -2), keepdims=True), _TINY)
    return C / peak


def ot_resample(states: Tensor, log_weights: Tensor, epsilon: float,
                max_iter: int = 100, tol: float = 1e-3):
    """Differentiable resampling by barycentric projection of the OT plan.

    Args:
        states: (..., N, d) particle positions.
        log_weights: (..., N) unnormalized log-weights.
        epsilon: regularization strength on the normalized cost.

    Returns:
        (new_states, plan): positions x~ = N P^T X with implicitly uniform
        weights, and the accepted TransportPlan.  Both the positions and
        their dependence on the input weights are differentiable.
    """
    n = states.data.shape[-2]
    log_a = log_weights - ad.logsumexp(log_weights, axis=-1, keepdims=True)
    log_b = Tensor(np.full(log_weights.data.shape, -np.log(n)))
    plan = sinkhorn(normalized_cost(states), epsilon=epsilon, max_iter=max_iter,
                    tol=tol, log_a=log_a, log_b=log_b)
    P = plan.plan_tensor()
    new_states = ad.matmul(ad.swapaxes(P, -1, -2), states) * float(n)
    return new_states, plan


def multinomial_resample(states: Tensor, log_weights: Tensor,
                         rng: np.random.Generator):
    """Classic multinomial resampling; detached from the tape by design.

    Returns (new_states, indices) where indices has the shape of
    log_weights.  Weights after resampling are implicitly uniform.
    """
    lw = log_weights.data
    w = np.exp(lw - _np_logsumexp(lw, axis=-1)[..., None])
    w /= w.sum(axis=-1, keepdims=True)
    flat_w = w.reshape(-1, w.shape[-1])
    flat_states = states.data.reshape(flat_w.shape[0], w.shape[-1], -1)
    out = np.empty_like(flat_states)
    idx_out = np.empty(flat_w.shape, dtype=np.intp)
    for k in range(flat_w.shape[0]):
        cdf = np.cumsum(flat_w[k])
        cdf[-1] = 1.0
        idx = np.searchsorted(cdf, rng.random(w.shape[-1]), side="right")
        idx_out[k] = idx
        out[k] = flat_states[k][idx]
    return (Tensor(out.reshape(states.data.shape)),
            idx_out.reshape(log_weights.data.shape))


def epsilon_schedule(n: int, c: float = 0.5) -> float:
    """Theory-compatible schedule epsilon(N) = c / (log N)^2, o(1/log N)."""
    if n < 2:
        raise ResamplingError("schedule needs N >= 2")
    return c / float(np.log(n)) ** 2


def dump_plan_csv(plan: TransportPlan, path, comment: str = "") -> None:
    """Debugging dump of a (small) plan matrix to CSV; refuses N > 64."""
    P = plan.plan
    if P.ndim != 2:
        raise ResamplingError("plan dump expects an unbatched plan")
    if max(P.shape) > 64:
        raise ResamplingError("plan dump capped at N <= 64")
    with open(path, "w") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        fh.write(f"# epsilon={plan.epsilon} iterations={plan.iterations} "
                 f"row_error={plan.row_error:.3e} col_error={plan.col_error:.3e} "
                 f"converged={plan.converged}\n")
        fh.write(",".join(f"t{j}" for j in range(P.shape[1])) + "\n")
        for row in P:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")

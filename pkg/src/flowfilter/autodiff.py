"""Minimal reverse-mode automatic differentiation over dense float64 tensors.

Design: define-by-run.  A :class:`Tape` is installed as the active recording
context, every primitive op appends one node (with a closure computing the
vector-Jacobian product), and :func:`grad` replays the tape backwards.  Tapes
are rebuilt from scratch on every training iteration; there is no graph reuse.

Everything is 64-bit.  Every primitive checks its result for NaN/Inf and
raises :class:`NumericError` instead of letting non-finite values propagate
silently.

Gradients are accumulated by summation when a tensor feeds several nodes.
Parameters live in a :class:`ParamStore` (a flat, named, ordered collection)
which also defines the checkpoint serialization format.
"""

from __future__ import annotations

import json
import struct
from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class AutodiffError(Exception):
    """Base class for errors raised by this module."""


class ShapeError(AutodiffError):
    """Incompatible operand shapes for a primitive op."""


class NumericError(AutodiffError):
    """A primitive produced a NaN or Inf."""


# ---------------------------------------------------------------------------
# Tape machinery
# ---------------------------------------------------------------------------

class Node:
    """One recorded primitive application.

    ``backward_fn(out_grad)`` returns one gradient array per parent, aligned
    with ``parents``.  ``grad`` is lazily allocated during the backward sweep.
    """

    __slots__ = ("tape", "op", "parents", "backward_fn", "grad", "grad_owned")

    def __init__(self, tape, op, parents, backward_fn):
        self.tape = tape
        self.op = op
        self.parents = parents          # tuple[Node, ...]
        self.backward_fn = backward_fn  # None for leaves
        self.grad = None                # np.ndarray once touched
        self.grad_owned = False         # True once the sweep allocated it


class Tape:
    """Ordered record of primitive ops; topological by construction."""

    def __init__(self):
        self._nodes: list[Node] = []

    def __len__(self):
        return len(self._nodes)

    def _append(self, node: Node) -> None:
        self._nodes.append(node)

    def watch(self, tensor: "Tensor") -> None:
        """Register ``tensor`` as a differentiable leaf of this tape."""
        node = Node(self, "leaf", (), None)
        self._append(node)
        tensor.node = node


_ACTIVE: Optional[Tape] = None


class use_tape:
    """Context manager installing ``tape`` as the active recording context."""

    def __init__(self, tape: Tape):
        self._tape = tape
        self._prev = None

    def __enter__(self):
        global _ACTIVE
        self._prev = _ACTIVE
        _ACTIVE = self._tape
        return self._tape

    def __exit__(self, *exc):
        global _ACTIVE
        _ACTIVE = self._prev
        return False


class no_grad(use_tape):
    """Context manager disabling recording (evaluation mode)."""

    def __init__(self):
        super().__init__(None)


def active_tape() -> Optional[Tape]:
    return _ACTIVE


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------

_FLOAT64 = np.dtype(np.float64)


class Tensor:
    """Dense float64 array, optionally attached to a tape node."""

    __slots__ = ("data", "node")

    def __init__(self, data, node: Optional[Node] = None):
        if type(data) is np.ndarray and data.dtype == _FLOAT64:
            self.data = data
        else:
            self.data = np.asarray(data, dtype=np.float64)
        self.node = node

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape})"

    def item(self) -> float:
        return float(self.data)

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return getitem(self, idx)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    """A tensor that never records gradients."""
    return Tensor(np.asarray(x, dtype=np.float64))


def detach(x: Tensor) -> Tensor:
    """Same values, cut from the tape."""
    return Tensor(x.data)


def _record(op: str, out_data: np.ndarray, parents: Sequence[Tensor],
            backward_fn: Callable) -> Tensor:
    """Finite-check ``out_data`` and, if recording, append a tape node."""
    if not np.isfinite(out_data).all():
        raise NumericError(f"non-finite result in op '{op}'")
    tape = _ACTIVE
    if tape is None:
        return Tensor(out_data)
    n_parents = len(parents)
    if n_parents == 1:
        n0 = parents[0].node
        parent_nodes = (n0,) if (n0 is not None and n0.tape is tape) else ()
    elif n_parents == 2:
        n0, n1 = parents[0].node, parents[1].node
        if n0 is not None and n0.tape is not tape:
            n0 = None
        if n1 is not None and n1.tape is not tape:
            n1 = None
        if n0 is None:
            parent_nodes = (n1,) if n1 is not None else ()
        else:
            parent_nodes = (n0, n1) if n1 is not None else (n0,)
    else:
        parent_nodes = tuple(
            p.node for p in parents if p.node is not None and p.node.tape is tape
        )
    if not parent_nodes:
        return Tensor(out_data)
    if len(parent_nodes) == n_parents:
        # All parents live: the closure's gradient tuple already lines up.
        dispatch = backward_fn
    else:
        # Backward closures expect gradients for *all* listed parents;
        # remember which positions are live so dead parents are skipped.
        live = tuple(
            i for i, p in enumerate(parents)
            if p.node is not None and p.node.tape is tape
        )

        def dispatch(out_grad, _bf=backward_fn, _live=live):
            grads = _bf(out_grad)
            return [grads[i] for i in _live]

    node = Node(tape, op, parent_nodes, dispatch)
    tape._append(node)
    return Tensor(out_data, node)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------

def _binop(op: str, a: Tensor, b: Tensor, fn) -> np.ndarray:
    try:
        return fn(a.data, b.data)
    except ValueError:
        raise ShapeError(
            f"{op}: incompatible shapes {a.data.shape} and {b.data.shape}"
        ) from None


def add(a: Tensor, b: Tensor) -> Tensor:
    out = _binop("add", a, b, np.add)

    def backward(g):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape))

    return _record("add", out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = _binop("sub", a, b, np.subtract)

    def backward(g):
        return (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape))

    return _record("sub", out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = _binop("mul", a, b, np.multiply)
    ad, bd = a.data, b.data

    def backward(g):
        return (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape))

    return _record("mul", out, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    out = _binop("div", a, b, np.divide)
    ad, bd = a.data, b.data

    def backward(g):
        ga = g / bd
        gb = -g * ad / (bd * bd)
        return (_unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape))

    return _record("div", out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    out = -a.data

    def backward(g):
        return (-g,)

    return _record("neg", out, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs ndim >= 2, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner-dim mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return (ga, gb)

    return _record("matmul", out, (a, b), backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return _record("exp", out, (a,), backward)


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)
    ad = a.data

    def backward(g):
        return (g / ad,)

    return _record("log", out, (a,), backward)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return _record("tanh", out, (a,), backward)


def square(a: Tensor) -> Tensor:
    out = a.data * a.data
    ad = a.data

    def backward(g):
        return (2.0 * g * ad,)

    return _record("square", out, (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def backward(g):
        return (0.5 * g / out,)

    return _record("sqrt", out, (a,), backward)


def softplus(a: Tensor) -> Tensor:
    # log(1 + e^x), computed without overflow for large |x|.
    out = np.logaddexp(0.0, a.data)
    ad = a.data

    def backward(g):
        sig = 1.0 / (1.0 + np.exp(-ad))
        return (g * sig,)

    return _record("softplus", out, (a,), backward)


def maximum(a: Tensor, floor: float) -> Tensor:
    """Elementwise max with a scalar constant; subgradient 1 where a >= floor."""
    out = np.maximum(a.data, floor)
    mask = a.data >= floor

    def backward(g):
        return (g * mask,)

    return _record("maximum", out, (a,), backward)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.data.shape

    def backward(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", out, (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    shape = a.data.shape
    n = a.data.size if axis is None else np.prod(
        [shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )

    def backward(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _record("mean", out, (a,), backward)


def logsumexp(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Numerically stable log-sum-exp reduction; backward is softmax-weighted."""
    ad = a.data
    mx = ad.max(axis=axis, keepdims=True)
    s = np.subtract(ad, mx)
    np.exp(s, out=s)
    out_kept = s.sum(axis=axis, keepdims=True)
    np.log(out_kept, out=out_kept)
    out_kept += mx
    out = out_kept
    if not keepdims:
        out = np.squeeze(out, axis=axis) if axis is not None else out.reshape(())

    def backward(g):
        # Softmax weights are recomputed here rather than stored: backward
        # runs at most once per node, and evaluation-only passes skip it.
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        soft = np.subtract(ad, out_kept)
        np.exp(soft, out=soft)
        soft *= g
        return (soft,)

    return _record("logsumexp", out, (a,), backward)


def shift_logsumexp(a: Tensor, b: Tensor, axis: int) -> Tensor:
    """``logsumexp(a + b, axis)`` fused into a single recorded op.

    Equivalent to ``logsumexp(add(a, b), axis)`` (same values, same
    gradients) but records one node instead of two and retains no array of
    the broadcast shape: the backward closure rebuilds the softmax weights
    from the operands.  Intended for large broadcast sums that are reduced
    immediately, e.g. fixed-point updates of transport potentials.
    """
    s = _binop("shift_logsumexp", a, b, np.add)
    mx = s.max(axis=axis, keepdims=True)
    np.subtract(s, mx, out=s)
    np.exp(s, out=s)
    out_kept = s.sum(axis=axis, keepdims=True)
    np.log(out_kept, out=out_kept)
    out_kept += mx
    out = np.squeeze(out_kept, axis=axis)
    a_shape, b_shape = a.data.shape, b.data.shape
    ad, bd = a.data, b.data

    def backward(g):
        # Rebuilt from the operands instead of stored: keeping the broadcast
        # array alive per node defeats buffer reuse across the solve.
        soft = np.add(ad, bd)
        np.subtract(soft, out_kept, out=soft)
        np.exp(soft, out=soft)
        soft *= np.expand_dims(np.asarray(g), axis)
        return (_unbroadcast(soft, a_shape), _unbroadcast(soft, b_shape))

    return _record("shift_logsumexp", out, (a, b), backward)


def dot_last(a: Tensor, b: Tensor) -> Tensor:
    """Inner product over the last axis, ``sum(a * b, axis=-1)``, as one op."""
    try:
        out = np.einsum("...d,...d->...", a.data, b.data)
    except ValueError:
        raise ShapeError(
            f"dot_last: incompatible shapes {a.data.shape} and {b.data.shape}"
        ) from None
    ad, bd = a.data, b.data
    a_shape, b_shape = ad.shape, bd.shape

    def backward(g):
        g_e = np.expand_dims(np.asarray(g), -1)
        return (_unbroadcast(g_e * bd, a_shape), _unbroadcast(g_e * ad, b_shape))

    return _record("dot_last", out, (a, b), backward)


def outer_addmul(z: Tensor, t: Tensor, v: Tensor) -> Tensor:
    """``z + t[..., None] * v`` fused into one op (rank-1 update of rows)."""
    te = t.data[..., None]
    out = np.multiply(te, v.data)
    out += z.data
    z_shape, t_shape, v_shape = z.data.shape, t.data.shape, v.data.shape
    td, vd = t.data, v.data

    def backward(g):
        gt = np.multiply(g, vd).sum(axis=-1)
        return (_unbroadcast(g, z_shape), _unbroadcast(gt, t_shape),
                _unbroadcast(g * td[..., None], v_shape))

    return _record("outer_addmul", out, (z, t, v), backward)


def planar_logdet(t: Tensor, wv: Tensor) -> Tensor:
    """``log(1 + wv * (1 - t^2))`` — log-Jacobian of a tanh planar layer.

    ``t`` is the tanh pre-activation image, ``wv`` the (scalar) inner product
    of the layer direction with its constrained update vector.
    """
    td = t.data
    tmp = 1.0 - td * td
    out = np.log(1.0 + wv.data * tmp)
    t_shape, wv_shape = td.shape, wv.data.shape
    wvd = wv.data

    def backward(g):
        den = np.exp(out)
        gt = (-2.0 * wvd) * td
        gt *= g
        gt /= den
        gwv = g * (1.0 - td * td)
        gwv /= den
        return (_unbroadcast(gt, t_shape), _unbroadcast(gwv, wv_shape))

    return _record("planar_logdet", out, (t, wv), backward)


def quad_form(x: Tensor, A: Tensor) -> Tensor:
    """Batched quadratic form ``sum((x @ A) * x, axis=-1)`` as one op."""
    xd, Ad = x.data, A.data
    if Ad.ndim != 2 or xd.shape[-1] != Ad.shape[0]:
        raise ShapeError(f"quad_form: incompatible shapes {xd.shape} and {Ad.shape}")
    out = np.einsum("...i,ij,...j->...", xd, Ad, xd)
    sym = Ad + Ad.T

    def backward(g):
        g_arr = np.asarray(g)
        gx = (xd @ sym) * np.expand_dims(g_arr, -1)
        xf = xd.reshape(-1, xd.shape[-1])
        gf = np.broadcast_to(g_arr, xd.shape[:-1]).reshape(-1, 1)
        gA = (xf * gf).T @ xf
        return (gx, gA)

    return _record("quad_form", out, (x, A), backward)


def diag_gauss_quad(diff: Tensor, log_std: Tensor) -> Tensor:
    """``sum(diff^2 * exp(-2 log_std), axis=-1)`` fused into one op."""
    dd, ld = diff.data, log_std.data
    inv_var = np.exp(-2.0 * ld)
    out = np.einsum("...k,k->...", dd * dd, inv_var)
    d_shape, l_shape = dd.shape, ld.shape

    def backward(g):
        g_e = np.expand_dims(np.asarray(g), -1)
        gdiff = (2.0 * dd) * inv_var
        gdiff *= g_e
        glog = (dd * dd) * (-2.0 * inv_var) * g_e
        return (gdiff, _unbroadcast(glog, l_shape))

    return _record("diag_gauss_quad", out, (diff, log_std), backward)


def affine(x: Tensor, k: float, c: float) -> Tensor:
    """``x * k + c`` with constant scalars, recorded as one op."""
    out = x.data * k
    out += c

    def backward(g):
        return (np.asarray(g) * k,)

    return _record("affine", out, (x,), backward)


def addn(*tensors) -> Tensor:
    """Broadcasting sum of several tensors recorded as one op."""
    ts = [_wrap(t) for t in tensors]
    out = ts[0].data
    for t in ts[1:]:
        out = out + t.data
    shapes = [t.data.shape for t in ts]

    def backward(g):
        return tuple(_unbroadcast(g, s) for s in shapes)

    return _record("addn", out, tuple(ts), backward)


def pairwise_sq_dists(a: Tensor) -> Tensor:
    """Squared Euclidean distances between rows: (..., N, d) -> (..., N, N).

    Fused into one recorded op; the backward contracts the output gradient
    directly against the points (d(i,j) depends on x_i - x_j, so the row and
    column gradients combine into ``2 (x diag(s 1) - s x)`` with
    ``s = g + g^T``) without materializing the (..., N, N, d) difference
    array on the tape.
    """
    if a.ndim < 2:
        raise ShapeError(f"pairwise_sq_dists needs ndim >= 2, got {a.shape}")
    x = a.data
    diff = x[..., :, None, :] - x[..., None, :, :]
    out = np.einsum("...k,...k->...", diff, diff)

    def backward(g):
        s = g + np.swapaxes(g, -1, -2)
        return (2.0 * (x * s.sum(axis=-1)[..., None] - s @ x),)

    return _record("pairwise_sq_dists", out, (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record("concat", out, tuple(tensors), backward)


def getitem(a: Tensor, idx) -> Tensor:
    """Basic (slice/int/ellipsis) indexing; backward scatters into zeros."""
    out = a.data[idx]
    shape = a.data.shape

    def backward(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return _record("getitem", np.ascontiguousarray(out), (a,), backward)


def take(a: Tensor, indices: np.ndarray, axis: int = 0) -> Tensor:
    """Gather along ``axis`` by an integer index array (indices are constants)."""
    indices = np.asarray(indices, dtype=np.intp)
    out = np.take(a.data, indices, axis=axis)
    shape = a.data.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(np.moveaxis(full, axis, 0), indices, np.moveaxis(g, axis, 0))
        return (full,)

    return _record("take", out, (a,), backward)


def put_rows(base: Tensor, indices: np.ndarray, values: Tensor) -> Tensor:
    """Copy of ``base`` with rows ``indices`` (axis 0) replaced by ``values``."""
    indices = np.asarray(indices, dtype=np.intp)
    if np.unique(indices).size != indices.size:
        raise ShapeError("put_rows requires unique row indices")
    out = base.data.copy()
    out[indices] = values.data

    def backward(g):
        g_base = g.copy()
        g_base[indices] = 0.0
        return (g_base, g[indices])

    return _record("put_rows", out, (base, values), backward)


def broadcast_to(a: Tensor, shape) -> Tensor:
    out = np.broadcast_to(a.data, shape).copy()
    src = a.data.shape

    def backward(g):
        return (_unbroadcast(g, src),)

    return _record("broadcast_to", out, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    src = a.data.shape

    def backward(g):
        return (g.reshape(src),)

    return _record("reshape", out, (a,), backward)


def amax(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Maximum reduction; the gradient is split evenly among tied maxima."""
    out = np.max(a.data, axis=axis, keepdims=keepdims)
    kept = np.max(a.data, axis=axis, keepdims=True)
    mask = (a.data == kept).astype(np.float64)
    mask /= mask.sum(axis=axis, keepdims=True)

    def backward(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (g * mask,)

    return _record("amax", out, (a,), backward)


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    out = np.swapaxes(a.data, ax1, ax2).copy()

    def backward(g):
        return (np.swapaxes(g, ax1, ax2),)

    return _record("swapaxes", out, (a,), backward)


def custom_op(op: str, out_data: np.ndarray, parents: Sequence[Tensor],
              backward_fn: Callable) -> Tensor:
    """Record a caller-supplied op (used by fused kernels elsewhere)."""
    return _record(op, out_data, parents, backward_fn)


# ---------------------------------------------------------------------------
# Backward sweep
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Run one reverse sweep seeding d(loss)/d(loss) = 1.

    Populates ``node.grad`` for every node the loss depends on.  ``loss``
    must be a scalar recorded on the active or a completed tape.
    """
    if loss.node is None:
        raise AutodiffError("loss is not recorded on any tape")
    if loss.data.shape != ():
        raise AutodiffError(f"loss must be scalar, got shape {loss.data.shape}")
    tape = loss.node.tape
    loss.node.grad = np.ones(())
    for node in reversed(tape._nodes):
        if node.grad is None or node.backward_fn is None:
            continue
        for parent, g in zip(node.parents, node.backward_fn(node.grad)):
            if parent.grad is None:
                # No copy: closures never mutate what they return, and the
                # first rebind below replaces the alias with an owned array.
                parent.grad = np.asarray(g, dtype=np.float64)
            elif parent.grad_owned and np.shape(g) == parent.grad.shape:
                np.add(parent.grad, g, out=parent.grad)
            else:
                parent.grad = parent.grad + g
                # 0-d sums come back as numpy scalars, which cannot be an
                # ``out=`` target; only arrays take the in-place branch.
                parent.grad_owned = type(parent.grad) is np.ndarray


def grad(loss: Tensor, params: "ParamStore") -> dict:
    """Gradient of a scalar loss for every entry of ``params``.

    Parameters that never touched the tape get a zero gradient of the right
    shape (documented behaviour, not an error).
    """
    backward(loss)
    out = {}
    for name, tensor in params.items():
        node = tensor.node
        if node is not None and node.tape is loss.node.tape and node.grad is not None:
            out[name] = np.broadcast_to(node.grad, tensor.data.shape).astype(np.float64)
        else:
            out[name] = np.zeros_like(tensor.data)
    return out


# ---------------------------------------------------------------------------
# ParamStore and checkpoints
# ---------------------------------------------------------------------------

class ParamStore:
    """Flat, named, ordered collection of parameter tensors.

    Names are unique; insertion order defines the flattening order used by
    checkpoints, so flatten/unflatten is a bijection for a fixed layout.
    """

    def __init__(self):
        self._entries: dict[str, Tensor] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self._entries:
            raise KeyError(f"duplicate parameter name: {name!r}")
        t = Tensor(np.array(value, dtype=np.float64))
        self._entries[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self):
        return len(self._entries)

    def names(self) -> list:
        return list(self._entries.keys())

    def items(self):
        return self._entries.items()

    def watch(self, tape: Tape) -> None:
        """Register every entry as a leaf of ``tape``."""
        for t in self._entries.values():
            tape.watch(t)

    def n_scalars(self) -> int:
        return int(np.sum([t.data.size for t in self._entries.values()]))

    def flatten(self) -> np.ndarray:
        if not self._entries:
            return np.zeros(0)
        return np.concatenate([t.data.ravel() for t in self._entries.values()])

    def load_flat(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.n_scalars():
            raise ShapeError(
                f"flat vector has {vec.size} scalars, store holds {self.n_scalars()}"
            )
        offset = 0
        for t in self._entries.values():
            n = t.data.size
            t.data = vec[offset:offset + n].reshape(t.data.shape).copy()
            offset += n

    def set_values(self, values: dict) -> None:
        for name, arr in values.items():
            t = self._entries[name]
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ShapeError(
                    f"parameter {name!r}: expected shape {t.data.shape}, got {arr.shape}"
                )
            t.data = arr.copy()

    def to_dict(self) -> dict:
        return {name: t.data.copy() for name, t in self._entries.items()}


_MAGIC = b"NFCKPT01"


def save_checkpoint(path, store: ParamStore, extra: Optional[dict] = None,
                    arrays: Optional[dict] = None) -> None:
    """Write a checkpoint: JSON manifest + flat little-endian float64 payload.

    ``extra`` holds JSON-serializable metadata (flow architecture, RNG
    position, ...).  ``arrays`` holds additional named float arrays (optimizer
    moments) stored in the same payload.  Round-trips bit-exactly.
    """
    entries = []
    payload = bytearray()
    offset = 0

    def _push(name, arr):
        nonlocal offset
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        payload.extend(raw)
        offset += len(raw)

    for name, tensor in store.items():
        _push(name, tensor.data)
    extra_names = []
    if arrays:
        for name, arr in arrays.items():
            _push("@" + name, np.asarray(arr, dtype=np.float64))
            extra_names.append(name)
    manifest = {
        "entries": entries,
        "extra_arrays": extra_names,
        "extra": extra or {},
    }
    raw_manifest = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(raw_manifest)))
        fh.write(raw_manifest)
        fh.write(bytes(payload))


def load_checkpoint(path):
    """Read a checkpoint; returns (params: dict, extra: dict, arrays: dict)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise AutodiffError(f"not a checkpoint file: {path}")
        (mlen,) = struct.unpack("<Q", fh.read(8))
        manifest = json.loads(fh.read(mlen).decode("utf-8"))
        payload = fh.read()
    params, arrays = {}, {}
    for entry in manifest["entries"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(
            payload, dtype="<f8", count=n, offset=entry["offset"]
        ).reshape(shape).astype(np.float64)
        if entry["name"].startswith("@"):
            arrays[entry["name"][1:]] = arr
        else:
            params[entry["name"]] = arr
    return params, manifest.get("extra", {}), arrays

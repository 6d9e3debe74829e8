"""Planar and coupling normalizing flows, plus conditional variants.

Conventions shared by every flow:

* ``forward(z, cond)`` maps base points to model points and returns
  ``(s, logdet)`` where ``logdet`` is log|det J| of the forward map, one value
  per row (all leading axes are batch axes, the last axis is the state).
* ``inverse(s, cond)`` is the exact analytic inverse where one exists
  (coupling layers); planar flows are forward-only and raise.
* All parameters are registered in a shared :class:`~flowfilter.autodiff.ParamStore`
  under dotted names, so a flow is a view onto the store rather than an owner
  of private state.

"Identity start" means the flow is the identity map at initialization (exactly,
not approximately), so a flow-backed density coincides with its base density
until training moves the weights.
"""

from __future__ import annotations

import numpy as np

from flowfilter import autodiff as ad
from flowfilter.autodiff import ParamStore, Tensor

# Invertibility margin for planar flows: the reparametrized v̂ satisfies
# wᵀv̂ >= -1 + PLANAR_MARGIN, which keeps 1 + wᵀv̂·tanh'(·) strictly positive.
PLANAR_MARGIN = 1e-6

# Initial value of the raw scale cap; softplus(1.8546) ≈ 2, so e^γ starts
# bounded to [e⁻², e²].
_CAP_RAW_INIT = float(np.log(np.exp(2.0) - 1.0))


class FlowError(Exception):
    """Misuse of a flow (bad dimension, missing inverse, ...)."""


class Mlp2:
    """Two-layer tanh network: x -> tanh(x W1 + b1) W2 + b2.

    The identity-start variant has W2 = b2 = 0 exactly, so the output is zero
    regardless of input at initialization.
    """

    def __init__(self, store: ParamStore, name: str, d_in: int, d_hidden: int,
                 d_out: int, rng: np.random.Generator, identity_start: bool = True):
        self.d_in = d_in
        self.d_out = d_out
        scale = 1.0 / np.sqrt(max(d_in, 1))
        self.W1 = store.add(f"{name}.W1", rng.standard_normal((d_in, d_hidden)) * scale)
        self.b1 = store.add(f"{name}.b1", np.zeros(d_hidden))
        if identity_start:
            W2 = np.zeros((d_hidden, d_out))
        else:
            W2 = rng.standard_normal((d_hidden, d_out)) / np.sqrt(d_hidden)
        self.W2 = store.add(f"{name}.W2", W2)
        self.b2 = store.add(f"{name}.b2", np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        squeeze = x.ndim == 1
        if squeeze:
            x = ad.reshape(x, (1, x.data.shape[0]))
        h = ad.tanh(ad.matmul(x, self.W1) + self.b1)
        out = ad.matmul(h, self.W2) + self.b2
        if squeeze:
            out = ad.reshape(out, (self.d_out,))
        return out


class PlanarFlow:
    """Planar flow s = z + v̂ tanh(wᵀz + b), optionally conditioned.

    Invertibility is enforced by reparametrizing v into

        v̂ = v + (max(wᵀv, -1 + margin) - wᵀv) · w / ‖w‖²,

    which is the identity whenever wᵀv already satisfies the margin (so v = 0
    gives an exact identity flow) and otherwise projects v just far enough
    along w.  log|det J| = log(1 + wᵀv̂ · tanh'(wᵀz + b)) per row, strictly
    positive by the margin.

    For the conditional variant the scalar bias is replaced by a learned
    affine map of the conditioning input, b(u) = Sᵀu + c, so in one dimension
    with c = 0 the inner argument reduces to w·z + S·u.

    Planar flows have no analytic inverse; ``inverse`` raises.
    """

    has_inverse = False

    def __init__(self, store: ParamStore, name: str, dim: int,
                 cond_dim: int = 0, rng: np.random.Generator = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.dim = dim
        self.cond_dim = cond_dim
        self.w = store.add(f"{name}.w", rng.standard_normal(dim) * 0.1)
        self.v = store.add(f"{name}.v", np.zeros(dim))
        if cond_dim:
            self.cond_w = store.add(f"{name}.cond_w", rng.standard_normal(cond_dim) * 0.1)
            self.cond_b = store.add(f"{name}.cond_b", 0.0)
        else:
            self.b = store.add(f"{name}.b", 0.0)
        self._cache = None

    def _v_hat(self) -> Tensor:
        wv = ad.sum(self.w * self.v)
        clipped = ad.maximum(wv, -1.0 + PLANAR_MARGIN)
        denom = ad.maximum(ad.sum(ad.square(self.w)), 1e-32)
        return self.v + ((clipped - wv) / denom) * self.w

    def _constrained(self):
        """(v_hat, w . v_hat), rebuilt once per tape.

        Both depend only on parameters, so within one recorded program (one
        filter run) every step shares the same few nodes.  The cache keeps a
        strong reference to the tape, which also prevents a recycled object
        id from matching a dead tape.
        """
        tape = ad.active_tape()
        cached = self._cache
        if cached is not None and tape is not None and cached[0] is tape:
            return cached[1], cached[2]
        v_hat = self._v_hat()
        wv_hat = ad.dot_last(self.w, v_hat)
        if tape is not None:
            self._cache = (tape, v_hat, wv_hat)
        return v_hat, wv_hat

    def _bias(self, cond) -> Tensor:
        if self.cond_dim:
            if cond is None:
                raise FlowError("conditional planar flow called without cond input")
            return ad.dot_last(cond, self.cond_w) + self.cond_b
        return self.b

    def forward(self, z: Tensor, cond: Tensor = None):
        v_hat, wv_hat = self._constrained()
        inner = ad.dot_last(z, self.w) + self._bias(cond)  # (...,)
        t = ad.tanh(inner)
        s = ad.outer_addmul(z, t, v_hat)
        logdet = ad.planar_logdet(t, wv_hat)
        return s, logdet

    def inverse(self, s: Tensor, cond: Tensor = None):
        raise FlowError("planar flows are forward-only (no analytic inverse)")

    def describe(self) -> dict:
        return {"kind": "planar", "dim": self.dim, "cond_dim": self.cond_dim}


class CouplingLayer:
    """Affine coupling layer (one half rescaled and shifted by the other).

    With split index d = ⌊D/2⌋ and orientation "upper", coordinates d..D are
    transformed conditioned on coordinates 0..d (plus any conditioning input):

        s_hi = z_hi ⊙ e^{γ(z_lo, u)} + η(z_lo, u),       s_lo = z_lo

    Orientation "lower" swaps the roles.  log|det J| = Σ γ over the
    transformed coordinates, and the inverse is analytic.  The raw scale net
    output is squashed through tanh and multiplied by a learnable softplus
    cap (≈ 2 at init) so e^γ stays bounded early in training.
    """

    has_inverse = True

    def __init__(self, store: ParamStore, name: str, dim: int, cond_dim: int = 0,
                 hidden: int = 32, orientation: str = "upper",
                 rng: np.random.Generator = None, identity_start: bool = True):
        if dim < 2:
            raise FlowError(
                "coupling layers require dim >= 2 (the state is split in half); "
                "use a planar flow for scalar states"
            )
        if orientation not in ("upper", "lower"):
            raise FlowError(f"unknown orientation {orientation!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.dim = dim
        self.cond_dim = cond_dim
        self.hidden = hidden
        self.orientation = orientation
        self.split = dim // 2
        n_keep = self.split if orientation == "upper" else dim - self.split
        n_move = dim - n_keep
        self.scale_net = Mlp2(store, f"{name}.scale", n_keep + cond_dim, hidden,
                              n_move, rng, identity_start=identity_start)
        self.shift_net = Mlp2(store, f"{name}.shift", n_keep + cond_dim, hidden,
                              n_move, rng, identity_start=identity_start)
        self.cap_raw = store.add(f"{name}.cap_raw", _CAP_RAW_INIT)

    def _halves(self, x: Tensor):
        lo, hi = x[..., : self.split], x[..., self.split:]
        return (lo, hi) if self.orientation == "upper" else (hi, lo)

    def _join(self, keep: Tensor, moved: Tensor) -> Tensor:
        if self.orientation == "upper":
            return ad.concat([keep, moved], axis=-1)
        return ad.concat([moved, keep], axis=-1)

    def _nets(self, keep: Tensor, cond):
        if self.cond_dim:
            if cond is None:
                raise FlowError("conditional coupling layer called without cond input")
            keep = ad.concat([keep, cond], axis=-1)
        cap = ad.softplus(self.cap_raw)
        gamma = cap * ad.tanh(self.scale_net(keep))
        eta = self.shift_net(keep)
        return gamma, eta

    def forward(self, z: Tensor, cond: Tensor = None):
        keep, move = self._halves(z)
        gamma, eta = self._nets(keep, cond)
        moved = move * ad.exp(gamma) + eta
        return self._join(keep, moved), ad.sum(gamma, axis=-1)

    def inverse(self, s: Tensor, cond: Tensor = None):
        keep, moved = self._halves(s)
        gamma, eta = self._nets(keep, cond)
        move = (moved - eta) * ad.exp(-gamma)
        return self._join(keep, move), -ad.sum(gamma, axis=-1)

    def describe(self) -> dict:
        return {
            "kind": "coupling", "dim": self.dim, "cond_dim": self.cond_dim,
            "hidden": self.hidden, "orientation": self.orientation,
        }


class AffineScaleFlow:
    """Fixed (non-learnable) isotropic scaling z -> c z, logdet = D log|c|.

    Used as a whitening head/tail around coupling layers when the data lives
    on a scale far from unit (keeps the tanh nets out of saturation).  Carries
    no parameters; conditioning input is ignored.
    """

    has_inverse = True

    def __init__(self, factor: float, dim: int):
        if factor == 0.0:
            raise FlowError("scale factor must be nonzero")
        self.factor = float(factor)
        self.dim = dim
        self._logdet = dim * float(np.log(abs(factor)))

    def _ld(self, z: Tensor, sign: float) -> Tensor:
        return Tensor(np.full(z.data.shape[:-1], sign * self._logdet))

    def forward(self, z: Tensor, cond: Tensor = None):
        return z * self.factor, self._ld(z, +1.0)

    def inverse(self, s: Tensor, cond: Tensor = None):
        return s * (1.0 / self.factor), self._ld(s, -1.0)

    def describe(self) -> dict:
        return {"kind": "scale", "dim": self.dim, "factor": self.factor}


class FlowStack:
    """Composition of flows applied in declared order; log-determinants add.

    The empty stack is the identity.  ``inverse`` applies member inverses in
    reverse order and raises if any member is forward-only.
    """

    def __init__(self, flows):
        self.flows = list(flows)

    @property
    def has_inverse(self) -> bool:
        return all(f.has_inverse for f in self.flows)

    def __len__(self):
        return len(self.flows)

    def forward(self, z: Tensor, cond: Tensor = None):
        logdet = None
        for flow in self.flows:
            z, ld = flow.forward(z, cond)
            logdet = ld if logdet is None else logdet + ld
        if logdet is None:
            logdet = Tensor(np.zeros(z.data.shape[:-1]))
        return z, logdet

    def inverse(self, s: Tensor, cond: Tensor = None):
        if not self.has_inverse:
            raise FlowError("stack contains a forward-only flow; no inverse")
        logdet = None
        for flow in reversed(self.flows):
            s, ld = flow.inverse(s, cond)
            logdet = ld if logdet is None else logdet + ld
        if logdet is None:
            logdet = Tensor(np.zeros(s.data.shape[:-1]))
        return s, logdet

    def describe(self) -> dict:
        return {"kind": "stack", "flows": [f.describe() for f in self.flows]}


def make_coupling_stack(store: ParamStore, name: str, dim: int, n_units: int,
                        cond_dim: int = 0, hidden: int = 32,
                        rng: np.random.Generator = None,
                        identity_start: bool = True) -> FlowStack:
    """Stack of ``n_units`` coupling units with alternating orientation.

    One unit is two coupling layers: the first transforms the upper half of
    the state conditioned on the lower half, the second transforms the lower
    half conditioned on the (already transformed) upper half, so every
    coordinate is updated once per unit.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    flows = []
    for k in range(n_units):
        flows.append(CouplingLayer(store, f"{name}.u{k}a", dim, cond_dim, hidden,
                                   "upper", rng, identity_start))
        flows.append(CouplingLayer(store, f"{name}.u{k}b", dim, cond_dim, hidden,
                                   "lower", rng, identity_start))
    return FlowStack(flows)

"""Bounds on a classifier's logit when its *parameters* range over a box.

The input ``x`` is fixed; every weight and bias lies in an interval centred
on the trained value.  Two propagation schemes are provided:

* IBP, plain interval arithmetic layer by layer;
* CROWN-IBP, a backward pass producing bounds that are linear in the full
  flattened parameter vector, using IBP for intermediate activations.

For depth > 1 the backward pass meets bilinear terms ``W_l * h_{l-1}``
(weight times an activation that itself depends on upstream parameters).
Each such term is linearised around the box midpoint,

    W h = Wc h + W hc - Wc hc + (W - Wc)(h - hc),

and the last product is bounded by ``r_W * r_h``.  Activations are then
relaxed through ReLU with the usual CROWN slopes.  With one layer ``h`` is
the concrete input, the slack vanishes and the coefficients are exactly
``(x; 1)``.  Linear bounds that concretise looser than IBP are replaced by
the constant IBP endpoint, so the CROWN-IBP interval is never wider.

All tensor code runs on an autodiff tape so that training can differentiate
through it; the array-level functions below wrap it for plain use.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .model import MlpParams


@dataclass
class Interval:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)
        if self.lo.shape != self.hi.shape:
            raise ValueError(f"interval endpoints differ in shape: {self.lo.shape} vs {self.hi.shape}")
        if np.any(self.lo > self.hi):
            raise ValueError("interval with lo > hi")

    @property
    def mid(self):
        return 0.5 * (self.lo + self.hi)

    @property
    def width(self):
        return self.hi - self.lo

    def contains(self, v, tol: float = 0.0) -> np.ndarray:
        v = np.asarray(v)
        return (self.lo - tol <= v) & (v <= self.hi + tol)

    def __iter__(self):
        yield self.lo
        yield self.hi


@dataclass(frozen=True)
class MultiplicitySpec:
    """Norm order, ratio kappa, and optional explicit radius override.

    Radii are per parameter tensor: ``delta_t = kappa * ||theta_t||_p`` for
    each weight matrix and each bias vector separately.  ``delta`` (scalar or
    one value per tensor) replaces the kappa rule when given.
    """

    kappa: float = 0.0
    p: float = math.inf
    delta: Optional[object] = None

    def __post_init__(self):
        if not 0.0 <= self.kappa <= 1.0:
            raise ValueError(f"kappa must lie in [0, 1], got {self.kappa}")
        if self.p not in (math.inf, 2, 2.0):
            raise ValueError(f"unsupported norm order {self.p!r}; use inf or 2")

    @property
    def outer_approximated(self) -> bool:
        return self.p != math.inf

    def radii(self, f: MlpParams) -> list[float]:
        tensors = f.tensors()
        if self.delta is not None:
            d = np.broadcast_to(np.asarray(self.delta, dtype=np.float64), (len(tensors),))
            return [float(v) for v in d]
        order = np.inf if self.p == math.inf else 2
        return [self.kappa * float(np.linalg.norm(t.reshape(-1), ord=order)) for t in tensors]

    def snapshot(self, f: MlpParams) -> dict:
        return {"p": "inf" if self.p == math.inf else float(self.p), "kappa": self.kappa,
                "deltas": [repr(r) for r in self.radii(f)], "outer_approximated": self.outer_approximated}


@dataclass
class ParamBox:
    """Per-tensor elementwise box ``[theta - r, theta + r]`` around ``center``.

    For p = 2 the l2 ball of radius r is enclosed by the l-inf box of the
    same radius (``outer_approx`` is set).
    """

    center: MlpParams
    radii: list
    outer_approx: bool = False

    def radius_tensors(self) -> list[np.ndarray]:
        return [np.full(t.shape, r, dtype=np.float64) for t, r in zip(self.center.tensors(), self.radii)]

    def radius_flat(self) -> np.ndarray:
        return np.concatenate([r.reshape(-1) for r in self.radius_tensors()])

    @property
    def lo(self) -> np.ndarray:
        return self.center.flatten() - self.radius_flat()

    @property
    def hi(self) -> np.ndarray:
        return self.center.flatten() + self.radius_flat()

    def lo_params(self) -> MlpParams:
        return self.center.unflatten(self.lo)

    def hi_params(self) -> MlpParams:
        return self.center.unflatten(self.hi)

    def contains(self, theta: MlpParams, tol: float = 0.0) -> bool:
        v = theta.flatten()
        return bool(np.all(self.lo - tol <= v) and np.all(v <= self.hi + tol))

    def sample(self, rng: np.random.Generator, k: int, corner_fraction: float = 0.0) -> np.ndarray:
        """Draw ``k`` flattened parameter vectors from the box.

        A ``corner_fraction`` of the draws are random box vertices, where
        worst cases of (piecewise) linear functions tend to live.
        """
        lo, hi = self.lo, self.hi
        u = rng.uniform(size=(k, lo.size))
        n_corner = int(round(k * corner_fraction))
        if n_corner:
            u[:n_corner] = rng.integers(0, 2, size=(n_corner, lo.size))
        return lo + u * (hi - lo)


def build_param_box(f: MlpParams, spec: MultiplicitySpec) -> ParamBox:
    return ParamBox(f.copy(), spec.radii(f), spec.outer_approximated)


@dataclass
class LinBounds:
    """sigma(alpha_lo . theta + beta_lo) <= f_theta(x) <= sigma(alpha_hi . theta + beta_hi)."""

    alpha_lo: np.ndarray
    beta_lo: np.ndarray
    alpha_hi: np.ndarray
    beta_hi: np.ndarray

    def evaluate(self, theta) -> tuple:
        theta = np.asarray(theta, dtype=np.float64)
        return (self.alpha_lo @ theta + self.beta_lo, self.alpha_hi @ theta + self.beta_hi)


# --------------------------------------------------------------------------
# tape-level kernels (batched over instances)

@dataclass
class IbpTrace:
    """Interval pre-activations per layer (Vars shaped (B, width))."""
    z_lo: list = field(default_factory=list)
    z_hi: list = field(default_factory=list)


def _abs(x):
    return ad.absolute(x) if isinstance(x, ad.Var) else np.abs(x)


def _interval_matmul(w_lo, w_hi, h_lo, h_hi):
    """Exact enclosure of {W h} for W in [w_lo, w_hi] (out, in) and h in [h_lo, h_hi] (B, in)."""
    hl = ad.expand_dims(h_lo, 1)
    hu = ad.expand_dims(h_hi, 1)
    p1, p2, p3, p4 = w_lo * hl, w_lo * hu, w_hi * hl, w_hi * hu
    lo = ad.minimum(ad.minimum(p1, p2), ad.minimum(p3, p4))
    hi = ad.maximum(ad.maximum(p1, p2), ad.maximum(p3, p4))
    return ad.sum(lo, axis=-1), ad.sum(hi, axis=-1)


def ibp_tape(layers: list, radii: Sequence[np.ndarray], x) -> IbpTrace:
    """IBP through an MLP whose (W, b) lie in ``[c - r, c + r]``.

    ``layers`` are (W, b) Vars (the box centre), ``radii`` the matching
    radius arrays in flattening order, ``x`` a (B, d) array or Var.
    """
    trace = IbpTrace()
    h_lo = h_hi = None
    for i, (w, b) in enumerate(layers):
        rw, rb = radii[2 * i], radii[2 * i + 1]
        if i == 0:
            zc = ad.add(ad.matmul(x, ad.transpose(w)), b)
            zr = ad.add(ad.matmul(_abs(x), rw.T), rb) if isinstance(x, ad.Var) else _abs(x) @ rw.T + rb
            z_lo, z_hi = ad.sub(zc, zr), ad.add(zc, zr)
        else:
            lo, hi = _interval_matmul(ad.sub(w, rw), ad.add(w, rw), h_lo, h_hi)
            z_lo, z_hi = ad.add(lo, ad.sub(b, rb)), ad.add(hi, ad.add(b, rb))
        trace.z_lo.append(z_lo)
        trace.z_hi.append(z_hi)
        h_lo, h_hi = ad.relu(z_lo), ad.relu(z_hi)
    return trace


def _crown_upper(layers, radii, x, trace: IbpTrace, sign: float):
    """Linear upper bound of ``sign * logit`` in the flattened parameters.

    Returns (alpha (B, n), beta (B,)).
    """
    n_layers = len(layers)
    batch = trace.z_lo[0].shape[0]
    lam = np.full((batch, 1), sign)
    const = None
    coef_w = [None] * n_layers
    coef_b = [None] * n_layers

    def acc(c, term):
        return term if c is None else ad.add(c, term)

    for l in range(n_layers - 1, -1, -1):
        w, _ = layers[l]
        rw = radii[2 * l]
        coef_b[l] = lam if isinstance(lam, ad.Var) else w.tape.const(lam)
        if l == 0:
            coef_w[0] = ad.mul(ad.expand_dims(coef_b[0], 2), ad.expand_dims(x, 1) if isinstance(x, ad.Var)
                               else x[:, None, :])
            break
        h_lo = ad.relu(trace.z_lo[l - 1])
        h_hi = ad.relu(trace.z_hi[l - 1])
        h_mid = ad.mul(ad.add(h_lo, h_hi), 0.5)
        h_rad = ad.mul(ad.sub(h_hi, h_lo), 0.5)
        coef_w[l] = ad.mul(ad.expand_dims(coef_b[l], 2), ad.expand_dims(h_mid, 1))
        lam_h = ad.matmul(coef_b[l], w)  # (B, in)
        slack = ad.sum(ad.mul(_abs(coef_b[l]), ad.matmul(h_rad, rw.T)), axis=-1)
        const = acc(const, ad.sub(slack, ad.sum(ad.mul(lam_h, h_mid), axis=-1)))

        lo, hi = trace.z_lo[l - 1], trace.z_hi[l - 1]
        lv, hv = lo.value, hi.value
        active = lv >= 0
        dead = hv <= 0
        unstable = ~(active | dead)
        denom = ad.where(unstable, ad.sub(hi, lo), 1.0)
        up_slope = ad.where(unstable, ad.div(hi, denom), np.where(active, 1.0, 0.0))
        up_icpt = ad.where(unstable, ad.neg(ad.div(ad.mul(hi, lo), denom)), 0.0)
        lo_slope = np.where(active | (unstable & (hv > -lv)), 1.0, 0.0)
        pos = lam_h.value >= 0
        slope = ad.where(pos, up_slope, lo_slope)
        icpt = ad.where(pos, up_icpt, 0.0)
        const = ad.add(const, ad.sum(ad.mul(lam_h, icpt), axis=-1))
        lam = ad.mul(lam_h, slope)

    parts = []
    for l in range(n_layers):
        parts.append(ad.reshape(coef_w[l], (batch, -1)))
        parts.append(coef_b[l])
    alpha = ad.concat(parts, axis=-1)
    if const is None:
        const = alpha.tape.const(np.zeros(batch))
    return alpha, const


def flat_center(layers: list):
    parts = []
    for w, b in layers:
        parts += [ad.reshape(w, (-1,)), b]
    return ad.concat(parts, axis=0)


def concretize_tape(alpha, beta, center, radius: np.ndarray, upper: bool):
    """max (upper) or min over the box of alpha . theta + beta."""
    mid = ad.add(ad.matmul(alpha, center), beta)
    spread = ad.matmul(ad.absolute(alpha), radius)
    return ad.add(mid, spread) if upper else ad.sub(mid, spread)


@dataclass
class TapeBounds:
    """CROWN-IBP linear bounds plus IBP interval for a batch, as Vars."""
    alpha_lo: object
    beta_lo: object
    alpha_hi: object
    beta_hi: object
    ibp_lo: object
    ibp_hi: object
    crown_lo: object
    crown_hi: object


def crown_ibp_tape(layers: list, radii: Sequence[np.ndarray], x, clip_to_ibp: bool = True) -> TapeBounds:
    trace = ibp_tape(layers, radii, x)
    ibp_lo = ad.reshape(trace.z_lo[-1], (-1,))
    ibp_hi = ad.reshape(trace.z_hi[-1], (-1,))
    center = flat_center(layers)
    radius = np.concatenate([np.asarray(r).reshape(-1) for r in radii])

    a_hi, b_hi = _crown_upper(layers, radii, x, trace, 1.0)
    a_neg, b_neg = _crown_upper(layers, radii, x, trace, -1.0)
    a_lo, b_lo = ad.neg(a_neg), ad.neg(b_neg)
    c_hi = concretize_tape(a_hi, b_hi, center, radius, upper=True)
    c_lo = concretize_tape(a_lo, b_lo, center, radius, upper=False)
    if clip_to_ibp:
        keep_hi = c_hi.value <= ibp_hi.value
        keep_lo = c_lo.value >= ibp_lo.value
        a_hi = ad.where(keep_hi[:, None], a_hi, 0.0)
        b_hi = ad.where(keep_hi, b_hi, ibp_hi)
        c_hi = ad.where(keep_hi, c_hi, ibp_hi)
        a_lo = ad.where(keep_lo[:, None], a_lo, 0.0)
        b_lo = ad.where(keep_lo, b_lo, ibp_lo)
        c_lo = ad.where(keep_lo, c_lo, ibp_lo)
    return TapeBounds(a_lo, b_lo, a_hi, b_hi, ibp_lo, ibp_hi, c_lo, c_hi)


# --------------------------------------------------------------------------
# array-level API

def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    return (x[None, :], True) if x.ndim == 1 else (x, False)


def _box_on_tape(box: ParamBox):
    tape = ad.Tape()
    return tape, box.center.to_tape(tape, requires_grad=False), box.radius_tensors()


def ibp_forward(box: ParamBox, x) -> Interval:
    """Interval enclosing the logit over every parameter setting in ``box``."""
    xb, single = _as_batch(x)
    if xb.shape[1] != box.center.dims[0]:
        raise ValueError(f"input has {xb.shape[1]} features, network expects {box.center.dims[0]}")
    _, layers, radii = _box_on_tape(box)
    tr = ibp_tape(layers, radii, xb)
    lo, hi = tr.z_lo[-1].value[:, 0], tr.z_hi[-1].value[:, 0]
    return Interval(lo[0], hi[0]) if single else Interval(lo, hi)


def crown_ibp_bounds(box: ParamBox, x, clip_to_ibp: bool = True) -> LinBounds:
    xb, single = _as_batch(x)
    if xb.shape[1] != box.center.dims[0]:
        raise ValueError(f"input has {xb.shape[1]} features, network expects {box.center.dims[0]}")
    _, layers, radii = _box_on_tape(box)
    tb = crown_ibp_tape(layers, radii, xb, clip_to_ibp)
    vals = [tb.alpha_lo.value, tb.beta_lo.value, tb.alpha_hi.value, tb.beta_hi.value]
    if single:
        vals = [v[0] for v in vals]
    return LinBounds(*vals)


def concretize(lin: LinBounds, box: ParamBox) -> Interval:
    """[min over box of the lower form, max over box of the upper form] (closed form for boxes)."""
    c, r = box.center.flatten(), box.radius_flat()
    a_lo, a_hi = np.asarray(lin.alpha_lo), np.asarray(lin.alpha_hi)
    if a_lo.shape[-1] != c.size or a_hi.shape[-1] != c.size:
        raise ValueError(f"coefficient length {a_hi.shape[-1]} != parameter count {c.size}")
    lo = a_lo @ c - np.abs(a_lo) @ r + lin.beta_lo
    hi = a_hi @ c + np.abs(a_hi) @ r + lin.beta_hi
    # a zero-width box can invert the endpoints by one rounding step
    tiny = (lo > hi) & (lo - hi <= 1e-12 * (1.0 + np.abs(hi)))
    lo = np.where(tiny, hi, lo)
    return Interval(lo, hi)

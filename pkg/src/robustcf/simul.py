"""Worst-case logit on a counterfactual, restricted to models agreeing on ``x``.

Given CROWN-IBP linear bounds for the original point (``alpha, beta``) and
for the counterfactual (``mu, nu``) over one parameter box, the label-1 case
solves

    max  mu . z + nu   s.t.  alpha . z + beta >= 0,   lo <= z <= hi

and the label-0 case the mirrored minimisation.  A single linear constraint
over a box is a fractional knapsack: start at the corner maximising the
constraint, then spend the slack on coordinates in order of objective gain
per unit of slack.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .bounds import (LinBounds, MultiplicitySpec, ParamBox, build_param_box, crown_ibp_tape,
                     flat_center, ibp_tape)
from .model import MlpParams


@dataclass
class SimulProblem:
    mu: np.ndarray
    nu: float
    alpha: np.ndarray
    beta: float
    lo: np.ndarray
    hi: np.ndarray
    label: int = 1

    def __post_init__(self):
        for name in ("mu", "alpha", "lo", "hi"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64).reshape(-1))
        n = self.mu.size
        if not (self.alpha.size == self.lo.size == self.hi.size == n):
            raise ValueError(f"length mismatch: mu {n}, alpha {self.alpha.size}, "
                             f"lo {self.lo.size}, hi {self.hi.size}")
        if np.any(self.lo > self.hi):
            raise ValueError("box with lo > hi")
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")
        vals = np.concatenate([self.mu, self.alpha, self.lo, self.hi, [self.nu, self.beta]])
        if np.any(np.isnan(vals)):
            raise ValueError("NaN coefficient in problem")

    @property
    def n(self) -> int:
        return self.mu.size

    def negated(self) -> "SimulProblem":
        """The mirrored problem whose optimum is the negation of this one's."""
        return SimulProblem(-self.mu, -self.nu, -self.alpha, -self.beta, self.lo, self.hi, 1 - self.label)


def _greedy_max(mu, nu, alpha, beta, lo, hi) -> float:
    z = np.where((alpha > 0) | ((alpha == 0) & (mu > 0)), hi, lo)
    s = float(alpha @ z + beta)
    obj = float(mu @ z + nu)
    if s < 0:
        return -math.inf
    idx = np.flatnonzero(mu * alpha < 0)
    ratio = -mu[idx] / alpha[idx]
    order = idx[np.argsort(-ratio, kind="stable")]
    for i in order:
        span = hi[i] - lo[i]
        cost = abs(alpha[i]) * span
        gain = abs(mu[i]) * span
        if cost > s:
            obj += gain * s / cost
            break
        s -= cost
        obj += gain
    return obj


def greedy_solve(prob: SimulProblem) -> float:
    """Optimal value; -inf (label 1) or +inf (label 0) when no box point satisfies the constraint."""
    if prob.label == 1:
        return _greedy_max(prob.mu, prob.nu, prob.alpha, prob.beta, prob.lo, prob.hi)
    return -_greedy_max(-prob.mu, -prob.nu, -prob.alpha, -prob.beta, prob.lo, prob.hi)


def greedy_max_tape(mu, nu, alpha, beta, lo, hi):
    """Batched differentiable label-1 solve.

    ``mu``/``alpha`` are (B, n), ``nu``/``beta`` (B,), ``lo``/``hi`` (n,) or
    (B, n).  Returns (value Var (B,), feasible bool array (B,)).  Sorting is
    done on values and applied as a fixed permutation; the fractional step is
    a clamp whose derivative follows the interior branch.
    """
    mv, av = ad.value_of(mu), ad.value_of(alpha)
    up = (av > 0) | ((av == 0) & (mv > 0))
    z = ad.where(up, hi, lo)
    slack = ad.add(ad.sum(ad.mul(alpha, z), axis=-1), beta)
    obj = ad.add(ad.sum(ad.mul(mu, z), axis=-1), nu)
    feasible = slack.value >= 0

    trade = mv * av < 0
    with np.errstate(divide="ignore", invalid="ignore"):
        key = np.where(trade, -mv / np.where(trade, av, 1.0), -np.inf)
    order = np.argsort(-key, axis=-1, kind="stable")

    span = ad.sub(hi, lo)
    cost = ad.where(trade, ad.mul(ad.absolute(alpha), span), 0.0)
    gain = ad.where(trade, ad.mul(ad.absolute(mu), span), 0.0)
    shape = mv.shape
    cost_s = ad.take_along_axis(cost if cost.shape == shape else ad.add(cost, np.zeros(shape)), order)
    gain_s = ad.take_along_axis(gain if gain.shape == shape else ad.add(gain, np.zeros(shape)), order)
    spent_before = ad.sub(ad.cumsum(cost_s, axis=-1), cost_s)
    pos = cost_s.value > 0
    frac = ad.clip(ad.div(ad.sub(ad.expand_dims(slack, -1), spent_before),
                          ad.where(pos, cost_s, 1.0)), 0.0, 1.0)
    frac = ad.where(pos, frac, 0.0)
    value = ad.add(obj, ad.sum(ad.mul(gain_s, frac), axis=-1))
    return value, feasible


def build_simul_problem(x_bounds: LinBounds, cf_bounds: LinBounds, box: ParamBox, y_hat: int) -> SimulProblem:
    """Pick the upper forms for label 1 and the lower forms for label 0."""
    n = box.center.n_params
    for name, lb in (("x", x_bounds), ("counterfactual", cf_bounds)):
        if np.shape(lb.alpha_hi)[-1] != n or np.shape(lb.alpha_lo)[-1] != n:
            raise ValueError(f"{name} bounds have {np.shape(lb.alpha_hi)[-1]} coefficients, box has {n}")
    if y_hat == 1:
        return SimulProblem(cf_bounds.alpha_hi, float(cf_bounds.beta_hi), x_bounds.alpha_hi,
                            float(x_bounds.beta_hi), box.lo, box.hi, 1)
    return SimulProblem(cf_bounds.alpha_lo, float(cf_bounds.beta_lo), x_bounds.alpha_lo,
                        float(x_bounds.beta_lo), box.lo, box.hi, 0)


# --------------------------------------------------------------------------
# worst-case logits per method

METHODS = ("ibp", "crown-ibp", "simul-crown")


def normalize_method(method: str) -> str:
    m = method.lower().replace("_", "-")
    if m in ("crownibp", "crown"):
        m = "crown-ibp"
    if m in ("simul", "simulcrown", "simul-crown-ibp"):
        m = "simul-crown"
    if m not in METHODS:
        raise ValueError(f"unknown bounding method {method!r}; choose from {METHODS}")
    return m


def worst_logit_tape(layers: list, radii, x, x_cf, y_hat, method: str, infeasible: str = "fallback"):
    """Worst-case counterfactual logit per instance.

    For label 1 this is an upper bound on the counterfactual's logit over
    the multiplicity set (the model most inclined to predict 1); for label 0
    a lower bound.  ``infeasible`` controls Simul-CROWN instances whose
    agreement constraint admits no box point: ``"fallback"`` uses the
    CROWN-IBP bound, ``"sentinel"`` returns -inf / +inf.

    Returns (t Var (B,), feasible bool (B,)).
    """
    method = normalize_method(method)
    y = np.asarray(y_hat).reshape(-1).astype(bool)
    if method == "ibp":
        tr = ibp_tape(layers, radii, x_cf)
        lo, hi = ad.reshape(tr.z_lo[-1], (-1,)), ad.reshape(tr.z_hi[-1], (-1,))
        return ad.where(y, hi, lo), np.ones(y.shape, dtype=bool)

    cf = crown_ibp_tape(layers, radii, x_cf)
    crown_t = ad.where(y, cf.crown_hi, cf.crown_lo)
    if method == "crown-ibp":
        return crown_t, np.ones(y.shape, dtype=bool)

    xb = crown_ibp_tape(layers, radii, x)
    center = flat_center(layers)
    radius = np.concatenate([np.asarray(r).reshape(-1) for r in radii])
    lo, hi = ad.sub(center, radius), ad.add(center, radius)
    sign = np.where(y, 1.0, -1.0)
    ycol = y[:, None]
    mu = ad.mul(ad.where(ycol, cf.alpha_hi, cf.alpha_lo), sign[:, None])
    nu = ad.mul(ad.where(y, cf.beta_hi, cf.beta_lo), sign)
    alpha = ad.mul(ad.where(ycol, xb.alpha_hi, xb.alpha_lo), sign[:, None])
    beta = ad.mul(ad.where(y, xb.beta_hi, xb.beta_lo), sign)
    val, feasible = greedy_max_tape(mu, nu, alpha, beta, lo, hi)
    t = ad.mul(val, sign)
    if infeasible == "fallback":
        t = ad.where(feasible, t, crown_t)
    else:
        t = ad.where(feasible, t, np.where(y, -np.inf, np.inf))
    # the constrained optimum never exceeds the unconstrained one; guard rounding
    t = ad.where(y, ad.minimum(t, cf.crown_hi), ad.maximum(t, cf.crown_lo))
    return t, feasible


def worst_case_logit(f: MlpParams, spec: MultiplicitySpec, x, x_cf, y_hat, method: str = "simul-crown",
                     infeasible: str = "sentinel") -> np.ndarray:
    """Array-level worst-case logit for one pair or a batch of pairs."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    cb = np.atleast_2d(np.asarray(x_cf, dtype=np.float64))
    yb = np.atleast_1d(np.asarray(y_hat))
    box = build_param_box(f, spec)
    tape = ad.Tape()
    layers = box.center.to_tape(tape, requires_grad=False)
    t, _ = worst_logit_tape(layers, box.radius_tensors(), xb, cb, yb, method, infeasible)
    return t.value[0] if single else t.value


def simul_crown_logit_bound(f: MlpParams, spec: MultiplicitySpec, x, x_cf, y_hat: int) -> float:
    """Worst-case counterfactual logit over models in the box that agree with ``y_hat`` on ``x``."""
    return float(worst_case_logit(f, spec, x, x_cf, y_hat, "simul-crown", "sentinel"))

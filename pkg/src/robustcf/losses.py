"""Training objectives for the predictor and the counterfactual generator."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .model import mlp_tape
from .simul import normalize_method, worst_logit_tape


@dataclass(frozen=True)
class LossWeights:
    accuracy: float = 1.0   # lambda1
    robust: float = 0.5     # lambda2
    quality: float = 0.2    # lambda3
    validity: float = 1.0   # lambda4
    method: str = "simul-crown"

    def __post_init__(self):
        for name in ("accuracy", "robust", "quality", "validity"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")
        object.__setattr__(self, "method", normalize_method(self.method))


def _lift(a, b):
    # plain arrays on both sides: evaluate on a throwaway tape
    if not isinstance(a, ad.Var) and not isinstance(b, ad.Var):
        a = ad.Tape().const(a)
    return a, b


def loss_accuracy(score, y):
    return ad.mse(*_lift(score, np.asarray(y, dtype=np.float64)))


def loss_validity(score_cf, y):
    """MSE against the flipped label 1 - y."""
    return ad.mse(*_lift(score_cf, 1.0 - np.asarray(y, dtype=np.float64)))


def loss_quality(x, x_cf):
    """Mean per-feature l1 distance."""
    if np.shape(ad.value_of(x)) != np.shape(ad.value_of(x_cf)):
        raise ValueError(f"shape mismatch: {np.shape(ad.value_of(x))} vs {np.shape(ad.value_of(x_cf))}")
    return ad.l1(*_lift(x, x_cf))


def loss_robust(layers, radii, x, x_cf, y_hat, method: str):
    """Over-approximated worst-case validity loss over the multiplicity set.

    ``y_hat`` is the classifier's own label on ``x``; the loss is
    MSE(sigmoid(t), 1 - y_hat) with ``t`` the method's worst-case logit.
    """
    t, _ = worst_logit_tape(layers, radii, x, x_cf, y_hat, method, infeasible="fallback")
    return ad.mse(ad.sigmoid(t), 1.0 - np.asarray(y_hat, dtype=np.float64).reshape(-1))


def _logit(layers, x):
    return ad.reshape(mlp_tape(layers, x), (-1,))


def label_of(layers, x) -> np.ndarray:
    """Hard labels of the classifier at the current parameter values."""
    return (_logit(layers, x).value >= 0).astype(np.int64)


def loss_f(layers, radii, x, y, x_cf, w: LossWeights):
    """lambda1 * L_A + lambda2 * L_R for classifier layers ``layers`` (Vars)."""
    logit = _logit(layers, x)
    out = ad.mul(loss_accuracy(ad.sigmoid(logit), y), w.accuracy)
    if w.robust:
        y_hat = (logit.value >= 0).astype(np.int64)
        out = ad.add(out, ad.mul(loss_robust(layers, radii, x, x_cf, y_hat, w.method), w.robust))
    return out


def loss_g(layers, radii, x, y, x_cf, w: LossWeights):
    """lambda3 * L_Q + lambda4 * L_V + lambda2 * L_R."""
    if not isinstance(x_cf, ad.Var):
        x_cf = layers[0][0].tape.const(x_cf)
    score_cf = ad.sigmoid(_logit(layers, x_cf))
    out = ad.add(ad.mul(loss_quality(x, x_cf), w.quality), ad.mul(loss_validity(score_cf, y), w.validity))
    if w.robust:
        y_hat = label_of(layers, x)
        out = ad.add(out, ad.mul(loss_robust(layers, radii, x, x_cf, y_hat, w.method), w.robust))
    return out

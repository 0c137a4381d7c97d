"""Independent reference computations used by the tests."""
import itertools
import math

import numpy as np


def lp_enumeration(mu, nu, alpha, beta, lo, hi):
    """max mu.z + nu s.t. alpha.z + beta >= 0, lo <= z <= hi, by exhaustive enumeration.

    The feasible set is a polytope whose vertices are box vertices on the
    feasible side or points where the hyperplane crosses a box edge.
    Returns -inf when infeasible.
    """
    mu, alpha, lo, hi = (np.asarray(v, dtype=float) for v in (mu, alpha, lo, hi))
    n = mu.size
    best = -math.inf
    tol = 1e-12 * (1.0 + np.abs(alpha) @ np.maximum(np.abs(lo), np.abs(hi)) + abs(beta))
    for bits in itertools.product((0, 1), repeat=n):
        z = np.where(np.array(bits, dtype=bool), hi, lo)
        if alpha @ z + beta >= -tol:
            best = max(best, mu @ z + nu)
    for free in range(n):
        if alpha[free] == 0:
            continue
        others = [i for i in range(n) if i != free]
        for bits in itertools.product((0, 1), repeat=n - 1):
            z = lo.copy()
            for i, bit in zip(others, bits):
                z[i] = hi[i] if bit else lo[i]
            rest = alpha[others] @ z[others] + beta
            zf = -rest / alpha[free]
            if lo[free] - 1e-12 <= zf <= hi[free] + 1e-12:
                z[free] = min(max(zf, lo[free]), hi[free])
                best = max(best, mu @ z + nu)
    return best


def central_diff(fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        up = fn(x)
        x[i] = old - h
        dn = fn(x)
        x[i] = old
        g[i] = (up - dn) / (2 * h)
    return g


def relu_mlp_logits(thetas: np.ndarray, dims, x: np.ndarray) -> np.ndarray:
    """Logits of many flattened parameter vectors (k, n) on one input, plain numpy."""
    k = thetas.shape[0]
    h = np.broadcast_to(x, (k, x.size))
    pos = 0
    n_layers = len(dims) - 1
    for i in range(n_layers):
        n_in, n_out = dims[i], dims[i + 1]
        w = thetas[:, pos:pos + n_in * n_out].reshape(k, n_out, n_in)
        pos += n_in * n_out
        b = thetas[:, pos:pos + n_out]
        pos += n_out
        h = np.einsum("koi,ki->ko", w, h) + b
        if i < n_layers - 1:
            h = np.maximum(h, 0)
    return h[:, 0]


def sampled_worst_logit(box, x, x_cf, y_hat, rng, k=2000):
    """Worst counterfactual logit over sampled box members that agree with y_hat on x.

    Returns (worst, n_agreeing); worst is -inf/+inf if none agree.
    """
    thetas = box.sample(rng, k, corner_fraction=0.5)
    thetas[0] = box.center.flatten()
    dims = box.center.dims
    on_x = relu_mlp_logits(thetas, dims, np.asarray(x, dtype=float))
    on_cf = relu_mlp_logits(thetas, dims, np.asarray(x_cf, dtype=float))
    agree = (on_x >= 0) == bool(y_hat)
    if not agree.any():
        return (-math.inf if y_hat else math.inf), 0
    vals = on_cf[agree]
    return (vals.max() if y_hat else vals.min()), int(agree.sum())


def random_problem(rng, n, kind=None):
    """Random single-constraint box LP; kind 1 zeroes coefficients, 2 ties trade rates, 3 pins a bound."""
    mu = rng.normal(size=n)
    alpha = rng.normal(size=n)
    kind = rng.integers(0, 4) if kind is None else kind
    if kind == 1:
        alpha[rng.integers(0, n)] = 0.0
        mu[rng.integers(0, n)] = 0.0
    elif kind == 2:
        # equal trade rates -mu/alpha on a random subset of coordinates
        tied = rng.uniform(size=n) < 0.7
        mu[tied] = -0.7 * alpha[tied]
    lo = rng.uniform(-2, 0, size=n)
    hi = lo + rng.uniform(0, 2, size=n)
    if kind == 3:
        hi[rng.integers(0, n)] = lo[rng.integers(0, n)] = 0.0
        hi = np.maximum(hi, lo)
    beta = rng.normal() * 2
    return mu, rng.normal(), alpha, beta, lo, hi

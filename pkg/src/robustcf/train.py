"""Alternating training of the classifier and the counterfactual generator.

Each epoch: generate counterfactuals with the current weights, take one pass
of mini-batch steps on the classifier objective, then one pass on the
generator objective.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .bounds import MultiplicitySpec
from .certify import robustness_rate
from .data import SplitDataset
from .losses import LossWeights, loss_f, loss_g, loss_robust
from .model import JointModel, MlpParams, joint_forward_tape

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 128
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    kappa: float = 0.05
    p: float = math.inf
    ramp_fraction: float = 0.5
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    encoder_dims: tuple = (16, 16)
    cf_hidden: tuple = (16,)
    val_fraction: float = 0.1
    log_certification: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")

    def kappa_at(self, epoch: int) -> float:
        """Linear ramp from 0 to ``kappa`` over the first ``ramp_fraction`` of epochs."""
        ramp = self.ramp_fraction * self.epochs
        if ramp <= 0:
            return self.kappa
        return self.kappa * min(1.0, epoch / ramp)


class Adam:
    def __init__(self, params: list[np.ndarray], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _tensors(p: MlpParams) -> list[np.ndarray]:
    return p.tensors()


def _grads(pairs) -> list[np.ndarray]:
    out = []
    for w, b in pairs:
        for v in (w, b):
            out.append(np.zeros_like(v.value) if v.grad is None else v.grad)
    return out


def _check_finite(value: float, epoch: int, batch: int, phase: str):
    if not np.isfinite(value):
        raise TrainingError(f"non-finite {phase} loss at epoch {epoch}, batch {batch}")


def _radii(f: MlpParams, kappa: float, p: float) -> list[np.ndarray]:
    spec = MultiplicitySpec(kappa=kappa, p=p)
    return [np.full(t.shape, r) for t, r in zip(f.tensors(), spec.radii(f))]


def validation_robust_loss(model: JointModel, x, kappa: float, p: float, method: str) -> float:
    f = model.classifier()
    tape = ad.Tape()
    layers = f.to_tape(tape, requires_grad=False)
    x_cf = model.generate_cf(x)
    y_hat = (f.forward(x)[:, 0] >= 0).astype(np.int64)
    return float(loss_robust(layers, _radii(f, kappa, p), x, x_cf, y_hat, method).value)


def _epoch_stats(model, x, y, cfg: TrainConfig):
    x_cf = model.generate_cf(x)
    pred = model.predict(x)
    stats = {
        "acc": float(np.mean(pred == y)),
        "validity": float(np.mean(model.predict(x_cf) != pred)),
    }
    if cfg.log_certification and len(x):
        spec = MultiplicitySpec(kappa=cfg.kappa, p=cfg.p)
        stats["cert_rate"] = robustness_rate(model, spec, x, "simul-crown", x_cf)
        stats["val_robust_loss"] = validation_robust_loss(model, x, cfg.kappa, cfg.p, cfg.weights.method)
    return stats


def run_epochs(model: JointModel, x, y, cfg: TrainConfig, epochs: int, rng: np.random.Generator,
               x_val=None, y_val=None, on_record: Optional[Callable[[dict], None]] = None,
               epoch_offset: int = 0, kappa_fn: Optional[Callable[[int], float]] = None) -> list[dict]:
    """Run ``epochs`` alternating epochs in place on ``model``; returns the log records."""
    f = model.classifier()
    f_tensors = _tensors(f)
    g_tensors = _tensors(model.cf_head)
    opt_f = Adam(f_tensors, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    opt_g = Adam(g_tensors, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    n_enc = model.encoder.n_layers
    w = cfg.weights
    kappa_fn = kappa_fn or cfg.kappa_at
    records = []
    n = len(x)

    for e in range(epochs):
        epoch = epoch_offset + e
        kappa = kappa_fn(e)
        radii = _radii(f, kappa, cfg.p)
        x_cf_all = model.generate_cf(x)

        lf_sum, lg_sum, n_batches = 0.0, 0.0, 0
        perm = rng.permutation(n)
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[start:start + cfg.batch_size]
            tape = ad.Tape()
            layers = f.to_tape(tape)
            loss = loss_f(layers, radii, x[idx], y[idx], x_cf_all[idx], w)
            _check_finite(float(loss.value), epoch, b, "classifier")
            tape.backward(loss)
            opt_f.step(_grads(layers))
            lf_sum += float(loss.value)
            n_batches += 1

        perm = rng.permutation(n)
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[start:start + cfg.batch_size]
            tape = ad.Tape()
            layers = f.to_tape(tape, requires_grad=False)
            head = model.cf_head.to_tape(tape)
            _, x_cf = joint_forward_tape(layers[:n_enc], layers[n_enc:], head, x[idx], model.schema)
            loss = loss_g(layers, radii, x[idx], y[idx], x_cf, w)
            _check_finite(float(loss.value), epoch, b, "generator")
            tape.backward(loss)
            opt_g.step(_grads(head))
            lg_sum += float(loss.value)

        rec = {"epoch": epoch, "kappa": kappa, "loss_f": lf_sum / n_batches, "loss_g": lg_sum / n_batches}
        if x_val is not None and len(x_val):
            rec.update(_epoch_stats(model, x_val, y_val, cfg))
        records.append(rec)
        if on_record is not None:
            on_record(rec)
        log.debug("epoch %d %s", epoch, rec)
    return records


def _split_validation(ds: SplitDataset, frac: float, rng: np.random.Generator):
    n = len(ds.x_train)
    n_val = int(round(n * frac))
    perm = rng.permutation(n)
    val, tr = np.sort(perm[:n_val]), np.sort(perm[n_val:])
    return ds.x_train[tr], ds.y_train[tr], ds.x_train[val], ds.y_train[val]


def train(ds: SplitDataset, cfg: TrainConfig, on_record: Optional[Callable[[dict], None]] = None,
          model: Optional[JointModel] = None):
    """Train a fresh joint model; returns (model, log records)."""
    rng = np.random.default_rng(cfg.seed)
    if model is None:
        model = JointModel.init(ds.schema, rng, cfg.encoder_dims, cfg.cf_hidden)
    else:
        model = model.copy()
    x, y, x_val, y_val = _split_validation(ds, cfg.val_fraction, rng)
    records = run_epochs(model, x, y, cfg, cfg.epochs, rng, x_val, y_val, on_record)
    return model, records


def finetune(model: JointModel, ds: SplitDataset, cfg: TrainConfig, epochs: int = 20,
             seed: Optional[int] = None) -> JointModel:
    """Continue training a copy of ``model`` on ``ds`` for a few epochs at the target kappa."""
    if model.schema.width != ds.schema.width or model.n_features != ds.n_features:
        raise ValueError("model and dataset feature schemas differ")
    out = model.copy()
    if epochs == 0:
        return out
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    run_epochs(out, ds.x_train, ds.y_train, cfg, epochs, rng, kappa_fn=lambda e: cfg.kappa)
    return out


def parameter_drift(a: MlpParams, b: MlpParams) -> list[float]:
    """Per-tensor l-inf distance between two parameter sets."""
    return [float(np.max(np.abs(s - t))) if s.size else 0.0 for s, t in zip(a.tensors(), b.tensors())]


def write_log(records: list[dict], path):
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")

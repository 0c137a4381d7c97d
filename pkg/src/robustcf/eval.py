"""Empirical robustness protocols: model fleets, cross-model validity, CF quality, timing."""
from __future__ import annotations

import csv
import io
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .data import SplitDataset, make_loo_subset
from .model import JointModel
from .train import TrainConfig, finetune, train

VARIATIONS = ("ri", "loo", "ds")
THREADS_ENV = "ROBUSTCF_THREADS"


@dataclass(frozen=True)
class FleetSpec:
    variation: str = "ri"
    fleet_size: int = 10
    loo_fraction: float = 0.01
    ds_finetune_epochs: int = 20
    ds_trials: int = 10
    base_seed: int = 0
    identical: bool = False  # control: every member gets the same seed and data

    def __post_init__(self):
        v = self.variation.lower()
        if v not in VARIATIONS:
            raise ValueError(f"unknown variation {self.variation!r}; choose from {VARIATIONS}")
        object.__setattr__(self, "variation", v)
        if v != "ds" and self.fleet_size < 2:
            raise ValueError("cross-model validity needs a fleet of at least 2 models")
        if v == "ds" and self.ds_trials < 1:
            raise ValueError("ds protocol needs at least one trial")


def _mean_std(values) -> dict:
    a = np.asarray(values, dtype=np.float64)
    return {"mean": float(a.mean()), "std": float(a.std()) if a.size > 1 else None}


def n_threads() -> int:
    raw = os.environ.get(THREADS_ENV)
    if raw is None:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    return max(1, n)


def _map(fn, items):
    # results come back in submission order, so thread count never changes output
    workers = min(n_threads(), len(items)) or 1
    if workers == 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# --------------------------------------------------------------------------
# metrics

def pairwise_validity(fleet: list[JointModel], x) -> np.ndarray:
    """M[i, j] = fraction of model i's CFs on ``x`` that model j labels as model i does."""
    if len(fleet) < 2:
        raise ValueError("cross-model validity needs a fleet of at least 2 models")
    x = np.asarray(x, dtype=np.float64)
    k = len(fleet)
    m = np.eye(k)
    for i, src in enumerate(fleet):
        x_cf = src.generate_cf(x)
        own = src.predict(x_cf)
        for j, other in enumerate(fleet):
            if j != i:
                m[i, j] = float(np.mean(other.predict(x_cf) == own))
    return m


def cross_model_validity(fleet: list[JointModel], x) -> dict:
    """Mean over source models of the mean validity on the other models, with the pair matrix."""
    m = pairwise_validity(fleet, x)
    k = len(m)
    per_source = (m.sum(axis=1) - np.diag(m)) / (k - 1)
    off = m[~np.eye(k, dtype=bool)]
    return {"mean": float(per_source.mean()), "std": float(off.std()),
            "per_source": per_source.tolist(), "matrix": m.tolist()}


def ds_validity(original: JointModel, shifted: JointModel, x) -> float:
    """Fraction of the original model's CFs that the shifted model puts on the target side."""
    if original.schema.width != shifted.schema.width:
        raise ValueError("original and shifted models have different feature schemas")
    x = np.asarray(x, dtype=np.float64)
    target = 1 - original.predict(x)
    return float(np.mean(shifted.predict(original.generate_cf(x)) == target))


def quality_metrics(x, x_cf, train_x=None, tol: float = 1e-9) -> dict:
    """Per-instance proximity, sparsity and (if ``train_x`` given) DDM, all divided by d."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    x_cf = np.atleast_2d(np.asarray(x_cf, dtype=np.float64))
    if x.shape != x_cf.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {x_cf.shape}")
    d = x.shape[1]
    diff = np.abs(x - x_cf)
    out = {"proximity": diff.sum(axis=1) / d, "sparsity": (diff > tol).sum(axis=1) / d}
    if train_x is not None:
        train_x = np.atleast_2d(np.asarray(train_x, dtype=np.float64))
        if len(train_x) == 0:
            raise ValueError("distance to data needs a non-empty training set")
        dist, _ = cKDTree(train_x).query(x_cf, k=1, p=1) if len(x_cf) else (np.zeros(0), None)
        out["ddm"] = np.asarray(dist, dtype=np.float64) / d
    return out


def timing_benchmark(model: JointModel, x, n_repeats: int = 1) -> dict:
    """Wall time per generated CF, one instance per call."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if n_repeats < 1:
        raise ValueError("n_repeats must be >= 1")
    per_cf = []
    for _ in range(n_repeats):
        start = time.perf_counter()
        for row in x:
            model.generate_cf(row[None, :])
        per_cf.append((time.perf_counter() - start) / max(len(x), 1))
    return {"n": len(x), "repeats": n_repeats, **_mean_std(per_cf)}


# --------------------------------------------------------------------------
# fleets

def train_fleet(ds: SplitDataset, cfg: TrainConfig, fleet: FleetSpec) -> list[JointModel]:
    """RI: one seed per member on the same data.  LOO: one init seed, a different 1% removed per member."""
    step = 0 if fleet.identical else 1
    if fleet.variation == "ri":
        jobs = [(ds, replace(cfg, seed=fleet.base_seed + step * i)) for i in range(fleet.fleet_size)]
    elif fleet.variation == "loo":
        seed = fleet.base_seed
        jobs = [(make_loo_subset(ds, seed + 1000 + step * i, fleet.loo_fraction), replace(cfg, seed=seed))
                for i in range(fleet.fleet_size)]
    else:
        raise ValueError("train_fleet handles the ri and loo variations")
    return _map(lambda job: train(*job)[0], jobs)


def run_ds_trials(base: SplitDataset, shifted: SplitDataset, cfg: TrainConfig, fleet: FleetSpec) -> dict:
    """Train on ``base``, finetune on ``shifted``, and score the original CFs on the shifted model."""
    def trial(i):
        c = replace(cfg, seed=fleet.base_seed + i)
        model, _ = train(base, c)
        moved = finetune(model, shifted, c, epochs=fleet.ds_finetune_epochs, seed=c.seed + 500)
        return ds_validity(model, moved, base.x_test)

    rates = _map(trial, list(range(fleet.ds_trials)))
    return {**_mean_std(rates), "trials": rates}


# --------------------------------------------------------------------------
# reports

@dataclass
class EvalReport:
    label: str
    variation: str
    metrics: dict = field(default_factory=dict)
    details: dict = field(default_factory=dict)
    config_hash: Optional[str] = None

    def to_dict(self) -> dict:
        return {"label": self.label, "variation": self.variation, "metrics": self.metrics,
                "details": self.details, "config_hash": self.config_hash}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(d["label"], d["variation"], d.get("metrics", {}), d.get("details", {}), d.get("config_hash"))


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def reports_csv(reports: list[EvalReport]) -> str:
    """One row per (report, metric): label, variation, metric, mean, std."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label", "variation", "metric", "mean", "std"])
    for r in reports:
        for name in sorted(r.metrics):
            m = r.metrics[name]
            w.writerow([r.label, r.variation, name, _fmt(m.get("mean")), _fmt(m.get("std"))])
    return buf.getvalue()


def summarize_quality(q: dict) -> dict:
    return {k: _mean_std(v) if len(v) else {"mean": math.nan, "std": None} for k, v in q.items()}

"""Tabular data handling: schema, CSV loading, scaling, splits, synthetic sets."""
from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

log = logging.getLogger(__name__)

MATRIX_MAGIC = b"RCFMAT01"


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    kind: str = "continuous"  # or "categorical"
    categories: tuple = ()
    lo: float = 0.0
    hi: float = 1.0

    @property
    def width(self) -> int:
        return len(self.categories) if self.kind == "categorical" else 1


@dataclass(frozen=True)
class FeatureSchema:
    features: tuple
    label: str = "label"

    @property
    def width(self) -> int:
        return int(np.sum([f.width for f in self.features])) if self.features else 0

    def groups(self) -> list[slice]:
        """Column slices of the one-hot groups, in feature order."""
        out, pos = [], 0
        for f in self.features:
            if f.kind == "categorical":
                out.append(slice(pos, pos + f.width))
            pos += f.width
        return out

    def continuous_dims(self) -> np.ndarray:
        dims, pos = [], 0
        for f in self.features:
            if f.kind == "continuous":
                dims.append(pos)
            pos += f.width
        return np.array(dims, dtype=int)

    def column_names(self) -> list[str]:
        names = []
        for f in self.features:
            if f.kind == "categorical":
                names.extend(f"{f.name}={c}" for c in f.categories)
            else:
                names.append(f.name)
        return names

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "features": [
                {"name": f.name, "kind": f.kind, "categories": list(f.categories),
                 "lo": repr(f.lo), "hi": repr(f.hi)}
                for f in self.features
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSchema":
        feats = tuple(
            FeatureSpec(f["name"], f["kind"], tuple(f.get("categories", ())),
                        float(f.get("lo", 0.0)), float(f.get("hi", 1.0)))
            for f in d["features"]
        )
        return cls(feats, d.get("label", "label"))

    @classmethod
    def continuous(cls, d: int, label: str = "label") -> "FeatureSchema":
        return cls(tuple(FeatureSpec(f"x{i}") for i in range(d)), label)


@dataclass
class SplitDataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    schema: FeatureSchema
    provenance: dict = field(default_factory=dict)

    @property
    def n_features(self) -> int:
        return self.x_train.shape[1]

    def with_train(self, x, y, **prov) -> "SplitDataset":
        return replace(self, x_train=x, y_train=y, provenance={**self.provenance, **prov})


# --------------------------------------------------------------------------
# schema spec (TOML)

def read_schema_spec(path) -> dict:
    """Parse a schema TOML: ``label``, optional ``label_binarize``, ``[[features]]``."""
    with open(path, "rb") as fh:
        spec = tomllib.load(fh)
    if "label" not in spec or "features" not in spec:
        raise SchemaError(f"{path}: schema needs 'label' and [[features]]")
    for f in spec["features"]:
        if f.get("kind", "continuous") not in ("continuous", "categorical"):
            raise SchemaError(f"feature {f.get('name')!r}: unknown kind {f.get('kind')!r}")
    return spec


# --------------------------------------------------------------------------
# CSV loading

def binarize_label(values, threshold: Optional[float] = None, train_values=None) -> tuple[np.ndarray, float]:
    """Map values to 1 iff value > median of the training values."""
    values = np.asarray(values, dtype=np.float64)
    ref = values if train_values is None else np.asarray(train_values, dtype=np.float64)
    if threshold is None:
        if ref.size == 0 or np.all(ref == ref[0]):
            raise SchemaError("label column is constant; the task is degenerate")
        threshold = float(np.median(ref))
    return (values > threshold).astype(np.float64), threshold


def split_indices(n: int, test_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_test = int(round(n * test_fraction))
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def _encode(rows, specs, schema_feats) -> np.ndarray:
    cols = []
    for spec, feat in zip(specs, schema_feats):
        name = feat.name
        if feat.kind == "continuous":
            raw = np.array([float(r[name]) for r in rows], dtype=np.float64)
            span = feat.hi - feat.lo
            cols.append(((raw - feat.lo) / span if span > 0 else raw * 0.0)[:, None])
        else:
            block = np.zeros((len(rows), feat.width))
            index = {c: i for i, c in enumerate(feat.categories)}
            for r, row in enumerate(rows):
                j = index.get(row[name])
                if j is None:
                    log.warning("unseen category %r in column %r; encoded as all-zeros", row[name], name)
                else:
                    block[r, j] = 1.0
            cols.append(block)
    if not cols:
        return np.zeros((len(rows), 0))
    return np.clip(np.hstack(cols), 0.0, 1.0)


def load_csv(path, schema_spec, seed: int = 0, test_fraction: float = 0.2) -> SplitDataset:
    """Read a headed CSV, fit scaling on the training split, one-hot encode."""
    if not isinstance(schema_spec, dict):
        schema_spec = read_schema_spec(schema_spec)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        rows = list(reader)
    feats = schema_spec["features"]
    label = schema_spec["label"]
    for col in [f["name"] for f in feats] + [label]:
        if col not in header:
            raise SchemaError(f"column {col!r} not in CSV header {header}")

    used = [f["name"] for f in feats] + [label]
    kept = [r for r in rows if all(r[c] not in ("", None) for c in used)]
    dropped = len(rows) - len(kept)
    for i, r in enumerate(kept):
        for f in feats:
            if f.get("kind", "continuous") == "continuous":
                try:
                    float(r[f["name"]])
                except ValueError:
                    raise SchemaError(f"row {i}: non-numeric value {r[f['name']]!r} in {f['name']!r}") from None

    train_idx, test_idx = split_indices(len(kept), test_fraction, seed)
    train_rows = [kept[i] for i in train_idx]
    test_rows = [kept[i] for i in test_idx]

    schema_feats = []
    for f in feats:
        name, kind = f["name"], f.get("kind", "continuous")
        if kind == "continuous":
            vals = np.array([float(r[name]) for r in train_rows])
            schema_feats.append(FeatureSpec(name, "continuous", (), float(vals.min()), float(vals.max())))
        else:
            cats = tuple(f.get("categories") or sorted({r[name] for r in train_rows}))
            schema_feats.append(FeatureSpec(name, "categorical", cats))
    schema = FeatureSchema(tuple(schema_feats), label)

    x_train = _encode(train_rows, feats, schema_feats)
    x_test = _encode(test_rows, feats, schema_feats)
    raw_train = [r[label] for r in train_rows]
    raw_test = [r[label] for r in test_rows]
    mode = schema_spec.get("label_binarize", "auto")
    threshold = None
    try:
        ytr = np.array([float(v) for v in raw_train])
        yte = np.array([float(v) for v in raw_test])
    except ValueError:
        raise SchemaError(f"label column {label!r} must be numeric") from None
    if mode == "median" or (mode == "auto" and not set(np.unique(ytr)) <= {0.0, 1.0}):
        ytr, threshold = binarize_label(ytr)
        yte, _ = binarize_label(yte, threshold)

    prov = {
        "source": str(path),
        "seed": seed,
        "test_fraction": test_fraction,
        "transforms": [
            {"op": "drop_missing", "rows": dropped},
            {"op": "split", "train": len(train_rows), "test": len(test_rows)},
            {"op": "minmax", "fit": "train"},
            {"op": "onehot"},
        ] + ([{"op": "binarize", "threshold": threshold}] if threshold is not None else []),
    }
    return SplitDataset(x_train, ytr, x_test, yte, schema, prov)


# --------------------------------------------------------------------------
# derived datasets

def make_loo_subset(ds: SplitDataset, seed: int, fraction: float = 0.01) -> SplitDataset:
    """Remove ceil(fraction * n) training rows chosen by ``seed``."""
    n = len(ds.x_train)
    if n < 100:
        raise ValueError(f"leave-out subset needs at least 100 training rows, got {n}")
    k = math.ceil(fraction * n - 1e-12)
    rng = np.random.default_rng(seed)
    removed = np.sort(rng.choice(n, size=k, replace=False))
    keep = np.setdiff1d(np.arange(n), removed)
    return ds.with_train(ds.x_train[keep], ds.y_train[keep],
                         loo={"seed": seed, "removed": removed.tolist()})


def _minmax(x: np.ndarray, lo=None, hi=None):
    lo = x.min(axis=0) if lo is None else lo
    hi = x.max(axis=0) if hi is None else hi
    return np.clip((x - lo) / np.where(hi > lo, hi - lo, 1.0), 0.0, 1.0), lo, hi


def make_blobs(n: int = 500, seed: int = 0, d: int = 2, separation: float = 4.0,
               test_fraction: float = 0.2) -> SplitDataset:
    """Two Gaussian blobs in d dimensions, min-max scaled to the unit box."""
    rng = np.random.default_rng(seed)
    y = (np.arange(n) % 2).astype(np.float64)
    centers = np.zeros((2, d))
    centers[1, : min(d, 2)] = separation
    x = centers[y.astype(int)] + rng.normal(size=(n, d))
    train_idx, test_idx = split_indices(n, test_fraction, seed)
    x_tr, lo, hi = _minmax(x[train_idx])
    x_te, _, _ = _minmax(x[test_idx], lo, hi)
    schema = FeatureSchema(tuple(FeatureSpec(f"x{i}", lo=float(lo[i]), hi=float(hi[i])) for i in range(d)))
    prov = {"source": "synthetic:blobs", "seed": seed, "n": n, "separation": separation}
    return SplitDataset(x_tr, y[train_idx], x_te, y[test_idx], schema, prov)


def make_synthetic_shift(n: int = 500, n_new: int = 100, seed: int = 0, d: int = 2,
                         separation: float = 4.0, test_fraction: float = 0.2):
    """Blobs plus a third cluster, merged into class 1 for the shifted copy.

    The original dataset holds only the two base blobs.  The shifted dataset
    adds ``n_new`` points from a third cluster (split into train/test with the
    same fraction) that all carry label 1.  Both share the original scaling.
    """
    base = make_blobs(n, seed, d, separation, test_fraction)
    if n_new == 0:
        return base, replace(base, provenance={**base.provenance, "shift": 0})
    rng = np.random.default_rng(seed + 7919)
    center = np.zeros(d)
    center[0] = separation
    raw = center + 0.8 * rng.normal(size=(n_new, d))
    lo = np.array([f.lo for f in base.schema.features])
    hi = np.array([f.hi for f in base.schema.features])
    new_x, _, _ = _minmax(raw, lo, hi)
    new_y = np.ones(n_new)
    n_test = int(round(n_new * test_fraction))
    shifted = SplitDataset(
        np.vstack([base.x_train, new_x[n_test:]]), np.concatenate([base.y_train, new_y[n_test:]]),
        np.vstack([base.x_test, new_x[:n_test]]), np.concatenate([base.y_test, new_y[:n_test]]),
        base.schema, {**base.provenance, "shift": n_new},
    )
    return base, shifted


# --------------------------------------------------------------------------
# cached matrices

def save_matrix(path, x: np.ndarray, schema: Optional[FeatureSchema] = None):
    """Write a versioned little-endian float64 row-major matrix plus JSON sidecar."""
    x = np.ascontiguousarray(x, dtype="<f8")
    rows, cols = x.shape
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(MATRIX_MAGIC)
        fh.write(struct.pack("<QQ", rows, cols))
        fh.write(x.tobytes(order="C"))
    sidecar = {"format_version": 1, "rows": rows, "cols": cols, "dtype": "<f8",
               "schema": schema.to_dict() if schema is not None else None}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def load_matrix(path) -> tuple[np.ndarray, Optional[FeatureSchema]]:
    path = Path(path)
    with open(path, "rb") as fh:
        if fh.read(len(MATRIX_MAGIC)) != MATRIX_MAGIC:
            raise SchemaError(f"{path}: not a matrix file")
        rows, cols = struct.unpack("<QQ", fh.read(16))
        x = np.frombuffer(fh.read(), dtype="<f8").reshape(rows, cols).astype(np.float64)
    side = path.with_suffix(path.suffix + ".json")
    schema = None
    if side.exists():
        meta = json.loads(side.read_text())
        if meta.get("schema"):
            schema = FeatureSchema.from_dict(meta["schema"])
    return x, schema

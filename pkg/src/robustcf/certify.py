"""Deterministic certification of counterfactual robustness."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from typing import Optional, Union

import numpy as np

from .bounds import MultiplicitySpec
from .model import JointModel, MlpParams
from .simul import normalize_method, worst_case_logit


def fingerprint(f: MlpParams) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(f.dims).encode())
    h.update(np.ascontiguousarray(f.flatten(), dtype="<f8").tobytes())
    return h.hexdigest()


@dataclass(frozen=True)
class Certificate:
    input_id: int
    y_hat: int
    method: str
    t: float
    robust: bool
    reason: str
    spec: dict
    model_fingerprint: str

    def to_dict(self) -> dict:
        d = asdict(self)
        d["t"] = repr(float(self.t))
        return d


def _classifier(model: Union[JointModel, MlpParams]) -> MlpParams:
    return model.classifier() if isinstance(model, JointModel) else model


def certify_batch(model, spec: MultiplicitySpec, x, x_cf, method: str = "simul-crown",
                  ids=None) -> list[Certificate]:
    """Certify each pair (x_i, x_cf_i); strict inequality at the decision boundary."""
    f = _classifier(model)
    method = normalize_method(method)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    x_cf = np.atleast_2d(np.asarray(x_cf, dtype=np.float64))
    if x.shape != x_cf.shape:
        raise ValueError(f"shape mismatch between inputs {x.shape} and counterfactuals {x_cf.shape}")
    ids = list(range(len(x))) if ids is None else list(ids)
    if len(x) == 0:
        return []
    y_hat = (f.forward(x)[:, 0] >= 0).astype(np.int64)
    y_cf = (f.forward(x_cf)[:, 0] >= 0).astype(np.int64)
    t = worst_case_logit(f, spec, x, x_cf, y_hat, method, infeasible="sentinel")
    snap = spec.snapshot(f)
    fp = fingerprint(f)
    out = []
    for i in range(len(x)):
        valid = y_cf[i] == 1 - y_hat[i]
        if not valid:
            robust, reason = False, "invalid-on-f"
        elif y_hat[i] == 1:
            robust = bool(t[i] < 0)
            reason = "certified" if robust else "bound-not-below-threshold"
        else:
            robust = bool(t[i] > 0)
            reason = "certified" if robust else "bound-not-above-threshold"
        out.append(Certificate(int(ids[i]), int(y_hat[i]), method, float(t[i]), robust, reason, snap, fp))
    return sorted(out, key=lambda c: c.input_id)


def certify_pair(model, spec: MultiplicitySpec, x, x_cf, method: str = "simul-crown",
                 input_id: int = 0) -> Certificate:
    return certify_batch(model, spec, np.atleast_2d(x), np.atleast_2d(x_cf), method, [input_id])[0]


def robustness_rate(model: JointModel, spec: MultiplicitySpec, x, method: str = "simul-crown",
                    x_cf: Optional[np.ndarray] = None) -> float:
    """Fraction of inputs whose generated counterfactual is certified robust."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if len(x) == 0:
        raise ValueError("robustness rate of an empty dataset is undefined")
    if x_cf is None:
        x_cf = model.generate_cf(x)
    certs = certify_batch(model, spec, x, x_cf, method)
    return float(np.mean([c.robust for c in certs]))


def certificates_json(certs: list[Certificate], extra: Optional[dict] = None) -> str:
    """JSON array of certificates; ``extra`` keys are stamped onto every entry."""
    doc = [{**c.to_dict(), **(extra or {})} for c in certs]
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"

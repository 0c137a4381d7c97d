"""Joint predictor / counterfactual-generator networks.

The classifier ``f`` is the encoder trunk followed by a one-unit predictor
head (sigmoid applied on top of the logit).  The generator ``g`` is a head
reading the encoding and the soft prediction; it emits a delta that is added
to ``x`` and projected back onto the valid feature box.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from .data import FeatureSchema

FORMAT_VERSION = 1


@dataclass
class MlpParams:
    """Layers ``(W, b)`` with ``W`` shaped (out, in); ReLU between layers, last layer linear."""

    weights: list
    biases: list

    def __post_init__(self):
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64).reshape(-1) for b in self.biases]
        if len(self.weights) != len(self.biases):
            raise ValueError("need one bias per weight matrix")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or w.shape[0] != b.shape[0]:
                raise ValueError(f"layer {i}: weight {w.shape} and bias {b.shape} disagree")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ValueError(f"layer {i}: input dim {w.shape[1]} != previous output "
                                 f"{self.weights[i - 1].shape[0]}")

    @classmethod
    def init(cls, dims: Sequence[int], rng: np.random.Generator, scale: float = 1.0) -> "MlpParams":
        ws, bs = [], []
        for n_in, n_out in zip(dims[:-1], dims[1:]):
            bound = scale / np.sqrt(n_in)
            ws.append(rng.uniform(-bound, bound, size=(n_out, n_in)))
            bs.append(rng.uniform(-bound, bound, size=n_out))
        return cls(ws, bs)

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def n_params(self) -> int:
        return int(np.sum([w.size + b.size for w, b in zip(self.weights, self.biases)]))

    def tensors(self) -> list[np.ndarray]:
        """Parameter tensors in flattening order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def flatten(self) -> np.ndarray:
        return np.concatenate([t.reshape(-1) for t in self.tensors()])

    def unflatten(self, vec) -> "MlpParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got shape {vec.shape}")
        ws, bs, pos = [], [], 0
        for w, b in zip(self.weights, self.biases):
            ws.append(vec[pos:pos + w.size].reshape(w.shape))
            pos += w.size
            bs.append(vec[pos:pos + b.size].copy())
            pos += b.size
        return MlpParams(ws, bs)

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def __add__(self, other: "MlpParams") -> "MlpParams":
        return MlpParams([a + b for a, b in zip(self.weights, other.weights)],
                         [a + b for a, b in zip(self.biases, other.biases)])

    def forward(self, x) -> np.ndarray:
        """Final pre-activation for a single point (d,) or batch (B, d)."""
        h = np.asarray(x, dtype=np.float64)
        if h.shape[-1] != self.dims[0]:
            raise ValueError(f"input has {h.shape[-1]} features, network expects {self.dims[0]}")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w.T + b
            if i < self.n_layers - 1:
                h = np.maximum(h, 0.0)
        return h

    def forward_hidden(self, x) -> np.ndarray:
        """Like :meth:`forward` but with ReLU on every layer (used for the encoder)."""
        return np.maximum(self.forward(x), 0.0)

    def to_tape(self, tape: ad.Tape, requires_grad: bool = True) -> list:
        return [(tape.var(w, requires_grad), tape.var(b, requires_grad))
                for w, b in zip(self.weights, self.biases)]

    def to_dict(self, activations: Sequence[str]) -> dict:
        return {
            "dims": self.dims,
            "activations": list(activations),
            "weights": [[[repr(float(v)) for v in row] for row in w] for w in self.weights],
            "biases": [[repr(float(v)) for v in b] for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpParams":
        ws = [np.array([[float(v) for v in row] for row in w]).reshape(o, i)
              for w, i, o in zip(d["weights"], d["dims"][:-1], d["dims"][1:])]
        bs = [np.array([float(v) for v in b]) for b in d["biases"]]
        return cls(ws, bs)


def sigmoid(z):
    return expit(np.asarray(z, dtype=np.float64))


def predict_soft(f: MlpParams, x) -> np.ndarray:
    """Soft score sigmoid(logit) in [0, 1]."""
    z = f.forward(x)
    if z.shape[-1] != 1:
        raise ValueError("classifier must end in a single logit")
    return sigmoid(z[..., 0])


def hard_label(score) -> np.ndarray:
    """Label 1 iff soft score >= 0.5 (equivalently logit >= 0)."""
    return (np.asarray(score) >= 0.5).astype(np.int64)


def mlp_tape(layers: list, x, final_relu: bool = False):
    """Tape forward for (W, b) Var pairs on a batch (B, d)."""
    h = x
    for i, (w, b) in enumerate(layers):
        h = ad.add(ad.matmul(h, ad.transpose(w)), b)
        if final_relu or i < len(layers) - 1:
            h = ad.relu(h)
    return h


# --------------------------------------------------------------------------
# projection onto the valid feature region

def project_features(raw, schema: FeatureSchema) -> np.ndarray:
    """Clamp continuous dims to [0, 1]; snap each one-hot group to its argmax.

    Ties resolve to the lowest index (numpy argmax semantics).
    """
    v = np.array(raw, dtype=np.float64, copy=True)
    if v.shape[-1] != schema.width:
        raise ValueError(f"vector has {v.shape[-1]} dims, schema describes {schema.width}")
    cont = schema.continuous_dims()
    v[..., cont] = np.clip(v[..., cont], 0.0, 1.0)
    for g in schema.groups():
        block = v[..., g]
        hot = np.argmax(block, axis=-1)
        snapped = np.zeros_like(block)
        np.put_along_axis(snapped, hot[..., None], 1.0, axis=-1)
        v[..., g] = snapped
    return v


def project_tape(raw: ad.Var, schema: FeatureSchema) -> ad.Var:
    """Differentiable stand-in for :func:`project_features` used in training.

    Continuous dims are clipped; one-hot groups use the hard projection in the
    forward pass with a straight-through gradient.
    """
    hard = project_features(raw.value, schema)
    if not schema.groups():
        return ad.clip(raw, 0.0, 1.0)
    soft = ad.clip(raw, 0.0, 1.0)
    mask = np.zeros(schema.width, dtype=bool)
    mask[schema.continuous_dims()] = True
    return ad.where(mask, soft, ad.straight_through(raw, hard))


# --------------------------------------------------------------------------

@dataclass
class JointModel:
    encoder: MlpParams
    predictor: MlpParams
    cf_head: MlpParams
    schema: FeatureSchema

    @classmethod
    def init(cls, schema: FeatureSchema, rng: np.random.Generator,
             encoder_dims: Sequence[int] = (16, 16), cf_hidden: Sequence[int] = (16,)) -> "JointModel":
        d = schema.width
        enc = MlpParams.init([d, *encoder_dims], rng)
        pred = MlpParams.init([encoder_dims[-1], 1], rng)
        head = MlpParams.init([encoder_dims[-1] + 1, *cf_hidden, d], rng)
        return cls(enc, pred, head, schema)

    @property
    def n_features(self) -> int:
        return self.encoder.dims[0]

    def classifier(self) -> MlpParams:
        """The predictor f as a single MLP: encoder layers then predictor head."""
        return MlpParams(self.encoder.weights + self.predictor.weights,
                         self.encoder.biases + self.predictor.biases)

    def with_classifier(self, f: MlpParams) -> "JointModel":
        k = self.encoder.n_layers
        return JointModel(MlpParams(f.weights[:k], f.biases[:k]),
                          MlpParams(f.weights[k:], f.biases[k:]), self.cf_head, self.schema)

    def _check(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.n_features:
            raise ValueError(f"input has {x.shape[-1]} features, model expects {self.n_features}")
        return x

    def logit(self, x) -> np.ndarray:
        return self.classifier().forward(self._check(x))[..., 0]

    def predict_soft(self, x) -> np.ndarray:
        return sigmoid(self.logit(x))

    def predict(self, x) -> np.ndarray:
        return hard_label(self.predict_soft(x))

    def generate_cf(self, x) -> np.ndarray:
        x = self._check(x)
        enc = self.encoder.forward_hidden(x)
        soft = sigmoid(self.predictor.forward(enc))
        delta = self.cf_head.forward(np.concatenate([enc, soft], axis=-1))
        return project_features(x + delta, self.schema)

    def copy(self) -> "JointModel":
        return JointModel(self.encoder.copy(), self.predictor.copy(), self.cf_head.copy(), self.schema)

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        def acts(n, last):
            return ["relu"] * (n - 1) + [last]
        return {
            "format_version": FORMAT_VERSION,
            "feature_schema": self.schema.to_dict(),
            "encoder": self.encoder.to_dict(acts(self.encoder.n_layers, "relu")),
            "predictor": self.predictor.to_dict(acts(self.predictor.n_layers, "sigmoid")),
            "cf_head": self.cf_head.to_dict(acts(self.cf_head.n_layers, "linear")),
        }

    def to_json(self, extra: Optional[dict] = None) -> str:
        doc = self.to_dict()
        if extra:
            doc.update(extra)
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "JointModel":
        if d.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported model format version {d.get('format_version')!r}")
        return cls(MlpParams.from_dict(d["encoder"]), MlpParams.from_dict(d["predictor"]),
                   MlpParams.from_dict(d["cf_head"]), FeatureSchema.from_dict(d["feature_schema"]))

    @classmethod
    def from_json(cls, text: str) -> "JointModel":
        return cls.from_dict(json.loads(text))

    def save(self, path, extra: Optional[dict] = None):
        with open(path, "w") as fh:
            fh.write(self.to_json(extra))

    @classmethod
    def load(cls, path) -> "JointModel":
        with open(path) as fh:
            return cls.from_json(fh.read())


def joint_forward_tape(enc: list, pred: list, head: list, x, schema: FeatureSchema):
    """Tape forward of the joint model: returns (logit (B,), counterfactual (B, d))."""
    h = mlp_tape(enc, x, final_relu=True)
    logit = mlp_tape(pred, h)
    soft = ad.sigmoid(logit)
    delta = mlp_tape(head, ad.concat([h, soft], axis=-1))
    return ad.reshape(logit, (-1,)), project_tape(ad.add(x, delta), schema)

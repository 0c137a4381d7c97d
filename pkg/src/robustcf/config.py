"""Run configuration: a TOML file describing data, model, training, certification and fleets."""
from __future__ import annotations

import hashlib
import json
import math
import sys
from dataclasses import dataclass
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .bounds import MultiplicitySpec
from .data import SplitDataset, load_csv, make_blobs, make_synthetic_shift
from .eval import FleetSpec
from .losses import LossWeights
from .train import TrainConfig


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "data": {"source": "blobs", "path": "", "schema": "", "n": 500, "seed": 0, "test_fraction": 0.2,
             "separation": 4.0, "dims": 2, "shift_points": 100},
    "model": {"encoder_dims": [16, 16], "cf_hidden": [16]},
    "train": {"epochs": 100, "batch_size": 128, "lr": 1e-3, "kappa": 0.05, "p": "inf",
              "ramp_fraction": 0.5, "seed": 0, "val_fraction": 0.1},
    "loss": {"accuracy": 1.0, "robust": 0.5, "quality": 0.2, "validity": 1.0, "method": "simul-crown"},
    "certify": {"kappa": 0.05, "p": "inf", "method": "simul-crown"},
    "fleet": {"size": 10, "loo_fraction": 0.01, "ds_finetune_epochs": 20, "ds_trials": 10, "base_seed": 0},
    "output": {"dir": "runs"},
}


def _p(value) -> float:
    if value in ("inf", "Inf", math.inf):
        return math.inf
    return float(value)


def _merge(raw: dict, where: str) -> dict:
    out = {}
    for section, body in raw.items():
        if section not in DEFAULTS:
            raise ConfigError(f"{where}: unknown section [{section}]")
        if not isinstance(body, dict):
            raise ConfigError(f"{where}: [{section}] must be a table")
        for key in body:
            if key not in DEFAULTS[section]:
                raise ConfigError(f"{where}: unknown key {key!r} in [{section}]")
    for section, defaults in DEFAULTS.items():
        out[section] = {**defaults, **raw.get(section, {})}
    return out


@dataclass
class RunConfig:
    values: dict
    text: str = ""
    base_dir: Path = Path(".")

    @classmethod
    def from_toml(cls, text: str, where: str = "<config>", base_dir=".") -> "RunConfig":
        try:
            raw = tomllib.loads(text)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{where}: {e}") from None
        cfg = cls(_merge(raw, where), text, Path(base_dir))
        cfg.validate(where)
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        return cls.from_toml(text, str(path), path.parent)

    def validate(self, where: str = "<config>"):
        try:
            self.train_config()
            self.multiplicity()
            self.fleet("ri")
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{where}: {e}") from None
        if self.values["data"]["source"] not in ("blobs", "shift", "csv"):
            raise ConfigError(f"{where}: data.source must be blobs, shift or csv")

    def with_seed(self, seed: int) -> "RunConfig":
        v = json.loads(json.dumps(self.values))
        v["train"]["seed"] = seed
        v["fleet"]["base_seed"] = seed
        return RunConfig(v, self.text + f"\n# --seed {seed}\n", self.base_dir)

    @property
    def hash(self) -> str:
        canon = json.dumps(self.values, sort_keys=True, default=str)
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    @property
    def output_dir(self) -> Path:
        return self.base_dir / self.values["output"]["dir"]

    def weights(self) -> LossWeights:
        return LossWeights(**self.values["loss"])

    def train_config(self) -> TrainConfig:
        t = self.values["train"]
        m = self.values["model"]
        return TrainConfig(epochs=int(t["epochs"]), batch_size=int(t["batch_size"]), lr=float(t["lr"]),
                           kappa=float(t["kappa"]), p=_p(t["p"]), ramp_fraction=float(t["ramp_fraction"]),
                           weights=self.weights(), seed=int(t["seed"]),
                           encoder_dims=tuple(int(v) for v in m["encoder_dims"]),
                           cf_hidden=tuple(int(v) for v in m["cf_hidden"]), val_fraction=float(t["val_fraction"]))

    def multiplicity(self, kappa=None) -> MultiplicitySpec:
        c = self.values["certify"]
        return MultiplicitySpec(kappa=float(c["kappa"] if kappa is None else kappa), p=_p(c["p"]))

    def fleet(self, variation: str) -> FleetSpec:
        f = self.values["fleet"]
        return FleetSpec(variation, int(f["size"]), float(f["loo_fraction"]), int(f["ds_finetune_epochs"]),
                         int(f["ds_trials"]), int(f["base_seed"]))

    def _resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.base_dir / p

    def dataset(self) -> SplitDataset:
        d = self.values["data"]
        if d["source"] == "csv":
            if not d["path"] or not d["schema"]:
                raise ConfigError("data.source = 'csv' needs data.path and data.schema")
            return load_csv(self._resolve(d["path"]), self._resolve(d["schema"]), int(d["seed"]),
                            float(d["test_fraction"]))
        if d["source"] == "shift":
            return self.shift_datasets()[0]
        return make_blobs(int(d["n"]), int(d["seed"]), int(d["dims"]), float(d["separation"]),
                          float(d["test_fraction"]))

    def shift_datasets(self) -> tuple[SplitDataset, SplitDataset]:
        d = self.values["data"]
        if d["source"] == "csv":
            raise ConfigError("the shift protocol needs data.source = 'blobs' or 'shift'")
        return make_synthetic_shift(int(d["n"]), int(d["shift_points"]), int(d["seed"]), int(d["dims"]),
                                    float(d["separation"]), float(d["test_fraction"]))

"""Command-line entry point.

Exit codes: 0 ok, 1 not every pair certified, 2 usage/config/schema error,
3 runtime failure (for example a NaN abort during training).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .bounds import MultiplicitySpec
from .certify import certificates_json, certify_batch, fingerprint, robustness_rate
from .config import ConfigError, RunConfig
from .data import FeatureSchema, SchemaError, load_matrix
from .eval import (EvalReport, cross_model_validity, quality_metrics, reports_csv, run_ds_trials,
                   summarize_quality, timing_benchmark, train_fleet)
from .model import JointModel, MlpParams
from .simul import METHODS, normalize_method
from .train import TrainingError, train, write_log

log = logging.getLogger("robustcf")

EXIT_OK, EXIT_UNCERTIFIED, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# io helpers

def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _load_model(path):
    """A joint model file, or a classifier-only file ``{"classifier": ..., "feature_schema": ...}``."""
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise UsageError(f"cannot read model {path}: {e}") from None
    try:
        if "classifier" in doc:
            return MlpParams.from_dict(doc["classifier"]), FeatureSchema.from_dict(doc["feature_schema"]), doc
        model = JointModel.from_dict(doc)
    except (KeyError, ValueError) as e:
        raise UsageError(f"{path}: not a model file ({e})") from None
    return model, model.schema, doc


def read_feature_csv(path, schema: FeatureSchema) -> np.ndarray:
    """Encoded feature rows; the header must name every schema column."""
    names = schema.column_names()
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [n for n in names if n not in header]
        if missing and header:
            raise SchemaError(f"{path}: header {header} lacks model columns {missing}")
        if not header:
            return np.zeros((0, len(names)))
        try:
            rows = [[float(r[n]) for n in names] for r in reader]
        except (TypeError, ValueError) as e:
            raise SchemaError(f"{path}: {e}") from None
    return np.array(rows, dtype=np.float64).reshape(-1, len(names))


def _read_inputs(path, schema: FeatureSchema) -> np.ndarray:
    if str(path).endswith(".bin"):
        x, stored = load_matrix(path)
        if stored is not None and stored.column_names() != schema.column_names():
            raise SchemaError(f"{path}: stored schema does not match the model")
        if x.shape[1] != schema.width:
            raise SchemaError(f"{path}: {x.shape[1]} columns, model expects {schema.width}")
        return x
    return read_feature_csv(path, schema)


# --------------------------------------------------------------------------
# commands

def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out) if args.out else cfg.output_dir
    ds = cfg.dataset()
    tcfg = cfg.train_config()
    model, records = train(ds, tcfg)
    stamp = {"config_hash": cfg.hash}
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / "model.json", extra=stamp)
    write_log([{**r, **stamp} for r in records], out / "train_log.jsonl")
    acc = float(np.mean(model.predict(ds.x_test) == ds.y_test))
    validity = float(np.mean(model.predict(model.generate_cf(ds.x_test)) != model.predict(ds.x_test)))
    manifest = {
        "config_hash": cfg.hash,
        "config": cfg.values,
        "config_text": cfg.text,
        "dataset": ds.provenance,
        "artifacts": ["model.json", "train_log.jsonl"],
        "model_fingerprint": fingerprint(model.classifier()),
        "test_accuracy": acc,
        "test_validity": validity,
        "version": __version__,
    }
    _write(out / "manifest.json", json.dumps(manifest, indent=1, sort_keys=True, default=str) + "\n")
    print(f"trained {tcfg.epochs} epochs: test accuracy {acc:.4f}, cf validity {validity:.4f} -> {out}")
    return EXIT_OK


def cmd_certify(args) -> int:
    model, schema, doc = _load_model(args.model)
    method = normalize_method(args.method)
    x = _read_inputs(args.data, schema)
    if args.cf:
        x_cf = _read_inputs(args.cf, schema)
        if x_cf.shape != x.shape:
            raise SchemaError(f"{args.cf}: {len(x_cf)} counterfactual rows for {len(x)} inputs")
    elif isinstance(model, JointModel):
        x_cf = model.generate_cf(x) if len(x) else x
    else:
        raise UsageError("a classifier-only model needs --cf with explicit counterfactuals")
    if args.delta is not None:
        spec = MultiplicitySpec(delta=args.delta)
    else:
        spec = MultiplicitySpec(kappa=args.kappa, p=math.inf if args.p == "inf" else float(args.p))
    certs = certify_batch(model, spec, x, x_cf, method)
    extra = {"config_hash": doc["config_hash"]} if "config_hash" in doc else None
    out = Path(args.out) if args.out else Path(args.model).with_name("certificates.json")
    _write(out, certificates_json(certs, extra))
    n_ok = sum(c.robust for c in certs)
    rate = n_ok / len(certs) if certs else 1.0
    print(f"robustness rate {rate:.4f} ({n_ok}/{len(certs)} certified, method {method}) -> {out}")
    return EXIT_OK if n_ok == len(certs) else EXIT_UNCERTIFIED


def cmd_gen_cf(args) -> int:
    model, schema, _ = _load_model(args.model)
    if not isinstance(model, JointModel):
        raise UsageError("gen-cf needs a joint model with a counterfactual generator")
    x = _read_inputs(args.input, schema)
    names = schema.column_names()
    x_cf = model.generate_cf(x) if len(x) else x
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names + [f"cf_{n}" for n in names] + ["valid", "proximity", "sparsity"])
        if len(x):
            valid = model.predict(x_cf) != model.predict(x)
            q = quality_metrics(x, x_cf)
            for i in range(len(x)):
                w.writerow([repr(float(v)) for v in x[i]] + [repr(float(v)) for v in x_cf[i]]
                           + [int(valid[i]), repr(float(q["proximity"][i])), repr(float(q["sparsity"][i]))])
    print(f"wrote {len(x)} counterfactuals -> {out}")
    if args.timing and len(x):
        t = timing_benchmark(model, x, n_repeats=args.repeats)
        std = "n/a" if t["std"] is None else f"{t['std'] * 1e3:.4f} ms"
        print(f"mean latency per counterfactual: {t['mean'] * 1e3:.4f} ms (std {std}, {t['n']} instances)")
    return EXIT_OK


def cmd_eval_xmodel(args) -> int:
    cfg = _load_config(args)
    fleet = cfg.fleet(args.variation)
    if args.identical:
        fleet = replace(fleet, identical=True)
    if args.fleet_size is not None:
        fleet = replace(fleet, fleet_size=args.fleet_size)
    tcfg = cfg.train_config()
    label = args.label or ("plain" if tcfg.weights.robust == 0 else tcfg.weights.method)
    out = Path(args.out) if args.out else cfg.output_dir
    spec = cfg.multiplicity()

    if fleet.variation == "ds":
        if args.trials is not None:
            fleet = replace(fleet, ds_trials=args.trials)
        base, shifted = cfg.shift_datasets()
        res = run_ds_trials(base, shifted, tcfg, fleet)
        report = EvalReport(label, "ds", {"ds_validity": {"mean": res["mean"], "std": res["std"]}},
                            {"trials": res["trials"], "finetune_epochs": fleet.ds_finetune_epochs,
                             "shift_points": cfg.values["data"]["shift_points"]}, cfg.hash)
    else:
        ds = cfg.dataset()
        models = train_fleet(ds, tcfg, fleet)
        xm = cross_model_validity(models, ds.x_test)
        quality = {"proximity": [], "sparsity": [], "ddm": []}
        self_valid, cert = [], []
        for m in models:
            x_cf = m.generate_cf(ds.x_test)
            q = quality_metrics(ds.x_test, x_cf, ds.x_train)
            for k in quality:
                quality[k].extend(q[k].tolist())
            self_valid.append(float(np.mean(m.predict(x_cf) != m.predict(ds.x_test))))
            cert.append(robustness_rate(m, spec, ds.x_test, "simul-crown", x_cf))
        metrics = {"cross_model_validity": {"mean": xm["mean"], "std": xm["std"]},
                   "validity": {"mean": float(np.mean(self_valid)), "std": float(np.std(self_valid))},
                   "cert_rate": {"mean": float(np.mean(cert)), "std": float(np.std(cert))},
                   **summarize_quality({k: np.array(v) for k, v in quality.items()})}
        details = {"matrix": xm["matrix"], "per_source": xm["per_source"], "fleet_size": fleet.fleet_size,
                   "identical": fleet.identical}
        if fleet.variation == "loo":
            details["removed_rows"] = [math.ceil(fleet.loo_fraction * len(ds.x_train) - 1e-12)] * fleet.fleet_size
        report = EvalReport(label, fleet.variation, metrics, details, cfg.hash)

    name = f"eval_{fleet.variation}_{label}"
    _write(out / f"{name}.json", report.to_json())
    _write(out / f"{name}.csv", reports_csv([report]))
    for metric, m in sorted(report.metrics.items()):
        std = "" if m["std"] is None else f" ({m['std']:.4f})"
        print(f"{label} {fleet.variation} {metric}: {m['mean']:.4f}{std}")
    return EXIT_OK


def cmd_report(args) -> int:
    reports = []
    for path in args.inputs:
        try:
            reports.append(EvalReport.from_dict(json.loads(Path(path).read_text())))
        except (OSError, json.JSONDecodeError, KeyError) as e:
            raise UsageError(f"cannot read report {path}: {e}") from None
    hashes = sorted({str(r.config_hash) for r in reports})
    if len(hashes) > 1 and not args.force:
        raise UsageError(f"reports come from different configs ({', '.join(hashes)}); pass --force to combine")
    text = reports_csv(reports)
    if args.out:
        _write(Path(args.out), text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="robustcf", description="Robust counterfactual training and certification.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a joint classifier and counterfactual generator")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", help="output directory (default: output.dir from the config)")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("certify", help="certify counterfactual robustness for a set of inputs")
    c.add_argument("--model", required=True)
    c.add_argument("--data", required=True, help="CSV of encoded features, or a .bin matrix")
    c.add_argument("--cf", help="explicit counterfactuals (same format as --data)")
    c.add_argument("--method", default="simul-crown", choices=METHODS)
    c.add_argument("--kappa", type=float, default=0.05)
    c.add_argument("--p", default="inf", choices=["inf", "2"])
    c.add_argument("--delta", type=float, help="absolute per-tensor radius instead of kappa")
    c.add_argument("--out")
    c.set_defaults(func=cmd_certify)

    g = sub.add_parser("gen-cf", help="generate counterfactuals with quality columns")
    g.add_argument("--model", required=True)
    g.add_argument("--input", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--timing", action="store_true")
    g.add_argument("--repeats", type=int, default=5)
    g.set_defaults(func=cmd_gen_cf)

    e = sub.add_parser("eval-xmodel", help="cross-model validity protocols")
    e.add_argument("--config", required=True)
    e.add_argument("--variation", required=True, choices=["ri", "loo", "ds"])
    e.add_argument("--seed", type=int)
    e.add_argument("--fleet-size", type=int)
    e.add_argument("--trials", type=int)
    e.add_argument("--identical", action="store_true", help="control run: every member identical")
    e.add_argument("--label")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval_xmodel)

    r = sub.add_parser("report", help="combine evaluation reports into one CSV table")
    r.add_argument("inputs", nargs="+")
    r.add_argument("--out")
    r.add_argument("--force", action="store_true", help="combine reports from different configs")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, SchemaError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingError as e:
        print(f"training failed: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (RuntimeError, FloatingPointError, MemoryError) as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

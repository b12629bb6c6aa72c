"""Command-line entry point: ``treedrnet <command> [options]``.

Every command writes ``config.json`` (the fully resolved configuration, which
can be passed back with ``--config`` to reproduce the run) and ``report.json``
into the output directory, plus command-specific CSV files.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 divergence.
"""
import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import _kernels
from .data import DataError, SplitSpec, load_csv, prepare_windows, synth_dataset
from .irls import IrlsProblem, irls_solve, robustness_demo
from .model import ConfigError, ModelConfig, build_model, load_checkpoint, param_count, save_checkpoint
from .robustness import AttackSpec, attack_experiment, prolonged_input_experiment
from .training import DivergenceError, TrainConfig, aggregate, evaluate, timed_bench, train

log = logging.getLogger("treedrnet")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3

ABLATION_VARIANTS = ("full", "woF", "woE", "woT", "no_residual", "parallel")
SENSITIVITY_HIDDEN = (32, 64, 128, 256, 512)
SENSITIVITY_DEPTH = (1, 2, 3)
DEFAULT_ATTACKS = ("coe", "anomaly", "white_noise")


class UsageFailure(Exception):
    pass


@dataclass
class ExperimentConfig:
    data: dict = field(default_factory=lambda: {"path": None, "date_column": None, "synthetic": None,
                                                "target": None})
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    attacks: list = field(default_factory=list)
    split: dict = field(default_factory=lambda: asdict(SplitSpec()))
    out: str = "runs/latest"
    options: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "data": dict(self.data),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "attacks": [a.to_dict() for a in self.attacks],
            "split": dict(self.split),
            "out": self.out,
            "options": dict(self.options),
        }

    @classmethod
    def from_dict(cls, d):
        cfg = cls()
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        if "data" in d:
            cfg.data.update(d["data"])
        if "model" in d:
            cfg.model = ModelConfig.from_dict({**cfg.model.to_dict(), **d["model"]})
        if "train" in d:
            known = {f.name for f in fields(TrainConfig)}
            bad = set(d["train"]) - known
            if bad:
                raise ConfigError(f"unknown train config keys: {sorted(bad)}")
            t = {**cfg.train.to_dict(), **d["train"]}
            t["quantiles"] = tuple(t["quantiles"])
            cfg.train = TrainConfig(**t)
        if "attacks" in d:
            cfg.attacks = [_attack_from(a) for a in d["attacks"]]
        if "split" in d:
            cfg.split.update(d["split"])
        cfg.out = d.get("out", cfg.out)
        cfg.options.update(d.get("options", {}))
        return cfg

    def validate(self):
        self.model.validate()
        try:
            self.train.validate()
            for a in self.attacks:
                a.validate()
            SplitSpec(**self.split)
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from None
        return self


def _attack_from(d):
    if isinstance(d, str):
        return AttackSpec(kind=d)
    d = dict(d)
    if "spike_range" in d:
        d["spike_range"] = tuple(d["spike_range"])
    try:
        return AttackSpec(**d)
    except TypeError as exc:
        raise ConfigError(f"bad attack spec {d}: {exc}") from None


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _apply_override(raw, assignment):
    key, sep, value = assignment.partition("=")
    if not sep or "." not in key:
        raise ConfigError(f"override {assignment!r} must look like section.key=value")
    section, name = key.split(".", 1)
    if section not in ("data", "model", "train", "split", "options"):
        raise ConfigError(f"override {assignment!r}: unknown section {section!r}")
    raw.setdefault(section, {})[name] = _parse_value(value)


def resolve_config(args):
    raw = {}
    if args.config:
        try:
            with open(args.config) as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
    data = raw.setdefault("data", {})
    if getattr(args, "data", None):
        data.update({"path": args.data, "synthetic": None})
    if getattr(args, "date_column", None):
        data["date_column"] = args.date_column
    if getattr(args, "synthetic", None):
        data.update({"path": None, "synthetic": {"kind": args.synthetic, "length": args.synth_len,
                                                 "dim": args.synth_dim, "noise_std": args.synth_noise,
                                                 "seed": args.synth_seed}})
    model = raw.setdefault("model", {})
    train_d = raw.setdefault("train", {})
    for flag, section, key in (("input_len", model, "input_len"), ("output_len", model, "output_len"),
                               ("variant", model, "variant"), ("epochs", train_d, "max_epochs"),
                               ("seed", train_d, "seed"), ("runs", train_d, "runs")):
        value = getattr(args, flag, None)
        if value is not None:
            section[key] = value
    if getattr(args, "seed", None) is not None:
        model["seed"] = args.seed
    for assignment in args.set or []:
        _apply_override(raw, assignment)
    if args.out:
        raw["out"] = args.out
    try:
        return ExperimentConfig.from_dict(raw).validate()
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_dataset(cfg):
    d = cfg.data
    if d.get("path") and d.get("synthetic"):
        raise ConfigError("data.path and data.synthetic are mutually exclusive")
    if d.get("path"):
        return load_csv(d["path"], d.get("date_column"))
    if d.get("synthetic"):
        spec = dict(d["synthetic"])
        return synth_dataset(spec.pop("kind", "seasonal"), **spec)
    raise ConfigError("no dataset: give --data PATH, --synthetic KIND, or data.path in the config")


def _model_cfg_for(cfg, ds):
    target = cfg.data.get("target")
    if target is None:
        return cfg.model
    return replace(cfg.model, covariate_dim=ds.dim - 1)


def _write_json(path, obj):
    from .training import _jsonable
    with open(path, "w") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)


def _write_csv(path, rows, columns=None):
    columns = columns or list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


# ---------------------------------------------------------------------------
# commands


def _train_runs(cfg, ds, model_cfg=None, train_cfg=None):
    """Train ``runs`` seeds; returns (best model by val loss, RunReport)."""
    model_cfg = model_cfg or _model_cfg_for(cfg, ds)
    train_cfg = train_cfg or cfg.train
    data = prepare_windows(ds, model_cfg.input_len, model_cfg.output_len, SplitSpec(**cfg.split),
                           target=cfg.data.get("target"))
    scaler = data.scaler if cfg.options.get("original_units") else None
    results = []
    for r in range(train_cfg.runs):
        seed = train_cfg.seed + r
        model = build_model(replace(model_cfg, seed=model_cfg.seed + r))
        model, report = train(model, data.train, data.val, replace(train_cfg, seed=seed, runs=1))
        report.metrics = evaluate(model, data.test, scaler=scaler)
        results.append((model, report))
    best_model, report = min(results, key=lambda mr: mr[1].best_val_loss)
    if len(results) > 1:
        report.runs = [{**rep.metrics, "seed": train_cfg.seed + k, "epochs": rep.epochs,
                        "best_val_loss": rep.best_val_loss} for k, (_, rep) in enumerate(results)]
        report.mean, report.std = aggregate([rep.metrics for _, rep in results])
    else:
        report.mean = {k: v for k, v in report.metrics.items() if isinstance(v, float)}
    report.config = cfg.to_dict()
    return best_model, report, data


def cmd_synth(cfg, args):
    ds = load_dataset(cfg)
    path = os.path.join(cfg.out, f"{ds.name}.csv")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ds.feature_names)
        for row in ds.values:
            w.writerow([repr(float(v)) for v in row])
    _write_json(os.path.join(cfg.out, "report.json"),
                {"command": "synth", "path": path, "length": len(ds), "dim": ds.dim, "meta": ds.meta})
    print(path)


def cmd_train(cfg, args):
    ds = load_dataset(cfg)
    model, report, _ = _train_runs(cfg, ds)
    report.timing = {"parameters": model.num_params}
    save_checkpoint(model, os.path.join(cfg.out, "checkpoint.bin"))
    report.write_json(os.path.join(cfg.out, "report.json"))
    report.write_epochs_csv(os.path.join(cfg.out, "epochs.csv"))
    _write_csv(os.path.join(cfg.out, "horizon_errors.csv"),
               [{"step": h + 1, "mse": m, "mae": a} for h, (m, a) in
                enumerate(zip(report.metrics["mse_per_horizon"], report.metrics["mae_per_horizon"]))])
    print(json.dumps({"test_mse": report.metrics["mse"], "test_mae": report.metrics["mae"],
                      "best_epoch": report.best_epoch}))


def cmd_eval(cfg, args):
    ds = load_dataset(cfg)
    ckpt = args.checkpoint or os.path.join(cfg.out, "checkpoint.bin")
    try:
        model = load_checkpoint(ckpt)
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {ckpt}: {exc.strerror}") from None
    mc = model.config
    data = prepare_windows(ds, mc.input_len, mc.output_len, SplitSpec(**cfg.split), target=cfg.data.get("target"))
    scaler = data.scaler if cfg.options.get("original_units") else None
    metrics = {split: evaluate(model, getattr(data, split), scaler=scaler) for split in ("val", "test")}
    _write_json(os.path.join(cfg.out, "report.json"),
                {"command": "eval", "checkpoint": ckpt, "metrics": metrics, "model": mc.to_dict(),
                 "config": cfg.to_dict()})
    print(json.dumps({"test_mse": metrics["test"]["mse"], "test_mae": metrics["test"]["mae"]}))


def cmd_ablate(cfg, args):
    ds = load_dataset(cfg)
    base = _model_cfg_for(cfg, ds)
    rows, reports = [], {}
    for variant in cfg.options.get("variants", ABLATION_VARIANTS):
        mc = replace(base, variant=variant, branches=1 if variant == "woE" else base.branches)
        model, rep, _ = _train_runs(cfg, ds, model_cfg=mc)
        rows.append({"variant": variant, "mse": rep.mean["mse"], "mae": rep.mean["mae"],
                     "mse_std": rep.std.get("mse", 0.0), "parameters": model.num_params,
                     "epochs": len(rep.epochs)})
        reports[variant] = rep.to_dict()
    _write_csv(os.path.join(cfg.out, "ablation.csv"), rows)
    _write_json(os.path.join(cfg.out, "report.json"), {"command": "ablate", "rows": rows, "runs": reports,
                                                       "config": cfg.to_dict()})
    print(json.dumps(rows))


def cmd_sensitivity(cfg, args):
    ds = load_dataset(cfg)
    base = _model_cfg_for(cfg, ds)
    rows = []
    for depth in cfg.options.get("tree_depths", SENSITIVITY_DEPTH):
        for hidden in cfg.options.get("hidden_dims", SENSITIVITY_HIDDEN):
            mc = replace(base, hidden_dim=int(hidden), tree_depth=int(depth))
            model, rep, _ = _train_runs(cfg, ds, model_cfg=mc)
            rows.append({"hidden_dim": hidden, "tree_depth": depth, "mse": rep.mean["mse"],
                         "mae": rep.mean["mae"], "parameters": model.num_params})
    _write_csv(os.path.join(cfg.out, "sensitivity.csv"), rows)
    _write_json(os.path.join(cfg.out, "report.json"), {"command": "sensitivity", "rows": rows,
                                                       "config": cfg.to_dict()})
    print(json.dumps(rows))


def cmd_attack(cfg, args):
    ds = load_dataset(cfg)
    attacks = cfg.attacks or [AttackSpec(kind=k) for k in DEFAULT_ATTACKS]
    seeds = [cfg.train.seed + r for r in range(cfg.train.runs)]
    result = attack_experiment(ds, attacks, _model_cfg_for(cfg, ds), replace(cfg.train, runs=1), seeds,
                               SplitSpec(**cfg.split), test_time=bool(cfg.options.get("test_time")))
    rows = [{k: v for k, v in r.items() if k not in ("spec", "per_seed_mse")} for r in result["rows"]]
    _write_csv(os.path.join(cfg.out, "attack.csv"), rows)
    _write_json(os.path.join(cfg.out, "report.json"), {"command": "attack", **result, "config": cfg.to_dict()})
    print(json.dumps(rows))


def cmd_prolong(cfg, args):
    ds = load_dataset(cfg)
    lens = cfg.options.get("input_lens") or [cfg.model.input_len, 2 * cfg.model.input_len]
    seeds = [cfg.train.seed + r for r in range(cfg.train.runs)]
    result = prolonged_input_experiment(ds, lens, cfg.model.output_len, cfg.model, replace(cfg.train, runs=1),
                                        seeds, SplitSpec(**cfg.split))
    _write_csv(os.path.join(cfg.out, "prolong.csv"), result["summary"])
    _write_csv(os.path.join(cfg.out, "prolong_long.csv"),
               [{"input_len": r["input_len"], "seed": r["seed"], "metric": m, "value": r[m]}
                for r in result["rows"] for m in ("mse", "mae")])
    _write_json(os.path.join(cfg.out, "report.json"), {"command": "prolong", **result, "config": cfg.to_dict()})
    print(json.dumps(result["summary"]))


def cmd_bench(cfg, args):
    ds = load_dataset(cfg)
    mc = _model_cfg_for(cfg, ds)
    data = prepare_windows(ds, mc.input_len, mc.output_len, SplitSpec(**cfg.split), target=cfg.data.get("target"))
    n = int(cfg.options.get("samples", 512))
    windows = data.train.take(np.arange(min(n, len(data.train))))
    result = timed_bench(build_model(mc), windows, batch_size=cfg.train.batch_size,
                         reps=int(cfg.options.get("reps", 5)))
    result.update({"backend": _kernels.active.name, "analytic_parameters": param_count(mc)})
    _write_csv(os.path.join(cfg.out, "bench.csv"),
               [{"phase": ph, "ms_per_sample": result[f"{ph}_ms_per_sample"]} for ph in ("train", "inference")])
    _write_json(os.path.join(cfg.out, "report.json"), {"command": "bench", **result, "config": cfg.to_dict()})
    print(json.dumps({k: result[k] for k in ("train_ms_per_sample", "inference_ms_per_sample", "backend")}))


def cmd_irls(cfg, args):
    if not args.problem:
        raise ConfigError("irls needs --problem CSV with feature columns and a 'y' column")
    ds = load_csv(args.problem)
    if "y" not in ds.feature_names:
        raise DataError(f"{args.problem}: no 'y' column")
    k = ds.feature_names.index("y")
    X = np.delete(ds.values, k, axis=1)
    if args.intercept:
        X = np.column_stack([np.ones(len(ds)), X])
    y = ds.values[:, k]
    try:
        result = irls_solve(IrlsProblem(X, y, p=args.p, max_iters=args.max_iters, tol=args.tol))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out = result.to_dict()
    if args.demo_outlier is not None:
        out["robustness_demo"] = robustness_demo(X, y, args.demo_outlier)
    _write_json(os.path.join(cfg.out, "report.json"), {"command": "irls", **out})
    json.dump(out, sys.stdout)
    sys.stdout.write("\n")


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "sensitivity": cmd_sensitivity,
    "attack": cmd_attack,
    "prolong": cmd_prolong,
    "bench": cmd_bench,
    "irls": cmd_irls,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageFailure(message)


def build_parser():
    p = _Parser(prog="treedrnet", description="TreeDRNet long-horizon forecasting toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON experiment config (e.g. a previous run's config.json)")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
        sp.add_argument("--data", help="CSV dataset path")
        sp.add_argument("--date-column")
        sp.add_argument("--synthetic", choices=("seasonal", "trend_seasonal", "random_walk"))
        sp.add_argument("--synth-len", type=int, default=2000)
        sp.add_argument("--synth-dim", type=int, default=1)
        sp.add_argument("--synth-noise", type=float, default=0.1)
        sp.add_argument("--synth-seed", type=int, default=0)
        sp.add_argument("--input-len", type=int)
        sp.add_argument("--output-len", type=int)
        sp.add_argument("--variant")
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--runs", type=int)
        sp.add_argument("-v", "--verbose", action="store_true")
        if name == "eval":
            sp.add_argument("--checkpoint")
        if name == "irls":
            sp.add_argument("--problem", help="CSV with feature columns and a 'y' column")
            sp.add_argument("--p", type=float, default=1.0)
            sp.add_argument("--intercept", action="store_true")
            sp.add_argument("--max-iters", type=int, default=200)
            sp.add_argument("--tol", type=float, default=1e-10)
            sp.add_argument("--demo-outlier", type=float, help="also run the outlier robustness demo")
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageFailure as exc:
        print(f"treedrnet: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve_config(args)
        os.makedirs(cfg.out, exist_ok=True)
        _write_json(os.path.join(cfg.out, "config.json"), cfg.to_dict())
        COMMANDS[args.command](cfg, args)
    except DataError as exc:
        print(f"treedrnet: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"treedrnet: training diverged: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ConfigError, UsageFailure, ValueError) as exc:
        # remaining ValueErrors come from argument checks deeper down
        print(f"treedrnet: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

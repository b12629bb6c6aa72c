"""Minibatch Adam training with early stopping, evaluation and timing."""
import csv
import gc
import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .metrics import mse_mae, q_risk
from .model import TreeDRNetModel
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 3
    loss: str = "mse"  # or "pinball"
    quantiles: tuple = (0.5,)
    seed: int = 0
    runs: int = 1

    def validate(self):
        problems = []
        if not self.lr > 0:
            problems.append(f"lr must be > 0 (got {self.lr})")
        if self.batch_size < 1:
            problems.append(f"batch_size must be >= 1 (got {self.batch_size})")
        if self.patience < 1:
            problems.append(f"patience must be >= 1 (got {self.patience})")
        if self.max_epochs < 0:
            problems.append(f"max_epochs must be >= 0 (got {self.max_epochs})")
        if self.runs < 1:
            problems.append(f"runs must be >= 1 (got {self.runs})")
        if self.loss not in ("mse", "pinball"):
            problems.append(f"loss must be 'mse' or 'pinball' (got {self.loss!r})")
        elif self.loss == "pinball" and not all(0 < q < 1 for q in self.quantiles):
            problems.append(f"quantiles must lie in (0, 1) (got {self.quantiles})")
        if problems:
            raise ValueError("; ".join(problems))
        return self

    def to_dict(self):
        d = asdict(self)
        d["quantiles"] = list(self.quantiles)
        return d


@dataclass
class RunReport:
    config: dict = field(default_factory=dict)
    epochs: list = field(default_factory=list)  # [{"epoch", "train_loss", "val_loss"}]
    best_epoch: int = 0
    best_val_loss: float = float("nan")
    stopped_early: bool = False
    metrics: dict = field(default_factory=dict)  # test metrics of this run
    timing: dict = field(default_factory=dict)
    runs: list = field(default_factory=list)  # per-run metric dicts when runs > 1
    mean: dict = field(default_factory=dict)
    std: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(_jsonable(self.to_dict()), fh, indent=2, sort_keys=True)

    def write_epochs_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["run", "epoch", "train_loss", "val_loss"])
            histories = [r.get("epochs", []) for r in self.runs] if self.runs else [self.epochs]
            for k, hist in enumerate(histories):
                for row in hist:
                    w.writerow([k, row["epoch"], repr(row["train_loss"]), repr(row["val_loss"])])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _loss_tensor(pred, target, cfg):
    if cfg.loss == "pinball":
        return ag.pinball_loss(pred, target, cfg.quantiles)
    return ag.mse_loss(pred, target)


def _loss_value(pred, target, cfg):
    diff = target - pred
    if cfg.loss == "pinball":
        return float(np.mean([np.mean(np.where(diff > 0, q * diff, (q - 1.0) * diff)) for q in cfg.quantiles]))
    return float(np.mean(diff * diff))


def dataset_loss(model, windows, cfg, batch_size=1024):
    pred = model.predict(windows.inputs, windows.covariates, batch_size=batch_size)
    return _loss_value(pred, windows.targets, cfg)


def train_step(model, xb, yb, cb, state, cfg):
    """One forward/backward/Adam update; returns the batch loss."""
    model.zero_grad()
    tape = ag.Tape()
    with tape:
        pred = model.forward(xb, cb)
        loss = _loss_tensor(pred, ag.Tensor(yb), cfg)
    value = loss.item()
    if not np.isfinite(value):
        raise DivergenceError(f"non-finite loss {value}")
    ag.backward(loss, tape)
    adam_step(model.flat, model.flat_grad, state)
    return value


def train(model, train_windows, val_windows, cfg, input_transform=None):
    """Fit ``model`` in place; returns ``(model, RunReport)``.

    ``input_transform(batch_inputs, rng)`` is applied to each training
    minibatch's inputs (never targets); used for training-time attacks.
    The parameters with the lowest validation loss seen (including the
    initial ones) are restored before returning.
    """
    cfg.validate()
    if len(train_windows) == 0 or len(val_windows) == 0:
        raise ValueError("train and validation window sets must be non-empty")
    rng = np.random.default_rng(cfg.seed)
    attack_rng = np.random.default_rng([cfg.seed, 1])
    state = AdamState(model.num_params, lr=cfg.lr)
    report = RunReport(config={"train": cfg.to_dict(), "model": model.config.to_dict()})

    best_val = dataset_loss(model, val_windows, cfg)
    best_flat = model.flat.copy()
    report.best_epoch, report.best_val_loss = 0, best_val
    since_best = 0
    n = len(train_windows)
    X, Y, C = train_windows.inputs, train_windows.targets, train_windows.covariates
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for b, s in enumerate(range(0, n, cfg.batch_size)):
            idx = order[s:s + cfg.batch_size]
            xb = X[idx]
            if input_transform is not None:
                xb = input_transform(xb, attack_rng)
            try:
                total += train_step(model, xb, Y[idx], None if C is None else C[idx], state, cfg) * len(idx)
            except DivergenceError as exc:
                raise DivergenceError(
                    f"epoch {epoch}, batch {b} (window rows {idx[:5].tolist()}...): {exc}") from None
        val = dataset_loss(model, val_windows, cfg)
        report.epochs.append({"epoch": epoch, "train_loss": total / n, "val_loss": val})
        log.info("epoch %d train %.6f val %.6f", epoch, total / n, val)
        if val < best_val:
            best_val, since_best = val, 0
            best_flat[:] = model.flat
            report.best_epoch, report.best_val_loss = epoch, val
        else:
            since_best += 1
            if since_best >= cfg.patience:
                report.stopped_early = True
                break
    model.flat[:] = best_flat
    return model, report


def evaluate(model, windows, scaler=None, quantiles=(0.5, 0.9), batch_size=1024):
    """Test metrics; with ``scaler`` the errors are measured in original units."""
    pred = model.predict(windows.inputs, windows.covariates, batch_size=batch_size)
    target = windows.targets
    if scaler is not None:
        pred = scaler.inverse(pred, windows.channels)
        target = scaler.inverse(target, windows.channels)
    mse, mae = mse_mae(pred, target)
    err = pred - target
    out = {
        "mse": mse,
        "mae": mae,
        "mse_per_horizon": np.mean(err * err, axis=0).tolist(),
        "mae_per_horizon": np.mean(np.abs(err), axis=0).tolist(),
    }
    if np.any(target != 0):
        for q in quantiles:
            out[f"q_risk_p{int(round(q * 100))}"] = q_risk(pred, target, q)
    return out


def aggregate(runs):
    """Mean and (sample) std of every scalar metric across runs."""
    keys = [k for k, v in runs[0].items() if isinstance(v, (int, float))]
    mean = {k: float(np.mean([r[k] for r in runs])) for k in keys}
    std = {k: float(np.std([r[k] for r in runs], ddof=1)) for k in keys} if len(runs) > 1 else {}
    return mean, std


def timed_bench(model, windows, batch_size=32, reps=5, warmup=1):
    """Median per-sample wall-clock of a training step and of inference, in ms."""
    if len(windows) < 100:
        raise ValueError(f"need >= 100 windows for stable timing, got {len(windows)}")
    if reps < 5:
        raise ValueError(f"need >= 5 repetitions for a stable median, got {reps}")
    work = TreeDRNetModel(model.config, flat=model.flat.copy())
    cfg = TrainConfig(batch_size=batch_size)
    state = AdamState(work.num_params, lr=cfg.lr)
    X, Y, C = windows.inputs, windows.targets, windows.covariates
    n = len(windows)

    def one_train_pass():
        for s in range(0, n, batch_size):
            cb = None if C is None else C[s:s + batch_size]
            train_step(work, X[s:s + batch_size], Y[s:s + batch_size], cb, state, cfg)

    def one_infer_pass():
        for s in range(0, n, batch_size):
            cb = None if C is None else C[s:s + batch_size]
            work.forward(X[s:s + batch_size], cb)

    times = {}
    for name, fn in (("train", one_train_pass), ("inference", one_infer_pass)):
        for _ in range(warmup):
            fn()
        samples = []
        # like timeit, keep the cyclic collector out of the measurements
        gc_was_enabled = gc.isenabled()
        gc.disable()
        try:
            for _ in range(reps):
                t0 = time.perf_counter()
                fn()
                samples.append((time.perf_counter() - t0) * 1000.0 / n)
        finally:
            if gc_was_enabled:
                gc.enable()
        times[f"{name}_ms_per_sample"] = float(np.median(samples))
        times[f"{name}_ms_samples"] = samples
    times.update({"batch_size": batch_size, "reps": reps, "samples": n, "parameters": work.num_params})
    return times

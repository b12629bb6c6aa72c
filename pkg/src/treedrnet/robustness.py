"""Noise-injection attacks on input windows and the robustness experiments built on them.

Each attack maps a (batch, input_len) array to a new array of the same shape
and never touches targets. Random draws come from ``rng`` when given (the
training loop passes its own stream) and otherwise from a generator seeded
with ``spec.seed``, so ``(inputs, spec)`` alone fixes the result.
"""
import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import _kernels
from .data import DataError, SplitSpec, fit_apply_scaler, make_context_windows, make_windows, prepare_windows
from .model import build_model
from .training import evaluate, train

ATTACK_KINDS = ("none", "coe", "anomaly", "white_noise")


@dataclass
class AttackSpec:
    kind: str = "none"
    fraction: float = 0.4
    spike_range: tuple = (5.0, 20.0)
    noise_scale: float = 0.4
    point_fraction: float = 1.0  # share of points receiving white noise
    seed: int = 0

    def validate(self):
        problems = []
        if self.kind not in ATTACK_KINDS:
            problems.append(f"kind must be one of {ATTACK_KINDS} (got {self.kind!r})")
        if not 0.0 <= self.fraction <= 1.0:
            problems.append(f"fraction must lie in [0, 1] (got {self.fraction})")
        lo, hi = self.spike_range
        if lo > hi or lo < 0:
            problems.append(f"spike_range must satisfy 0 <= lo <= hi (got {self.spike_range})")
        if self.noise_scale < 0:
            problems.append(f"noise_scale must be >= 0 (got {self.noise_scale})")
        if not 0.0 <= self.point_fraction <= 1.0:
            problems.append(f"point_fraction must lie in [0, 1] (got {self.point_fraction})")
        if problems:
            raise ValueError("; ".join(problems))
        return self

    def to_dict(self):
        d = asdict(self)
        d["spike_range"] = list(self.spike_range)
        return d


def _rng(spec, rng):
    return np.random.default_rng(spec.seed) if rng is None else rng


def _as_index(value, n):
    return np.broadcast_to(np.asarray(value, dtype=np.int64), (n,)).copy()


def coe_attack(inputs, donor_pool, spec, rng=None, start=None, donor_index=None, donor_offset=None):
    """Overwrite one contiguous chunk per row with a chunk of a donor series.

    The chunk length is ``round(spec.fraction * input_len)``. ``start``,
    ``donor_index`` and ``donor_offset`` pin the otherwise random choices.
    """
    spec.validate()
    x = np.array(inputs, dtype=np.float64, copy=True)
    n, length = x.shape
    chunk = int(math.floor(spec.fraction * length + 0.5))
    if spec.fraction == 0:
        return x
    if spec.fraction * length < 1:
        raise ValueError(f"fraction {spec.fraction} covers less than one point of a length-{length} window")
    donors = np.atleast_2d(np.asarray(donor_pool, dtype=np.float64))
    if donors.shape[0] == 0:
        raise ValueError("donor pool is empty")
    if donors.shape[1] < chunk:
        raise ValueError(f"donor length {donors.shape[1]} is shorter than the chunk length {chunk}")
    g = _rng(spec, rng)
    starts = g.integers(0, length - chunk + 1, size=n) if start is None else _as_index(start, n)
    rows = g.integers(0, donors.shape[0], size=n) if donor_index is None else _as_index(donor_index, n)
    offs = g.integers(0, donors.shape[1] - chunk + 1, size=n) if donor_offset is None else _as_index(donor_offset, n)
    if np.any(starts < 0) or np.any(starts + chunk > length):
        raise ValueError("chunk start out of range")
    _kernels.active.replace_chunks(x, np.ascontiguousarray(donors), starts, rows, offs, chunk)
    return x


def anomaly_attack(inputs, spec, rng=None, index=None, k=None, sign=None):
    """Add (or subtract) one spike of ``k * max|row|`` with ``k ~ U(spike_range)``."""
    spec.validate()
    x = np.array(inputs, dtype=np.float64, copy=True)
    n, length = x.shape
    lo, hi = spec.spike_range
    if hi == 0 and k is None:
        return x
    g = _rng(spec, rng)
    idx = g.integers(0, length, size=n) if index is None else _as_index(index, n)
    mult = g.uniform(lo, hi, size=n) if k is None else np.broadcast_to(np.asarray(k, float), (n,))
    sgn = g.choice(np.array([-1.0, 1.0]), size=n) if sign is None else np.broadcast_to(np.asarray(sign, float), (n,))
    amount = np.ascontiguousarray(sgn * mult * np.max(np.abs(x), axis=1))
    _kernels.active.add_spikes(x, idx, amount)
    return x


def white_noise_attack(inputs, spec, rng=None):
    """Add ``noise_scale * N(0, 1)`` to every point, or to a random share of points."""
    spec.validate()
    x = np.array(inputs, dtype=np.float64, copy=True)
    if spec.noise_scale == 0 or spec.point_fraction == 0:
        return x
    g = _rng(spec, rng)
    noise = spec.noise_scale * g.standard_normal(x.shape)
    if spec.point_fraction < 1.0:
        noise *= g.random(x.shape) < spec.point_fraction
    return x + noise


def apply_attack(inputs, spec, rng=None, donor_pool=None):
    if spec.kind == "none":
        return np.array(inputs, dtype=np.float64, copy=True)
    if spec.kind == "coe":
        if donor_pool is not None:
            return coe_attack(inputs, donor_pool, spec, rng)
        # by default each row takes its chunk from a different row of the same batch
        g = _rng(spec, rng)
        n = np.shape(inputs)[0]
        donor_index = (np.arange(n) + g.integers(1, n, size=n)) % n if n > 1 else None
        return coe_attack(inputs, inputs, spec, g, donor_index=donor_index)
    if spec.kind == "anomaly":
        return anomaly_attack(inputs, spec, rng)
    if spec.kind == "white_noise":
        return white_noise_attack(inputs, spec, rng)
    raise ValueError(f"unknown attack kind {spec.kind!r}")


def attack_transform(spec):
    """Minibatch input transform for :func:`treedrnet.training.train`."""
    spec.validate()
    if spec.kind == "none":
        return None
    return lambda xb, rng: apply_attack(xb, spec, rng)


# ---------------------------------------------------------------------------
# experiments


def _rel(attacked, clean):
    return (attacked - clean) / clean


def attack_experiment(dataset, attacks, model_cfg, train_cfg, seeds=(0,), split=SplitSpec(), test_time=False):
    """Clean-trained baseline vs attack-trained models, all scored on the test split.

    With ``test_time=True`` the attack is applied to the test inputs instead of
    to training minibatches.
    """
    data = prepare_windows(dataset, model_cfg.input_len, model_cfg.output_len, split)

    def run(spec, seed):
        model = build_model(replace(model_cfg, seed=seed))
        transform = None if test_time else attack_transform(spec)
        train(model, data.train, data.val, replace(train_cfg, seed=seed), input_transform=transform)
        test = data.test
        if test_time and spec.kind != "none":
            test = replace(test, inputs=apply_attack(test.inputs, replace(spec, seed=spec.seed + seed)))
        return evaluate(model, test)

    clean_runs = [run(AttackSpec("none"), s) for s in seeds]
    clean_mse = float(np.mean([r["mse"] for r in clean_runs]))
    clean_mae = float(np.mean([r["mae"] for r in clean_runs]))
    rows = []
    for spec in attacks:
        spec.validate()
        runs = clean_runs if spec.kind == "none" else [run(spec, s) for s in seeds]
        a_mse = float(np.mean([r["mse"] for r in runs]))
        a_mae = float(np.mean([r["mae"] for r in runs]))
        rows.append({
            "attack": spec.kind,
            "output_len": model_cfg.output_len,
            "clean_mse": clean_mse,
            "clean_mae": clean_mae,
            "attacked_mse": a_mse,
            "attacked_mae": a_mae,
            "mse_rel_change": _rel(a_mse, clean_mse),
            "mae_rel_change": _rel(a_mae, clean_mae),
            "mse_change_pct": 100.0 * _rel(a_mse, clean_mse),
            "mae_change_pct": 100.0 * _rel(a_mae, clean_mae),
            "per_seed_mse": [r["mse"] for r in runs],
            "spec": spec.to_dict(),
        })
    return {"seeds": list(seeds), "test_time": test_time, "rows": rows}


def prolonged_input_experiment(dataset, input_lens, output_len, model_cfg, train_cfg, seeds=(0,),
                               split=SplitSpec()):
    """Test MSE as a function of lookback length over one shared test target span.

    Training windows stay inside the train split. Validation and test windows
    take their targets from their own split and may read history from the
    preceding split, so every input length is scored on the same targets.
    Each (input_len, seed) pair trains a fresh model initialized from ``seed``.
    """
    input_lens = sorted(set(int(i) for i in input_lens))
    longest = input_lens[-1]
    a, b = split.boundaries(len(dataset))
    need = longest + output_len
    if a < need or b - a < output_len or len(dataset) - b < output_len:
        minimum = int(math.ceil(max(need / split.train_frac, output_len / split.val_frac,
                                    output_len / split.test_frac)))
        raise DataError(f"{dataset.name}: length {len(dataset)} too short for input_len {longest} and "
                        f"output_len {output_len}; need at least {minimum}")
    (train_ds,), scaler = fit_apply_scaler(dataset.slice(0, a))
    full = scaler.transform(dataset.values)
    rows = []
    for L in input_lens:
        tr = make_windows(train_ds, L, output_len)
        va = make_context_windows(full, L, output_len, a, b)
        te = make_context_windows(full, L, output_len, b, len(dataset))
        for s in seeds:
            model = build_model(replace(model_cfg, input_len=L, output_len=output_len, seed=s))
            _, rep = train(model, tr, va, replace(train_cfg, seed=s))
            m = evaluate(model, te)
            rows.append({"input_len": L, "seed": s, "mse": m["mse"], "mae": m["mae"],
                         "epochs": len(rep.epochs), "best_epoch": rep.best_epoch})
    summary = []
    for L in input_lens:
        sub = [r for r in rows if r["input_len"] == L]
        summary.append({
            "input_len": L,
            "mse_mean": float(np.mean([r["mse"] for r in sub])),
            "mse_std": float(np.std([r["mse"] for r in sub], ddof=1)) if len(sub) > 1 else 0.0,
            "mae_mean": float(np.mean([r["mae"] for r in sub])),
        })
    return {"output_len": output_len, "seeds": list(seeds), "rows": rows, "summary": summary}

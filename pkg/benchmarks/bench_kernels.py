"""Compare the numba and numpy kernel backends.

Times each elementwise kernel on both backends, then a full training step of
the default model in a subprocess per backend (the backend is fixed at import
time by TREEDRNET_NUMBA).

    python3 benchmarks/bench_kernels.py [--size N] [--repeat R] [--json out.json]
"""
import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from treedrnet import _kernels

TRAIN_STEP = """
import time
import numpy as np
from treedrnet import ModelConfig, TrainConfig, build_model
from treedrnet.optim import AdamState
from treedrnet.training import train_step
cfg = ModelConfig()
model = build_model(cfg)
rng = np.random.default_rng(0)
x, y = rng.normal(size=(32, cfg.input_len)), rng.normal(size=(32, cfg.output_len))
state, tc = AdamState(model.num_params), TrainConfig()
train_step(model, x, y, None, state, tc)
times = []
for _ in range({repeat}):
    t0 = time.perf_counter()
    train_step(model, x, y, None, state, tc)
    times.append(time.perf_counter() - t0)
print(sorted(times)[len(times) // 2] * 1000)
"""


def kernel_cases(n, rng):
    x, g = rng.normal(size=n), rng.normal(size=n)
    m, v = np.zeros(n), np.zeros(n)
    rows = max(n // 96, 1)
    batch = rng.normal(size=(rows, 96))
    donors = rng.normal(size=(rows, 96))
    starts = rng.integers(0, 58, size=rows)
    pick = rng.integers(0, rows, size=rows)
    offs = rng.integers(0, 58, size=rows)
    idx, amt = rng.integers(0, 96, size=rows), rng.normal(size=rows)
    s = 1 / (1 + np.exp(-x))
    return {
        "relu": lambda k: k.relu(x),
        "relu_grad": lambda k: k.relu_grad(x, g),
        "sigmoid": lambda k: k.sigmoid(x),
        "sigmoid_grad": lambda k: k.sigmoid_grad(s, g),
        "adam_update": lambda k: k.adam_update(x.copy(), g, m, v, 1e-4, 0.9, 0.999, 1e-8, 1.0),
        "replace_chunks": lambda k: k.replace_chunks(batch.copy(), donors, starts, pick, offs, 38),
        "add_spikes": lambda k: k.add_spikes(batch.copy(), idx, amt),
    }


def time_kernels(n, repeat):
    rng = np.random.default_rng(0)
    out = []
    for name, call in kernel_cases(n, rng).items():
        row = {"kernel": name}
        for backend in (_kernels.numpy_kernels, _kernels.numba_kernels):
            if backend is None:
                continue
            call(backend)  # compile / warm caches
            best = min(timeit.repeat(lambda: call(backend), number=20, repeat=repeat)) / 20
            row[backend.name] = best * 1e6
        out.append(row)
    return out


def time_train_step(repeat):
    out = {}
    for name, flag in (("numpy", "0"), ("numba", "1")):
        env = {**os.environ, "TREEDRNET_NUMBA": flag}
        res = subprocess.run([sys.executable, "-c", TRAIN_STEP.format(repeat=repeat)], env=env,
                             capture_output=True, text=True, check=True)
        out[name] = float(res.stdout.strip().splitlines()[-1])
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=200_000, help="elements per kernel call")
    ap.add_argument("--repeat", type=int, default=7)
    ap.add_argument("--json", help="also write results here")
    args = ap.parse_args()

    kernels = time_kernels(args.size, args.repeat)
    print(f"kernels, {args.size} elements, best of {args.repeat} (microseconds per call)")
    print(f"{'kernel':<16}{'numpy':>12}{'numba':>12}{'speedup':>10}")
    for r in kernels:
        nb = r.get("numba", float("nan"))
        print(f"{r['kernel']:<16}{r['numpy']:>12.1f}{nb:>12.1f}{r['numpy'] / nb:>9.2f}x")

    step = time_train_step(max(args.repeat, 5))
    print(f"\ntrain step, default model, batch 32 (median ms): numpy {step['numpy']:.1f}, "
          f"numba {step['numba']:.1f}, speedup {step['numpy'] / step['numba']:.2f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"size": args.size, "kernels": kernels, "train_step_ms": step}, fh, indent=2)


if __name__ == "__main__":
    main()

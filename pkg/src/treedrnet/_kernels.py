"""Hot elementwise kernels, each with a numba and a pure-numpy implementation.

The active backend is chosen once at import time from the ``TREEDRNET_NUMBA``
environment variable (``0``/``false``/``off`` selects numpy). Both backends are
always importable as ``numba_kernels`` and ``numpy_kernels`` so they can be
benchmarked and cross-checked against each other.

All kernels take and return float64 arrays. In-place kernels mutate their
first argument(s) and return nothing.
"""
import os
from types import SimpleNamespace

import numpy as np

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover
    HAS_NUMBA = False


def _flag(name, default="1"):
    return os.environ.get(name, default).strip().lower() not in ("0", "false", "no", "off")


# ---------------------------------------------------------------------------
# numpy implementations


def _np_relu(x):
    return np.maximum(x, 0.0)


def _np_relu_grad(x, g):
    return np.where(x > 0.0, g, 0.0)


def _np_sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _np_sigmoid_grad(s, g):
    return g * s * (1.0 - s)


def _np_adam_update(params, grads, m, v, lr, beta1, beta2, eps, step):
    m *= beta1
    m += (1.0 - beta1) * grads
    v *= beta2
    v += (1.0 - beta2) * grads * grads
    m_hat = m / (1.0 - beta1**step)
    v_hat = v / (1.0 - beta2**step)
    params -= lr * m_hat / (np.sqrt(v_hat) + eps)


def _np_replace_chunks(out, donors, starts, donor_rows, donor_offsets, chunk):
    if chunk == 0:
        return
    cols = starts[:, None] + np.arange(chunk)
    src = donor_offsets[:, None] + np.arange(chunk)
    out[np.arange(out.shape[0])[:, None], cols] = donors[donor_rows[:, None], src]


def _np_add_spikes(out, index, amount):
    out[np.arange(out.shape[0]), index] += amount


# ---------------------------------------------------------------------------
# loop implementations, compiled with numba when available


def _loop_relu(x):
    flat = x.ravel()
    out = np.empty_like(flat)
    for i in range(flat.size):
        out[i] = flat[i] if flat[i] > 0.0 else 0.0
    return out.reshape(x.shape)


def _loop_relu_grad(x, g):
    xf = x.ravel()
    gf = g.ravel()
    out = np.empty_like(gf)
    for i in range(xf.size):
        out[i] = gf[i] if xf[i] > 0.0 else 0.0
    return out.reshape(x.shape)


def _loop_sigmoid(x):
    flat = x.ravel()
    out = np.empty_like(flat)
    for i in range(flat.size):
        t = flat[i]
        if t >= 0.0:
            out[i] = 1.0 / (1.0 + np.exp(-t))
        else:
            e = np.exp(t)
            out[i] = e / (1.0 + e)
    return out.reshape(x.shape)


def _loop_sigmoid_grad(s, g):
    sf = s.ravel()
    gf = g.ravel()
    out = np.empty_like(gf)
    for i in range(sf.size):
        out[i] = gf[i] * sf[i] * (1.0 - sf[i])
    return out.reshape(s.shape)


def _loop_adam_update(params, grads, m, v, lr, beta1, beta2, eps, step):
    c1 = 1.0 - beta1**step
    c2 = 1.0 - beta2**step
    for i in range(params.size):
        g = grads[i]
        m[i] = beta1 * m[i] + (1.0 - beta1) * g
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g
        params[i] -= lr * (m[i] / c1) / (np.sqrt(v[i] / c2) + eps)


def _loop_replace_chunks(out, donors, starts, donor_rows, donor_offsets, chunk):
    for r in range(out.shape[0]):
        s = starts[r]
        d = donor_rows[r]
        o = donor_offsets[r]
        for k in range(chunk):
            out[r, s + k] = donors[d, o + k]


def _loop_add_spikes(out, index, amount):
    for r in range(out.shape[0]):
        out[r, index[r]] += amount[r]


_NAMES = ("relu", "relu_grad", "sigmoid", "sigmoid_grad", "adam_update", "replace_chunks", "add_spikes")

numpy_kernels = SimpleNamespace(**{n: globals()["_np_" + n] for n in _NAMES}, name="numpy")

if HAS_NUMBA:
    numba_kernels = SimpleNamespace(
        **{n: njit(cache=True, nogil=True)(globals()["_loop_" + n]) for n in _NAMES}, name="numba"
    )
else:  # pragma: no cover
    numba_kernels = None

USE_NUMBA = HAS_NUMBA and _flag("TREEDRNET_NUMBA")
active = numba_kernels if USE_NUMBA else numpy_kernels

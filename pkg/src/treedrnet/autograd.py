"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape` whenever
one of their operands requires a gradient::

    tape = Tape()
    with tape:
        loss = sum_all(relu(linear(x, w, b)))
    backward(loss, tape)

Outside of a tape every operation is a plain forward computation, which is how
inference runs. :func:`backward` consumes the tape: after it returns the tape
is cleared and gradients have been accumulated into ``.grad`` of every leaf
tensor with ``requires_grad=True``.
"""
import threading

import numpy as np

from . import _kernels


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class UsageError(ValueError):
    """An operation was called outside of its contract."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "__weakref__")

    def __init__(self, data, requires_grad=False, grad=None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if any(s < 1 for s in arr.shape):
            raise DimensionError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        if grad is not None and grad.shape != arr.shape:
            raise DimensionError(f"grad shape {grad.shape} != data shape {arr.shape}")
        self.grad = grad

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def item(self):
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("out", "inputs", "grad_fn")

    def __init__(self, out, inputs, grad_fn):
        self.out = out
        self.inputs = inputs
        self.grad_fn = grad_fn


_local = threading.local()


def _stack():
    st = getattr(_local, "stack", None)
    if st is None:
        st = _local.stack = []
    return st


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, so the list is already
    topologically sorted.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def clear(self):
        self.nodes.clear()


def active_tape():
    st = _stack()
    return st[-1] if st else None


def _record(out_data, inputs, grad_fn):
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.nodes.append(_Node(out, inputs, grad_fn))
    return out


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shape {a.shape} does not match shape {b.shape}")


# ---------------------------------------------------------------------------
# operations


def linear(x, weight, bias):
    """``x @ weight + bias`` for ``x`` of shape (batch, in_dim)."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"linear: input shape {x.shape} incompatible with weight shape {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise DimensionError(f"linear: bias shape {bias.shape} incompatible with weight shape {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd + bias.data

    def grad_fn(g):
        return g @ wd.T, xd.T @ g, g.sum(axis=0)

    return _record(out, (x, weight, bias), grad_fn)


def relu(x):
    k = _kernels.active
    xd = np.ascontiguousarray(x.data)
    return _record(k.relu(xd), (x,), lambda g: (k.relu_grad(xd, np.ascontiguousarray(g)),))


def sigmoid(x):
    k = _kernels.active
    s = k.sigmoid(np.ascontiguousarray(x.data))
    return _record(s, (x,), lambda g: (k.sigmoid_grad(s, np.ascontiguousarray(g)),))


def neg(x):
    return _record(-x.data, (x,), lambda g: (-g,))


def elementwise(x, kind):
    try:
        fn = {"relu": relu, "sigmoid": sigmoid, "neg": neg}[kind]
    except KeyError:
        raise UsageError(f"unknown elementwise kind {kind!r}") from None
    return fn(x)


def add(a, b):
    _same_shape(a, b, "add")
    return _record(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    _same_shape(a, b, "sub")
    return _record(a.data - b.data, (a, b), lambda g: (g, -g))


def hadamard(a, b):
    _same_shape(a, b, "hadamard")
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def combine(a, b, kind):
    try:
        fn = {"add": add, "sub": sub, "hadamard": hadamard}[kind]
    except KeyError:
        raise UsageError(f"unknown combine kind {kind!r}") from None
    return fn(a, b)


def scale(x, factor):
    factor = float(factor)
    return _record(x.data * factor, (x,), lambda g: (g * factor,))


def mean_over(xs):
    """Pointwise mean of a non-empty list of equally shaped tensors."""
    xs = list(xs)
    if not xs:
        raise UsageError("mean_over needs at least one tensor")
    for t in xs[1:]:
        _same_shape(xs[0], t, "mean_over")
    n = len(xs)
    if n == 1:
        # still a node so the output is a distinct tensor
        return _record(xs[0].data.copy(), (xs[0],), lambda g: (g,))
    total = xs[0].data.copy()
    for t in xs[1:]:
        total += t.data
    inv = 1.0 / n
    return _record(total * inv, tuple(xs), lambda g: tuple(g * inv for _ in range(n)))


def sum_all(x):
    shape = x.shape
    return _record(np.array([x.data.sum()]), (x,), lambda g: (np.full(shape, g[0]),))


def concat(xs, axis=-1):
    xs = list(xs)
    if not xs:
        raise UsageError("concat needs at least one tensor")
    datas = [t.data for t in xs]
    try:
        out = np.concatenate(datas, axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {[t.shape for t in xs]}: {exc}") from None
    bounds = np.cumsum([d.shape[axis] for d in datas])[:-1]
    return _record(out, tuple(xs), lambda g: tuple(np.split(g, bounds, axis=axis)))


def conv1d_k1(covariates, filt):
    """Width-1 convolution: per-timestep weighted sum over the covariate axis.

    ``covariates`` is (t, d) or (batch, t, d); ``filt`` is (d,).
    """
    cd, fd = covariates.data, filt.data
    if fd.ndim != 1 or cd.ndim not in (2, 3) or cd.shape[-1] != fd.shape[0]:
        raise DimensionError(f"conv1d_k1: filter shape {filt.shape} incompatible with covariates {covariates.shape}")
    out = cd @ fd

    def grad_fn(g):
        gc = g[..., None] * fd
        gf = np.tensordot(g, cd, axes=(tuple(range(g.ndim)), tuple(range(g.ndim))))
        return gc, gf

    return _record(out, (covariates, filt), grad_fn)


def mse_loss(pred, target):
    _same_shape(pred, target, "mse_loss")
    diff = pred.data - target.data
    n = diff.size
    return _record(np.array([np.mean(diff * diff)]), (pred, target), lambda g: (g[0] * 2.0 / n * diff, -g[0] * 2.0 / n * diff))


def pinball_loss(pred, target, quantiles):
    """Mean pinball loss averaged over ``quantiles`` for a point forecast."""
    _same_shape(pred, target, "pinball_loss")
    qs = np.atleast_1d(np.asarray(quantiles, dtype=np.float64))
    if np.any((qs <= 0.0) | (qs >= 1.0)):
        raise UsageError(f"quantiles must lie in (0, 1), got {qs.tolist()}")
    diff = target.data - pred.data
    n = diff.size
    vals = [np.mean(np.where(diff > 0, q * diff, (q - 1.0) * diff)) for q in qs]
    # d/dpred of q*max(d,0) + (1-q)*max(-d,0), averaged over quantiles
    dpred = np.mean([np.where(diff > 0, -q, np.where(diff < 0, 1.0 - q, 0.0)) for q in qs], axis=0) / n
    return _record(np.array([np.mean(vals)]), (pred, target), lambda g: (g[0] * dpred, -g[0] * dpred))


# ---------------------------------------------------------------------------


def backward(loss, tape):
    """Populate ``.grad`` of every requires-grad leaf reachable from ``loss``.

    Leaf gradients accumulate (``+=``), so callers zero them between steps.
    The tape is cleared afterwards.
    """
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise UsageError("loss does not depend on any tensor that requires grad")
    grads = {id(loss): np.ones(loss.shape)}
    produced = {id(node.out) for node in tape.nodes}
    if id(loss) not in produced:
        raise UsageError("loss was not recorded on this tape")
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.grad_fn(g)):
            if not inp.requires_grad:
                continue
            key = id(inp)
            if key in produced:
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
            elif inp.grad is not None:
                inp.grad += gi
            else:
                inp.grad = np.array(gi, dtype=np.float64, copy=True).reshape(inp.shape)
    tape.clear()

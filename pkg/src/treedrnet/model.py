"""TreeDRNet: doubly residual MLP stacks, gated multi-branch blocks, tree aggregation.

The forward pass is built from three layers of structure:

* :func:`dres_forward` runs a stack of FC blocks. Each block emits a backcast,
  subtracted from its input to form the next block's input, and a forecast,
  added to the running forecast.
* :func:`multibranch_forward` feeds sigmoid-gated copies of its input through
  several independent DRes stacks and averages their backcasts and forecasts.
* :func:`tree_forward` arranges multi-branch blocks as a binary tree: every
  node's backcast is the input of its two children, each tree layer's forecasts
  are averaged, and the layer averages are summed into the prediction.

All parameters of a model live in one flat float64 vector (and a matching flat
gradient vector); the per-layer tensors are views into it. That keeps the
optimizer and checkpoint code trivial.
"""
import json
import math
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, fields

import numpy as np

from .autograd import (
    Tensor,
    add,
    concat,
    conv1d_k1,
    hadamard,
    linear,
    mean_over,
    relu,
    sigmoid,
    sub,
    DimensionError,
)

VARIANTS = ("full", "woF", "woE", "woT", "no_residual", "parallel")


class ConfigError(ValueError):
    """A model configuration violates one or more structural constraints."""


@dataclass
class ModelConfig:
    input_len: int = 96
    output_len: int = 96
    hidden_dim: int = 128
    fc_layers_per_block: int = 2
    dres_blocks: int = 3
    branches: int = 4
    tree_depth: int = 2
    gating_layers: int = 1
    variant: str = "full"
    covariate_dim: int = 0
    seed: int = 0

    def validate(self):
        problems = []
        for name in ("input_len", "output_len", "hidden_dim", "fc_layers_per_block", "dres_blocks",
                     "branches", "tree_depth", "gating_layers"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                problems.append(f"{name} must be an integer >= 1 (got {value!r})")
        if not isinstance(self.covariate_dim, (int, np.integer)) or self.covariate_dim < 0:
            problems.append(f"covariate_dim must be an integer >= 0 (got {self.covariate_dim!r})")
        if self.variant not in VARIANTS:
            problems.append(f"variant must be one of {VARIANTS} (got {self.variant!r})")
        if self.variant == "woE" and self.branches != 1:
            problems.append(f"variant 'woE' requires branches == 1 (got {self.branches})")
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    @property
    def block_width(self):
        """Width of the vector entering the root node (lookback plus covariate series)."""
        return self.input_len * (2 if self.covariate_dim else 1)

    @property
    def dres_variant(self):
        return self.variant if self.variant in ("no_residual", "parallel") else "full"

    @property
    def gated(self):
        return self.variant != "woF"

    @property
    def node_count(self):
        return self.tree_depth if self.variant == "woT" else 2**self.tree_depth - 1

    def node_keys(self):
        if self.variant == "woT":
            return [(i, 1) for i in range(1, self.tree_depth + 1)]
        return [(i, j) for i in range(1, self.tree_depth + 1) for j in range(1, 2 ** (i - 1) + 1)]

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def param_count(cfg):
    """Closed-form number of scalar parameters of a model built from ``cfg``."""
    W, H, O = cfg.block_width, cfg.hidden_dim, cfg.output_len
    n, g = cfg.fc_layers_per_block, cfg.gating_layers
    trunk = (W * H + H) + (n - 1) * (H * H + H)
    block = trunk + (H * W + W) + (H * O + O)
    gate = (W * H + H) + (g - 1) * (H * H + H) + (H * W + W) if cfg.gated else 0
    return cfg.node_count * cfg.branches * (cfg.dres_blocks * block + gate) + cfg.covariate_dim


@dataclass
class DResBlockParams:
    fc: list  # [(weight, bias), ...]
    backcast_head: tuple
    forecast_head: tuple


@dataclass
class GateParams:
    hidden: list  # ReLU layers [(weight, bias), ...]
    out: tuple  # projection back to the block width, followed by a sigmoid


@dataclass
class MultiBranchParams:
    gates: list  # GateParams per branch, or None per branch when ungated
    dres_stacks: list  # list of DResBlockParams per branch


class TreeDRNetModel:
    """A TreeDRNet with all parameters held in one flat vector."""

    def __init__(self, config, flat=None):
        self.config = config.validate()
        self._specs = []
        self._layout()
        n = sum(int(np.prod(shape)) for _, shape, _ in self._specs)
        if n != param_count(config):  # pragma: no cover - guards the layout code
            raise AssertionError(f"layout allocated {n} parameters, formula says {param_count(config)}")
        self.flat = np.zeros(n)
        self.flat_grad = np.zeros(n)
        self._tensors = {}
        offset = 0
        for name, shape, _ in self._specs:
            size = int(np.prod(shape))
            t = Tensor.__new__(Tensor)
            t.data = self.flat[offset:offset + size].reshape(shape)
            t.grad = self.flat_grad[offset:offset + size].reshape(shape)
            t.requires_grad = True
            self._tensors[name] = t
            offset += size
        if flat is None:
            self._initialize()
        else:
            flat = np.asarray(flat, dtype=np.float64)
            if flat.shape != self.flat.shape:
                raise DimensionError(f"parameter vector has shape {flat.shape}, model needs {self.flat.shape}")
            self.flat[:] = flat
        self._assemble()

    # -- layout -------------------------------------------------------------

    def _add(self, name, shape, fan_in):
        self._specs.append((name, tuple(int(s) for s in shape), fan_in))
        return name

    def _layout(self):
        c = self.config
        W, H, O = c.block_width, c.hidden_dim, c.output_len
        for i, j in c.node_keys():
            for b in range(c.branches):
                pre = f"node{i}.{j}.branch{b}"
                if c.gated:
                    width = W
                    for k in range(c.gating_layers):
                        self._add(f"{pre}.gate.fc{k}.weight", (width, H), width)
                        self._add(f"{pre}.gate.fc{k}.bias", (H,), None)
                        width = H
                    self._add(f"{pre}.gate.out.weight", (H, W), H)
                    self._add(f"{pre}.gate.out.bias", (W,), None)
                for blk in range(c.dres_blocks):
                    bp = f"{pre}.dres{blk}"
                    width = W
                    for k in range(c.fc_layers_per_block):
                        self._add(f"{bp}.fc{k}.weight", (width, H), width)
                        self._add(f"{bp}.fc{k}.bias", (H,), None)
                        width = H
                    self._add(f"{bp}.backcast.weight", (H, W), H)
                    self._add(f"{bp}.backcast.bias", (W,), None)
                    self._add(f"{bp}.forecast.weight", (H, O), H)
                    self._add(f"{bp}.forecast.bias", (O,), None)
        if c.covariate_dim:
            self._add("covariate_filter", (c.covariate_dim,), c.covariate_dim)

    def _initialize(self):
        rng = np.random.default_rng(self.config.seed)
        for name, shape, fan_in in self._specs:
            if fan_in is None:
                continue  # biases stay zero
            bound = 1.0 / math.sqrt(fan_in)
            self._tensors[name].data[...] = rng.uniform(-bound, bound, size=shape)

    def _assemble(self):
        c, T = self.config, self._tensors
        self.nodes = {}
        for i, j in c.node_keys():
            gates, stacks = [], []
            for b in range(c.branches):
                pre = f"node{i}.{j}.branch{b}"
                if c.gated:
                    hidden = [(T[f"{pre}.gate.fc{k}.weight"], T[f"{pre}.gate.fc{k}.bias"])
                              for k in range(c.gating_layers)]
                    gates.append(GateParams(hidden, (T[f"{pre}.gate.out.weight"], T[f"{pre}.gate.out.bias"])))
                else:
                    gates.append(None)
                stack = []
                for blk in range(c.dres_blocks):
                    bp = f"{pre}.dres{blk}"
                    stack.append(DResBlockParams(
                        fc=[(T[f"{bp}.fc{k}.weight"], T[f"{bp}.fc{k}.bias"]) for k in range(c.fc_layers_per_block)],
                        backcast_head=(T[f"{bp}.backcast.weight"], T[f"{bp}.backcast.bias"]),
                        forecast_head=(T[f"{bp}.forecast.weight"], T[f"{bp}.forecast.bias"]),
                    ))
                stacks.append(stack)
            self.nodes[(i, j)] = MultiBranchParams(gates, stacks)
        self.covariate_filter = T.get("covariate_filter")

    # -- parameters ---------------------------------------------------------

    def named_parameters(self):
        return [(name, self._tensors[name]) for name, _, _ in self._specs]

    def parameters(self):
        return [self._tensors[name] for name, _, _ in self._specs]

    @property
    def num_params(self):
        return self.flat.size

    def zero_grad(self):
        self.flat_grad[:] = 0.0

    def summary(self):
        c = self.config
        return {
            "variant": c.variant,
            "nodes": c.node_count,
            "gating_networks": c.node_count * c.branches if c.gated else 0,
            "dres_stacks": c.node_count * c.branches,
            "block_width": c.block_width,
            "parameters": self.num_params,
        }

    # -- forward ------------------------------------------------------------

    def input_tensor(self, x, covariates=None):
        """Root-node input: the lookback window, with the filtered covariate series appended."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        c = self.config
        if x.data.ndim != 2 or x.shape[1] != c.input_len:
            raise DimensionError(f"expected input of shape (batch, {c.input_len}), got {x.shape}")
        if not c.covariate_dim:
            if covariates is not None:
                raise DimensionError("model was built without covariates")
            return x
        if covariates is None:
            raise DimensionError(f"model expects covariates of shape (batch, {c.input_len}, {c.covariate_dim})")
        cov = covariates if isinstance(covariates, Tensor) else Tensor(covariates)
        if cov.shape != (x.shape[0], c.input_len, c.covariate_dim):
            raise DimensionError(
                f"covariates shape {cov.shape} != ({x.shape[0]}, {c.input_len}, {c.covariate_dim})")
        return concat([x, covariate_transform(cov, self.covariate_filter)], axis=1)

    def forward(self, x, covariates=None, trace=None):
        return tree_forward(self.input_tensor(x, covariates), self, trace=trace)

    __call__ = forward

    def predict(self, x, covariates=None, batch_size=1024):
        """Numpy-in, numpy-out inference (nothing is recorded)."""
        x = np.asarray(x, dtype=np.float64)
        out = np.empty((x.shape[0], self.config.output_len))
        for s in range(0, x.shape[0], batch_size):
            cov = None if covariates is None else covariates[s:s + batch_size]
            out[s:s + batch_size] = self.forward(x[s:s + batch_size], cov).data
        return out


def build_model(config):
    """Allocate and initialize a model; deterministic in ``config.seed``."""
    return TreeDRNetModel(config)


# ---------------------------------------------------------------------------
# forward algorithms


def _fc_chain(x, layers):
    h = x
    for w, b in layers:
        h = relu(linear(h, w, b))
    return h


def gate_forward(x, gate):
    """Sigmoid mask with the same shape as ``x``."""
    h = _fc_chain(x, gate.hidden)
    return sigmoid(linear(h, *gate.out))


def dres_forward(x, params, variant="full"):
    """Run a DRes stack; returns ``(backcast_residual, forecast_sum)``."""
    if not params:
        raise DimensionError("dres_forward needs at least one block")
    width = params[0].backcast_head[0].shape[1]
    if x.data.ndim != 2 or x.shape[1] != width:
        raise DimensionError(f"dres_forward: input shape {x.shape} does not match block width {width}")
    cur, forecast, backcasts = x, None, []
    for blk in params:
        h = _fc_chain(x if variant == "parallel" else cur, blk.fc)
        xhat = linear(h, *blk.backcast_head)
        yhat = linear(h, *blk.forecast_head)
        forecast = yhat if forecast is None else add(forecast, yhat)
        if variant == "full":
            cur = sub(cur, xhat)
        elif variant == "no_residual":
            cur = xhat
        elif variant == "parallel":
            backcasts.append(xhat)
        else:
            raise ValueError(f"unknown DRes variant {variant!r}")
    if variant == "parallel":
        total = backcasts[0]
        for b in backcasts[1:]:
            total = add(total, b)
        cur = sub(x, total)
    return cur, forecast


def multibranch_forward(X, params, variant="full"):
    """Gated multi-branch block; returns ``(bc, fc)`` averaged over branches."""
    if not params.dres_stacks:
        raise DimensionError("multibranch_forward needs at least one branch")
    dres_variant = variant if variant in ("no_residual", "parallel") else "full"
    bcs, fcs = [], []
    for gate, stack in zip(params.gates, params.dres_stacks):
        Xi = X if (variant == "woF" or gate is None) else hadamard(X, gate_forward(X, gate))
        B, F = dres_forward(Xi, stack, dres_variant)
        bcs.append(B)
        fcs.append(F)
    return mean_over(bcs), mean_over(fcs)


def tree_forward(x, model, trace=None, block=multibranch_forward):
    """Tree aggregation of multi-branch blocks.

    ``trace``, when a dict, receives ``(i, j) -> (input, bc, fc)`` for every
    node. ``block`` replaces the per-node computation (used to test wiring).
    """
    c = model.config
    if x.data.ndim != 2 or x.shape[1] != c.block_width:
        raise DimensionError(f"tree_forward: input shape {x.shape}, expected (batch, {c.block_width})")

    def run(key, inp):
        bc, fc = block(inp, model.nodes[key], c.variant)
        if trace is not None:
            trace[key] = (inp, bc, fc)
        return bc, fc

    layer_fcs = []
    if c.variant == "woT":
        cur = x
        for i in range(1, c.tree_depth + 1):
            cur, fc = run((i, 1), cur)
            layer_fcs.append(fc)
    else:
        bc, fc = run((1, 1), x)
        parents = [bc]
        layer_fcs.append(fc)
        for i in range(2, c.tree_depth + 1):
            bcs, fcs = [], []
            for j in range(1, 2 ** (i - 1) + 1):
                bc, fc = run((i, j), parents[(j + 1) // 2 - 1])
                bcs.append(bc)
                fcs.append(fc)
            layer_fcs.append(mean_over(fcs))
            parents = bcs
    pred = layer_fcs[0]
    for fc in layer_fcs[1:]:
        pred = add(pred, fc)
    return pred


def covariate_transform(covariates, filt):
    """Collapse (…, t, d) covariates to a (…, t) series with a width-1 convolution."""
    return conv1d_k1(covariates, filt)


# ---------------------------------------------------------------------------
# checkpoints

_MAGIC = b"TREEDRNT"
FORMAT_VERSION = 1


def save_checkpoint(model, path):
    """Write config + flat parameters atomically (temp file, then rename)."""
    header = json.dumps({
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "num_params": int(model.num_params),
        "dtype": "<f8",
    }, sort_keys=True).encode("utf-8")
    payload = model.flat.astype("<f8", copy=False).tobytes()
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".ckpt-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<IQ", FORMAT_VERSION, len(header)))
            fh.write(header)
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:len(_MAGIC)] != _MAGIC:
        raise ValueError(f"{path}: not a TreeDRNet checkpoint")
    version, hlen = struct.unpack_from("<IQ", blob, len(_MAGIC))
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    start = len(_MAGIC) + struct.calcsize("<IQ")
    header = json.loads(blob[start:start + hlen].decode("utf-8"))
    flat = np.frombuffer(blob, dtype="<f8", offset=start + hlen)
    if flat.size != header["num_params"]:
        raise ValueError(f"{path}: truncated checkpoint ({flat.size} of {header['num_params']} values)")
    return TreeDRNetModel(ModelConfig.from_dict(header["config"]), flat=flat.astype(np.float64))

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .autograd import UsageError


@dataclass
class AdamState:
    size: int
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.m is None:
            self.m = np.zeros(self.size)
        if self.v is None:
            self.v = np.zeros(self.size)
        if self.m.shape != (self.size,) or self.v.shape != (self.size,):
            raise UsageError(f"moment buffers must have shape ({self.size},)")


def adam_step(params, grads, state):
    """Bias-corrected Adam update of the flat vector ``params``, in place."""
    if params.ndim != 1 or grads.shape != params.shape or params.size != state.size:
        raise UsageError(
            f"adam_step: params {params.shape}, grads {grads.shape} and state size {state.size} must agree"
        )
    state.step += 1
    _kernels.active.adam_update(
        params, grads, state.m, state.v, state.lr, state.beta1, state.beta2, state.eps, float(state.step)
    )
    return params, state

"""SGD and Adam updates, applied uniformly to weights, biases and projections.

Parameter and moment buffers are owned by exactly one trainer stage and are
updated in place; gradients are read-only. Scratch arrays used inside a step
are transient numpy temporaries and are not part of the tracked memory model.
"""

from __future__ import annotations

import numpy as np

from .matrix import DenseMatrix, ShapeError, zeros


class AdamState:
    """First/second moments and step count for one parameter tensor."""

    def __init__(self, param: DenseMatrix):
        self.m = zeros(param.rows, param.cols, param.precision)
        self.v = zeros(param.rows, param.cols, param.precision)
        self.t = 0


def sgd_step(param: DenseMatrix, grad: DenseMatrix, lr: float) -> DenseMatrix:
    """param <- param - lr * grad, in place."""
    if param.shape != grad.shape:
        raise ShapeError(f"sgd_step: {param.shape} vs {grad.shape}")
    param.data -= param.data.dtype.type(lr) * grad.data
    return param


def adam_step(
    param: DenseMatrix,
    grad: DenseMatrix,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[DenseMatrix, AdamState]:
    """Bias-corrected Adam update, in place on param and state.

    The correction factors are folded into the step size
    (lr * sqrt(1-beta2^t) / (1-beta1^t), with eps rescaled to match), which
    is algebraically the textbook update but needs a single scratch buffer.
    """
    if param.shape != grad.shape:
        raise ShapeError(f"adam_step: {param.shape} vs {grad.shape}")
    dt = param.data.dtype.type
    state.t += 1
    g = grad.data
    m, v = state.m.data, state.v.data
    bc2 = np.sqrt(1.0 - beta2 ** state.t)
    step = lr * bc2 / (1.0 - beta1 ** state.t)
    tmp = g * dt(1 - beta1)
    m *= dt(beta1)
    m += tmp
    np.multiply(g, g, out=tmp)
    tmp *= dt(1 - beta2)
    v *= dt(beta2)
    v += tmp
    np.sqrt(v, out=tmp)
    tmp += dt(eps * bc2)
    np.divide(m, tmp, out=tmp)
    tmp *= dt(step)
    param.data -= tmp
    return param, state


class Updater:
    """Dispatches sgd/adam and lazily creates Adam state per parameter slot."""

    def __init__(self, kind: str, lr: float):
        if kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {kind!r}")
        self.kind = kind
        self.lr = lr

    def step(self, holder, slot: str, param: DenseMatrix, grad: DenseMatrix):
        if self.kind == "sgd":
            sgd_step(param, grad, self.lr)
            return
        state = getattr(holder, slot)
        if state is None:
            state = AdamState(param)
            setattr(holder, slot, state)
        adam_step(param, grad, state, self.lr)

"""SGD and Adam kernels over :class:`ParamVector`."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .params import LayoutMismatchError, ParamVector


@dataclass
class OptimizerState:
    kind: str = "sgd"
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray | None = field(default=None, repr=False)
    v: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")

    def to_dict(self):
        return {"kind": self.kind, "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
                "eps": self.eps, "step": self.step}


def _check(params, grad):
    if params.layout != grad.layout:
        raise LayoutMismatchError("gradient layout does not match parameters")


def _finite(values, what):
    if not np.all(np.isfinite(values)):
        raise FloatingPointError(f"{what} produced non-finite parameters")


def sgd_step(state, params, grad):
    _check(params, grad)
    out = params.values - state.lr * grad.values
    _finite(out, "sgd_step")
    state.step += 1
    return ParamVector(out, params.layout)


def adam_step(state, params, grad):
    if state.kind != "adam":
        raise ValueError("adam_step needs an adam optimizer state")
    _check(params, grad)
    g = grad.values
    if state.m is None:
        state.m = np.zeros_like(g)
        state.v = np.zeros_like(g)
    elif state.m.shape != g.shape:
        raise LayoutMismatchError("optimizer moments do not match gradient layout")
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    out = params.values - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    _finite(out, "adam_step")
    return ParamVector(out, params.layout)


def step(state, params, grad):
    """Dispatch on ``state.kind``."""
    if state.kind == "adam":
        return adam_step(state, params, grad)
    return sgd_step(state, params, grad)

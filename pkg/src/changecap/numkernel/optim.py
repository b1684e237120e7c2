"""Adam with bias correction and global-norm gradient clipping."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_param(cls, param, **hyper):
        return cls(np.zeros(param.shape), np.zeros(param.shape), **hyper)


def adam_update(param, grad, state):
    """Apply one Adam step to ``param.data`` in place and advance ``state``."""
    if grad.shape != param.data.shape or state.m.shape != param.data.shape:
        raise ShapeError(f"adam_update: param {param.data.shape}, grad {grad.shape}, "
                         f"moments {state.m.shape}")
    state.t += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grad
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * (grad * grad)
    denom = np.sqrt(state.v / (1.0 - state.beta2 ** state.t))
    denom += state.eps
    param.data -= (state.lr / (1.0 - state.beta1 ** state.t)) * state.m / denom
    return param, state


def clip_grad_norm(params, max_norm):
    """Rescale grads so their joint L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    total = float(np.sqrt(sum(float((p.grad ** 2).sum()) for p in params if p.grad is not None)))
    if max_norm is not None and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


@dataclass
class Adam:
    params: list
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    states: list = field(default_factory=list)

    def __post_init__(self):
        self.states = [AdamState.for_param(p, lr=self.lr, beta1=self.beta1,
                                           beta2=self.beta2, eps=self.eps) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        for p, s in zip(self.params, self.states):
            grad = p.grad if p.grad is not None else np.zeros(p.shape)
            adam_update(p, grad, s)

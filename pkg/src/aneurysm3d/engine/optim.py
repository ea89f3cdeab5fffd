"""Adam with bias correction."""

from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from ..errors import ShapeMismatch


@dataclass
class AdamState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], **kw) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **kw)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState, lr: float) -> AdamState:
    """Update ``params`` in place and advance ``state``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeMismatch("params, grads and Adam moments differ in length")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeMismatch(f"Adam shape mismatch: param {p.shape}, grad {g.shape}, moment {m.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        p -= update.astype(p.dtype, copy=False)
    return state


class Adam:
    """Optimizer over a module's ``Parameter`` objects."""

    def __init__(self, parameters, lr=5e-4, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.parameters = list(parameters)
        self.lr = lr
        self.state = AdamState.for_params(
            [p.value for p in self.parameters], beta1=beta1, beta2=beta2, epsilon=epsilon
        )

    def step(self):
        adam_step([p.value for p in self.parameters], [p.grad for p in self.parameters], self.state, self.lr)

    def zero_grad(self):
        for p in self.parameters:
            p.grad[...] = 0

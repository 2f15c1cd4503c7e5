"""AdamW with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ContractError, ShapeError
from .tensor import Tensor


@dataclass
class AdamWState:
    lr: float = 1e-2
    wd: float = 2e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


class AdamW:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-2, wd: float = 2e-2,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        if len({id(p) for p in self.params}) != len(self.params):
            raise ContractError("a parameter was passed to the optimizer twice")
        self.state = AdamWState(lr=lr, wd=wd, beta1=beta1, beta2=beta2, eps=eps,
                                m=[np.zeros_like(p.data) for p in self.params],
                                v=[np.zeros_like(p.data) for p in self.params])

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        # an unused parameter counts as zero gradient: it still decays
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        adamw_step(self.params, grads, self.state)


def adamw_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamWState) -> None:
    """One in-place AdamW update.

    Decay is applied to the weights first (``p <- p - lr*wd*p``), then the
    bias-corrected adaptive step uses the gradient alone.
    """
    if len(params) != len(grads) or len(state.m) != len(params):
        raise ContractError("params, grads and optimizer state differ in length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            raise ContractError(f"parameter {i} (shape {p.shape}) has no gradient")
        if g.shape != p.shape or state.m[i].shape != p.shape:
            raise ShapeError(f"gradient/state shape mismatch for parameter {i}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        p.data *= 1.0 - state.lr * state.wd
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)

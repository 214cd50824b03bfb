from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor], lr: float, **kw) -> "AdamState":
        return cls(
            lr=lr,
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
            **kw,
        )


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState) -> None:
    """One bias-corrected Adam update, in place on ``params``."""
    if len(params) != len(state.m):
        raise ValueError(f"adam_step: {len(params)} params but state tracks {len(state.m)}")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            raise ValueError(f"adam_step: parameter {i} has no gradient")
        if g.shape != p.shape or state.m[i].shape != p.shape:
            raise ValueError(f"adam_step: shape mismatch {p.shape} vs {g.shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None

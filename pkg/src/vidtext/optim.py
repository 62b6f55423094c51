"""AdamW with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class AdamWState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def init(self, params: dict[str, Tensor]) -> "AdamWState":
        for name, p in params.items():
            self.m.setdefault(name, np.zeros_like(p.data))
            self.v.setdefault(name, np.zeros_like(p.data))
        return self


def optimizer_step(
    params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamWState
) -> dict[str, Tensor]:
    """Apply one AdamW update in place and return ``params``.

    ``grads`` is keyed like ``params``; a missing entry counts as a zero
    gradient (weight decay still applies).
    """
    state.init(params)
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        m, v = state.m[name], state.v[name]
        if m.shape != p.data.shape:
            raise ValueError(f"moment shape {m.shape} does not match parameter {name} {p.shape}")
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay:
            p.data *= p.data.dtype.type(1.0 - state.lr * state.weight_decay)
        p.data -= (state.lr * update).astype(p.data.dtype, copy=False)
    return params

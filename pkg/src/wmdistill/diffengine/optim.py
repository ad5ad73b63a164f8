"""Adam with bias correction over a :class:`NetworkParams` store."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .params import NetworkParams


class MissingGradientError(RuntimeError):
    pass


@dataclass
class OptimizerState:
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: NetworkParams, state: OptimizerState, names: list[str] | None = None,
              allow_missing: bool = False) -> None:
    """One Adam update of every trainable parameter, then clear its gradient.

    ``names`` restricts the update to a subset.  A trainable parameter with
    no gradient is an error unless ``allow_missing`` is set (e.g. a branch
    that did not participate in this step's loss).
    """
    b1, b2 = state.betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    selected = names if names is not None else [n for n, p in params.items() if p.requires_grad]
    for name in selected:
        p = params[name]
        g = p.grad
        if g is None:
            if allow_missing:
                continue
            raise MissingGradientError(f"parameter '{name}' has no gradient")
        g = g.astype(np.float64)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros(p.shape, dtype=np.float64)
            v = np.zeros(p.shape, dtype=np.float64)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - update).astype(p.dtype)
        p.grad = None

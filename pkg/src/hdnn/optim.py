"""Adam optimiser."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError(f"betas must be in [0, 1), got {self.beta1}, {self.beta2}")
        if self.eps <= 0:
            raise ValueError(f"eps must be > 0, got {self.eps}")
        if self.lr < 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")

    def hyperparameters(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "t": self.t}


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState) -> None:
    """One Adam update, applied to ``params`` in place.

    Every parameter must have a gradient of the same shape. Moment buffers
    are created lazily as zeros.
    """
    if params.keys() != grads.keys():
        missing = sorted(set(params) ^ set(grads))
        raise ValueError(f"params and grads disagree on names: {missing}")
    for k in params:
        if grads[k].shape != params[k].shape:
            raise ValueError(f"gradient shape {grads[k].shape} != parameter shape {params[k].shape} for {k!r}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for k, g in grads.items():
        if k not in state.m:
            state.m[k] = np.zeros_like(params[k])
            state.v[k] = np.zeros_like(params[k])
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * (g * g)
        state.m[k], state.v[k] = m, v
        m_hat = m / bc1
        v_hat = v / bc2
        params[k] = params[k] - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)

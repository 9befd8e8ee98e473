"""Adadelta with a step-size multiplier."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdadeltaState:
    """Running averages of squared gradients and squared updates per parameter."""

    rho: float = 0.95
    eps: float = 1e-6
    lr: float = 0.5
    sq_grad: dict = field(default_factory=dict)
    sq_update: dict = field(default_factory=dict)

    def copy(self):
        return AdadeltaState(self.rho, self.eps, self.lr,
                             {k: v.copy() for k, v in self.sq_grad.items()},
                             {k: v.copy() for k, v in self.sq_update.items()})


def adadelta_step(params, grads, state):
    """Apply one update; returns ``(new_params, new_state)``.

    Parameters without an entry in ``grads`` are carried over untouched.
    Accumulators are created lazily as zeros shaped like their parameter.
    """
    rho, eps, lr = state.rho, state.eps, state.lr
    new_params = dict(params)
    sq_grad = dict(state.sq_grad)
    sq_update = dict(state.sq_update)
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name!r} {p.shape}")
        eg = sq_grad.get(name)
        ed = sq_update.get(name)
        if eg is None:
            eg = np.zeros_like(p)
            ed = np.zeros_like(p)
        eg = rho * eg + (1 - rho) * (g * g)
        delta = -(np.sqrt(ed + eps) / np.sqrt(eg + eps)) * g
        ed = rho * ed + (1 - rho) * (delta * delta)
        new_params[name] = p + lr * delta
        sq_grad[name] = eg
        sq_update[name] = ed
    return new_params, AdadeltaState(rho, eps, lr, sq_grad, sq_update)

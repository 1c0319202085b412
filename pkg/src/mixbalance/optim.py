"""Adam with L2-coupled weight decay, per-group learning rates, exponential decay."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in parameter {name!r}")
        self.name = name


def lr_at_epoch(base_lr: float, gamma: float, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return base_lr * gamma**epoch


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
              lr, weight_decay: float = 0.0) -> None:
    """One bias-corrected Adam update, in place.

    ``lr`` is a float or a mapping name -> float. Every gradient is checked
    before any parameter moves, so a rejected step leaves params untouched.
    """
    for name in params:
        g = grads.get(name)
        if g is not None and not np.isfinite(g).all():
            raise NonFiniteGradientError(name)
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if weight_decay:
            g = g + p.dtype.type(weight_decay) * p.data
        dt = p.dtype.type
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = dt(b1) * m + dt(1 - b1) * g
        v = dt(b2) * v + dt(1 - b2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        step_lr = lr[name] if isinstance(lr, dict) else lr
        m_hat = m / dt(corr1)
        v_hat = v / dt(corr2)
        p.data = p.data - dt(step_lr) * m_hat / (np.sqrt(v_hat) + dt(state.eps))


class Adam:
    """Adam over named parameter groups, each with its own base learning rate."""

    def __init__(self, groups: list[dict], weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.groups = groups
        self.weight_decay = weight_decay
        self.state = AdamState(beta1=betas[0], beta2=betas[1], eps=eps)
        for g in groups:
            g.setdefault("base_lr", g["lr"])

    def named_params(self) -> dict[str, Tensor]:
        out = {}
        for g in self.groups:
            out.update(g["params"])
        return out

    def set_epoch(self, epoch: int, gamma: float) -> None:
        for g in self.groups:
            g["lr"] = lr_at_epoch(g["base_lr"], gamma, epoch)

    def zero_grad(self) -> None:
        for p in self.named_params().values():
            p.grad = None

    def step(self) -> None:
        params = self.named_params()
        lrs = {name: g["lr"] for g in self.groups for name in g["params"]}
        grads = {name: p.grad for name, p in params.items()}
        adam_step(params, grads, self.state, lrs, self.weight_decay)

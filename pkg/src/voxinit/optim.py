"""AdamW and momentum SGD over a name -> Tensor parameter table."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from voxinit.autodiff import Tensor


class NumericalError(FloatingPointError):
    """A non-finite value appeared where training cannot continue."""


@dataclass
class OptimizerState:
    lr: float
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    momentum: float = 0.0
    step: int = 0
    exp_avg: dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: dict[str, np.ndarray] = field(default_factory=dict)
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def _check_finite(name: str, g: np.ndarray) -> None:
    if not np.all(np.isfinite(g)):
        raise NumericalError(f"non-finite gradient in parameter {name!r}")


class AdamW:
    """Adam with bias correction and decoupled weight decay."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        if lr < 0:
            raise ValueError(f"learning rate must be non-negative, got {lr}")
        self.params = params
        self.state = OptimizerState(lr=lr, betas=tuple(betas), eps=eps, weight_decay=weight_decay)
        for name, p in params.items():
            self.state.exp_avg[name] = np.zeros_like(p.data)
            self.state.exp_avg_sq[name] = np.zeros_like(p.data)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        st = self.state
        for name, p in self.params.items():
            if p.grad is not None:
                _check_finite(name, p.grad)
        st.step += 1
        b1, b2 = st.betas
        bc1 = 1.0 - b1 ** st.step
        bc2 = 1.0 - b2 ** st.step
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = st.exp_avg[name], st.exp_avg_sq[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if st.weight_decay:
                p.data *= p.data.dtype.type(1.0 - st.lr * st.weight_decay)
            update = (m / bc1) / (np.sqrt(v / bc2) + st.eps)
            p.data -= (st.lr * update).astype(p.dtype, copy=False)


class SGD:
    """Plain or heavy-ball momentum SGD with coupled weight decay."""

    def __init__(self, params: dict[str, Tensor], lr: float = 0.01, momentum: float = 0.99,
                 weight_decay: float = 0.0):
        if lr < 0:
            raise ValueError(f"learning rate must be non-negative, got {lr}")
        self.params = params
        self.state = OptimizerState(lr=lr, momentum=momentum, weight_decay=weight_decay)
        for name, p in params.items():
            self.state.velocity[name] = np.zeros_like(p.data)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        st = self.state
        for name, p in self.params.items():
            if p.grad is not None:
                _check_finite(name, p.grad)
        st.step += 1
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad + st.weight_decay * p.data if st.weight_decay else p.grad
            vel = st.velocity[name]
            vel *= st.momentum
            vel += g
            p.data -= (st.lr * vel).astype(p.dtype, copy=False)


def make_optimizer(kind: str, params: dict[str, Tensor], lr: float, **kw):
    if kind == "adamw":
        return AdamW(params, lr=lr, **kw)
    if kind == "sgd":
        return SGD(params, lr=lr, **kw)
    raise ValueError(f"unknown optimizer {kind!r} (expected 'adamw' or 'sgd')")

"""AdamW and plain SGD over a name -> Parameter mapping."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import StateError
from .core import Parameter


def _require_grads(params) -> None:
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise StateError(f"missing gradient for {len(missing)} parameter(s), e.g. {missing[0]!r}")


def sgd_step(params: dict[str, Parameter], lr: float) -> None:
    """In-place ``value <- value - lr * grad``."""
    _require_grads(params)
    for p in params.values():
        p.data -= lr * p.grad


@dataclass
class AdamW:
    """Adam with decoupled weight decay.

    Decay shrinks the value directly (``value *= 1 - lr * weight_decay``)
    before the moment-based update; it never enters the moments.
    """

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    kind = "adamw"

    def step(self, params: dict[str, Parameter]) -> None:
        _require_grads(params)
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in params.items():
            g = p.grad
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def reset(self) -> None:
        self.t = 0
        self.m.clear()
        self.v.clear()


def zero_grad(params: dict[str, Parameter]) -> None:
    for p in params.values():
        p.grad = None


@dataclass
class SGD:
    lr: float = 1e-2

    kind = "sgd"

    def step(self, params: dict[str, Parameter]) -> None:
        sgd_step(params, self.lr)

    def reset(self) -> None:
        pass

"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import kinks
from .core import Tensor, no_grad


class GradcheckResult(NamedTuple):
    max_rel_error: float
    checked: int
    skipped: int


def gradcheck(
    fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    h: float = 1e-5,
    max_coords: int = 10_000,
    abs_floor: float = 1e-8,
    seed: int = 0,
) -> GradcheckResult:
    """Compare analytic gradients of the scalar ``fn()`` with respect to
    ``tensors`` against central differences.

    Every coordinate is checked unless there are more than ``max_coords``,
    in which case a seeded random subsample of that size is used.
    Coordinates whose +/-h perturbation changes any ReLU sign or pooling
    argmax are skipped, since the function is not differentiable there.
    The per-coordinate error is ``|a - n| / max(|a|, |n|, abs_floor)``.
    """
    for t in tensors:
        t.grad = None
    with kinks.recording() as sig:
        out = fn()
    base = sig.digest()
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]

    sizes = [t.data.size for t in tensors]
    total = sum(sizes)
    if total > max_coords:
        flat = np.sort(np.random.default_rng(seed).choice(total, size=max_coords, replace=False))
    else:
        flat = np.arange(total)
    offsets = np.cumsum([0] + sizes)

    worst = 0.0
    checked = skipped = 0
    with no_grad():
        for f in flat:
            k = int(np.searchsorted(offsets, f, side="right") - 1)
            t = tensors[k]
            idx = np.unravel_index(int(f - offsets[k]), t.shape)
            orig = t.data[idx]
            t.data[idx] = orig + h
            with kinks.recording() as sp:
                fp = fn().item()
            t.data[idx] = orig - h
            with kinks.recording() as sm:
                fm = fn().item()
            t.data[idx] = orig
            if sp.digest() != base or sm.digest() != base:
                skipped += 1
                continue
            num = (fp - fm) / (2.0 * h)
            a = float(analytic[k][idx])
            err = abs(a - num) / max(abs(a), abs(num), abs_floor)
            worst = max(worst, err)
            checked += 1
    return GradcheckResult(worst, checked, skipped)

"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


class NonFiniteOutputError(FloatingPointError):
    pass


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    worst_param: str | None = None
    worst_index: tuple[int, ...] | None = None
    n_checked: int = 0


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f()`` with central differences.

    ``f`` is a zero-argument closure over ``params``; entries are perturbed
    in place and restored bit-exactly.  The relative error of each entry is
    ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    for p in params:
        p.grad = None
        p.requires_grad = True
    root = f()
    if not np.isfinite(root.data).all():
        raise NonFiniteOutputError("f() is non-finite at the base point")
    root.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    worst_param = None
    worst_index = None
    n = 0
    for pi, p in enumerate(params):
        label = p.name or f"param[{pi}]"
        flat = p.data.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = float(f().data)
            flat[j] = orig - h
            fm = float(f().data)
            flat[j] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteOutputError(f"f() became non-finite while perturbing {label}")
            num = (fp - fm) / (2.0 * h)
            a = analytic[pi].reshape(-1)[j]
            rel = abs(a - num) / max(abs(a), abs(num), 1e-8)
            n += 1
            if rel > worst:
                worst = rel
                worst_param = label
                worst_index = tuple(int(i) for i in np.unravel_index(j, p.shape)) if p.shape else ()
    return GradCheckReport(worst, worst <= tol, worst_param, worst_index, n)

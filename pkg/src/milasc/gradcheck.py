"""Central finite-difference gradient checking."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .nn import Module


class NonFiniteError(ArithmeticError):
    """Loss evaluated to NaN or Inf."""


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    skipped: int = 0

    def __float__(self):
        return self.max_rel_error


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    """|a - n| / max(|a|, |n|, floor).

    ``floor`` keeps exactly-zero gradients (e.g. a conv bias feeding a
    train-mode batch norm) from turning round-off noise into a huge
    relative number.
    """
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(f: Callable[[], float], x: np.ndarray, analytic: np.ndarray, h: float = 1e-5,
               coords: Sequence[int] | None = None,
               pattern: Callable[[], list] | None = None,
               floor: float | None = None) -> GradCheckResult:
    """Compare ``analytic`` with central differences of ``f`` w.r.t. ``x``.

    ``x`` is perturbed in place (and restored); ``f`` must read it. When
    ``pattern`` is given it is called right after each evaluation of ``f``,
    and probes whose two sides disagree (a ReLU flips, a max changes
    winner) are skipped rather than reported.

    Central differences carry round-off of roughly ``eps * |f| / h``, so by
    default gradients smaller than ``1e-5 * max(1, |f(x)|)`` are compared
    on that absolute scale instead of relative to themselves.
    """
    flat = x.reshape(-1)
    if not np.shares_memory(flat, x):
        raise ValueError("x must be a contiguous array so it can be perturbed in place")
    ga = np.asarray(analytic, dtype=np.float64).reshape(-1)
    if ga.shape != flat.shape:
        raise ValueError(f"analytic gradient shape {analytic.shape} != {x.shape}")
    if floor is None:
        f0 = f()
        if not np.isfinite(f0):
            raise NonFiniteError("non-finite loss at the probe point")
        floor = 1e-5 * max(1.0, abs(f0))
    idx = range(flat.size) if coords is None else coords
    worst, checked, skipped = 0.0, 0, 0
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        pp = pattern() if pattern else None
        flat[i] = orig - h
        fm = f()
        pm = pattern() if pattern else None
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"non-finite loss while probing coordinate {i}")
        if pattern and not _same_pattern(pp, pm):
            skipped += 1
            continue
        num = (fp - fm) / (2.0 * h)
        worst = max(worst, relative_error(ga[i], num, floor))
        checked += 1
    return GradCheckResult(worst, checked, skipped)


def _same_pattern(a, b) -> bool:
    return len(a) == len(b) and all(np.array_equal(u, v) for u, v in zip(a, b))


@dataclass
class LayerCheck:
    """Gradient check of one module under a fixed random projection."""

    results: dict[str, GradCheckResult] = field(default_factory=dict)

    @property
    def max_rel_error(self) -> float:
        return max(r.max_rel_error for r in self.results.values())


def check_module(module: Module, x: np.ndarray, rng: np.random.Generator, h: float = 1e-5,
                 max_coords: int | None = None, floor: float | None = None) -> LayerCheck:
    """Check d/dx and d/dparam of ``sum(module(x) * R)`` for random ``R``."""
    x = np.ascontiguousarray(x, dtype=np.float64).copy()
    out = module.forward(x)
    proj = rng.standard_normal(out.shape)
    module.zero_grad()
    dx = module.backward(proj)
    analytic = {"input": dx}
    analytic.update({name: g.copy() for name, _, g in module.named_parameters()})
    targets = {"input": x}
    targets.update({name: p for name, p, _ in module.named_parameters()})

    def f():
        return float(np.sum(module.forward(x) * proj))

    report = LayerCheck()
    for name, arr in targets.items():
        coords = None
        if max_coords is not None and arr.size > max_coords:
            coords = rng.choice(arr.size, size=max_coords, replace=False)
        report.results[name] = grad_check(f, arr, analytic[name], h=h, coords=coords,
                                          pattern=module.pattern, floor=floor)
    return report

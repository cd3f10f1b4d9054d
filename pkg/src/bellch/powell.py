"""Powell's direction-set minimizer with golden-section line searches.

Derivative free, tolerant of noisy objectives: every evaluated point is
tracked, and the best one seen is returned even if the iteration stalls.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

GOLD = (math.sqrt(5.0) - 1.0) / 2.0  # 0.618...
GROW = 1.0 + GOLD


@dataclass
class PowellResult:
    x: np.ndarray
    fun: float
    iterations: int
    evaluations: int
    converged: bool


class _Tracked:
    """Counts evaluations and remembers the best point."""

    def __init__(self, func: Callable[[np.ndarray], float]):
        self.func = func
        self.n = 0
        self.best_x: np.ndarray | None = None
        self.best_f = math.inf

    def __call__(self, x: np.ndarray) -> float:
        self.n += 1
        f = float(self.func(x))
        if f < self.best_f:
            self.best_f = f
            self.best_x = np.array(x, dtype=float)
        return f


def bracket(f: Callable[[float], float], step: float, f0: float, max_iter: int = 50):
    """Find a < b < c (in step units along a line) with f(b) <= f(a), f(c).

    Returns ``(a, b, c, fb)`` or ``None`` when the function keeps decreasing
    for ``max_iter`` golden expansions.
    """
    a, fa = 0.0, f0
    b = step
    fb = f(b)
    if fb > fa:
        a, b, fa, fb = b, a, fb, fa
    c = b + GROW * (b - a)
    fc = f(c)
    for _ in range(max_iter):
        if fc >= fb:
            lo, hi = (a, c) if a < c else (c, a)
            return lo, b, hi, fb
        a, fa, b, fb = b, fb, c, fc
        c = b + GROW * (b - a)
        fc = f(c)
    return None


def golden_section(f: Callable[[float], float], a: float, b: float, c: float, fb: float, xtol: float):
    """Golden-section search for the minimum of ``f`` in [a, c] given interior b."""
    x0, x3 = a, c
    if abs(c - b) > abs(b - a):
        x1, f1 = b, fb
        x2 = b + (1.0 - GOLD) * (c - b)
        f2 = f(x2)
    else:
        x2, f2 = b, fb
        x1 = b - (1.0 - GOLD) * (b - a)
        f1 = f(x1)
    while abs(x3 - x0) > xtol * (abs(x1) + abs(x2) + 1e-12) and abs(x3 - x0) > xtol:
        if f2 < f1:
            x0, x1, x2 = x1, x2, GOLD * x2 + (1.0 - GOLD) * x3
            f1, f2 = f2, f(x2)
        else:
            x3, x2, x1 = x2, x1, GOLD * x1 + (1.0 - GOLD) * x0
            f2, f1 = f1, f(x1)
    return (x1, f1) if f1 < f2 else (x2, f2)


def line_minimize(func, x: np.ndarray, fx: float, direction: np.ndarray, step: float, xtol: float):
    def along(t: float) -> float:
        return func(x + t * direction)

    found = bracket(along, step, fx)
    if found is None:
        return x, fx
    a, b, c, fb = found
    t, ft = golden_section(along, a, b, c, fb, xtol)
    if ft < fx:
        return x + t * direction, ft
    return x, fx


def powell_minimize(
    func: Callable[[np.ndarray], float],
    x0,
    *,
    step: float = 0.1,
    ftol: float = 1e-6,
    xtol: float = 1e-4,
    max_iter: int = 50,
) -> PowellResult:
    """Minimize ``func`` from ``x0`` by Powell's conjugate direction method.

    Stops when one sweep over all directions improves the objective by less
    than ``ftol`` or after ``max_iter`` sweeps. The returned point is the
    best one ever evaluated.
    """
    f = _Tracked(func)
    x = np.array(x0, dtype=float)
    n = x.size
    dirs = [row.copy() for row in np.eye(n)]
    fx = f(x)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        x_start, f_start = x.copy(), fx
        biggest_drop, biggest_idx = 0.0, 0
        for i, d in enumerate(dirs):
            f_before = fx
            x, fx = line_minimize(f, x, fx, d, step, xtol)
            if f_before - fx > biggest_drop:
                biggest_drop, biggest_idx = f_before - fx, i
        if f_start - fx < ftol:
            converged = True
            break
        new_dir = x - x_start
        f_extra = f(x + new_dir)
        if f_extra < f_start:
            t = 2.0 * (f_start - 2.0 * fx + f_extra) * (f_start - fx - biggest_drop) ** 2
            if t < biggest_drop * (f_start - f_extra) ** 2:
                x, fx = line_minimize(f, x, fx, new_dir, 1.0, xtol)
                dirs[biggest_idx] = dirs[-1]
                dirs[-1] = new_dir
    return PowellResult(x=f.best_x, fun=f.best_f, iterations=it, evaluations=f.n, converged=converged)

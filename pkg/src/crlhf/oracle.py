"""Dense deterministic minimizers of the dual, used as ground truth.

One constraint: golden-section search on the convex dual value, then a
bisection polish on the sign of the exact derivative (the value alone cannot
resolve the minimizer below roughly sqrt(machine eps)). Two or more
constraints: coarse-to-fine grid search on the box.
"""

from __future__ import annotations

import itertools

import numpy as np

from .dual import DualFunction
from .exceptions import DomainError, NumericalError

INV_PHI = (np.sqrt(5.0) - 1.0) / 2.0


def golden_section(f, lo: float, hi: float, tol: float = 1e-9, max_iter: int = 500):
    """Minimize a unimodal function on [lo, hi]; returns the final bracket."""
    if not hi > lo:
        raise DomainError("golden-section bracket must satisfy lo < hi")
    c = hi - INV_PHI * (hi - lo)
    d = lo + INV_PHI * (hi - lo)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if hi - lo <= tol:
            break
        if fc <= fd:
            hi, d, fd = d, c, fc
            c = hi - INV_PHI * (hi - lo)
            fc = f(c)
        else:
            lo, c, fc = c, d, fd
            d = lo + INV_PHI * (hi - lo)
            fd = f(d)
    return lo, hi


def upper_bracket(dual: DualFunction, start: float = 1.0, limit: float = 1e8) -> float:
    """Smallest doubling of ``start`` where the dual derivative is nonnegative."""
    hi = start
    while dual.gradient(hi)[0] < 0:
        hi *= 2.0
        if hi > limit:
            raise NumericalError(
                f"dual derivative still negative at lambda = {hi:.3g}; the constraint looks infeasible"
            )
    return hi


def minimize_dual_1d(dual: DualFunction, upper: float = None, tol: float = 1e-9,
                     grad_tol: float = 1e-10) -> float:
    """Minimizer of a single-constraint dual over [0, upper] (upper found if omitted)."""
    if dual.num_constraints != 1:
        raise DomainError("minimize_dual_1d handles exactly one constraint")
    g0 = dual.gradient(0.0)[0]
    if g0 >= 0:
        return 0.0
    if upper is None:
        upper = upper_bracket(dual)
    elif not upper > 0:
        raise DomainError("upper bracket must be positive")
    if dual.gradient(upper)[0] <= 0:
        return float(upper)
    lo, hi = golden_section(lambda t: dual.value(t), 0.0, upper, tol=max(tol, 1e-6 * upper))
    # widen until the derivative changes sign inside the bracket
    lo = max(lo - (hi - lo), 0.0)
    hi = min(hi + (hi - lo), upper)
    while lo > 0 and dual.gradient(lo)[0] > 0:
        lo = max(lo - 2 * (hi - lo), 0.0)
    while hi < upper and dual.gradient(hi)[0] < 0:
        hi = min(hi + 2 * (hi - lo), upper)
    if dual.gradient(lo)[0] > 0 or dual.gradient(hi)[0] < 0:
        raise NumericalError("failed to bracket the dual minimizer")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        gm = dual.gradient(mid)[0]
        if abs(gm) <= grad_tol or hi - lo <= tol:
            return float(mid)
        if gm < 0:
            lo = mid
        else:
            hi = mid
    return float(0.5 * (lo + hi))


def minimize_dual_grid(dual: DualFunction, radius: float, spacing: float = 1e-3,
                       coarse_points: int = 41) -> np.ndarray:
    """Coarse-to-fine grid minimization over [0, radius]^m down to ``spacing``.

    Each level evaluates a ``coarse_points``-per-axis grid and zooms into the
    cells around the best point; valid because the dual is convex. The final
    level is a grid with exactly ``spacing`` between points.
    """
    m = dual.num_constraints
    lo = np.zeros(m)
    hi = np.full(m, float(radius))
    while True:
        final = np.all((hi - lo) / spacing + 1 <= coarse_points)
        if final:
            axes = [np.minimum(np.arange(lo[k], hi[k] + spacing / 2, spacing), radius) for k in range(m)]
        else:
            axes = [np.linspace(lo[k], hi[k], coarse_points) for k in range(m)]
        best, best_val = None, np.inf
        for point in itertools.product(*axes):
            p = np.array(point)
            v = dual.value(p)
            if v < best_val:
                best, best_val = p, v
        if final:
            return best
        step = (hi - lo) / (coarse_points - 1)
        lo = np.maximum(best - 2 * step, 0.0)
        hi = np.minimum(best + 2 * step, float(radius))


def minimize_dual(dual: DualFunction, radius: float = None, spacing: float = 1e-3) -> np.ndarray:
    """Ground-truth multiplier vector: exact 1-D search, or a dense grid for m >= 2."""
    if dual.num_constraints == 1:
        return np.array([minimize_dual_1d(dual, radius)])
    if radius is None:
        raise DomainError("grid minimization needs a radius")
    return minimize_dual_grid(dual, radius, spacing)

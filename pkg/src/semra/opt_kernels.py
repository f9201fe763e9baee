"""Numeric kernels shared by the precoder designs.

The EM precoder lives on a masked oblique manifold: block-diagonal matrices
with unit-norm columns.  Every routine here works on any matrix with
unit-norm columns, so it applies equally to the full (MK, M) block-diagonal
form and to its compact (K, M) form holding only the nonzero blocks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np


class RetractionError(ArithmeticError):
    pass


class BracketError(ArithmeticError):
    pass


@dataclass(frozen=True)
class ArmijoParams:
    initial_step: float = 1.0
    shrink: float = 0.5
    slope_coeff: float = 1e-4
    max_backtracks: int = 30

    def __post_init__(self):
        if not (self.initial_step > 0 and 0 < self.shrink < 1 and 0 < self.slope_coeff < 1
                and self.max_backtracks >= 0):
            raise ValueError(f"invalid Armijo parameters: {self}")


class ArmijoResult(NamedTuple):
    step: float
    point: object
    value: float


def riemannian_grad(lam: np.ndarray, euclid_grad: np.ndarray) -> np.ndarray:
    """Project a Euclidean gradient onto the oblique tangent space.

    ``G - Lam ddiag(Lam^T G)``; with a masked ``G`` the result stays masked.
    """
    radial = np.einsum("im,im->m", lam, euclid_grad)
    return euclid_grad - lam * radial[None, :]


def retract(lam: np.ndarray, step: float, direction: np.ndarray) -> np.ndarray:
    """Column-wise normalisation of ``lam + step * direction``."""
    cand = lam + step * direction
    norms = np.linalg.norm(cand, axis=0)
    if np.any(norms < 1e-300):
        raise RetractionError("retraction produced a zero column")
    return cand / norms[None, :]


def armijo_search(objective: Callable[[object], float], base_value: float,
                  directional_slope: float, stepper: Callable[[float], object],
                  params: ArmijoParams = ArmijoParams(),
                  predicted_decrease: Callable[[float, object], float] | None = None,
                  ) -> ArmijoResult:
    """Backtracking line search for a descent step.

    Tries ``t = initial_step * shrink**i`` and accepts the first candidate
    ``x = stepper(t)`` with ``base - objective(x) >= c1 * t * |slope|`` (or
    ``>= c1 * predicted_decrease(t, x)`` when given, e.g. for projected
    steps).  A non-negative slope or exhausted backtracking returns a zero
    step with ``point=None``; the caller then keeps its iterate.
    """
    fail = ArmijoResult(0.0, None, base_value)
    if not directional_slope < 0 or not math.isfinite(directional_slope):
        return fail
    t = params.initial_step
    for _ in range(params.max_backtracks + 1):
        cand = stepper(t)
        val = objective(cand)
        need = (params.slope_coeff * predicted_decrease(t, cand) if predicted_decrease
                else params.slope_coeff * t * abs(directional_slope))
        if math.isfinite(val) and base_value - val >= need and val <= base_value:
            return ArmijoResult(t, cand, val)
        t *= params.shrink
    return fail


def box_project(candidate: np.ndarray, center: np.ndarray, d_max: float) -> np.ndarray:
    """Nearest point of the planar box {x: x_1 = 0, |x_k - c_k| <= D_max}.

    Works row-wise on (..., 3) arrays.
    """
    x = np.array(candidate, dtype=float, copy=True)
    c = np.asarray(center, dtype=float)
    x[..., 0] = 0.0
    x[..., 1:] = np.clip(x[..., 1:], c[..., 1:] - d_max, c[..., 1:] + d_max)
    return x


def bisection_root(f: Callable[[float], float], target: float, tol: float = 1e-8,
                   max_doublings: int = 64, max_iter: int = 200) -> float:
    """Root of ``f(nu) = target`` for nonincreasing ``f`` with ``f(0) > target``.

    The upper bracket is found by doubling from 1; the interval is then
    halved until ``|f(nu) - target| <= tol * target``.
    """
    lo, hi = 0.0, 1.0
    n = 0
    while f(hi) > target:
        lo, hi = hi, 2 * hi
        n += 1
        if n > max_doublings:
            raise BracketError("no upper bracket for the bisection")
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        val = f(mid)
        if abs(val - target) <= tol * target:
            return mid
        if val > target:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-300 + 1e-16 * hi:
            break
    return hi

"""Real spherical-harmonic basis for reconfigurable radiation patterns.

Convention: orthonormal real spherical harmonics without the Condon-Shortley
phase, ordered lexicographically in (degree l, order m), m = -l..l, i.e. the
flat index is ``k = l*l + l + m``.  For m > 0 the function is
``sqrt(2) N_lm P_l^m(cos t) cos(m p)``, for m < 0 ``sqrt(2) N_l|m|
P_l^|m|(cos t) sin(|m| p)``, and ``N_l0 P_l(cos t)`` for m = 0.  A pattern
``f(t, p) = sum_k alpha_k w_k(t, p)`` with unit ``alpha`` has unit energy over
the sphere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np


class DegeneratePatternError(ValueError):
    pass


@dataclass(frozen=True)
class BasisSet:
    """Complete real SH basis up to degree ``sqrt(K) - 1``."""

    num_basis: int

    def __post_init__(self):
        if math.isqrt(self.num_basis) ** 2 != self.num_basis:
            raise ValueError(f"K must be a perfect square, got {self.num_basis}")

    @property
    def max_degree(self) -> int:
        return math.isqrt(self.num_basis) - 1

    @property
    def index_map(self) -> list[tuple[int, int]]:
        return [(l, m) for l in range(self.max_degree + 1) for m in range(-l, l + 1)]

    def __call__(self, theta, phi) -> np.ndarray:
        return eval_basis(theta, phi, self.num_basis)


def _normalized_legendre(lmax: int, x: np.ndarray) -> np.ndarray:
    """Orthonormal associated Legendre values, shape (lmax+1, lmax+1, *x.shape).

    ``out[l, m]`` holds ``N_lm P_l^m(x)`` (no Condon-Shortley phase) for
    m <= l, zeros elsewhere.  Standard three-term recursion in l.
    """
    s = np.sqrt(np.clip(1.0 - x * x, 0.0, None))
    out = np.zeros((lmax + 1, lmax + 1) + x.shape)
    out[0, 0] = 1.0 / np.sqrt(4 * np.pi)
    for m in range(1, lmax + 1):
        out[m, m] = np.sqrt((2 * m + 1) / (2 * m)) * s * out[m - 1, m - 1]
    for m in range(0, lmax):
        out[m + 1, m] = np.sqrt(2 * m + 3) * x * out[m, m]
    for m in range(0, lmax + 1):
        for l in range(m + 2, lmax + 1):
            a = np.sqrt((4 * l * l - 1) / (l * l - m * m))
            b = np.sqrt(((l - 1) ** 2 - m * m) / (4 * (l - 1) ** 2 - 1))
            out[l, m] = a * (x * out[l - 1, m] - b * out[l - 2, m])
    return out


def eval_basis(theta, phi, num_basis: int) -> np.ndarray:
    """Evaluate all ``num_basis`` real SH at (theta, phi).

    Broadcasts over the inputs; the basis index is the trailing axis.
    """
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    if np.any((theta < 0) | (theta > np.pi)) or not np.all(np.isfinite(theta)):
        raise ValueError("elevation must lie in [0, pi]")
    theta, phi = np.broadcast_arrays(theta, phi)
    lmax = math.isqrt(num_basis) - 1
    if (lmax + 1) ** 2 != num_basis:
        raise ValueError(f"K must be a perfect square, got {num_basis}")
    plm = _normalized_legendre(lmax, np.cos(theta))
    out = np.empty(theta.shape + (num_basis,))
    sq2 = np.sqrt(2.0)
    for l in range(lmax + 1):
        base = l * l + l
        out[..., base] = plm[l, 0]
        for m in range(1, l + 1):
            out[..., base + m] = sq2 * plm[l, m] * np.cos(m * phi)
            out[..., base - m] = sq2 * plm[l, m] * np.sin(m * phi)
    return out


def build_omega(aods, num_basis: int) -> np.ndarray:
    """Basis matrix with one row per (theta, phi) pair: shape (L, K)."""
    aods = np.asarray(aods, dtype=float).reshape(-1, 2)
    if aods.shape[0] == 0:
        return np.zeros((0, num_basis))
    return eval_basis(aods[:, 0], aods[:, 1], num_basis)


def pattern_gain(alpha, theta, phi) -> np.ndarray:
    """Signed amplitude gain of the pattern ``alpha`` toward (theta, phi)."""
    alpha = np.asarray(alpha, dtype=float)
    return eval_basis(theta, phi, alpha.shape[0]) @ alpha


# ---------------------------------------------------------------------------
# Quadrature and pattern projection
# ---------------------------------------------------------------------------
def sphere_quadrature(n_theta: int, n_phi: int):
    """Gauss-Legendre in cos(theta) times uniform trapezoid in phi.

    Returns flattened ``theta, phi, weights`` such that ``sum(w * f)``
    approximates the surface integral of ``f``.  Exact for band-limited
    integrands up to degree ``min(2 n_theta - 1, n_phi - 1)``.
    """
    x, wx = np.polynomial.legendre.leggauss(n_theta)
    theta = np.arccos(x)
    phi = 2 * np.pi * np.arange(n_phi) / n_phi
    T, P = np.meshgrid(theta, phi, indexing="ij")
    W = np.outer(wx, np.full(n_phi, 2 * np.pi / n_phi))
    return T.ravel(), P.ravel(), W.ravel()


def gram_matrix(num_basis: int, n_theta: int = 64, n_phi: int = 128) -> np.ndarray:
    t, p, w = sphere_quadrature(n_theta, n_phi)
    Y = eval_basis(t, p, num_basis)
    return (Y * w[:, None]).T @ Y


def _default_nodes(num_basis: int) -> tuple[int, int]:
    lmax = math.isqrt(num_basis) - 1
    # generous oversampling: target patterns are not band limited
    return max(4 * lmax + 8, 64), max(8 * lmax + 16, 128)


def project_pattern(f: Callable, num_basis: int, nodes: tuple[int, int] | None = None,
                    return_residual: bool = False):
    """Least-squares projection of a pattern onto the basis, normalised.

    ``f`` is called with broadcastable (theta, phi) arrays.  With
    ``return_residual`` the relative energy not captured by the truncated
    expansion, ``1 - |alpha_raw|^2 / |f|^2``, is returned as well.
    """
    n_t, n_p = nodes or _default_nodes(num_basis)
    t, p, w = sphere_quadrature(n_t, n_p)
    fv = np.asarray(f(t, p), dtype=float) * np.ones_like(t)
    Y = eval_basis(t, p, num_basis)
    raw = Y.T @ (w * fv)
    nrm = np.linalg.norm(raw)
    if not np.isfinite(nrm) or nrm < 1e-12:
        raise DegeneratePatternError("pattern has no energy in the basis span")
    alpha = raw / nrm
    if return_residual:
        energy = float(np.sum(w * fv * fv))
        return alpha, 1.0 - nrm**2 / energy
    return alpha


# ---------------------------------------------------------------------------
# Reference element patterns (amplitude, i.e. sqrt of the power pattern)
# ---------------------------------------------------------------------------
def _wrap_pi(phi):
    return (np.asarray(phi) + np.pi) % (2 * np.pi) - np.pi


def element_pattern_38901(theta, phi, tilt_deg: float = 0.0) -> np.ndarray:
    """Single-element TR 38.901 pattern (65 deg beams, 30 dB floor), amplitude.

    The boresight is the +x axis (theta = 90 deg, phi = 0); ``tilt_deg``
    steers it below the horizon (toward larger theta).
    """
    th = np.rad2deg(theta) - tilt_deg
    ph = np.rad2deg(_wrap_pi(phi))
    a_v = -np.minimum(12 * ((th - 90.0) / 65.0) ** 2, 30.0)
    a_h = -np.minimum(12 * (ph / 65.0) ** 2, 30.0)
    a_db = -np.minimum(-(a_v + a_h), 30.0)
    return np.sqrt(10 ** (a_db / 10))


def isotropic_pattern(theta, phi):
    return np.ones(np.broadcast(np.asarray(theta), np.asarray(phi)).shape)


def fixed_pattern_weights(name: str, num_basis: int) -> np.ndarray:
    """Unit-norm weights of a named fixed pattern: iso, 38901 or downtilt."""
    if name in ("iso", "isotropic"):
        alpha = np.zeros(num_basis)
        alpha[0] = 1.0
        return alpha
    if name == "38901":
        return project_pattern(element_pattern_38901, num_basis)
    if name == "downtilt":
        return project_pattern(lambda t, p: element_pattern_38901(t, p, tilt_deg=10.0),
                               num_basis)
    raise ValueError(f"unknown pattern {name!r}")

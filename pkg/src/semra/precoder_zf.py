"""ZF-based tri-domain alternating optimization.

Digital block: normalized-direction zero forcing with one Frobenius
normalization per subcarrier.  EM block: one Armijo-controlled step on the
masked oblique manifold per outer iteration.  Spatial block: cyclic
antenna-wise projected gradient steps on the sum SE.

The EM precoder is handled in its compact (K, M) form (column m holds
``alpha_m``); :func:`semra.channel.em_matrix` expands it to the (MK, M)
block-diagonal matrix when needed.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .channel import (LN2, EcsiModel, channels_from_ecsi, coupling, ecsi_at, sinr_and_se,
                      steering_conj)
from .em_basis import fixed_pattern_weights
from .opt_kernels import ArmijoParams, armijo_search, box_project, retract, riemannian_grad
from .scenario import ArrayGeometry


class RankDeficientError(np.linalg.LinAlgError):
    """Users whose channel directions are (numerically) linearly dependent."""


@dataclass(frozen=True)
class DesignSettings:
    """Loop controls shared by the ZF and WMMSE designers.

    ``position_step`` is the length of the first trial displacement of each
    spatial Armijo search (default ``lambda / 10``).
    """

    n_max: int = 10
    stop_tol: float = 1e-4
    optimize_em: bool = True
    optimize_positions: bool = True
    em_armijo: ArmijoParams = ArmijoParams()
    position_armijo: ArmijoParams = ArmijoParams()
    position_step: float | None = None
    spatial_tol: float = 1e-4
    spatial_max_cycles: int = 20
    bcd_tol: float = 1e-6
    bcd_max_passes: int = 100


@dataclass
class IterationRecord:
    iteration: int
    objective: float
    rate: float
    nu: float = 0.0
    timings: dict = field(default_factory=dict)


@dataclass
class ZfState:
    W: np.ndarray
    alphas: np.ndarray
    positions: np.ndarray
    R: float
    trace: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# Digital block
# ---------------------------------------------------------------------------
def zf_digital(H: np.ndarray, total_power: float, cond_limit: float = 1e12) -> np.ndarray:
    """Normalized-direction ZF precoders, shape (G, M, U).

    Each ``W_g`` has squared Frobenius norm ``total_power / G``.
    """
    U, G, M = H.shape
    if M < U:
        raise RankDeficientError(f"ZF needs M >= U (M={M}, U={U})")
    norms = np.linalg.norm(H, axis=2)
    if np.any(norms == 0):
        raise RankDeficientError("zero channel vector")
    Ht = (H / norms[:, :, None]).transpose(1, 2, 0)  # (G, M, U)
    gram = np.conj(Ht.transpose(0, 2, 1)) @ Ht
    if np.any(np.linalg.cond(gram) > cond_limit):
        raise RankDeficientError("channel directions are linearly dependent")
    Wt = Ht @ np.linalg.inv(gram)
    fro = np.linalg.norm(Wt, axis=(1, 2))
    return np.sqrt(total_power / G) * Wt / fro[:, None, None]


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------
def _power_terms(c2: np.ndarray, noise_var: float):
    sig = np.einsum("ugu->ug", c2)
    P = c2.sum(axis=2) + noise_var
    return sig, P, P - sig


def em_euclid_grad_zf(q: np.ndarray, alphas: np.ndarray, W: np.ndarray,
                      noise_var: float) -> np.ndarray:
    """Euclidean gradient of ``-R`` in the EM weights, compact (K, M) form.

    ``-(sum_{u,g} Gamma1 - Gamma2) / ln 2`` restricted to the block
    diagonal, with ``Gamma1`` built from all columns of ``W_g`` and
    ``Gamma2`` from all but the u-th.  ``q`` has shape (U, G, M, K).
    """
    U = q.shape[0]
    zeta = 1.0 / noise_var
    H = channels_from_ecsi(q, alphas)
    c = coupling(H, W)                                     # (U, G, U)
    cw = c[:, :, None, :] * np.conj(W)[None]               # (U, G, M, U)
    own = np.eye(U, dtype=bool)[:, None, None, :]
    full = cw.sum(axis=3)
    intf = np.where(own, 0, cw).sum(axis=3)
    c2 = np.abs(c) ** 2
    sig, P, I = _power_terms(c2, noise_var)
    den1 = 1 + zeta * (P - noise_var)
    den2 = 1 + zeta * (I - noise_var)
    qc = np.conj(q)
    gamma1 = 2 * zeta * np.real(np.einsum("ugmk,ugm->ugkm", qc, full / den1[:, :, None]))
    gamma2 = 2 * zeta * np.real(np.einsum("ugmk,ugm->ugkm", qc, intf / den2[:, :, None]))
    return -(gamma1 - gamma2).sum(axis=(0, 1)) / LN2


def se_kernel(H: np.ndarray, W: np.ndarray, noise_var: float) -> np.ndarray:
    """Sensitivities dR/dh*_{u,m,g}, returned as an array indexed [u, g, m]."""
    U = H.shape[0]
    c = coupling(H, W)
    c2 = np.abs(c) ** 2
    sig, P, I = _power_terms(c2, noise_var)
    sinr = sig / I
    own = np.eye(U, dtype=bool)[:, None, :]
    coef = np.where(own, 1.0 + 0j, -sinr[:, :, None]) * np.conj(c)   # (U, G, U)
    return np.einsum("ugl,gml->ugm", coef, W) / (LN2 * P[:, :, None])


def spatial_gradient(xi: np.ndarray, model: EcsiModel, alphas: np.ndarray,
                     positions: np.ndarray, m: int) -> np.ndarray:
    """``-(4 pi / lambda) Im{sum_{g,u} xi_{u,m,g} sum_i h*_{u,m,g,i} k_{tx,i,u}}``.

    ``xi`` is any kernel dF/dh* indexed [u, g, m]; the result is the real
    gradient of that F in ``p_m``.
    """
    ftx = np.einsum("ulk,k->ul", model.omega, alphas[:, m])
    bc = steering_conj(model, positions[m:m + 1])[:, 0, :]
    hpath = model.chi * (ftx * bc)[:, None, :]             # (U, G, L)
    acc = np.einsum("ug,ugl,uld->d", xi[:, :, m], hpath, model.ktx)
    return -(4 * np.pi / model.wavelength) * np.imag(acc)


def spatial_grad_R(H, W, noise_var, model, alphas, positions, m) -> np.ndarray:
    return spatial_gradient(se_kernel(H, W, noise_var), model, alphas, positions, m)


# ---------------------------------------------------------------------------
# Block steps shared with the WMMSE designer
# ---------------------------------------------------------------------------
def antenna_channel(model: EcsiModel, alpha_m: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Channel coefficients h_{u,g} of one antenna at position ``p``: (U, G)."""
    ftx = model.omega @ alpha_m
    bc = np.exp(2j * np.pi / model.wavelength * (model.ktx @ np.asarray(p)))
    return np.conj(np.matmul(model.chi, (ftx * bc)[:, :, None])[:, :, 0])


def em_manifold_step(value: Callable[[np.ndarray], float], egrad: np.ndarray,
                     alphas: np.ndarray, params: ArmijoParams) -> tuple[np.ndarray, float]:
    """One Armijo-controlled steepest-descent step on the oblique manifold.

    Minimizes ``value``; returns the new weights and their value (the input
    weights with their value when no step is accepted).
    """
    base = value(alphas)
    rgrad = riemannian_grad(alphas, egrad)
    slope = -float(np.sum(rgrad * rgrad))
    res = armijo_search(value, base, slope, lambda t: retract(alphas, t, -rgrad), params)
    if res.point is None:
        return alphas, base
    return res.point, res.value


def spatial_block(model: EcsiModel, alphas: np.ndarray, positions: np.ndarray,
                  geometry: ArrayGeometry, H: np.ndarray,
                  value: Callable[[np.ndarray], float],
                  kernel: Callable[[np.ndarray], np.ndarray],
                  settings: DesignSettings) -> tuple[np.ndarray, np.ndarray, float]:
    """Cyclic antenna-wise projected-gradient descent on ``value(H)``.

    ``kernel(H)`` returns dvalue/dh* indexed [u, g, m].  Each antenna takes
    one projected Armijo step per cycle; cycles stop once the relative
    decrease over a full cycle falls below ``settings.spatial_tol``.
    Returns the new positions, channels and value.
    """
    pos = np.array(positions, dtype=float, copy=True)
    H = np.array(H, copy=True)
    cur = value(H)
    if geometry.d_max <= 0:
        return pos, H, cur
    step0 = settings.position_step or model.wavelength / 10
    M = pos.shape[0]
    for _ in range(settings.spatial_max_cycles):
        start = cur
        for m in range(M):
            grad = spatial_gradient(kernel(H), model, alphas, pos, m)
            grad[0] = 0.0
            gn = float(np.linalg.norm(grad))
            if gn == 0 or not np.isfinite(gn):
                continue
            center, dmax = geometry.region(m)
            p0 = pos[m].copy()

            def candidate(t, p0=p0, grad=grad, center=center, dmax=dmax):
                return box_project(p0 - t * grad, center, dmax)

            def trial(p, m=m):
                Ht = H.copy()
                Ht[:, :, m] = antenna_channel(model, alphas[:, m], p)
                return value(Ht)

            params = dataclasses.replace(settings.position_armijo, initial_step=step0 / gn)
            res = armijo_search(trial, cur, -gn * gn, candidate, params,
                                predicted_decrease=lambda t, p, p0=p0, grad=grad:
                                float(grad @ (p0 - p)))
            if res.point is None or np.array_equal(res.point, p0):
                continue
            pos[m] = res.point
            H[:, :, m] = antenna_channel(model, alphas[:, m], res.point)
            cur = res.value
        if start - cur <= settings.spatial_tol * max(1.0, abs(start)):
            break
    return pos, H, cur


def initial_alphas(num_basis: int, num_antennas: int, pattern: str = "iso") -> np.ndarray:
    alpha = fixed_pattern_weights(pattern, num_basis)
    return np.repeat(alpha[:, None], num_antennas, axis=1)


# ---------------------------------------------------------------------------
# Outer loop
# ---------------------------------------------------------------------------
def run_zf_tridomain(model: EcsiModel, geometry: ArrayGeometry, total_power: float,
                     noise_var: float, settings: DesignSettings = DesignSettings(),
                     alphas0: np.ndarray | None = None,
                     positions0: np.ndarray | None = None) -> ZfState:
    """ZF-based tri-domain alternating optimization.

    Block order per outer iteration: channel update, ZF digital update, one
    EM manifold step, EM refresh, spatial inner loop, position refresh,
    objective.  Stops when the relative change of R is at most
    ``settings.stop_tol`` or after ``settings.n_max`` iterations.
    """
    M = geometry.num_antennas
    alphas = (initial_alphas(model.num_basis, M) if alphas0 is None
              else np.array(alphas0, dtype=float))
    pos = (geometry.reference_positions.copy() if positions0 is None
           else np.array(positions0, dtype=float))

    def rate(H, W):
        return sinr_and_se(H, W, noise_var)[1]

    q = ecsi_at(model, pos)
    H = channels_from_ecsi(q, alphas)
    W = zf_digital(H, total_power)
    R = rate(H, W)
    trace = [IterationRecord(0, -R, R)]
    for n in range(settings.n_max):
        t0 = time.perf_counter()
        q = ecsi_at(model, pos)
        H = channels_from_ecsi(q, alphas)
        W = zf_digital(H, total_power)
        t1 = time.perf_counter()
        if settings.optimize_em:
            Wf = W
            egrad = em_euclid_grad_zf(q, alphas, Wf, noise_var)
            alphas, _ = em_manifold_step(lambda a: -rate(channels_from_ecsi(q, a), Wf),
                                         egrad, alphas, settings.em_armijo)
            H = channels_from_ecsi(q, alphas)
            W = zf_digital(H, total_power)
        t2 = time.perf_counter()
        if settings.optimize_positions:
            Wf = W
            pos, H, _ = spatial_block(
                model, alphas, pos, geometry, H,
                value=lambda Hx: -rate(Hx, Wf),
                kernel=lambda Hx: -se_kernel(Hx, Wf, noise_var),
                settings=settings)
            q = ecsi_at(model, pos)
            H = channels_from_ecsi(q, alphas)
            W = zf_digital(H, total_power)
        t3 = time.perf_counter()
        R_new = rate(H, W)
        trace.append(IterationRecord(n + 1, -R_new, R_new, timings={
            "digital": t1 - t0, "em": t2 - t1, "spatial": t3 - t2}))
        done = abs(R_new - R) / max(1.0, abs(R)) <= settings.stop_tol
        R = R_new
        if done:
            break
    return ZfState(W=W, alphas=alphas, positions=pos, R=R, trace=trace)

"""WMMSE-based tri-domain alternating optimization and port-grid variants.

``F = sum_{u,g} rho_{u,g} eps_{u,g} - ln rho_{u,g}`` is minimized block by
block: closed-form (beta, rho, W) inner BCD, one EM manifold step, and
cyclic antenna-wise projected gradient steps on the positions.  Every block
is non-increasing in F.

Arrays follow the package layout: channels (U, G, M), precoders (G, M, U),
equalizers and weights (U, G).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .channel import EcsiModel, channels_from_ecsi, coupling, ecsi_at, sinr_and_se
from .opt_kernels import bisection_root
from .precoder_zf import (DesignSettings, IterationRecord, antenna_channel, em_manifold_step,
                          initial_alphas, spatial_block, spatial_gradient)
from .scenario import ArrayGeometry

RHO_FLOOR = 1e-12


@dataclass
class WmmseState:
    W: np.ndarray
    alphas: np.ndarray
    positions: np.ndarray
    beta: np.ndarray
    rho: np.ndarray
    F: float
    R: float
    lagrange_nu: float = 0.0
    trace: list = field(default_factory=list)
    # objective after every block, for monotonicity checks
    block_values: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# Auxiliary variables and objective
# ---------------------------------------------------------------------------
def mse(H: np.ndarray, W: np.ndarray, beta: np.ndarray, noise_var: float) -> np.ndarray:
    """Per-(u, g) MSE: distortion + interference + noise amplification."""
    U = H.shape[0]
    c = coupling(H, W)
    sc = np.conj(beta)[:, :, None] * c
    own = np.eye(U, dtype=bool)[:, None, :]
    dist = np.abs(np.einsum("ugu->ug", sc) - 1) ** 2
    intf = np.where(own, 0.0, np.abs(sc) ** 2).sum(axis=2)
    return dist + intf + noise_var * np.abs(beta) ** 2


def update_beta(H: np.ndarray, W: np.ndarray, noise_var: float) -> np.ndarray:
    """MMSE equalizers h^H w_u / (sum_l |h^H w_l|^2 + sigma^2)."""
    c = coupling(H, W)
    den = (np.abs(c) ** 2).sum(axis=2) + noise_var
    if np.any(den <= 0):
        raise FloatingPointError("MMSE receiver with vanishing channel and noise")
    return np.einsum("ugu->ug", c) / den


def update_rho(H: np.ndarray, W: np.ndarray, noise_var: float) -> np.ndarray:
    """MSE weights 1 + SINR from the current precoders."""
    sinr = sinr_and_se(H, W, noise_var)[0]
    return np.maximum(1.0 + sinr, RHO_FLOOR)


def wmmse_objective(H, W, beta, rho, noise_var) -> float:
    return float(np.sum(rho * mse(H, W, beta, noise_var) - np.log(rho)))


def weighted_mse(H, W, beta, rho, noise_var) -> float:
    """The part of F that depends on W, the EM weights and the positions."""
    return float(np.sum(rho * mse(H, W, beta, noise_var)))


# ---------------------------------------------------------------------------
# Digital precoder with the power constraint
# ---------------------------------------------------------------------------
def update_digital(H: np.ndarray, beta: np.ndarray, rho: np.ndarray, total_power: float,
                   tol: float = 1e-8, rank_tol: float = 1e-12) -> tuple[np.ndarray, float]:
    """Closed-form ``w = (Psi_g + nu I)^{-1} z`` with the multiplier ``nu``.

    ``Psi_g = B D B^H`` has rank at most U (``B`` stacks the channels as
    columns, ``D = diag(rho |beta|^2)``) and every ``z`` lies in its range, so
    the solve runs in the U x U eigenbasis of ``D^1/2 B^H B D^1/2``.
    ``nu = 0`` (pseudoinverse limit) when that already meets the budget,
    otherwise ``nu`` solves the power equality by bisection.  Returns
    ``(W, nu)``.
    """
    sa = np.sqrt(rho * np.abs(beta) ** 2).T                      # (G, U)
    A = np.einsum("ugm,vgm->guv", np.conj(H), H)                 # B^H B
    C = sa[:, :, None] * A * sa[:, None, :]
    C = 0.5 * (C + np.conj(C.transpose(0, 2, 1)))
    d, Q = np.linalg.eigh(C)
    d = np.clip(d, 0.0, None)
    live = d > rank_tol * max(float(d.max(initial=0.0)), 1e-300)
    rs = np.where(live, 1.0 / np.sqrt(np.where(live, d, 1.0)), 0.0)
    # eigen-coordinates of z: Lambda^-1/2 Q^H D^1/2 B^H B diag(rho beta)
    Zt = rs[:, :, None] * np.matmul(np.conj(Q.transpose(0, 2, 1)),
                                    sa[:, :, None] * A * (rho * beta).T[:, None, :])
    zmag = np.abs(Zt) ** 2                                       # (G, i, u)

    def power(nu: float) -> float:
        if nu == 0.0:
            inv2 = np.where(live, 1.0 / np.where(live, d, 1.0) ** 2, 0.0)
        else:
            inv2 = 1.0 / (d + nu) ** 2
        return float(np.sum(zmag * inv2[:, :, None]))

    p0 = power(0.0)
    if p0 <= total_power:
        nu = 0.0
        inv = np.where(live, 1.0 / np.where(live, d, 1.0), 0.0)
    else:
        nu = bisection_root(power, total_power, tol=tol)
        inv = 1.0 / (d + nu)
    # eigenvectors of Psi: B D^1/2 Q Lambda^-1/2
    coef = sa[:, :, None] * np.matmul(Q, (rs * inv)[:, :, None] * Zt)   # (G, U, u)
    W = np.matmul(H.transpose(1, 2, 0), coef)                    # (G, M, u)
    p = float(np.sum(np.abs(W) ** 2))
    if p > total_power:
        W = W * np.sqrt(total_power / p)
    return W, nu


def mrt_init(H: np.ndarray, total_power: float) -> np.ndarray:
    """Matched-filter precoders w_{u,g} = h_{u,g}, one global power scaling."""
    W = H.transpose(1, 2, 0).copy()
    p = float(np.sum(np.abs(W) ** 2))
    return W * np.sqrt(total_power / p) if p > 0 else W


def _within_budget(W: np.ndarray, total_power: float) -> np.ndarray:
    W = np.array(W, dtype=complex)
    p = float(np.sum(np.abs(W) ** 2))
    return W * np.sqrt(total_power / p) if p > total_power else W


def digital_inner_bcd(H: np.ndarray, W: np.ndarray, noise_var: float, total_power: float,
                      tol: float = 1e-6, max_passes: int = 100, values: list | None = None):
    """Cyclic (beta, rho) / W updates until F subconverges.

    The auxiliaries are refreshed last, so the returned F equals
    ``UG - ln2 R`` of the returned precoders.  With ``values`` given, F is
    appended after every sub-step.  Returns ``(W, beta, rho, nu, F)``.
    """
    beta = update_beta(H, W, noise_var)
    rho = update_rho(H, W, noise_var)
    F = wmmse_objective(H, W, beta, rho, noise_var)
    nu = 0.0
    if values is not None:
        values.append(F)
    for _ in range(max_passes):
        W_new, nu_new = update_digital(H, beta, rho, total_power)
        F_w = wmmse_objective(H, W_new, beta, rho, noise_var)
        if F_w > F:
            # rounding-level loss at a fixed point; keep the current precoder
            break
        W, nu = W_new, nu_new
        beta = update_beta(H, W, noise_var)
        rho = update_rho(H, W, noise_var)
        F_new = wmmse_objective(H, W, beta, rho, noise_var)
        if values is not None:
            values.extend([F_w, F_new])
        done = abs(F - F_new) <= tol * max(1.0, abs(F))
        F = F_new
        if done:
            break
    return W, beta, rho, nu, F


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------
def mse_kernel(H: np.ndarray, W: np.ndarray, beta: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """d(rho eps)/dh*_{u,m,g}, indexed [u, g, m]."""
    c = coupling(H, W)
    acc = np.einsum("ugl,gml->ugm", np.conj(c), W)
    own = np.einsum("gmu->ugm", W)
    return rho[:, :, None] * ((np.abs(beta) ** 2)[:, :, None] * acc
                              - np.conj(beta)[:, :, None] * own)


def em_euclid_grad_wmmse(q: np.ndarray, alphas: np.ndarray, W: np.ndarray,
                         beta: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """``2 Re{sum_{u,g} q_{u,g} xi_{u,g}^T}`` on the block diagonal, as (K, M)."""
    xi = mse_kernel(channels_from_ecsi(q, alphas), W, beta, rho)
    return 2 * np.real(np.einsum("ugmk,ugm->km", q, xi))


def spatial_grad_eps(H, W, beta, rho, model, alphas, positions, m) -> np.ndarray:
    return spatial_gradient(mse_kernel(H, W, beta, rho), model, alphas, positions, m)


# ---------------------------------------------------------------------------
# Discrete port grids
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class PortGrid:
    """Uniform N x N candidate positions inside every antenna's box.

    Port ``(iy, iz)`` of antenna m is ``p_m + (0, y_iy, z_iz)`` with
    ``y, z`` on ``linspace(-D_max, D_max, N)`` (the centre for N = 1); flat
    index ``iy * N + iz``.
    """

    size: int
    reference_positions: np.ndarray
    d_max: float

    @classmethod
    def for_geometry(cls, geometry: ArrayGeometry, size: int) -> "PortGrid":
        if size < 1:
            raise ValueError("port grid needs at least one port per axis")
        return cls(size, geometry.reference_positions, geometry.d_max)

    @property
    def offsets(self) -> np.ndarray:
        if self.size == 1:
            return np.zeros(1)
        return np.linspace(-self.d_max, self.d_max, self.size)

    def ports(self, m: int) -> np.ndarray:
        o = self.offsets
        oy, oz = np.meshgrid(o, o, indexing="ij")
        off = np.stack([np.zeros(oy.size), oy.ravel(), oz.ravel()], axis=1)
        return self.reference_positions[m] + off


def quantize_positions(positions: np.ndarray, grid: PortGrid) -> np.ndarray:
    """Nearest port per antenna; ties go to the smaller (iy, iz) index."""
    out = np.empty_like(np.asarray(positions, dtype=float))
    for m, p in enumerate(positions):
        ports = grid.ports(m)
        d2 = np.sum((ports - p) ** 2, axis=1)
        best = np.flatnonzero(d2 <= d2.min() * (1 + 1e-12) + 1e-30)[0]
        out[m] = ports[best]
    return out


def spatial_block_discrete(model: EcsiModel, alphas: np.ndarray, positions: np.ndarray,
                           H: np.ndarray, W: np.ndarray, beta: np.ndarray, rho: np.ndarray,
                           noise_var: float, total_power: float, grid: PortGrid,
                           max_cycles: int = 50):
    """Cyclic best-port sweep, each port scored with its optimal digital precoder.

    With (beta, rho) frozen, every candidate port of antenna m is scored by
    ``min_W F``, the closed-form digital update on the trial channel; the
    antenna keeps the minimizer.  A precoder frozen at the current port makes
    any jump of order ``D_max`` look worse, so the joint port/digital block is
    what lets the sweep leave its starting port.  The auxiliaries are
    refreshed once per cycle; the sweep stops when a cycle moves no antenna.
    Returns ``(positions, H, W, beta, rho, F)``.
    """
    pos = np.array(positions, dtype=float, copy=True)
    H = np.array(H, copy=True)

    def best_digital(Hx):
        Wx = update_digital(Hx, beta, rho, total_power)[0]
        return Wx, wmmse_objective(Hx, Wx, beta, rho, noise_var)

    F = wmmse_objective(H, W, beta, rho, noise_var)
    W_opt, F_opt = best_digital(H)
    if F_opt < F:
        W, F = W_opt, F_opt
    for _ in range(max_cycles):
        moved = False
        for m in range(pos.shape[0]):
            best = None
            for p in grid.ports(m):
                if np.array_equal(p, pos[m]):
                    continue
                Ht = H.copy()
                Ht[:, :, m] = antenna_channel(model, alphas[:, m], p)
                Wt, val = best_digital(Ht)
                if val < F - 1e-12 * max(1.0, abs(F)):
                    best, F = (p, Ht[:, :, m], Wt), val
            if best is not None:
                pos[m], H[:, :, m], W = best
                moved = True
        beta = update_beta(H, W, noise_var)
        rho = update_rho(H, W, noise_var)
        F = wmmse_objective(H, W, beta, rho, noise_var)
        if not moved:
            break
    return pos, H, W, beta, rho, F


# ---------------------------------------------------------------------------
# Outer loop
# ---------------------------------------------------------------------------
def run_wmmse_tridomain(model: EcsiModel, geometry: ArrayGeometry, total_power: float,
                        noise_var: float, settings: DesignSettings = DesignSettings(),
                        alphas0: np.ndarray | None = None,
                        positions0: np.ndarray | None = None,
                        port_grid: PortGrid | None = None,
                        W0: np.ndarray | None = None) -> WmmseState:
    """WMMSE-based tri-domain alternating optimization.

    Block order per outer iteration: channel update, digital inner BCD,
    one EM manifold step, digital refresh, spatial inner loop (continuous,
    or a best-port sweep when ``port_grid`` is given), objective update with
    a final inner BCD.  Stops on relative F change at most
    ``settings.stop_tol`` or after ``settings.n_max`` iterations.

    The precoder starts from MRT unless ``W0`` is given (scaled down to the
    budget if needed).  Since every block is non-increasing in F and
    ``F = UG - ln2 R`` after each inner BCD, the final R is at least the rate
    of the starting design.
    """
    M = geometry.num_antennas
    alphas = (initial_alphas(model.num_basis, M) if alphas0 is None
              else np.array(alphas0, dtype=float))
    pos = (geometry.reference_positions.copy() if positions0 is None
           else np.array(positions0, dtype=float))
    if port_grid is not None and settings.optimize_positions:
        pos = quantize_positions(pos, port_grid)

    def bcd(H, W):
        return digital_inner_bcd(H, W, noise_var, total_power, settings.bcd_tol,
                                 settings.bcd_max_passes)

    q = ecsi_at(model, pos)
    H = channels_from_ecsi(q, alphas)
    W = mrt_init(H, total_power) if W0 is None else _within_budget(W0, total_power)
    beta = update_beta(H, W, noise_var)
    rho = update_rho(H, W, noise_var)
    F = wmmse_objective(H, W, beta, rho, noise_var)
    nu = 0.0
    trace = [IterationRecord(0, F, sinr_and_se(H, W, noise_var)[1])]
    blocks = [F]
    for n in range(settings.n_max):
        t0 = time.perf_counter()
        q = ecsi_at(model, pos)
        H = channels_from_ecsi(q, alphas)
        W, beta, rho, nu, F_cur = bcd(H, W)
        blocks.append(F_cur)
        t1 = time.perf_counter()
        if settings.optimize_em:
            Wf, bf, rf = W, beta, rho
            egrad = em_euclid_grad_wmmse(q, alphas, Wf, bf, rf)
            alphas, _ = em_manifold_step(
                lambda a: weighted_mse(channels_from_ecsi(q, a), Wf, bf, rf, noise_var),
                egrad, alphas, settings.em_armijo)
            H = channels_from_ecsi(q, alphas)
            blocks.append(wmmse_objective(H, W, beta, rho, noise_var))
            W, beta, rho, nu, F_cur = bcd(H, W)
            blocks.append(F_cur)
        t2 = time.perf_counter()
        if settings.optimize_positions:
            Wf, bf, rf = W, beta, rho
            if port_grid is None:
                pos, H, _ = spatial_block(
                    model, alphas, pos, geometry, H,
                    value=lambda Hx: weighted_mse(Hx, Wf, bf, rf, noise_var),
                    kernel=lambda Hx: mse_kernel(Hx, Wf, bf, rf),
                    settings=settings)
            else:
                pos, H, W, beta, rho, _ = spatial_block_discrete(
                    model, alphas, pos, H, W, beta, rho, noise_var, total_power, port_grid)
            blocks.append(wmmse_objective(H, W, beta, rho, noise_var))
        t3 = time.perf_counter()
        q = ecsi_at(model, pos)
        H = channels_from_ecsi(q, alphas)
        W, beta, rho, nu, F_new = bcd(H, W)
        blocks.append(F_new)
        R = sinr_and_se(H, W, noise_var)[1]
        trace.append(IterationRecord(n + 1, F_new, R, nu, timings={
            "digital": t1 - t0, "em": t2 - t1, "spatial": t3 - t2,
            "refresh": time.perf_counter() - t3}))
        done = abs(F_new - F) / max(1.0, abs(F)) <= settings.stop_tol
        F = F_new
        if done:
            break
    R = sinr_and_se(H, W, noise_var)[1]
    return WmmseState(W=W, alphas=alphas, positions=pos, beta=beta, rho=rho, F=F, R=R,
                      lagrange_nu=nu, trace=trace, block_values=blocks)


def evaluate_design(model: EcsiModel, alphas: np.ndarray, positions: np.ndarray,
                    total_power: float, noise_var: float,
                    settings: DesignSettings = DesignSettings(),
                    W0: np.ndarray | None = None) -> WmmseState:
    """Digital-only WMMSE on fixed EM weights and positions (no re-optimization of either).

    The inner BCD starts from ``W0`` when given, otherwise from MRT.
    """
    H = channels_from_ecsi(ecsi_at(model, positions), alphas)
    W = mrt_init(H, total_power) if W0 is None else _within_budget(W0, total_power)
    W, beta, rho, nu, F = digital_inner_bcd(H, W, noise_var,
                                            total_power, settings.bcd_tol,
                                            settings.bcd_max_passes)
    R = sinr_and_se(H, W, noise_var)[1]
    return WmmseState(W=W, alphas=np.array(alphas), positions=np.array(positions), beta=beta,
                      rho=rho, F=F, R=R, lagrange_nu=nu)

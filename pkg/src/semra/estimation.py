"""Movement-aided parametric channel estimation and the EMRA baseline.

Pipeline per user: pilot normalization and stacking, MDL model order,
1D-ESPRIT delays, delay-domain LS recovery of the full-band sCSI at every
observation position, 2D-ESPRIT on the (virtual) UPA, principal-branch angle
recovery, LS equivalent gains, then eCSI assembly at arbitrary positions.

Sign conventions: the normalized uplink observation is the conjugate
downlink channel ``h*``, which carries ``exp(+j 2 pi tau f)`` along frequency
and ``exp(+j 2 pi / lambda k . p)`` along space.  Spatial frequencies are
reported as ``mu = kappa sin(theta) sin(phi)`` (phase step of ``h*`` along
+y) and ``nu = -kappa cos(theta)`` (minus the phase step along +z).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .channel import EcsiModel, direction_vector, ecsi_at, true_ecsi_model
from .em_basis import build_omega, fixed_pattern_weights
from .scenario import ArrayGeometry, PathSet, SystemConfig, build_geometry

log = logging.getLogger(__name__)


class EstimationError(ArithmeticError):
    pass


class ScheduleError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Observation layouts
# ---------------------------------------------------------------------------
SIGN_PATTERN = ((+1, +1), (+1, -1), (-1, +1), (-1, -1))


@dataclass(frozen=True)
class ObservationSchedule:
    """Observation positions of all antennas over the pilot slots.

    ``positions[m, s]`` is antenna m's position in slot s and
    ``virtual_index[m, s]`` its (iy, iz) cell on the ``grid_shape`` UPA with
    spacing ``grid_spacing``.  ``patterns[s]`` is the CE pattern used in
    slot s.  The SEMRA schedule moves the antennas with one fixed pattern;
    the EMRA layout keeps them still and switches patterns.
    """

    positions: np.ndarray
    virtual_index: np.ndarray
    grid_shape: tuple[int, int]
    grid_spacing: float
    patterns: np.ndarray
    d_min: float = 0.0
    displacements: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    smoothing_shrink: int = 2

    @property
    def num_slots(self) -> int:
        return self.positions.shape[1]

    @property
    def num_antennas(self) -> int:
        return self.positions.shape[0]

    def snapshot_groups(self) -> list[np.ndarray]:
        """Slots sharing a pattern, each group filling the whole grid once."""
        if np.allclose(self.patterns, self.patterns[:1]):
            return [np.arange(self.num_slots)]
        return [np.array([s]) for s in range(self.num_slots)]


def build_schedule(config: SystemConfig, geometry: ArrayGeometry,
                   alpha_ce: np.ndarray | None = None) -> ObservationSchedule:
    """SEMRA schedule: four +-d/4 offsets interleaving into a 2My x 2Mz virtual UPA."""
    d = config.spacing_y
    if not math.isclose(config.spacing_y, config.spacing_z, rel_tol=1e-12):
        raise ScheduleError("movement-aided CE needs equal spacings along y and z")
    d_min = d / 4
    if geometry.d_max < d_min * (1 - 1e-9):
        raise ScheduleError(f"D_max={geometry.d_max:g} m is below d/4={d_min:g} m")
    if config.num_slots != 4:
        raise ScheduleError("the virtual-array schedule uses exactly four slots")
    alpha_ce = fixed_pattern_weights("iso", config.num_basis) if alpha_ce is None else alpha_ce
    my, mz = geometry.grid_shape
    disp = np.array([[0.0, sy * d_min, sz * d_min] for sy, sz in SIGN_PATTERN])
    M = geometry.num_antennas
    pos = geometry.reference_positions[:, None, :] + disp[None, :, :]
    idx = np.empty((M, 4, 2), dtype=int)
    for m in range(M):
        gy, gz = divmod(m, mz)
        for s, (sy, sz) in enumerate(SIGN_PATTERN):
            idx[m, s] = (2 * gy + (sy + 1) // 2, 2 * gz + (sz + 1) // 2)
    patterns = np.repeat(np.asarray(alpha_ce, dtype=float)[None, :], 4, axis=0)
    return ObservationSchedule(pos, idx, (2 * my, 2 * mz), d / 2, patterns, d_min, disp, 2)


def training_patterns(num_basis: int, count: int) -> np.ndarray:
    """First ``count`` columns of the K x K identity: one basis function per slot."""
    return np.eye(num_basis)[:count]


def build_emra_layout(config: SystemConfig, geometry: ArrayGeometry,
                      patterns: np.ndarray | None = None) -> ObservationSchedule:
    """Fixed reference array observed with T = N_s training patterns."""
    T = config.num_slots
    patterns = training_patterns(config.num_basis, T) if patterns is None else np.asarray(patterns)
    if patterns.shape[0] != T:
        raise ScheduleError("EMRA baseline needs one training pattern per slot")
    M = geometry.num_antennas
    my, mz = geometry.grid_shape
    pos = np.repeat(geometry.reference_positions[:, None, :], T, axis=1)
    idx = np.empty((M, T, 2), dtype=int)
    for m in range(M):
        idx[m, :] = divmod(m, mz)
    return ObservationSchedule(pos, idx, (my, mz), config.spacing_y, patterns,
                               smoothing_shrink=1)


# ---------------------------------------------------------------------------
# Pilots and observations
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class PilotAllocation:
    """Comb pilots: user u uses subcarriers ``u + j * stride``, j < J."""

    subcarriers: np.ndarray          # (U, J) zero-based indices
    symbols: np.ndarray              # (U, J, S) unit-modulus pilots
    stride: int

    @property
    def pilots_per_user(self) -> int:
        return self.subcarriers.shape[1]

    def overhead(self) -> int:
        """Pilot resource elements consumed per user over all slots."""
        return self.symbols.shape[1] * self.symbols.shape[2]


def build_pilot_allocation(config: SystemConfig, seed: int = 0) -> PilotAllocation:
    U, J, S = config.num_users, config.pilots_per_user, config.num_slots
    stride = config.pilot_spacing
    sub = np.arange(U)[:, None] + stride * np.arange(J)[None, :]
    rng = np.random.default_rng([seed, 0x9107])
    phases = rng.integers(0, 4, size=(U, J, S))
    return PilotAllocation(sub, np.exp(0.5j * np.pi * (phases + 0.5)), stride)


@dataclass(frozen=True)
class CeObservations:
    """Normalized observations ``y[u, m, j, s] = h* + noise``."""

    y: np.ndarray
    noise_var: float


def conj_channel_at(model: EcsiModel, positions: np.ndarray, patterns: np.ndarray) -> np.ndarray:
    """Conjugate channels h* for every slot: shape (U, M, G, S).

    ``positions`` is (M, S, 3) and ``patterns`` is (S, K).
    """
    M, S, _ = positions.shape
    out = np.empty((model.num_users, M, model.num_subcarriers, S), dtype=complex)
    for s in range(S):
        q = ecsi_at(model, positions[:, s, :])                   # (U, G, M, K)
        out[:, :, :, s] = np.einsum("ugmk,k->umg", q, patterns[s])
    return out


def simulate_uplink_pilots(paths: Sequence[PathSet], config: SystemConfig,
                           schedule: ObservationSchedule, alloc: PilotAllocation,
                           noise_var: float, seed: int = 0,
                           pilot_amplitude: float = 1.0) -> CeObservations:
    """Received pilots divided by the known symbols.

    ``y = h* a s + n`` with ``n ~ CN(0, noise_var)`` per resource element,
    normalized by ``a s``.
    """
    model = true_ecsi_model(paths, config)
    hc = conj_channel_at(model, schedule.positions, schedule.patterns)      # (U, M, G, S)
    U, M = hc.shape[:2]
    J, S = alloc.pilots_per_user, schedule.num_slots
    sig = np.stack([hc[u][:, alloc.subcarriers[u], :] for u in range(U)])   # (U, M, J, S)
    rng = np.random.default_rng([seed, 0xCE])
    noise = np.sqrt(noise_var / 2) * (rng.standard_normal((U, M, J, S))
                                      + 1j * rng.standard_normal((U, M, J, S)))
    pil = pilot_amplitude * alloc.symbols[:, None, :, :S]
    y = (sig * pil + noise) / pil
    return CeObservations(y, noise_var / pilot_amplitude**2)


# ---------------------------------------------------------------------------
# Delay stage
# ---------------------------------------------------------------------------
def mdl_order(Yd: np.ndarray, rel_floor: float = 1e-12) -> int:
    """Wax-Kailath MDL order of a p x N data matrix from ``Yd Yd^H / N``."""
    N = Yd.shape[1]
    return mdl_from_eigs(np.linalg.eigvalsh(Yd @ np.conj(Yd.T) / N), N, rel_floor)


def mdl_from_eigs(eigs: np.ndarray, snapshots: int, rel_floor: float = 1e-12) -> int:
    """MDL minimizer over k = 0..p-1 for covariance eigenvalues ``eigs``.

    With eigenvalues l_1 >= ... >= l_p,
    ``MDL(k) = -N (p - k) ln(g_k / a_k) + k (2p - k) ln(N) / 2`` where
    ``g_k``, ``a_k`` are the geometric and arithmetic means of the ``p - k``
    smallest eigenvalues.
    """
    lam = np.clip(np.sort(np.asarray(eigs, dtype=float))[::-1], 0.0, None)
    p, N = lam.size, snapshots
    if lam[0] <= 0:
        log.warning("MDL on an all-zero data matrix")
        return 0
    # Eigenvalues below the floor are round-off; treating them as equal keeps
    # the noiseless limit well posed.
    lam = np.maximum(lam, lam[0] * rel_floor)
    logs = np.log(lam)
    best, best_k = np.inf, 0
    for k in range(p):
        tail = lam[k:]
        log_ratio = np.mean(logs[k:]) - np.log(np.mean(tail))
        score = -N * (p - k) * log_ratio + 0.5 * k * (2 * p - k) * np.log(N)
        if score < best:
            best, best_k = score, k
    return best_k


def signal_subspace(R: np.ndarray, order: int) -> np.ndarray:
    w, V = np.linalg.eigh(R)
    return V[:, np.argsort(w)[::-1][:order]]


def esprit_1d_delays(Yd: np.ndarray, order: int, pilot_step: float,
                     wrap_start: float | None = None) -> np.ndarray:
    """LS-ESPRIT delays from the frequency shift invariance of ``Yd`` rows.

    Rows are pilot subcarriers ``pilot_step`` Hz apart and carry
    ``exp(+j 2 pi tau f)``.  Delays are wrapped into
    ``[wrap_start, wrap_start + T)`` with ``T = 1 / pilot_step``
    (default ``wrap_start = -T/8``).  Returned in ascending order.
    """
    J = Yd.shape[0]
    if order < 1:
        return np.zeros(0)
    if order >= J:
        raise EstimationError(f"cannot resolve {order} delays from {J} pilots")
    Es = signal_subspace(Yd @ np.conj(Yd.T), order)
    phi, *_ = np.linalg.lstsq(Es[:-1], Es[1:], rcond=None)
    z = np.linalg.eigvals(phi)
    if not np.all(np.isfinite(z)):
        raise EstimationError("defective delay rotation")
    T = 1.0 / pilot_step
    start = -T / 8 if wrap_start is None else wrap_start
    tau = np.angle(z) / (2 * np.pi * pilot_step)
    tau = (tau - start) % T + start
    return np.sort(tau)


def delay_vandermonde(freqs: np.ndarray, delays: np.ndarray) -> np.ndarray:
    return np.exp(2j * np.pi * np.outer(freqs, delays))


def recover_scsi_fullband(Yd: np.ndarray, delays: np.ndarray, pilot_freqs: np.ndarray,
                          all_freqs: np.ndarray, cond_warn: float = 1e8) -> np.ndarray:
    """Delay-domain LS fit of each column of ``Yd``, evaluated on ``all_freqs``.

    Returns (len(all_freqs), columns).
    """
    if delays.size == 0:
        return np.zeros((all_freqs.size, Yd.shape[1]), dtype=complex)
    E = delay_vandermonde(pilot_freqs, delays)
    if np.linalg.cond(E) > cond_warn:
        log.warning("ill-conditioned delay Vandermonde (near-duplicate delays)")
    coef = np.linalg.pinv(E) @ Yd
    return delay_vandermonde(all_freqs, delays) @ coef


# ---------------------------------------------------------------------------
# Spatial stage
# ---------------------------------------------------------------------------
def _smoothed_covariance(grids: Sequence[np.ndarray], sub: tuple[int, int]) -> np.ndarray:
    """Average covariance over all (sub_y, sub_z) subarrays of every grid.

    Each grid is (Sy, Sz, snapshots); subarray vectors are flattened with iy
    major.
    """
    sy, sz = sub
    n = sy * sz
    R = np.zeros((n, n), dtype=complex)
    count = 0
    for X in grids:
        Sy, Sz = X.shape[:2]
        for oy in range(Sy - sy + 1):
            for oz in range(Sz - sz + 1):
                V = X[oy:oy + sy, oz:oz + sz].reshape(n, -1)
                R += V @ np.conj(V.T)
                count += V.shape[1]
    return R / max(count, 1)


def esprit_2d_angles(grids: Sequence[np.ndarray], order: int, shrink: int = 2):
    """LS 2D-ESPRIT spatial frequencies ``(mu, nu)`` from UPA snapshots.

    ``grids`` holds (Sy, Sz, snapshots) arrays of ``h*`` on a common UPA.
    Spatial smoothing uses subarrays of (Sy - shrink) x (Sz - shrink)
    elements.  Pairing: eigenvectors of ``Psi_y`` diagonalize ``Psi_z``.
    """
    Sy, Sz = grids[0].shape[:2]
    sub = (max(Sy - shrink, 2 if Sy > 1 else 1), max(Sz - shrink, 2 if Sz > 1 else 1))
    sy, sz = sub
    cap = min((sy - 1) * sz, sy * (sz - 1))
    if order < 1:
        return np.zeros(0), np.zeros(0)
    if order > cap:
        raise EstimationError(f"{order} paths exceed the smoothed subarray {sy}x{sz}")
    R = _smoothed_covariance(grids, sub)
    Es = signal_subspace(R, order)
    iy, iz = np.meshgrid(np.arange(sy), np.arange(sz), indexing="ij")
    iy, iz = iy.ravel(), iz.ravel()
    y1, y2 = np.flatnonzero(iy < sy - 1), np.flatnonzero(iy > 0)
    z1, z2 = np.flatnonzero(iz < sz - 1), np.flatnonzero(iz > 0)
    psi_y = np.linalg.lstsq(Es[y1], Es[y2], rcond=None)[0]
    psi_z = np.linalg.lstsq(Es[z1], Es[z2], rcond=None)[0]
    ev, T = np.linalg.eig(psi_y)
    order_idx = np.argsort(-np.abs(ev), kind="stable")
    ev, T = ev[order_idx], T[:, order_idx]
    try:
        dz = np.diag(np.linalg.solve(T, psi_z @ T))
    except np.linalg.LinAlgError as exc:
        raise EstimationError("defective pairing transform in 2D-ESPRIT") from exc
    if not (np.all(np.isfinite(ev)) and np.all(np.isfinite(dz))):
        raise EstimationError("non-finite spatial frequencies in 2D-ESPRIT")
    return np.angle(ev), -np.angle(dz)


def recover_angles(mu, nu, spacing: float, wavelength: float):
    """Principal-branch AoD inversion with clipping.

    ``theta = arccos(-nu / kappa)``, ``phi = arcsin(mu / sqrt(kappa^2 - nu^2))``
    with ``kappa = 2 pi spacing / lambda``.  At the poles (theta = 0 or pi)
    the azimuth is immaterial and returned as 0.
    """
    kappa = 2 * np.pi * spacing / wavelength
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    nu = np.atleast_1d(np.asarray(nu, dtype=float))
    c = np.clip(-nu / kappa, -1.0, 1.0)
    theta = np.arccos(c)
    rad = kappa * np.sqrt(np.clip(1.0 - c * c, 0.0, None))
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(rad > 0, mu / np.where(rad > 0, rad, 1.0), 0.0)
    phi = np.arcsin(np.clip(s, -1.0, 1.0))
    return theta, phi


def measurement_matrix(aods: np.ndarray, omega: np.ndarray, schedule: ObservationSchedule,
                       wavelength: float) -> np.ndarray:
    """Upsilon with one row per observation (m, s): (M * S, L)."""
    k = direction_vector(aods[:, 0], aods[:, 1])                       # (L, 3)
    pos = schedule.positions.reshape(-1, 3)                            # (M*S, 3), s fastest
    steer = np.exp(2j * np.pi / wavelength * (pos @ k.T))              # (M*S, L)
    resp = schedule.patterns @ omega.T                                 # (S, L)
    return steer * np.tile(resp, (schedule.num_antennas, 1))


def ls_equivalent_gains(hc: np.ndarray, aods: np.ndarray, omega: np.ndarray,
                        schedule: ObservationSchedule, wavelength: float,
                        rank_tol: float = 1e-10) -> np.ndarray:
    """LS equivalent gains per subcarrier: (G, L).

    ``hc`` holds recovered conjugate channels (M, S, G).
    """
    ups = measurement_matrix(aods, omega, schedule, wavelength)
    resp = np.abs(schedule.patterns @ omega.T).max(axis=0)
    dead = np.flatnonzero(resp <= rank_tol * max(1.0, float(resp.max(initial=0.0))))
    if dead.size:
        raise EstimationError(f"CE pattern has no response on path(s) {dead.tolist()}")
    sv = np.linalg.svd(ups, compute_uv=False)
    if sv.size and sv[-1] <= rank_tol * sv[0]:
        cols = ups / np.linalg.norm(ups, axis=0)
        corr = np.abs(np.conj(cols.T) @ cols) - np.eye(cols.shape[1])
        i, j = np.unravel_index(np.argmax(corr), corr.shape)
        raise EstimationError(f"measurement matrix is rank deficient: paths {min(i, j)} and "
                              f"{max(i, j)} have duplicate steering")
    M, S, G = hc.shape
    chi, *_ = np.linalg.lstsq(ups, hc.reshape(M * S, G), rcond=None)
    return chi.T


# ---------------------------------------------------------------------------
# Estimates and assembly
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class ParametricEstimate(EcsiModel):
    """Estimated parametric model; ``delays`` is (U, L) zero padded."""

    delays: np.ndarray | None = None
    scsi: tuple | None = None


def assemble_ecsi(estimate: EcsiModel, positions: np.ndarray) -> np.ndarray:
    """Reconstructed eCSI ``q`` at the given antenna positions: (U, G, M, K)."""
    return ecsi_at(estimate, positions)


@dataclass(frozen=True)
class UserEstimate:
    order: int
    delays: np.ndarray
    aod: np.ndarray
    omega: np.ndarray
    chi: np.ndarray
    scsi: np.ndarray      # recovered h* at the observation positions (M, S, G)


def estimate_user(y: np.ndarray, schedule: ObservationSchedule, config: SystemConfig,
                  pilot_freqs: np.ndarray, order: int | None = None) -> UserEstimate:
    """Full pipeline for one user from normalized observations (M, J, S)."""
    M, J, S = y.shape
    Yd = y.transpose(1, 0, 2).reshape(J, M * S)
    L = mdl_order(Yd) if order is None else order
    if L < 1:
        raise EstimationError("MDL found no paths")
    step = config.pilot_spacing * config.subcarrier_spacing
    tau = esprit_1d_delays(Yd, L, step)
    full = recover_scsi_fullband(Yd, tau, pilot_freqs, config.subcarrier_freqs())
    hc = full.T.reshape(M, S, -1)                                      # (M, S, G)
    Sy, Sz = schedule.grid_shape
    grids = []
    for group in schedule.snapshot_groups():
        X = np.zeros((Sy, Sz, hc.shape[2]), dtype=complex)
        filled = np.zeros((Sy, Sz), dtype=int)
        for s in group:
            for m in range(M):
                iy, iz = schedule.virtual_index[m, s]
                X[iy, iz] = hc[m, s]
                filled[iy, iz] += 1
        if not np.all(filled == 1):
            raise EstimationError("observation layout does not tile the grid")
        grids.append(X)
    mu, nu = esprit_2d_angles(grids, L, schedule.smoothing_shrink)
    theta, phi = recover_angles(mu, nu, schedule.grid_spacing, config.wavelength)
    aod = np.stack([theta, phi], axis=1)
    omega = build_omega(aod, config.num_basis)
    chi = ls_equivalent_gains(hc, aod, omega, schedule, config.wavelength)
    return UserEstimate(L, tau, aod, omega, chi, hc)


def estimate_channel(obs: CeObservations, schedule: ObservationSchedule,
                     alloc: PilotAllocation, config: SystemConfig,
                     orders: Sequence[int] | None = None) -> ParametricEstimate:
    """Run the parametric pipeline for every user."""
    freqs = config.subcarrier_freqs()
    users = [estimate_user(obs.y[u], schedule, config, freqs[alloc.subcarriers[u]],
                           None if orders is None else orders[u])
             for u in range(obs.y.shape[0])]
    delays = np.zeros((len(users), max(e.delays.size for e in users)))
    for u, e in enumerate(users):
        delays[u, :e.delays.size] = e.delays
    return ParametricEstimate.from_users(
        [e.aod for e in users], [e.omega for e in users], [e.chi for e in users],
        config.wavelength, delays=delays, scsi=tuple(e.scsi for e in users))


@dataclass(frozen=True)
class CeResult:
    estimate: ParametricEstimate
    schedule: ObservationSchedule
    observations: CeObservations
    true_scsi: np.ndarray            # (U, M, S, G) true h* at the observation positions


def run_ce(paths: Sequence[PathSet], config: SystemConfig, scheme: str = "semra",
           seed: int = 0, noise_var: float | None = None,
           geometry: ArrayGeometry | None = None) -> CeResult:
    """Simulate pilots and estimate the channel with the SEMRA or EMRA layout."""
    geometry = build_geometry(config) if geometry is None else geometry
    if scheme == "semra":
        schedule = build_schedule(config, geometry)
    elif scheme == "emra":
        schedule = build_emra_layout(config, geometry)
    else:
        raise ValueError(f"unknown CE scheme {scheme!r}")
    alloc = build_pilot_allocation(config, seed)
    nv = config.ce_noise_var if noise_var is None else noise_var
    obs = simulate_uplink_pilots(paths, config, schedule, alloc, nv, seed)
    est = estimate_channel(obs, schedule, alloc, config)
    truth = conj_channel_at(true_ecsi_model(paths, config), schedule.positions,
                            schedule.patterns).transpose(0, 1, 3, 2)
    return CeResult(est, schedule, obs, truth)


def emra_baseline_ce(paths, config, seed=0, noise_var=None, geometry=None) -> CeResult:
    return run_ce(paths, config, "emra", seed, noise_var, geometry)


# ---------------------------------------------------------------------------
# Text dump
# ---------------------------------------------------------------------------
def dump_estimate(est: ParametricEstimate) -> str:
    """Plain-text record: one line per (user, path) and one per (user, path, g).

    Angles in degrees, delays in ns, gains as real/imag columns.
    """
    lines = ["# user path theta_deg phi_deg delay_ns"]
    for u in range(est.num_users):
        for i in range(est.num_paths[u]):
            th, ph = np.rad2deg(est.aod[u, i])
            tau = 0.0 if est.delays is None else est.delays[u, i] * 1e9
            lines.append(f"{u} {i} {th:.6f} {ph:.6f} {tau:.6f}")
    lines.append("# user path subcarrier chi_re chi_im")
    for u in range(est.num_users):
        for i in range(est.num_paths[u]):
            for g in range(est.num_subcarriers):
                c = est.chi[u, g, i]
                lines.append(f"{u} {i} {g} {c.real:.9e} {c.imag:.9e}")
    return "\n".join(lines) + "\n"

"""Channel synthesis, EM-domain CSI and spectral efficiency.

Conventions (h is the downlink coefficient of one antenna):

* ``h = q^H alpha`` and ``conj(h) = alpha^T Omega^T conj(B) chi``;
* the per-path conjugate term is
  ``conj(h_i) = [Omega alpha]_i chi_i exp(+j 2pi/lambda k_i . p)``;
* effective channels are stored as arrays of shape (U, G, M), precoders as
  (G, M, U).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from .em_basis import build_omega, pattern_gain
from .scenario import PathSet, SystemConfig

LN2 = np.log(2.0)


def direction_vector(theta, phi) -> np.ndarray:
    """Unit propagation direction(s), trailing axis of length 3."""
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    st = np.sin(theta)
    return np.stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta) * np.ones_like(phi)],
                    axis=-1)


def chi_vector(paths: PathSet, g: int, config: SystemConfig) -> np.ndarray:
    """Position-independent equivalent gains of one user on subcarrier ``g``.

    ``g`` is zero-based (``f_g = g * subcarrier_spacing``).
    """
    return chi_matrix(paths, config)[g]


def chi_matrix(paths: PathSet, config: SystemConfig) -> np.ndarray:
    """Equivalent gains for all subcarriers, shape (G, L)."""
    lam = config.wavelength
    krx = direction_vector(paths.aoa[:, 0], paths.aoa[:, 1])
    a = np.exp(-2j * np.pi / lam * (krx @ paths.ue_position))
    f = config.subcarrier_freqs()
    x = paths.gains[None, :] * np.exp(-2j * np.pi * np.outer(f, paths.delays))
    return np.conj(paths.rx_gain[None, :] * a[None, :] * x)


@dataclass(frozen=True)
class EcsiModel:
    """Position-independent parametric channel of all users.

    Per-user path counts may differ; arrays are zero padded to the largest
    count (padded paths carry zero gain and a zero basis row).

    Attributes
    ----------
    aod : (U, L, 2) elevation/azimuth of departure.
    omega : (U, L, K) basis matrix rows.
    chi : (U, G, L) equivalent path gains per subcarrier.
    num_paths : per-user path counts.
    wavelength : carrier wavelength in metres.
    """

    aod: np.ndarray
    omega: np.ndarray
    chi: np.ndarray
    num_paths: tuple[int, ...]
    wavelength: float

    @classmethod
    def from_users(cls, aods: Sequence[np.ndarray], omegas: Sequence[np.ndarray],
                   chis: Sequence[np.ndarray], wavelength: float, **extra) -> "EcsiModel":
        U = len(aods)
        L = max(max(len(a) for a in aods), 1)
        K = omegas[0].shape[1]
        G = chis[0].shape[0]
        aod = np.zeros((U, L, 2))
        aod[:, :, 0] = np.pi / 2
        omega = np.zeros((U, L, K))
        chi = np.zeros((U, G, L), dtype=complex)
        for u in range(U):
            n = len(aods[u])
            aod[u, :n] = aods[u]
            omega[u, :n] = omegas[u]
            chi[u, :, :n] = chis[u]
        return cls(aod=aod, omega=omega, chi=chi,
                   num_paths=tuple(len(a) for a in aods), wavelength=wavelength, **extra)

    @property
    def num_users(self) -> int:
        return self.chi.shape[0]

    @property
    def num_subcarriers(self) -> int:
        return self.chi.shape[1]

    @property
    def num_basis(self) -> int:
        return self.omega.shape[2]

    @cached_property
    def ktx(self) -> np.ndarray:
        return direction_vector(self.aod[..., 0], self.aod[..., 1])

    def user(self, u: int):
        n = self.num_paths[u]
        return self.aod[u, :n], self.omega[u, :n], self.chi[u, :, :n]


def true_ecsi_model(paths: Sequence[PathSet], config: SystemConfig) -> EcsiModel:
    K = config.num_basis
    return EcsiModel.from_users(
        [p.aod for p in paths],
        [build_omega(p.aod, K) for p in paths],
        [chi_matrix(p, config) for p in paths],
        config.wavelength,
    )


# ---------------------------------------------------------------------------
# Synthesis routes
# ---------------------------------------------------------------------------
def steering_conj(model: EcsiModel, positions: np.ndarray) -> np.ndarray:
    """conj(B) entries exp(+j 2pi/lambda k . p), shape (U, M, L)."""
    phase = np.einsum("uld,md->uml", model.ktx, np.asarray(positions))
    return np.exp(2j * np.pi / model.wavelength * phase)


def ecsi_at(model: EcsiModel, positions: np.ndarray) -> np.ndarray:
    """eCSI vectors q = Omega^T B^H chi for every (u, g, m): shape (U, G, M, K)."""
    bc = steering_conj(model, positions)                             # (U, M, L)
    U, M, L = bc.shape
    K = model.num_basis
    t = (bc.transpose(0, 2, 1)[:, :, :, None] * model.omega[:, :, None, :]).reshape(U, L, M * K)
    return np.matmul(model.chi, t).reshape(U, -1, M, K)


def pathwise_conj(model: EcsiModel, alphas: np.ndarray, positions: np.ndarray) -> np.ndarray:
    """Per-path conjugate channel terms, shape (U, G, M, L).

    ``alphas`` is the (K, M) matrix of per-antenna pattern weights.
    """
    ftx = np.einsum("ulk,km->ulm", model.omega, alphas)
    bc = steering_conj(model, positions)
    return model.chi[:, :, None, :] * (ftx.transpose(0, 2, 1) * bc)[:, None, :, :]


def effective_channels(model: EcsiModel, alphas: np.ndarray, positions: np.ndarray) -> np.ndarray:
    """Effective channels h_{u,g} (U, G, M)."""
    ftx = np.einsum("ulk,km->uml", model.omega, alphas)
    bc = steering_conj(model, positions)
    return np.conj(np.einsum("ugl,uml->ugm", model.chi, ftx * bc))


def channels_from_ecsi(q: np.ndarray, alphas: np.ndarray) -> np.ndarray:
    """h = q^H alpha per antenna, from eCSI of shape (U, G, M, K)."""
    return np.conj(np.sum(q * alphas.T, axis=-1))


def synthesize_h_direct(paths: PathSet, alpha: np.ndarray, position: np.ndarray, g: int,
                        config: SystemConfig) -> complex:
    """Direct multipath sum for one antenna, user and subcarrier."""
    lam = config.wavelength
    ktx = direction_vector(paths.aod[:, 0], paths.aod[:, 1])
    krx = direction_vector(paths.aoa[:, 0], paths.aoa[:, 1])
    ftx = pattern_gain(alpha, paths.aod[:, 0], paths.aod[:, 1])
    f_g = g * config.subcarrier_spacing
    phase = ktx @ np.asarray(position) + krx @ paths.ue_position
    terms = (paths.gains * paths.rx_gain * ftx * np.exp(-2j * np.pi / lam * phase)
             * np.exp(-2j * np.pi * paths.delays * f_g))
    return complex(terms.sum())


def em_matrix(alphas: np.ndarray) -> np.ndarray:
    """Block-diagonal EM precoder (MK, M) with column m = alpha_m in block m."""
    K, M = alphas.shape
    lam = np.zeros((M * K, M))
    for m in range(M):
        lam[m * K:(m + 1) * K, m] = alphas[:, m]
    return lam


def em_mask(K: int, M: int) -> np.ndarray:
    return em_matrix(np.ones((K, M)))


def em_weights(lam: np.ndarray, K: int) -> np.ndarray:
    """Extract the (K, M) per-antenna weights from a block-diagonal matrix."""
    M = lam.shape[1]
    return np.stack([lam[m * K:(m + 1) * K, m] for m in range(M)], axis=1)


def stacked_ecsi(q: np.ndarray) -> np.ndarray:
    """Stack (U, G, M, K) eCSI into (U, G, MK) vectors q_{u,g}."""
    U, G, M, K = q.shape
    return q.reshape(U, G, M * K)


# ---------------------------------------------------------------------------
# SINR / SE
# ---------------------------------------------------------------------------
def coupling(H: np.ndarray, W: np.ndarray) -> np.ndarray:
    """c[u, g, l] = h_{u,g}^H w_{l,g}."""
    return np.matmul(np.conj(H).transpose(1, 0, 2), W).transpose(1, 0, 2)


def sinr_and_se(H: np.ndarray, W: np.ndarray, noise_var: float):
    """SINR per (user, subcarrier), sum SE over all of them, and SE per subcarrier.

    Returns ``(sinr, R, R / G)`` with ``R`` in bit/s/Hz summed over users and
    subcarriers.
    """
    if not noise_var > 0:
        raise ValueError("noise variance must be positive")
    c2 = np.abs(coupling(H, W)) ** 2
    sig = np.einsum("ugu->ug", c2)
    interf = c2.sum(axis=2) - sig + noise_var
    sinr = sig / interf
    R = float(np.sum(np.log2(1.0 + sinr)))
    return sinr, R, R / H.shape[1]


def sum_rate(H: np.ndarray, W: np.ndarray, noise_var: float) -> float:
    return sinr_and_se(H, W, noise_var)[1]

"""System configuration, array geometry and random multipath scenarios.

All lengths are in metres, frequencies in Hz and angles in radians.  The
configuration file format is a plain ``key = value`` list (one field of
:class:`SystemConfig` per line, ``#`` starts a comment).  Length fields also
accept a ``lambda`` suffix, e.g. ``spacing_y = 0.5 lambda``.
"""

from __future__ import annotations

import dataclasses
import functools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0

# Relative slack for the geometric feasibility checks (d = 2 D_max + D_sep is
# the intended boundary case and must not be rejected by rounding).
_GEOM_RTOL = 1e-9


class ConfigError(ValueError):
    """Raised when a configuration violates one of its invariants."""


@dataclass(frozen=True)
class SystemConfig:
    """Physical and algorithmic constants of one simulated system.

    Defaults are the desk-scale setup: the 2.4 GHz / 3.84 MHz band of the
    reference scenario sampled with 32 subcarriers instead of 128 (so the
    subcarrier spacing is 120 kHz), a 4x4 array, three users and ten pilot
    subcarriers per user and slot.  :meth:`full_scale` returns the 128-
    subcarrier variant.

    ``spacing_y``, ``spacing_z``, ``d_max`` and ``d_sep`` default to
    ``lambda/2``, ``lambda/2``, ``(d - d_sep)/2`` and ``lambda/10``.
    Path azimuths are drawn on ``[-azimuth_max_deg, azimuth_max_deg]``; the
    40 degree default keeps the half-spacing virtual array of a 1.5 lambda
    array free of spatial aliasing.
    """

    carrier_freq: float = 2.4e9
    subcarrier_spacing: float = 120e3
    num_subcarriers: int = 32
    array_y: int = 4
    array_z: int = 4
    spacing_y: float | None = None
    spacing_z: float | None = None
    num_users: int = 3
    num_basis: int = 100
    num_paths: int = 6
    delay_spread: float = 100e-9
    azimuth_max_deg: float = 40.0
    snr_precoding_db: float = 20.0
    snr_ce_db: float = 20.0
    d_max: float | None = None
    d_sep: float | None = None
    num_slots: int = 4
    pilots_per_user: int = 10
    n_max: int = 10
    stop_tol: float = 1e-4
    rng_seed: int = 0

    def __post_init__(self):
        lam = self.wavelength
        if self.spacing_y is None:
            object.__setattr__(self, "spacing_y", lam / 2)
        if self.spacing_z is None:
            object.__setattr__(self, "spacing_z", lam / 2)
        if self.d_sep is None:
            object.__setattr__(self, "d_sep", lam / 10)
        if self.d_max is None:
            d = min(self.spacing_y, self.spacing_z)
            object.__setattr__(self, "d_max", max(d - self.d_sep, 0.0) / 2)
        self.validate()

    # -- derived quantities -------------------------------------------------
    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.carrier_freq

    @property
    def num_antennas(self) -> int:
        return self.array_y * self.array_z

    @property
    def max_degree(self) -> int:
        return math.isqrt(self.num_basis) - 1

    @property
    def total_power(self) -> float:
        return noise_vars_from_snr(self)[2]

    @property
    def noise_var(self) -> float:
        return noise_vars_from_snr(self)[0]

    @property
    def ce_noise_var(self) -> float:
        return noise_vars_from_snr(self)[1]

    @property
    def pilot_spacing(self) -> int:
        """Subcarrier stride of each user's pilot comb."""
        return self.num_subcarriers // self.pilots_per_user

    @property
    def delay_ambiguity(self) -> float:
        """Unambiguous delay range 1/(stride * subcarrier spacing) of the comb."""
        return 1.0 / (self.pilot_spacing * self.subcarrier_spacing)

    def subcarrier_freqs(self) -> np.ndarray:
        """Baseband subcarrier frequencies f_g = (g-1) * spacing."""
        return np.arange(self.num_subcarriers) * self.subcarrier_spacing

    # -- validation ---------------------------------------------------------
    def validate(self) -> None:
        def need(cond: bool, what: str):
            if not cond:
                raise ConfigError(f"invalid configuration: {what}")

        need(self.carrier_freq > 0, "carrier_freq > 0")
        need(self.subcarrier_spacing > 0, "subcarrier_spacing > 0")
        for name in ("num_subcarriers", "array_y", "array_z", "num_users",
                     "num_basis", "num_paths", "num_slots", "pilots_per_user"):
            need(int(getattr(self, name)) >= 1, f"{name} >= 1")
        need(self.n_max >= 0, "n_max >= 0")
        need(math.isqrt(self.num_basis) ** 2 == self.num_basis,
             f"num_basis must be a perfect square (got {self.num_basis})")
        need(self.spacing_y > 0 and self.spacing_z > 0, "spacings > 0")
        need(self.d_max >= 0 and self.d_sep >= 0, "d_max, d_sep >= 0")
        slack = _GEOM_RTOL * max(self.spacing_y, self.spacing_z)
        need(self.spacing_y + slack >= 2 * self.d_max + self.d_sep,
             "d_y >= 2 D_max + D_sep (antenna separation)")
        need(self.spacing_z + slack >= 2 * self.d_max + self.d_sep,
             "d_z >= 2 D_max + D_sep (antenna separation)")
        need(self.num_users <= self.num_antennas,
             "U <= M (zero-forcing well-posed)")
        need(self.pilots_per_user * self.num_users <= self.num_subcarriers,
             "J * U <= G (pilot combs fit)")
        need(self.pilots_per_user > self.num_paths,
             "J > L_u (delay subspace identifiable)")
        need(self.delay_spread > 0, "delay_spread > 0")
        need(0 < self.azimuth_max_deg <= 90, "0 < azimuth_max_deg <= 90")
        need(math.isfinite(self.snr_precoding_db) and math.isfinite(self.snr_ce_db),
             "SNR values finite")
        need(self.stop_tol >= 0, "stop_tol >= 0")

    # -- constructors -------------------------------------------------------
    def replace(self, **changes) -> "SystemConfig":
        return dataclasses.replace(self, **changes)

    def with_spacing(self, d_over_lambda: float) -> "SystemConfig":
        """Square array with spacing ``d`` and the matching motion bound.

        D_max follows the spacing as ``(d - D_sep)/2`` so the separation
        constraint stays tight.
        """
        lam = self.wavelength
        d = d_over_lambda * lam
        return self.replace(spacing_y=d, spacing_z=d,
                            d_max=max(d - self.d_sep, 0.0) / 2)

    @classmethod
    def full_scale(cls, **overrides) -> "SystemConfig":
        kw = dict(subcarrier_spacing=30e3, num_subcarriers=128, pilots_per_user=30)
        kw.update(overrides)
        return cls(**kw)


def noise_vars_from_snr(config: SystemConfig) -> tuple[float, float, float]:
    """SNR conventions: unit noise, per-subcarrier budget P_T/G = 10^(SNR_P/10).

    Returns ``(noise_var, ce_noise_var, total_power)``; CE pilots have unit
    power per resource element so the CE noise variance is 10^(-SNR_C/10).
    """
    noise_var = 1.0
    total_power = config.num_subcarriers * 10.0 ** (config.snr_precoding_db / 10)
    ce_noise_var = 10.0 ** (-config.snr_ce_db / 10)
    return noise_var, ce_noise_var, total_power


# ---------------------------------------------------------------------------
# Configuration file I/O
# ---------------------------------------------------------------------------
_LENGTH_FIELDS = {"spacing_y", "spacing_z", "d_max", "d_sep"}


def _field_types() -> dict[str, type]:
    out = {}
    for f in dataclasses.fields(SystemConfig):
        out[f.name] = int if f.default.__class__ is int else float
    return out


def parse_kv_text(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines into an ordered dict of raw strings."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def config_from_mapping(values: dict[str, Any], base: SystemConfig | None = None
                        ) -> SystemConfig:
    """Build a config from raw key/value pairs; unknown keys are rejected."""
    types = _field_types()
    unknown = sorted(set(values) - set(types))
    if unknown:
        raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
    carrier = float(values.get("carrier_freq", (base or SystemConfig).carrier_freq))
    lam = SPEED_OF_LIGHT / carrier
    kw: dict[str, Any] = {}
    for key, value in values.items():
        try:
            if isinstance(value, str):
                parts = value.split()
                if key in _LENGTH_FIELDS and len(parts) == 2 and parts[1] == "lambda":
                    kw[key] = float(parts[0]) * lam
                    continue
                if len(parts) != 1:
                    raise ValueError(value)
                value = parts[0]
            if types[key] is int:
                fv = float(value)
                if fv != int(fv):
                    raise ValueError(value)
                kw[key] = int(fv)
            else:
                kw[key] = float(value)
        except ValueError:
            raise ConfigError(f"bad value for {key!r}: {value!r}") from None
    if base is None:
        return SystemConfig(**kw)
    # spacing changes on top of a base config re-derive D_max unless given
    if base is not None and ({"spacing_y", "spacing_z"} & kw.keys()) and "d_max" not in kw:
        kw["d_max"] = None
    return base.replace(**kw)


def load_config(path: str | Path, base: SystemConfig | None = None) -> SystemConfig:
    return config_from_mapping(parse_kv_text(Path(path).read_text()), base)


def dump_config(config: SystemConfig) -> str:
    lines = [f"{f.name} = {getattr(config, f.name)!r}"
             for f in dataclasses.fields(SystemConfig)]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class ArrayGeometry:
    """Reference UPA positions (M, 3) in the x = 0 plane and motion boxes.

    Antenna ``m`` sits at grid index ``(m // M_z, m % M_z)`` along (y, z).
    """

    reference_positions: np.ndarray
    d_max: float
    d_sep: float
    grid_shape: tuple[int, int]

    @property
    def num_antennas(self) -> int:
        return self.reference_positions.shape[0]

    def region(self, m: int) -> tuple[np.ndarray, float]:
        """Centre and half-width of the feasible box of antenna ``m``."""
        return self.reference_positions[m], self.d_max

    def contains(self, positions: np.ndarray, atol: float = 1e-12) -> bool:
        dev = np.abs(np.asarray(positions) - self.reference_positions)
        return bool(np.all(dev[:, 0] <= atol) and np.all(dev[:, 1:] <= self.d_max + atol))


def build_geometry(config: SystemConfig) -> ArrayGeometry:
    config.validate()
    my, mz = config.array_y, config.array_z
    iy, iz = np.meshgrid(np.arange(my), np.arange(mz), indexing="ij")
    y = (iy.ravel() - (my - 1) / 2) * config.spacing_y
    z = (iz.ravel() - (mz - 1) / 2) * config.spacing_z
    pos = np.stack([np.zeros_like(y), y, z], axis=1)
    return ArrayGeometry(pos, float(config.d_max), float(config.d_sep), (my, mz))


# ---------------------------------------------------------------------------
# Random multipath realizations
# ---------------------------------------------------------------------------
AOD_THETA_RANGE = (np.deg2rad(60.0), np.deg2rad(120.0))


@dataclass(frozen=True)
class PathSet:
    """Multipath parameters of one user (ground truth).

    Arrays have one entry per path; ``aod`` and ``aoa`` are (L, 2) arrays of
    (elevation, azimuth) pairs.
    """

    gains: np.ndarray
    delays: np.ndarray
    aod: np.ndarray
    aoa: np.ndarray
    rx_gain: np.ndarray
    ue_position: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @property
    def num_paths(self) -> int:
        return self.gains.shape[0]


@functools.lru_cache(maxsize=None)
def delay_scale_factor(num_paths: int) -> float:
    """Ratio E[rms delay spread] / profile time constant for ``num_paths``.

    Delays and path powers share one exponential time constant ``s``; with a
    handful of discrete paths the realised power-weighted RMS spread is well
    below ``s``.  The sampler divides the target RMS spread by this factor.
    Evaluated once per path count with a fixed private seed.
    """
    if num_paths <= 1:
        return 1.0
    rng = np.random.default_rng(0x5E3A)
    n = 200_000
    tau = np.sort(rng.exponential(1.0, (n, num_paths)), axis=1)
    tau -= tau[:, :1]
    p = np.exp(-tau) * rng.exponential(1.0, (n, num_paths))
    p /= p.sum(axis=1, keepdims=True)
    m1 = (p * tau).sum(axis=1)
    m2 = (p * tau**2).sum(axis=1)
    return float(np.sqrt(np.maximum(m2 - m1**2, 0.0)).mean())


def rms_delay_spread(paths: PathSet) -> float:
    p = np.abs(paths.gains) ** 2
    p = p / p.sum()
    m1 = np.sum(p * paths.delays)
    return float(np.sqrt(max(np.sum(p * paths.delays**2) - m1**2, 0.0)))


def _uniform(rng, lo_hi, size):
    return rng.uniform(lo_hi[0], lo_hi[1], size)


def sample_realization(config: SystemConfig, seed: int) -> list[PathSet]:
    """Draw one multipath realization (a :class:`PathSet` per user).

    Deterministic in ``(config, seed)``.  Delays are exponential, sorted and
    shifted so the first path has zero delay; the time constant is scaled so
    the mean RMS delay spread equals ``config.delay_spread``.  Draws are
    truncated below 7/8 of the pilot comb's delay ambiguity.
    """
    rng = np.random.default_rng(seed)
    L = config.num_paths
    scale = config.delay_spread / delay_scale_factor(L)
    cap = 0.875 * config.delay_ambiguity
    phi_range = (-np.deg2rad(config.azimuth_max_deg), np.deg2rad(config.azimuth_max_deg))
    users = []
    for _ in range(config.num_users):
        u = rng.uniform(size=L)
        # inverse CDF of the exponential truncated at `cap`
        tau = -scale * np.log1p(-u * (1.0 - np.exp(-cap / scale)))
        tau = np.sort(tau)
        tau -= tau[0]
        power = np.exp(-tau / scale)
        g = (rng.standard_normal(L) + 1j * rng.standard_normal(L)) / np.sqrt(2)
        g *= np.sqrt(power)
        g /= np.linalg.norm(g)
        aod = np.stack([_uniform(rng, AOD_THETA_RANGE, L), _uniform(rng, phi_range, L)], axis=1)
        aoa = np.stack([_uniform(rng, AOD_THETA_RANGE, L), _uniform(rng, phi_range, L)], axis=1)
        ue = np.array([rng.uniform(20.0, 100.0), rng.uniform(-50.0, 50.0), rng.uniform(-10.0, 10.0)])
        users.append(PathSet(gains=g, delays=tau, aod=aod, aoa=aoa,
                             rx_gain=np.ones(L), ue_position=ue))
    assert all(p.delays.max() < config.delay_ambiguity for p in users)
    return users


def realization_seeds(seed_base: int, indices: Iterable[int]) -> list[int]:
    return [int(seed_base) + int(i) for i in indices]

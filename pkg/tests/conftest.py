"""Shared fixtures and random-instance builders."""

from __future__ import annotations

import numpy as np
import pytest

from semra.channel import EcsiModel
from semra.em_basis import build_omega
from semra.scenario import PathSet, SystemConfig, build_geometry


def crandn(rng, *shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)


def unit_columns(rng, K, M):
    a = rng.standard_normal((K, M))
    return a / np.linalg.norm(a, axis=0)


def random_model(rng, U=2, G=2, L=3, K=4, wavelength=0.125) -> EcsiModel:
    """Small random parametric model with angles inside the sampler's support."""
    aods, omegas, chis = [], [], []
    for _ in range(U):
        aod = np.stack([rng.uniform(np.pi / 3, 2 * np.pi / 3, L),
                        rng.uniform(-np.pi / 3, np.pi / 3, L)], axis=1)
        aods.append(aod)
        omegas.append(build_omega(aod, K))
        chis.append(crandn(rng, G, L))
    return EcsiModel.from_users(aods, omegas, chis, wavelength)


def separated_paths(config: SystemConfig, seed: int, num_paths: int = 6,
                    delay_step: float = 250e-9, equal_power: bool = False) -> list[PathSet]:
    """Paths resolvable by both ESPRIT stages.

    Delays ``delay_step`` apart (plus a small jitter), elevations and
    azimuths on distinct, shuffled grid points.  Gains are random complex
    with unit total power, or of equal magnitude with ``equal_power``.
    """
    rng = np.random.default_rng(seed)
    L = num_paths
    out = []
    for _ in range(config.num_users):
        th = np.deg2rad(np.linspace(65, 115, L))[rng.permutation(L)]
        ph = np.deg2rad(np.linspace(-35, 35, L))[rng.permutation(L)]
        tau = np.arange(L) * delay_step + rng.uniform(0, delay_step / 5, L)
        tau[0] = 0.0
        g = crandn(rng, L)
        if equal_power:
            g /= np.abs(g)
        g /= np.linalg.norm(g)
        aoa = np.stack([rng.uniform(1, 2, L), rng.uniform(-1, 1, L)], axis=1)
        out.append(PathSet(g, tau, np.stack([th, ph], axis=1), aoa, np.ones(L),
                           ue_position=rng.uniform(-20, 20, 3)))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def desk_config():
    return SystemConfig()


@pytest.fixture(scope="session")
def desk_geometry(desk_config):
    return build_geometry(desk_config)


# (criterion number, line) pairs recorded by the acceptance suite
ACCEPTANCE_LINES: list[tuple[int, str]] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)

import dataclasses
import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semra.scenario import (ConfigError, SystemConfig, build_geometry, config_from_mapping,
                            delay_scale_factor, dump_config, load_config, noise_vars_from_snr,
                            parse_kv_text, realization_seeds, rms_delay_spread,
                            sample_realization)


class TestSystemConfig:
    def test_defaults_are_valid(self):
        cfg = SystemConfig()
        assert cfg.num_antennas == 16
        assert cfg.num_subcarriers * cfg.subcarrier_spacing == pytest.approx(3.84e6)
        assert cfg.spacing_y == pytest.approx(cfg.wavelength / 2)
        assert cfg.d_sep == pytest.approx(cfg.wavelength / 10)
        assert cfg.spacing_y == pytest.approx(2 * cfg.d_max + cfg.d_sep)

    def test_full_scale(self):
        cfg = SystemConfig.full_scale()
        assert (cfg.num_subcarriers, cfg.pilots_per_user) == (128, 30)
        assert cfg.subcarrier_spacing == 30e3

    @pytest.mark.parametrize("changes, fragment", [
        ({"num_basis": 10}, "perfect square"),
        ({"num_users": 17}, "U <= M"),
        ({"pilots_per_user": 6}, "J > L_u"),
        ({"pilots_per_user": 11, "num_paths": 2}, "pilot combs fit"),
        ({"d_max": 0.1}, "antenna separation"),
        ({"delay_spread": 0.0}, "delay_spread"),
        ({"snr_ce_db": float("inf")}, "SNR"),
        ({"azimuth_max_deg": 95.0}, "azimuth"),
    ])
    def test_validation_names_the_invariant(self, changes, fragment):
        with pytest.raises(ConfigError, match=fragment):
            SystemConfig(**changes)

    def test_boundary_separation_is_accepted(self):
        lam = SystemConfig().wavelength
        cfg = SystemConfig(spacing_y=lam / 2, spacing_z=lam / 2, d_sep=lam / 10,
                           d_max=(lam / 2 - lam / 10) / 2)
        assert cfg.d_max == pytest.approx(0.2 * lam)

    def test_with_spacing_keeps_separation_tight(self):
        cfg = SystemConfig().with_spacing(1.5)
        assert cfg.spacing_y == pytest.approx(1.5 * cfg.wavelength)
        assert 2 * cfg.d_max + cfg.d_sep == pytest.approx(cfg.spacing_y)


class TestSnrConventions:
    def test_zero_db_full_band(self):
        cfg = SystemConfig.full_scale(snr_precoding_db=0.0)
        assert noise_vars_from_snr(cfg)[2] == pytest.approx(128.0)

    def test_ce_noise(self):
        assert noise_vars_from_snr(SystemConfig(snr_ce_db=20.0))[1] == pytest.approx(0.01)

    def test_thirty_db_desk(self):
        cfg = SystemConfig(snr_precoding_db=30.0)
        nv, _, pt = noise_vars_from_snr(cfg)
        assert (nv, pt) == (1.0, pytest.approx(32000.0))


class TestConfigFile:
    def test_round_trip(self, tmp_path):
        cfg = SystemConfig(num_users=2, snr_ce_db=25.0)
        p = tmp_path / "c.cfg"
        p.write_text(dump_config(cfg))
        assert load_config(p) == cfg

    def test_lambda_suffix_and_comments(self):
        cfg = config_from_mapping(parse_kv_text(
            "# desk setup\nspacing_y = 0.7 lambda\nspacing_z = 0.7 lambda  # square\n"))
        assert cfg.spacing_y == pytest.approx(0.7 * cfg.wavelength)
        assert cfg.d_max == pytest.approx((0.7 - 0.1) / 2 * cfg.wavelength)

    @pytest.mark.parametrize("text, fragment", [
        ("bogus = 1", "unknown configuration keys"),
        ("num_users = 2.5", "bad value"),
        ("num_users", "expected 'key = value'"),
        ("num_users = 2\nnum_users = 3", "duplicate"),
    ])
    def test_rejects_bad_files(self, text, fragment):
        with pytest.raises(ConfigError, match=fragment):
            config_from_mapping(parse_kv_text(text))


class TestGeometry:
    def test_single_antenna(self):
        g = build_geometry(SystemConfig(array_y=1, array_z=1, num_users=1))
        np.testing.assert_array_equal(g.reference_positions, [[0.0, 0.0, 0.0]])

    def test_two_by_one(self):
        cfg = SystemConfig(array_y=2, array_z=1, num_users=1)
        g = build_geometry(cfg)
        lam = cfg.wavelength
        np.testing.assert_allclose(g.reference_positions[:, 1], [-lam / 4, lam / 4])
        assert np.all(g.reference_positions[:, 0] == 0)

    def test_four_by_four_aperture(self, desk_config, desk_geometry):
        p = desk_geometry.reference_positions
        lam = desk_config.wavelength
        assert p.shape == (16, 3)
        assert np.ptp(p[:, 1]) == pytest.approx(1.5 * lam)
        assert np.ptp(p[:, 2]) == pytest.approx(1.5 * lam)
        np.testing.assert_allclose(p.mean(axis=0), 0, atol=1e-15)

    @pytest.mark.parametrize("d", [0.5, 0.8, 1.5])
    def test_box_corners_keep_separation(self, d):
        cfg = SystemConfig().with_spacing(d)
        g = build_geometry(cfg)
        corners = np.array(list(itertools.product([-1, 1], [-1, 1]))) * g.d_max
        pts = [g.reference_positions[m, 1:] + corners for m in range(g.num_antennas)]
        for a, b in itertools.combinations(range(g.num_antennas), 2):
            dist = np.linalg.norm(pts[a][:, None] - pts[b][None], axis=2)
            # boxes are axis-aligned squares: the closest points are on facing edges
            gap = max(np.abs(g.reference_positions[a, 1:] - g.reference_positions[b, 1:]).max()
                      - 2 * g.d_max, 0.0)
            assert dist.min() >= gap - 1e-15
            assert gap >= cfg.d_sep * (1 - 1e-9)


class TestSampler:
    def test_deterministic(self, desk_config):
        a = sample_realization(desk_config, 7)
        b = sample_realization(desk_config, 7)
        for x, y in zip(a, b):
            for f in dataclasses.fields(x):
                np.testing.assert_array_equal(getattr(x, f.name), getattr(y, f.name))

    def test_single_path(self):
        paths = sample_realization(SystemConfig(num_paths=1), 3)
        for p in paths:
            assert p.delays[0] == 0.0
            assert abs(p.gains[0]) == pytest.approx(1.0)

    def test_supports_and_normalization(self, desk_config):
        for seed in range(20):
            for p in sample_realization(desk_config, seed):
                assert p.delays[0] == 0.0 and np.all(np.diff(p.delays) >= 0)
                assert np.sum(np.abs(p.gains) ** 2) == pytest.approx(1.0, abs=1e-12)
                th, ph = p.aod.T
                assert np.all((th >= np.pi / 3) & (th <= 2 * np.pi / 3))
                lim = np.deg2rad(desk_config.azimuth_max_deg)
                assert np.all(np.abs(ph) <= lim)
                assert np.all(p.delays < 0.875 * desk_config.delay_ambiguity)
                np.testing.assert_array_equal(p.rx_gain, 1.0)

    def test_mean_rms_delay_spread(self):
        cfg = SystemConfig(num_users=1)
        spreads = [rms_delay_spread(sample_realization(cfg, s)[0]) for s in range(10_000)]
        assert np.mean(spreads) == pytest.approx(cfg.delay_spread, rel=0.10)

    def test_scale_factor_is_below_one(self):
        assert delay_scale_factor(1) == 1.0
        assert 0 < delay_scale_factor(6) < 1

    def test_seed_derivation(self):
        assert realization_seeds(100, range(3)) == [100, 101, 102]

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31), st.integers(1, 8))
    def test_unit_power_property(self, seed, L):
        cfg = SystemConfig(num_paths=L, pilots_per_user=10)
        for p in sample_realization(cfg, seed):
            assert np.sum(np.abs(p.gains) ** 2) == pytest.approx(1.0, abs=1e-12)

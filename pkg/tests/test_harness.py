import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semra.channel import effective_channels, true_ecsi_model
from semra.em_basis import fixed_pattern_weights
from semra.harness import (CSV_HEADER, ResultTable, SweepSpec, ce_eval, design_scheme,
                           emit_outputs, format_table, nmse_db, run_baseline, run_scheme,
                           run_sweep, table_from_csv, table_to_csv)
from semra.scenario import ConfigError, SystemConfig, build_geometry, sample_realization

from conftest import crandn

SMALL = SystemConfig(num_basis=16, array_y=2, array_z=2, num_users=2, num_subcarriers=16,
                     pilots_per_user=8)


class TestNmse:
    def test_examples(self, rng):
        h = crandn(rng, 4, 5)
        assert nmse_db(h, h) == -200.0
        assert nmse_db(np.zeros_like(h), h) == pytest.approx(0.0)
        e = crandn(rng, 4, 5)
        e *= 0.1 * np.linalg.norm(h) / np.linalg.norm(e)
        assert nmse_db(h + e, h) == pytest.approx(-20.0)

    def test_errors(self, rng):
        with pytest.raises(ZeroDivisionError):
            nmse_db(np.ones(3), np.zeros(3))
        with pytest.raises(ValueError, match="shape"):
            nmse_db(np.ones(3), np.ones(4))


class TestBaselines:
    def test_tfa_iso_single_user_single_path(self):
        cfg = SystemConfig(num_users=1, num_paths=1, num_basis=16)
        paths = sample_realization(cfg, 5)
        geo = build_geometry(cfg)
        model = true_ecsi_model(paths, cfg)
        iso = fixed_pattern_weights("iso", 16)
        # |h_{g,m}| = |chi_g| Y00 on every antenna and subcarrier
        gain2 = geo.num_antennas * np.abs(model.chi[0, 0, 0]) ** 2 / (4 * np.pi)
        expect = np.log2(1 + cfg.total_power / cfg.num_subcarriers * gain2 / cfg.noise_var)
        H = effective_channels(model, np.repeat(iso[:, None], geo.num_antennas, 1),
                               geo.reference_positions)
        np.testing.assert_allclose(np.linalg.norm(H[0], axis=1) ** 2, gain2, rtol=1e-12)
        assert run_baseline("TFA-iso", paths, cfg) == pytest.approx(expect, abs=1e-3)

    def test_sma_dominates_tfa(self):
        for seed in range(5):
            paths = sample_realization(SMALL, seed)
            for pattern in ("iso", "38901"):
                tfa = run_baseline(f"TFA-{pattern}", paths, SMALL)
                sma = run_baseline(f"SMA-{pattern}", paths, SMALL)
                assert sma >= tfa * (1 - 1e-6), (seed, pattern)

    def test_plain_sma_is_isotropic(self):
        paths = sample_realization(SMALL, 1)
        assert run_baseline("SMA", paths, SMALL) == run_baseline("SMA-iso", paths, SMALL)

    def test_rejects_unknown(self):
        with pytest.raises(ValueError):
            run_baseline("EMRA", sample_realization(SMALL, 0), SMALL)
        with pytest.raises(ValueError):
            run_scheme("FOO", sample_realization(SMALL, 0), SMALL)


class TestSchemes:
    def test_wmmse_not_below_zf_under_perfect_csi(self):
        for seed in range(5):
            paths = sample_realization(SMALL, seed)
            cache: dict = {}
            zf, _ = design_scheme("SEMRA-ZF", paths, SMALL, cache=cache)
            wm, _ = design_scheme("SEMRA-WMMSE", paths, SMALL, cache=cache)
            assert wm.R >= zf.R * (1 - 1e-12)

    def test_estimated_metrics(self):
        out = run_scheme("EMRA", sample_realization(SMALL, 2), SMALL, "estimated", 2)
        assert set(out) == {"se", "nmse_s", "nmse_e"}
        assert out["nmse_e"] < 10

    def test_port_metrics(self):
        paths = sample_realization(SMALL, 3)
        cache: dict = {}
        out = run_scheme("SEMRA-WMMSE", paths, SMALL, "perfect", 3, ports=3, cache=cache)
        assert set(out) == {"se", "se_quantized", "se_continuous"}
        again = run_scheme("SEMRA-WMMSE", paths, SMALL, "perfect", 3, ports=3, cache=cache)
        assert again == out


class TestSweepSpec:
    @pytest.mark.parametrize("kw, match", [
        (dict(param="power"), "unknown sweep parameter"),
        (dict(values=()), "empty"),
        (dict(values=(20.0, 10.0)), "sorted"),
        (dict(schemes=("FOO",)), "unknown schemes"),
        (dict(csi="partial"), "CSI"),
        (dict(num_realizations=0), "at least one"),
        (dict(param="ports", values=(2.5,)), "integers"),
    ])
    def test_validation(self, kw, match):
        base = dict(param="snr_p", values=(10.0, 20.0))
        with pytest.raises(ConfigError, match=match):
            SweepSpec(**{**base, **kw})

    def test_from_text(self):
        spec = SweepSpec.from_text(
            "param = spacing\nvalues = 0.5, 1.0 1.5\nschemes = EMRA, TFA-iso\n"
            "csi = perfect\nrealizations = 7\nnum_users = 2  # fewer users\n")
        assert spec.param == "spacing" and spec.values == (0.5, 1.0, 1.5)
        assert spec.schemes == ("EMRA", "TFA-iso") and spec.csi == "perfect"
        assert spec.num_realizations == 7 and spec.config.num_users == 2
        lam = spec.config.wavelength
        assert spec.config_at(1.5).spacing_y == pytest.approx(1.5 * lam)

    def test_from_text_errors(self):
        with pytest.raises(ConfigError, match="missing 'param'"):
            SweepSpec.from_text("values = 1 2")
        with pytest.raises(ConfigError, match="numbers"):
            SweepSpec.from_text("param = snr_c\nvalues = a b")
        with pytest.raises(ConfigError):
            SweepSpec.from_text("param = snr_c\nvalues = 1\nnot_a_field = 3")

    def test_config_at(self):
        spec = SweepSpec("snr_c", (0.0, 30.0))
        assert spec.config_at(30.0).snr_ce_db == 30.0
        assert SweepSpec("snr_p", (5.0,)).config_at(5.0).snr_precoding_db == 5.0
        assert SweepSpec("ports", (3,)).config_at(3) == spec.config


def tiny_spec(**kw):
    base = dict(param="snr_p", values=(10.0, 20.0), schemes=("SEMRA-ZF", "TFA-iso"),
                csi="perfect", num_realizations=2, config=SMALL)
    return SweepSpec(**{**base, **kw})


class TestSweep:
    def test_single_realization_rows(self):
        table = run_sweep(tiny_spec(values=(20.0,), num_realizations=1))
        assert [(r[0], r[4], r[7]) for r in table.rows] == [("SEMRA-ZF", "se", 1),
                                                            ("TFA-iso", "se", 1)]
        assert all(r[6] == 0.0 for r in table.rows)

    def test_deterministic_across_workers(self):
        spec = tiny_spec()
        a = table_to_csv(run_sweep(spec, seed=4, jobs=1))
        b = table_to_csv(run_sweep(spec, seed=4, jobs=2))
        assert a == b
        assert table_to_csv(run_sweep(spec, seed=5)) != a

    def test_stderr_from_realizations(self):
        spec = tiny_spec(values=(20.0,), schemes=("TFA-iso",), num_realizations=3)
        vals = [run_baseline("TFA-iso", sample_realization(SMALL, s), SMALL) for s in range(3)]
        row = run_sweep(spec).rows[0]
        assert row[5] == pytest.approx(np.mean(vals), rel=1e-12)
        assert row[6] == pytest.approx(np.std(vals, ddof=1) / np.sqrt(3), rel=1e-10)

    def test_ce_eval(self):
        table = ce_eval(SMALL, 2, seed=1)
        assert {(r[0], r[4]) for r in table.rows} == {
            ("SEMRA", "nmse_s"), ("SEMRA", "nmse_e"), ("EMRA", "nmse_s"), ("EMRA", "nmse_e")}
        assert all(r[7] == 2 for r in table.rows)


def synthetic_table(schemes=("A", "B"), values=(1.0, 2.0, 3.0)):
    rows = [(s, "perfect", "snr_p", v, m, 0.1 * v + i, 0.01, 5)
            for m in ("se", "nmse_e") for i, s in enumerate(schemes) for v in values]
    return ResultTable(rows)


class TestOutputs:
    def test_empty_table(self, tmp_path, caplog):
        with caplog.at_level(logging.WARNING):
            written = emit_outputs(ResultTable(), tmp_path / "out")
        assert [p.name for p in written] == ["sweep.csv"]
        assert written[0].read_text() == ",".join(CSV_HEADER) + "\n"
        assert "empty" in caplog.text

    def test_rows_and_plots(self, tmp_path):
        written = emit_outputs(synthetic_table(), tmp_path, name="demo")
        assert sorted(p.name for p in written) == ["demo.csv", "demo_nmse_e.svg",
                                                   "demo_se.svg"]
        lines = written[0].read_text().splitlines()
        assert lines[0] == ",".join(CSV_HEADER)
        assert sum(line.split(",")[4] == "se" for line in lines[1:]) == 6
        assert written[1].read_text().lstrip().startswith("<?xml")

    def test_plots_are_reproducible(self, tmp_path):
        a = emit_outputs(synthetic_table(), tmp_path / "a")
        b = emit_outputs(synthetic_table(), tmp_path / "b")
        assert [p.read_bytes() for p in a] == [p.read_bytes() for p in b]

    def test_unwritable_directory(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(OSError, match="cannot write results"):
            emit_outputs(synthetic_table(), blocker / "sub")

    def test_format_table(self):
        text = format_table(synthetic_table())
        assert len(text.splitlines()) == 13 and "scheme" in text.splitlines()[0]

    def test_rejects_foreign_csv(self):
        with pytest.raises(ValueError, match="header"):
            table_from_csv("a,b\n1,2\n")

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.sampled_from(["SEMRA-ZF", "EMRA", "TFA-iso"]),
                              st.sampled_from(["perfect", "estimated"]),
                              st.floats(-1e6, 1e6, allow_nan=False),
                              st.sampled_from(["se", "nmse_e"]),
                              st.floats(-1e6, 1e6, allow_nan=False),
                              st.floats(0, 1e3, allow_nan=False),
                              st.integers(1, 1000)), max_size=20))
    def test_csv_round_trip(self, rows):
        table = ResultTable([(s, c, "snr_p", v, m, mu, se, n) for s, c, v, m, mu, se, n in rows])
        assert table_from_csv(table_to_csv(table)).rows == table.rows

"""Experiment orchestration: metrics, baselines, Monte-Carlo sweeps and output.

Every realization is a pure function of ``(config, seed + index)``; sweeps
reduce per-realization results in index order, so the CSV is byte-identical
for any worker count.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .channel import channels_from_ecsi, ecsi_at, sinr_and_se, true_ecsi_model
from .em_basis import fixed_pattern_weights
from .estimation import run_ce
from .precoder_wmmse import (PortGrid, evaluate_design, quantize_positions,
                             run_wmmse_tridomain)
from .precoder_zf import DesignSettings, run_zf_tridomain
from .scenario import (ConfigError, SystemConfig, build_geometry, config_from_mapping,
                       parse_kv_text, realization_seeds, sample_realization)

log = logging.getLogger(__name__)

NMSE_FLOOR_DB = -200.0
SCHEMES = ("SEMRA-WMMSE", "SEMRA-ZF", "EMRA", "TFA-downtilt", "TFA-38901", "TFA-iso", "SMA")
PARAMS = ("snr_c", "snr_p", "spacing", "ports")
CSV_HEADER = ("scheme", "csi", "param", "value", "metric", "mean", "stderr", "n")
# failures a realization may legitimately hit; anything else is a bug
QUARANTINE = (ArithmeticError, np.linalg.LinAlgError)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------
def nmse_db(estimate: np.ndarray, truth: np.ndarray) -> float:
    """10 log10 of summed squared error over summed squared truth, floored at -200 dB."""
    estimate = np.asarray(estimate)
    truth = np.asarray(truth)
    if estimate.shape != truth.shape:
        raise ValueError(f"shape mismatch {estimate.shape} vs {truth.shape}")
    den = float(np.sum(np.abs(truth) ** 2))
    if den == 0:
        raise ZeroDivisionError("NMSE with an all-zero reference")
    ratio = float(np.sum(np.abs(estimate - truth) ** 2)) / den
    return NMSE_FLOOR_DB if ratio <= 10 ** (NMSE_FLOOR_DB / 10) else 10 * math.log10(ratio)


def nmse_s(ce) -> float:
    """NMSE of the recovered sCSI at the scheme's own observation positions."""
    est = np.stack(ce.estimate.scsi)                     # (U, M, S, G)
    return nmse_db(est, ce.true_scsi)


def nmse_e(estimate, paths, config: SystemConfig, geometry=None) -> float:
    """NMSE of the reconstructed eCSI on the reference array."""
    geometry = build_geometry(config) if geometry is None else geometry
    ref = geometry.reference_positions
    return nmse_db(ecsi_at(estimate, ref), ecsi_at(true_ecsi_model(paths, config), ref))


# ---------------------------------------------------------------------------
# Schemes
# ---------------------------------------------------------------------------
def true_rate(paths, config: SystemConfig, alphas, positions, W) -> float:
    """Per-subcarrier sum SE of a design evaluated on the true channel."""
    H = channels_from_ecsi(ecsi_at(true_ecsi_model(paths, config), positions), alphas)
    return sinr_and_se(H, W, config.noise_var)[2]


def settings_for(config: SystemConfig, **changes) -> DesignSettings:
    return DesignSettings(n_max=config.n_max, stop_tol=config.stop_tol, **changes)


def _fixed_pattern(scheme: str) -> str:
    tail = scheme.split("-", 1)[1] if "-" in scheme else "iso"
    return tail


def run_baseline(scheme: str, paths, config: SystemConfig, geometry=None) -> float:
    """TFA / SMA under perfect CSI: WMMSE with the EM block frozen on a fixed pattern.

    ``TFA-<pattern>`` also freezes the positions; ``SMA`` (isotropic) or
    ``SMA-<pattern>`` keeps the spatial block.
    """
    geometry = build_geometry(config) if geometry is None else geometry
    family = scheme.split("-", 1)[0]
    if family not in ("TFA", "SMA"):
        raise ValueError(f"not a fixed-pattern baseline: {scheme!r}")
    alpha = fixed_pattern_weights(_fixed_pattern(scheme), config.num_basis)
    alphas = np.repeat(alpha[:, None], geometry.num_antennas, axis=1)
    settings = settings_for(config, optimize_em=False, optimize_positions=(family == "SMA"))
    model = true_ecsi_model(paths, config)
    st = run_wmmse_tridomain(model, geometry, config.total_power, config.noise_var,
                             settings, alphas0=alphas)
    return st.R / config.num_subcarriers


def design_model(scheme: str, paths, config: SystemConfig, csi: str, seed: int, geometry):
    """eCSI model a scheme designs on, plus CE metrics when estimated."""
    if csi == "perfect":
        return true_ecsi_model(paths, config), {}
    if csi != "estimated":
        raise ValueError(f"unknown CSI mode {csi!r}")
    ce = run_ce(paths, config, "emra" if scheme == "EMRA" else "semra", seed,
                geometry=geometry)
    return ce.estimate, {"nmse_s": nmse_s(ce),
                         "nmse_e": nmse_e(ce.estimate, paths, config, geometry)}


def _cached(cache: dict, key, build):
    if key not in cache:
        cache[key] = build()
    return cache[key]


def design_scheme(scheme: str, paths, config: SystemConfig, csi: str = "perfect",
                  seed: int = 0, ports: int | None = None, cache: dict | None = None):
    """Run one reconfigurable-antenna scheme; returns ``(state, metrics)``.

    SEMRA-WMMSE starts from the SEMRA-ZF design (EM weights, positions and
    precoder), so on the design model it never ends below SEMRA-ZF.  With
    ``ports`` the metrics also hold ``se_quantized``, the continuous design
    snapped to the N x N port grid with a digital-only refresh, and the
    returned design re-optimizes from that snapped point with the discrete
    port sweep; its first block reproduces the refresh, so on the design
    model it never ends below the quantized design.  ``cache`` (a dict owned by the caller)
    shares the channel estimate and the ZF and continuous designs between
    calls on the same realization.
    """
    cache = {} if cache is None else cache
    geometry = build_geometry(config)
    if scheme not in ("SEMRA-WMMSE", "SEMRA-ZF", "EMRA"):
        raise ValueError(f"unknown scheme {scheme!r}")
    family = "EMRA" if scheme == "EMRA" else "SEMRA"
    key = (family, csi, seed)
    model, metrics = _cached(cache, key,
                             lambda: design_model(family, paths, config, csi, seed, geometry))
    out = dict(metrics)
    P, nv = config.total_power, config.noise_var
    if scheme == "EMRA":
        st = run_zf_tridomain(model, geometry, P, nv,
                              settings_for(config, optimize_positions=False))
    else:
        st = zf = _cached(cache, key + ("zf",), lambda: run_zf_tridomain(
            model, geometry, P, nv, settings_for(config)))
    if scheme == "SEMRA-WMMSE":
        grid = None if ports is None else PortGrid.for_geometry(geometry, ports)
        cont = _cached(cache, key + ("continuous",), lambda: run_wmmse_tridomain(
            model, geometry, P, nv, settings_for(config), alphas0=zf.alphas,
            positions0=zf.positions, W0=zf.W))
        st = cont
        if grid is not None:
            snapped = quantize_positions(cont.positions, grid)
            qst = evaluate_design(model, cont.alphas, snapped, P, nv, settings_for(config),
                                  W0=cont.W)
            st = run_wmmse_tridomain(model, geometry, P, nv, settings_for(config),
                                     alphas0=cont.alphas, positions0=snapped,
                                     port_grid=grid, W0=cont.W)
            out["se_quantized"] = true_rate(paths, config, qst.alphas, qst.positions, qst.W)
            out["se_continuous"] = true_rate(paths, config, cont.alphas, cont.positions, cont.W)
    return st, out


def run_scheme(scheme: str, paths, config: SystemConfig, csi: str = "perfect", seed: int = 0,
               ports: int | None = None, cache: dict | None = None) -> dict[str, float]:
    """Metrics of one scheme on one realization; SE is per subcarrier (R / G).

    Fixed-pattern baselines always use perfect CSI; the other schemes run
    through :func:`design_scheme` and are scored on the true channel.
    """
    if scheme.startswith(("TFA", "SMA")):
        return {"se": run_baseline(scheme, paths, config)}
    st, out = design_scheme(scheme, paths, config, csi, seed, ports, cache)
    out["se"] = true_rate(paths, config, st.alphas, st.positions, st.W)
    return out


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class SweepSpec:
    param: str
    values: tuple[float, ...]
    schemes: tuple[str, ...] = ("SEMRA-WMMSE", "SEMRA-ZF", "EMRA")
    csi: str = "estimated"
    num_realizations: int = 100
    config: SystemConfig = field(default_factory=SystemConfig)

    def __post_init__(self):
        if self.param not in PARAMS:
            raise ConfigError(f"unknown sweep parameter {self.param!r}")
        if not self.values:
            raise ConfigError("sweep value list is empty")
        if list(self.values) != sorted(self.values):
            raise ConfigError("sweep values must be sorted")
        bad = [s for s in self.schemes if s not in SCHEMES and not s.startswith("SMA-")]
        if bad:
            raise ConfigError(f"unknown schemes: {', '.join(bad)}")
        if self.csi not in ("perfect", "estimated"):
            raise ConfigError(f"unknown CSI mode {self.csi!r}")
        if self.num_realizations < 1:
            raise ConfigError("need at least one realization")
        if self.param == "ports" and any(v != int(v) or v < 1 for v in self.values):
            raise ConfigError("port grid sizes must be positive integers")

    def config_at(self, value: float) -> SystemConfig:
        c = self.config
        if self.param == "snr_c":
            return c.replace(snr_ce_db=float(value))
        if self.param == "snr_p":
            return c.replace(snr_precoding_db=float(value))
        if self.param == "spacing":
            return c.with_spacing(float(value))
        return c

    @classmethod
    def from_text(cls, text: str, base: SystemConfig | None = None) -> "SweepSpec":
        """Parse ``key = value`` lines; sweep keys plus any configuration keys."""
        raw = parse_kv_text(text)
        try:
            param = raw.pop("param")
            values = tuple(float(v) for v in raw.pop("values").replace(",", " ").split())
        except KeyError as exc:
            raise ConfigError(f"sweep file is missing {exc.args[0]!r}") from None
        except ValueError:
            raise ConfigError("sweep values must be numbers") from None
        kw = {}
        if "schemes" in raw:
            kw["schemes"] = tuple(s for s in raw.pop("schemes").replace(",", " ").split())
        if "csi" in raw:
            kw["csi"] = raw.pop("csi")
        if "realizations" in raw:
            try:
                kw["num_realizations"] = int(raw.pop("realizations"))
            except ValueError:
                raise ConfigError("realizations must be an integer") from None
        config = config_from_mapping(raw, base) if (raw or base is None) else base
        return cls(param=param, values=values, config=config, **kw)

    def replace(self, **changes) -> "SweepSpec":
        return dataclasses.replace(self, **changes)


@dataclass
class ResultTable:
    """Rows of (scheme, csi, param, value, metric, mean, stderr, n)."""

    rows: list[tuple] = field(default_factory=list)
    failures: int = 0

    def lookup(self, scheme: str, metric: str = "se", csi: str | None = None) -> dict:
        return {r[3]: r for r in self.rows
                if r[0] == scheme and r[4] == metric and (csi is None or r[1] == csi)}

    def mean(self, scheme: str, value: float, metric: str = "se") -> float:
        return self.lookup(scheme, metric)[value][5]


def _scheme_csi(scheme: str, csi: str) -> str:
    return "perfect" if scheme.startswith(("TFA", "SMA")) else csi


def run_realization(spec: SweepSpec, index: int, seed: int) -> dict:
    """All (value, scheme) metrics of one realization; failures quarantined."""
    rseed = realization_seeds(seed, [index])[0]
    out: dict = {}
    # the ports sweep shares one channel estimate and continuous design
    cache: dict = {}
    for value in spec.values:
        config = spec.config_at(value)
        paths = sample_realization(config, rseed)
        ports = int(value) if spec.param == "ports" else None
        if ports is None:
            cache = {}
        for scheme in spec.schemes:
            try:
                out[(value, scheme)] = run_scheme(scheme, paths, config,
                                                  _scheme_csi(scheme, spec.csi), rseed, ports,
                                                  cache)
            except QUARANTINE as exc:
                log.warning("realization %d (%s=%g, %s) quarantined: %s",
                            index, spec.param, value, scheme, exc)
                out[(value, scheme)] = None
    return out


def _run_one(args):
    return run_realization(*args)


def run_sweep(spec: SweepSpec, seed: int = 0, jobs: int = 1) -> ResultTable:
    """Monte-Carlo sweep; results are reduced in realization order."""
    tasks = [(spec, i, seed) for i in range(spec.num_realizations)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_one, tasks))
    else:
        results = [_run_one(t) for t in tasks]
    table = ResultTable()
    for value in spec.values:
        for scheme in spec.schemes:
            per = [r[(value, scheme)] for r in results]
            ok = [p for p in per if p is not None]
            table.failures += len(per) - len(ok)
            metrics = sorted({k for p in ok for k in p})
            for metric in metrics:
                vals = np.array([p[metric] for p in ok if metric in p], dtype=float)
                n = vals.size
                mean = float(vals.mean())
                se = float(vals.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
                table.rows.append((scheme, _scheme_csi(scheme, spec.csi), spec.param,
                                   float(value), metric, mean, se, n))
            if not ok:
                log.warning("%s at %s=%g: every realization failed", scheme, spec.param, value)
    if table.failures:
        log.warning("%d scheme runs quarantined", table.failures)
    return table


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------
def table_to_csv(table: ResultTable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in table.rows:
        w.writerow([r[0], r[1], r[2], repr(r[3]), r[4], repr(r[5]), repr(r[6]), r[7]])
    return buf.getvalue()


def table_from_csv(text: str) -> ResultTable:
    reader = csv.reader(io.StringIO(text))
    header = tuple(next(reader))
    if header != CSV_HEADER:
        raise ValueError(f"unexpected CSV header {header}")
    rows = [(s, c, p, float(v), m, float(mu), float(se), int(n))
            for s, c, p, v, m, mu, se, n in reader]
    return ResultTable(rows)


def plot_metric(table: ResultTable, metric: str, path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    # fixed salt keeps the SVG element ids, and so the bytes, reproducible
    with plt.rc_context({"svg.hashsalt": "semra"}):
        fig, ax = plt.subplots(figsize=(6, 4))
        series: dict[tuple, list] = {}
        for r in table.rows:
            if r[4] == metric:
                series.setdefault((r[0], r[1]), []).append(r)
        for (scheme, csi), rows in series.items():
            rows.sort(key=lambda r: r[3])
            ax.errorbar([r[3] for r in rows], [r[5] for r in rows], yerr=[r[6] for r in rows],
                        marker="o", capsize=3, label=f"{scheme} ({csi})")
        param = table.rows[0][2]
        ax.set_xlabel(param)
        ax.set_ylabel(metric)
        ax.grid(True, alpha=0.3)
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)


def emit_outputs(table: ResultTable, out_dir: str | Path, name: str = "sweep") -> list[Path]:
    """Write ``<name>.csv`` and one ``<name>_<metric>.svg`` per metric."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        csv_path = out / f"{name}.csv"
        csv_path.write_text(table_to_csv(table))
    except OSError as exc:
        raise OSError(f"cannot write results to {out}: {exc}") from exc
    written = [csv_path]
    if not table.rows:
        log.warning("empty result table: wrote header-only CSV and no plots")
        return written
    for metric in sorted({r[4] for r in table.rows}):
        p = out / f"{name}_{metric}.svg"
        plot_metric(table, metric, p)
        written.append(p)
    return written


def format_table(table: ResultTable) -> str:
    lines = [f"{'scheme':<14}{'csi':<10}{'value':>8}  {'metric':<14}{'mean':>10}{'stderr':>9}{'n':>5}"]
    for s, c, _, v, m, mu, se, n in table.rows:
        lines.append(f"{s:<14}{c:<10}{v:>8.3g}  {m:<14}{mu:>10.3f}{se:>9.3f}{n:>5}")
    return "\n".join(lines)


def ce_eval(config: SystemConfig, realizations: int, seed: int = 0,
            schemes: Sequence[str] = ("semra", "emra")) -> ResultTable:
    """NMSE-S / NMSE-E of the CE pipelines over realizations (no precoding)."""
    table = ResultTable()
    geometry = build_geometry(config)
    for scheme in schemes:
        vals = {"nmse_s": [], "nmse_e": []}
        for rseed in realization_seeds(seed, range(realizations)):
            paths = sample_realization(config, rseed)
            try:
                ce = run_ce(paths, config, scheme, rseed, geometry=geometry)
            except QUARANTINE as exc:
                log.warning("CE %s seed %d quarantined: %s", scheme, rseed, exc)
                table.failures += 1
                continue
            vals["nmse_s"].append(nmse_s(ce))
            vals["nmse_e"].append(nmse_e(ce.estimate, paths, config, geometry))
        for metric, v in vals.items():
            v = np.array(v)
            if v.size:
                se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
                table.rows.append((scheme.upper(), "estimated", "snr_c", config.snr_ce_db,
                                   metric, float(v.mean()), se, int(v.size)))
    return table

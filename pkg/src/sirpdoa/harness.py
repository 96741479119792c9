"""
Monte-Carlo experiment runner: configuration, per-trial seeding, estimator
execution, permutation-matched MSE aggregation and result files.
"""

from __future__ import annotations

import csv
import itertools
import json
import logging
import math
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigurationError, NumericalError
from .estimators import CovarianceUpdate, StopCriterion, cmle, imape, imle
from .noise_model import (
    TextureKind,
    TextureParams,
    build_speckle_covariance,
    db_to_snr,
    sample_noise,
    scale_waveforms_to_snr,
    texture_mean,
)
from .numerics import GridSpec, normalize_trace
from .signal_model import ArrayGeometry, check_doas, generate_waveforms, synthesize

logger = logging.getLogger(__name__)

ESTIMATORS = ("CMLE", "IMAPE", "IMLE")
CSV_HEADER = ("snr_db", "estimator", "mse_deg2", "trials", "failed_trials")
FAILED_FRACTION_WARNING = 0.10


@dataclass(frozen=True)
class ExperimentConfig:
    n_sensors: int = 6
    spacing: float = 1.0
    doas_deg: tuple = (30.0, 60.0)
    n_snapshots: int = 10
    texture_kind: TextureKind = TextureKind.INVERSE_GAMMA
    shape_a: float = 1.1
    scale_b: float = 2.0
    speckle_correlation: float = 0.9
    speckle_phase_deg: float = 90.0
    snr_grid_db: tuple = (-5.0, 0.0, 5.0, 10.0, 15.0, 20.0, 25.0)
    trials: int = 100
    estimators: tuple = ESTIMATORS
    stop: StopCriterion = StopCriterion()
    grid: GridSpec = GridSpec()
    covariance: CovarianceUpdate = CovarianceUpdate()
    master_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "texture_kind", TextureKind.parse(self.texture_kind))
        object.__setattr__(self, "doas_deg", tuple(float(d) for d in self.doas_deg))
        object.__setattr__(self, "snr_grid_db", tuple(float(s) for s in self.snr_grid_db))
        object.__setattr__(self, "estimators", tuple(sorted({str(e).upper() for e in self.estimators})))
        if self.trials < 1:
            raise ConfigurationError("trials must be >= 1")
        if not self.snr_grid_db:
            raise ConfigurationError("snr_grid_db must not be empty")
        if len(set(self.doas_deg)) != len(self.doas_deg):
            raise ConfigurationError("true DOAs must be distinct")
        if self.n_snapshots < 1:
            raise ConfigurationError("snapshots must be >= 1")
        unknown = set(self.estimators) - set(ESTIMATORS)
        if unknown or not self.estimators:
            raise ConfigurationError(f"estimators must be a non-empty subset of {ESTIMATORS}, got {self.estimators}")
        if not 0 <= self.master_seed < 2**64:
            raise ConfigurationError("master_seed must be an unsigned 64-bit integer")
        check_doas(np.deg2rad(sorted(self.doas_deg)))
        if self.n_sources >= self.n_sensors:
            raise ConfigurationError("need fewer sources than sensors")
        # validates a, b and that the SNR definition has a finite texture mean
        texture_mean(self.texture)

    @property
    def n_sources(self) -> int:
        return len(self.doas_deg)

    @property
    def geometry(self) -> ArrayGeometry:
        return ArrayGeometry.ula(self.n_sensors, self.spacing)

    @property
    def texture(self) -> TextureParams:
        return TextureParams(self.texture_kind, self.shape_a, self.scale_b)

    @property
    def truth(self) -> np.ndarray:
        return np.deg2rad(sorted(self.doas_deg))

    def speckle(self) -> np.ndarray:
        q = build_speckle_covariance(self.n_sensors, 1.0, self.speckle_correlation,
                                     np.deg2rad(self.speckle_phase_deg))
        return normalize_trace(q)

    def replace(self, **changes) -> "ExperimentConfig":
        values = {f: getattr(self, f) for f in self.__dataclass_fields__}
        values.update(changes)
        return ExperimentConfig(**values)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        kw = {}
        try:
            array = dict(data.pop("array", {}))
            kw["n_sensors"] = int(array.pop("n_sensors", 6))
            kw["spacing"] = float(array.pop("spacing", 1.0))
            _no_leftovers("array", array)
            kw["doas_deg"] = tuple(data.pop("doas_deg", (30.0, 60.0)))
            sources = data.pop("sources", None)
            if sources is not None and int(sources) != len(kw["doas_deg"]):
                raise ConfigurationError(f"sources={sources} but {len(kw['doas_deg'])} DOAs given")
            kw["n_snapshots"] = int(data.pop("snapshots", 10))
            texture = dict(data.pop("texture", {}))
            kw["texture_kind"] = TextureKind.parse(texture.pop("kind", "inverse-gamma"))
            kw["shape_a"] = float(texture.pop("shape", 1.1))
            kw["scale_b"] = float(texture.pop("scale", 2.0))
            _no_leftovers("texture", texture)
            speckle = dict(data.pop("speckle", {}))
            kw["speckle_correlation"] = float(speckle.pop("correlation", 0.9))
            kw["speckle_phase_deg"] = float(speckle.pop("phase_deg", 90.0))
            _no_leftovers("speckle", speckle)
            if "snr_grid_db" in data:
                kw["snr_grid_db"] = tuple(data.pop("snr_grid_db"))
            kw["trials"] = int(data.pop("trials", 100))
            kw["estimators"] = tuple(data.pop("estimators", ESTIMATORS))
            stop = dict(data.pop("stop", {}))
            kw["stop"] = StopCriterion(int(stop.pop("max_iterations", 10)),
                                       float(stop.pop("theta_tol_rad", 1e-4)))
            _no_leftovers("stop", stop)
            grid = dict(data.pop("grid", {}))
            kw["grid"] = GridSpec.from_degrees(
                lo=float(grid.pop("lo_deg", -90.0)), hi=float(grid.pop("hi_deg", 90.0)),
                coarse_step=float(grid.pop("coarse_step_deg", 1.0)),
                refine_tolerance=float(grid.pop("refine_tolerance_deg", 0.01)),
                min_separation=float(grid.pop("min_separation_deg", 1.0)),
            )
            _no_leftovers("grid", grid)
            cov = dict(data.pop("covariance", {}))
            kw["covariance"] = CovarianceUpdate(float(cov.pop("loading", 0.1)),
                                                int(cov.pop("inner_repeats", 1)),
                                                bool(cov.pop("safeguard", True)),
                                                int(cov.pop("max_backtracks", 10)))
            _no_leftovers("covariance", cov)
            kw["master_seed"] = int(data.pop("master_seed", 0))
            data.pop("description", None)
            _no_leftovers("config", data)
        except (TypeError, AttributeError, ValueError) as exc:
            if isinstance(exc, ConfigurationError):
                raise
            raise ConfigurationError(f"malformed configuration: {exc}") from exc
        return cls(**kw)

    def to_dict(self) -> dict:
        g = self.grid
        return {
            "array": {"n_sensors": self.n_sensors, "spacing": self.spacing},
            "doas_deg": list(self.doas_deg),
            "snapshots": self.n_snapshots,
            "texture": {"kind": self.texture_kind.value, "shape": self.shape_a, "scale": self.scale_b},
            "speckle": {"correlation": self.speckle_correlation, "phase_deg": self.speckle_phase_deg},
            "snr_grid_db": list(self.snr_grid_db),
            "trials": self.trials,
            "estimators": list(self.estimators),
            "stop": {"max_iterations": self.stop.max_iterations, "theta_tol_rad": self.stop.theta_tol},
            "grid": {
                "lo_deg": float(np.rad2deg(g.lo)), "hi_deg": float(np.rad2deg(g.hi)),
                "coarse_step_deg": float(np.rad2deg(g.coarse_step)),
                "refine_tolerance_deg": float(np.rad2deg(g.refine_tolerance)),
                "min_separation_deg": float(np.rad2deg(g.min_separation)),
            },
            "covariance": asdict(self.covariance),
            "master_seed": self.master_seed,
        }


def _no_leftovers(section: str, rest: dict):
    if rest:
        raise ConfigurationError(f"unknown key(s) in {section}: {sorted(rest)}")


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: top level must be a JSON object")
    return ExperimentConfig.from_dict(data)


# --------------------------------------------------------------------------
# trials


@dataclass
class TrialResult:
    snr_db: float
    trial: int
    estimates_deg: dict = field(default_factory=dict)
    iterations: dict = field(default_factory=dict)
    wall_time: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)
    theta_traces_deg: dict = field(default_factory=dict)
    ll_traces: dict = field(default_factory=dict)


def trial_seed(master_seed: int, snr_index: int, trial_index: int) -> np.random.SeedSequence:
    """Per-cell seed; independent of how many trials or SNRs are run in total."""
    return np.random.SeedSequence(master_seed, spawn_key=(snr_index, trial_index))


def _substream(seed: np.random.SeedSequence, k: int) -> np.random.Generator:
    child = np.random.SeedSequence(seed.entropy, spawn_key=tuple(seed.spawn_key) + (k,))
    return np.random.default_rng(child)


def run_trial(config: ExperimentConfig, snr_db: float, seed, trial_index: int = 0) -> TrialResult:
    """Generate one data block at ``snr_db`` and run every selected estimator on it."""
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    geom = config.geometry
    q = config.speckle()
    params = config.texture
    S = generate_waveforms(config.n_sources, config.n_snapshots, _substream(seed, 0))
    S = scale_waveforms_to_snr(S, db_to_snr(snr_db), params, q)
    noise = sample_noise(params, q, config.n_snapshots, _substream(seed, 1))
    X = synthesize(geom, config.truth, S, noise.noise)

    result = TrialResult(snr_db=float(snr_db), trial=int(trial_index))
    for name in config.estimators:
        start = time.perf_counter()
        try:
            if name == "CMLE":
                theta = cmle(geom, X, config.n_sources, config.grid)
                traces, lls, iters = [theta], [], 1
            else:
                if name == "IMLE":
                    report = imle(geom, X, config.n_sources, config.stop, config.grid, config.covariance)
                else:
                    report = imape(geom, X, config.n_sources, config.texture_kind, config.stop,
                                   config.grid, _substream(seed, 2), config.covariance)
                theta, traces, lls, iters = (report.theta, report.theta_trace,
                                             report.ll_trace, report.iterations_used)
        except NumericalError as exc:
            logger.warning("%s failed at snr=%g trial=%d: %s", name, snr_db, trial_index, exc)
            result.failures[name] = f"{type(exc).__name__}: {exc}"
            continue
        finally:
            result.wall_time[name] = time.perf_counter() - start
        result.estimates_deg[name] = np.rad2deg(theta).tolist()
        result.iterations[name] = int(iters)
        result.theta_traces_deg[name] = [np.rad2deg(t).tolist() for t in traces]
        result.ll_traces[name] = [float(v) for v in lls]
    return result


def mse_permutation_matched(estimates, truth) -> float:
    """Mean squared error (per source, per trial) under the best source pairing.

    ``estimates`` is a list of DOA vectors (one per trial) in the same units
    as ``truth``.
    """
    truth = np.asarray(truth, dtype=float).ravel()
    total, count = 0.0, 0
    for est in estimates:
        est = np.asarray(est, dtype=float).ravel()
        if est.shape != truth.shape:
            raise ConfigurationError(f"estimate has {est.size} DOAs, truth has {truth.size}")
        best = min(float(np.sum((est[list(p)] - truth) ** 2))
                   for p in itertools.permutations(range(truth.size)))
        total += best
        count += truth.size
    if count == 0:
        return math.nan
    return total / count


def squared_errors(trials, estimator: str, truth_deg) -> np.ndarray:
    """Per-trial permutation-matched squared error (averaged over sources)."""
    return np.array([mse_permutation_matched([t.estimates_deg[estimator]], truth_deg)
                     for t in trials if estimator in t.estimates_deg])


def bootstrap_interval(values, level: float = 0.95, n_boot: int = 2000, rng=0):
    """Percentile bootstrap interval of the mean of ``values``."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return (math.nan, math.nan)
    rng = np.random.default_rng(rng)
    idx = rng.integers(0, values.size, size=(n_boot, values.size))
    means = values[idx].mean(axis=1)
    tail = 50 * (1 - level)
    lo, hi = np.percentile(means, [tail, 100 - tail])
    return float(lo), float(hi)


# --------------------------------------------------------------------------
# experiments


@dataclass(frozen=True)
class MseRow:
    snr_db: float
    estimator: str
    mse_deg2: float
    trials: int
    failed_trials: int


@dataclass
class MseTable:
    rows: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    trial_results: list = field(default_factory=list, repr=False, compare=False)

    def sorted_rows(self) -> list:
        return sorted(self.rows, key=lambda r: (r.snr_db, r.estimator))

    def get(self, snr_db: float, estimator: str) -> MseRow:
        for r in self.rows:
            if r.snr_db == snr_db and r.estimator == estimator:
                return r
        raise KeyError((snr_db, estimator))

    def trials_at(self, snr_db: float) -> list:
        return [t for t in self.trial_results if t.snr_db == snr_db]


def _run_cell(args):
    config, snr_index, trial_index = args
    seed = trial_seed(config.master_seed, snr_index, trial_index)
    return run_trial(config, config.snr_grid_db[snr_index], seed, trial_index)


def aggregate(config: ExperimentConfig, trials) -> list:
    truth_deg = np.rad2deg(config.truth)
    rows = []
    for snr in config.snr_grid_db:
        at = [t for t in trials if t.snr_db == snr]
        for name in config.estimators:
            ok = [t.estimates_deg[name] for t in at if name in t.estimates_deg]
            failed = sum(1 for t in at if name in t.failures)
            rows.append(MseRow(snr, name, mse_permutation_matched(ok, truth_deg), len(ok), failed))
    return sorted(rows, key=lambda r: (r.snr_db, r.estimator))


def run_experiment(config: ExperimentConfig, parallel: int = 1) -> MseTable:
    """Run every (SNR, trial) cell and aggregate MSE per estimator and SNR.

    Cells are independent; with ``parallel > 1`` they run in worker
    processes and the result does not depend on completion order.
    """
    start = time.time()
    cells = [(config, i, k) for i in range(len(config.snr_grid_db)) for k in range(config.trials)]
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            trials = list(pool.map(_run_cell, cells, chunksize=max(1, len(cells) // (4 * parallel))))
    else:
        trials = [_run_cell(c) for c in cells]
    rows = aggregate(config, trials)

    warnings = []
    for r in rows:
        total = r.trials + r.failed_trials
        if total and r.failed_trials / total > FAILED_FRACTION_WARNING:
            warnings.append(f"{r.estimator} failed in {r.failed_trials}/{total} trials at {r.snr_db} dB")
    for w in warnings:
        logger.warning(w)
    metadata = {
        "config": config.to_dict(),
        "master_seed": config.master_seed,
        "seed_derivation": "numpy SeedSequence(master_seed, spawn_key=(snr_index, trial_index))",
        "versions": {"sirpdoa": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "wall_time_s": time.time() - start,
        "warnings": warnings,
    }
    return MseTable(rows=rows, metadata=metadata, trial_results=trials)


# --------------------------------------------------------------------------
# files


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".meta.json")


def write_results(table: MseTable, path) -> Path:
    """CSV of the MSE table plus a JSON metadata sidecar next to it."""
    path = Path(path)
    try:
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_HEADER)
            for r in table.sorted_rows():
                w.writerow([repr(float(r.snr_db)), r.estimator, repr(float(r.mse_deg2)), r.trials, r.failed_trials])
        sidecar_path(path).write_text(json.dumps(table.metadata, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write results to {path}: {exc}") from exc
    return path


def read_results(path) -> MseTable:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != CSV_HEADER:
            raise ConfigurationError(f"{path}: unexpected header {header}")
        rows = [MseRow(float(s), e, float(m), int(n), int(f)) for s, e, m, n, f in reader]
    meta = sidecar_path(path)
    metadata = json.loads(meta.read_text()) if meta.exists() else {}
    return MseTable(rows=rows, metadata=metadata)


def plot_series(table: MseTable) -> dict:
    """``x = snr_db``, ``y = log10(mse_deg2)`` per estimator."""
    series = {}
    for r in table.sorted_rows():
        s = series.setdefault(r.estimator, {"estimator": r.estimator, "x": [], "y": []})
        s["x"].append(r.snr_db)
        s["y"].append(math.log10(r.mse_deg2) if r.mse_deg2 > 0 else None)
    return {"x_label": "snr_db", "y_label": "log10_mse_deg2",
            "series": [series[k] for k in sorted(series)]}


def write_plot_data(table: MseTable, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(plot_series(table), indent=2) + "\n")
    return path


def write_trials(table: MseTable, path) -> Path:
    """One row per (SNR, trial, estimator) with the DOA estimates in degrees."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("snr_db", "trial", "estimator", "doas_deg", "iterations", "failure"))
        for t in sorted(table.trial_results, key=lambda t: (t.snr_db, t.trial)):
            for name in sorted(set(t.estimates_deg) | set(t.failures)):
                est = t.estimates_deg.get(name)
                w.writerow((repr(t.snr_db), t.trial, name,
                            "" if est is None else " ".join(repr(v) for v in est),
                            t.iterations.get(name, ""), t.failures.get(name, "")))
    return path

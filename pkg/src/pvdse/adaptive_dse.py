"""Identify-then-estimate pipeline with event-driven re-identification.

Phase one excites the unit, logs states, derivatives and inputs over a short
window and runs the feature-selection sparse regression. Phase two runs the
UKF on the identified model using measurements interpolated to the
simulation step. When a parameter change is announced, a fresh window is
collected while the filter keeps running on the stale model, and the newly
identified model is swapped in at the end of that window.
"""
from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import pv_models as pm
from . import sindy
from . import ukf as uk
from .errors import IdentificationError, InvalidInputError, ObservabilityError, SingularityError
from .observability import validate_selector
from .preprocessing import DataMatrices, SmoothingConfig, assemble_matrices, savitzky_golay
from .simulator import Disconnect, MeasurementSeries, ParamChange, Scenario, Trajectory, simulate

EPS_NORM = 1e-9
RETRAIN_SOURCES = ("truth", "partial")


@dataclass
class PipelineConfig:
    """Settings shared by identification and estimation.

    ``library=None`` selects the default PV library for the unit kind.
    ``p0`` is the initial covariance; ``q_scale`` multiplies the scenario's
    process intensity times ``dt`` to give the per-step filter covariance.
    A retrained model whose relative residual on its own window exceeds
    ``max_retrain_residual`` is rejected. The filter is declared diverged when
    the estimate norm exceeds ``divergence_factor`` times its starting norm.
    """

    window: float = 0.5
    gamma: float = 15.0
    library: sindy.LibrarySpec | None = None
    smoothing: SmoothingConfig | None = None
    derivative: str = "forward"
    refit: bool = False
    ukf_mode: str = "mixed"
    p0: float = 1.0
    q_scale: float = 1.0
    q_floor: float = 0.0
    adaptive: bool = True
    retrain_source: str = "truth"
    min_rank_fraction: float = 0.9
    max_retrain_residual: float = 0.5
    divergence_factor: float = 1e3

    def __post_init__(self):
        if not self.window > 0:
            raise InvalidInputError("identification window must be positive")
        if not self.gamma > 1:
            raise InvalidInputError("gamma must exceed 1")
        if self.retrain_source not in RETRAIN_SOURCES:
            raise InvalidInputError(f"retrain_source must be one of {RETRAIN_SOURCES}")
        if self.ukf_mode not in uk.MODES:
            raise InvalidInputError(f"ukf_mode must be one of {uk.MODES}")

    def library_for(self, kind: str) -> sindy.LibrarySpec:
        return self.library if self.library is not None else sindy.default_pv_library(kind)

    def check_window(self, kind: str, dt: float) -> None:
        size = len(self.library_for(kind))
        if self.window < 10 * size * dt - 1e-12:
            raise InvalidInputError(
                f"window {self.window} s gives fewer than 10 rows per library term ({size} terms at dt={dt})"
            )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["library"] = None if self.library is None else self.library.to_list()
        return d


@dataclass
class RetrainEvent:
    t_event: float
    t_start: float
    t_swap: float
    success: bool
    wall_seconds: float
    nonzero: int = 0
    message: str = ""


@dataclass
class EstimationReport:
    unit: int
    kind: str
    t: np.ndarray
    xhat: np.ndarray
    truth: np.ndarray | None
    trace_p: np.ndarray
    model: str = ""
    retrains: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    diverged: bool = False
    message: str = ""

    def mask(self, t0: float | None = None, t1: float | None = None) -> np.ndarray:
        m = np.ones(self.t.size, dtype=bool)
        if t0 is not None:
            m &= self.t >= t0 - 1e-9
        if t1 is not None:
            m &= self.t <= t1 + 1e-9
        return m

    def normalized_error(self, t0: float | None = None, t1: float | None = None) -> float:
        if self.truth is None:
            raise InvalidInputError("report has no truth to compare against")
        if self.diverged:
            return float("inf")
        m = self.mask(t0, t1)
        return normalized_error(self.xhat[m], self.truth[m])

    def summary(self) -> dict:
        out = {
            "unit": self.unit,
            "kind": self.kind,
            "model": self.model,
            "t_start": float(self.t[0]) if self.t.size else None,
            "t_end": float(self.t[-1]) if self.t.size else None,
            "steps": int(self.t.size),
            "diverged": self.diverged,
            "message": self.message,
            "retrains": [asdict(r) for r in self.retrains],
            "timings": self.timings,
        }
        if self.truth is not None:
            err = self.normalized_error()
            out["normalized_error"] = err if np.isfinite(err) else None
        return out

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2)


def normalized_error(estimates, truth) -> float:
    """Mean over steps of ``||xhat - x|| / max(||x||, 1e-9)``."""
    est = np.asarray(estimates, dtype=float)
    tru = np.asarray(truth, dtype=float)
    if est.shape != tru.shape:
        raise InvalidInputError(f"length mismatch: estimates {est.shape} vs truth {tru.shape}")
    if est.shape[0] == 0:
        raise InvalidInputError("empty series")
    num = np.linalg.norm(est - tru, axis=-1)
    den = np.maximum(np.linalg.norm(tru, axis=-1), EPS_NORM)
    return float(np.mean(num / den))


def write_estimates_csv(path, reports, stride: int = 1) -> None:
    """``t,unit,xhat1..xhatn,trP`` rows, every ``stride``-th step."""
    n_max = max(r.xhat.shape[1] for r in reports)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "unit"] + [f"xhat{i + 1}" for i in range(n_max)] + ["trP"])
        for r in reports:
            for k in range(0, r.t.size, stride):
                if not np.all(np.isfinite(r.xhat[k])):
                    continue
                row = [format(float(r.t[k]), ".17g"), r.unit] + [format(float(v), ".17g") for v in r.xhat[k]]
                row += [""] * (n_max - r.xhat.shape[1])
                w.writerow(row + [format(float(r.trace_p[k]), ".17g")])


# --- identification ---------------------------------------------------------
def identification_data(source, config: PipelineConfig) -> DataMatrices:
    """Regression matrices from a ``Trajectory``, a ``DataMatrices`` or ``(t, x, u)``."""
    if isinstance(source, DataMatrices):
        return source
    if isinstance(source, Trajectory):
        t, x, u = source.t, source.x, source.u
    else:
        t, x, u = source
    return assemble_matrices(t, x, u, config.smoothing, config.derivative)


def run_identification(source, config: PipelineConfig, kind: str) -> sindy.SparseModel:
    """Collect, (optionally) smooth, differentiate and run feature-selection sparse regression."""
    data = identification_data(source, config)
    spec = config.library_for(kind)
    if data.m < len(spec):
        raise IdentificationError(
            f"{data.m} samples cannot determine {len(spec)} library coefficients", {"samples": data.m, "terms": len(spec)}
        )
    return sindy.feature_select_sparse_regression(
        data, spec, config.gamma, refit=config.refit, min_rank_fraction=config.min_rank_fraction
    )


# --- estimation ---------------------------------------------------------------
def _measurement_grid(meas: MeasurementSeries, t: np.ndarray) -> np.ndarray:
    """Linear interpolation of the sampled outputs onto the filter grid."""
    return np.column_stack([np.interp(t, meas.t, meas.y[:, j]) for j in range(meas.y.shape[1])])


def _filter_q(unit_noise_q, n: int, dt: float, config: PipelineConfig) -> np.ndarray:
    q = uk.as_cov(unit_noise_q, n) * dt * config.q_scale
    return q + config.q_floor * np.eye(n)


class _Estimator:
    """Runs the filter over index ranges of a trajectory, allowing model swaps."""

    def __init__(self, traj: Trajectory, meas: MeasurementSeries, transition, q, r, selector, config: PipelineConfig):
        self.traj = traj
        self.y = _measurement_grid(meas, traj.t)
        n = traj.x.shape[1]
        self.filter = uk.UnscentedKalmanFilter(transition, selector, n, uk.UkfConfig(q, r, config.p0, config.ukf_mode))
        self.config = config
        self.xhat = np.full(traj.x.shape, np.nan)
        self.trace_p = np.full(traj.t.size, np.nan)
        self.mean = None
        self.cov = None
        self.diverged = False
        self.message = ""

    def start(self, k: int, mean) -> None:
        self.mean = np.asarray(mean, dtype=float).copy()
        self.bound = self.config.divergence_factor * max(float(np.linalg.norm(self.mean)), 1.0)
        self.cov = uk.as_cov(self.config.p0, self.mean.size)
        self.xhat[k] = self.mean
        self.trace_p[k] = np.trace(self.cov)

    def reset_cov(self) -> None:
        self.cov = uk.as_cov(self.config.p0, self.mean.size)

    def run(self, k0: int, k1: int, d=None) -> None:
        """Advance from the belief at step ``k0`` to step ``k1``."""
        if self.diverged:
            return
        u = self.traj.u
        for k in range(k0, k1):
            try:
                self.mean, self.cov = self.filter.step_arrays(self.mean, self.cov, uk.AugmentedInput(u[k], d), self.y[k + 1])
            except (SingularityError, np.linalg.LinAlgError) as exc:
                self.diverged = True
                self.message = f"filter diverged at t={self.traj.t[k]:.4f}: {exc}"
                return
            if not np.all(np.isfinite(self.mean)) or np.linalg.norm(self.mean) > self.bound:
                self.diverged = True
                self.message = f"filter diverged at t={self.traj.t[k]:.4f}: estimate left the admissible range"
                return
            self.xhat[k + 1] = self.mean
            self.trace_p[k + 1] = np.trace(self.cov)


def _index(t: np.ndarray, time_value: float) -> int:
    return int(np.searchsorted(t, time_value - 1e-9))


def _last_active(traj: Trajectory) -> int:
    idle = np.flatnonzero(~traj.active)
    return traj.t.size - 1 if idle.size == 0 else int(idle[0]) - 1


def transition_for(model, kind: str, dt: float):
    if isinstance(model, sindy.SparseModel):
        return uk.sparse_transition(model, dt)
    if isinstance(model, pm.PvParams):
        return uk.physics_transition(kind, model, dt)
    if isinstance(model, uk.TransitionModel):
        return model
    raise InvalidInputError("model must be a SparseModel, PvParams (physics) or TransitionModel")


def run_estimation(
    model,
    traj: Trajectory,
    meas: MeasurementSeries,
    config: PipelineConfig = PipelineConfig(),
    t_start: float = 0.0,
    process_q=0.0,
    measurement_r=1e-2,
    x0=None,
) -> EstimationReport:
    """UKF over ``traj`` from ``t_start`` with the given model.

    ``model`` is a ``SparseModel``, the ``PvParams`` of a physics model or a
    ``TransitionModel``. The initial mean defaults to the true state at
    ``t_start`` (known from the logged identification window).
    """
    kind = traj.kind
    ok, why = validate_selector(kind, meas.selector)
    if not ok:
        raise ObservabilityError(f"selector {meas.selector} rejected: {why}")
    dt = traj.dt
    n = traj.x.shape[1]
    trans = transition_for(model, kind, dt)
    q = _filter_q(process_q, n, dt, config)
    r = uk.as_cov(measurement_r, len(meas.selector))
    est = _Estimator(traj, meas, trans, q, r, meas.selector, config)
    k0 = _index(traj.t, t_start)
    k_end = _last_active(traj)
    tic = time.perf_counter()
    est.start(k0, traj.x[k0] if x0 is None else x0)
    est.run(k0, k_end)
    wall = time.perf_counter() - tic
    sl = slice(k0, k_end + 1)
    return EstimationReport(
        traj.unit, kind, traj.t[sl], est.xhat[sl], traj.x[sl], est.trace_p[sl], trans.name,
        timings={"estimation_s": wall}, diverged=est.diverged, message=est.message,
    )


def _partial_source(traj: Trajectory, meas: MeasurementSeries, xhat: np.ndarray, k0: int, k1: int, config: PipelineConfig):
    """States for re-identification from measurements plus filter estimates.

    Measured states come from the interpolated, Savitzky-Golay smoothed
    outputs; the others from the running estimate.
    """
    n = traj.x.shape[1]
    idx = pm.selector_indices(meas.selector, n)
    x = xhat[k0:k1].copy()
    y = _measurement_grid(meas, traj.t[k0:k1])
    smooth = config.smoothing or SmoothingConfig()
    x[:, idx] = savitzky_golay(y, smooth.window, smooth.polyorder)
    return traj.t[k0:k1], x, traj.u[k0:k1]


def run_adaptive(
    scenario: Scenario,
    config: PipelineConfig = PipelineConfig(),
    unit: int = 0,
    baseline=None,
    simulated=None,
) -> EstimationReport:
    """Identify on ``[0, window)``, estimate afterwards, re-identify on announced changes.

    ``baseline`` replaces the identified model with a fixed one (for example
    the nominal ``PvParams`` of a physics model); ``config.adaptive=False``
    disables re-identification. ``simulated`` reuses ``simulate(scenario)``.
    """
    trajs, meas_all = simulated if simulated is not None else simulate(scenario)
    traj, meas = trajs[unit], meas_all[unit]
    spec = scenario.units[unit]
    kind = spec.kind
    dt = traj.dt
    timings = {}
    w_steps = _index(traj.t, config.window)
    if baseline is None:
        config.check_window(kind, dt)
        tic = time.perf_counter()
        model = run_identification(traj.window(0.0, config.window), config, kind)
        timings["identification_s"] = time.perf_counter() - tic
        label = "sparse"
    else:
        model = baseline
        label = "baseline"
    n = traj.x.shape[1]
    trans = transition_for(model, kind, dt)
    q = _filter_q(spec.noise.q, n, dt, config)
    r = uk.as_cov(spec.noise.r, len(spec.selector))
    ok, why = validate_selector(kind, spec.selector)
    if not ok:
        raise ObservabilityError(f"selector {spec.selector} rejected: {why}")
    est = _Estimator(traj, meas, trans, q, r, spec.selector, config)
    k_end = _last_active(traj)
    k0 = min(w_steps, k_end)
    est.start(k0, traj.x[k0])

    # announced parameter changes for this unit
    changes = sorted(
        {ev.time for ev in scenario.events if isinstance(ev.action, ParamChange) and ev.action.unit == unit}
    )
    retrains = []
    k = k0
    tic = time.perf_counter()
    for t_event in changes if config.adaptive and baseline is None else []:
        k_event = max(_index(traj.t, t_event), k)
        k_swap = min(_index(traj.t, t_event + config.window), k_end)
        if k_event >= k_end:
            break
        est.run(k, k_swap)
        t_id = time.perf_counter()
        try:
            if config.retrain_source == "truth":
                source = (traj.t[k_event:k_swap], traj.x[k_event:k_swap], traj.u[k_event:k_swap])
            else:
                source = _partial_source(traj, meas, est.xhat, k_event, k_swap, config)
            new_model = run_identification(source, config, kind)
            residual = sindy.validation_error(new_model, identification_data(source, config))
            if residual > config.max_retrain_residual:
                raise IdentificationError(f"retrained model residual {residual:.3g} exceeds {config.max_retrain_residual}")
            est.filter.swap_model(transition_for(new_model, kind, dt))
            est.reset_cov()
            retrains.append(RetrainEvent(t_event, float(traj.t[k_event]), float(traj.t[k_swap]), True,
                                         time.perf_counter() - t_id, new_model.nonzero_count))
        except (IdentificationError, SingularityError, InvalidInputError) as exc:
            retrains.append(RetrainEvent(t_event, float(traj.t[k_event]), float(traj.t[k_swap]), False,
                                         time.perf_counter() - t_id, 0, str(exc)))
        k = k_swap
    est.run(k, k_end)
    timings["estimation_s"] = time.perf_counter() - tic
    sl = slice(k0, k_end + 1)
    disconnected = any(isinstance(ev.action, Disconnect) and ev.action.unit == unit for ev in scenario.events)
    message = est.message or ("unit disconnected; estimates stop at the disconnect" if disconnected and k_end < traj.t.size - 1 else "")
    return EstimationReport(
        unit, kind, traj.t[sl], est.xhat[sl], traj.x[sl], est.trace_p[sl], label,
        retrains=retrains, timings=timings, diverged=est.diverged, message=message,
    )


def run_all_units(scenario: Scenario, config: PipelineConfig = PipelineConfig(), simulated=None) -> list[EstimationReport]:
    """One independent pipeline per unit (units only share the grid voltage)."""
    simulated = simulated if simulated is not None else simulate(scenario)
    return [run_adaptive(scenario, config, i, simulated=simulated) for i in range(len(scenario.units))]


def write_run(directory, scenario: Scenario, simulated, reports, summary: dict, stride: int | None = None) -> Path:
    """Write ``scenario.json``, ``truth.csv``, ``measurements.csv``, ``estimates.csv``, ``summary.json``.

    CSVs are decimated to the measurement rate by default to keep them small.
    """
    from .simulator import write_measurement_csv, write_trajectory_csv

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    trajs, meas = simulated
    stride = stride or max(1, int(round(scenario.dt_meas / scenario.dt_sim)))
    scenario.save(directory / "scenario.json")
    decimated = [
        Trajectory(tr.unit, tr.kind, tr.t[::stride], tr.x[::stride], tr.u[::stride], tr.xdot[::stride], tr.active[::stride])
        for tr in trajs
    ]
    write_trajectory_csv(directory / "truth.csv", decimated)
    write_measurement_csv(directory / "measurements.csv", meas)
    if reports:
        write_estimates_csv(directory / "estimates.csv", reports, stride)
    (directory / "summary.json").write_text(json.dumps(summary, indent=2, default=_json_default) + "\n")
    return directory


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj)}")

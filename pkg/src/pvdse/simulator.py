"""Euler simulation of PV units and stiff-bus microgrids with noise and timed events."""
from __future__ import annotations

import csv
import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from . import pv_models as pm
from .errors import InvalidInputError, InvalidParameterError
from .pv_models import PvParams

_TIME_EPS = 1e-9


def _as_cov(value, dim: int) -> np.ndarray:
    """Scalar -> value*I, vector -> diag, matrix -> itself."""
    if value is None:
        return np.zeros((dim, dim))
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return float(arr) * np.eye(dim)
    if arr.ndim == 1:
        if arr.size != dim:
            raise InvalidParameterError(f"diagonal covariance has {arr.size} entries, expected {dim}")
        return np.diag(arr)
    if arr.shape != (dim, dim):
        raise InvalidParameterError(f"covariance shape {arr.shape}, expected {(dim, dim)}")
    return arr


def psd_sqrt(cov: np.ndarray) -> np.ndarray:
    """Return L with L @ L.T == cov for a symmetric PSD matrix (possibly singular)."""
    cov = np.asarray(cov, dtype=float)
    if not np.allclose(cov, cov.T, atol=1e-12 * max(1.0, np.abs(cov).max())):
        raise InvalidParameterError("covariance must be symmetric")
    w, v = np.linalg.eigh(cov)
    if w.size and w.min() < -1e-10 * max(1.0, abs(w).max()):
        raise InvalidParameterError("covariance must be positive semidefinite")
    return v * np.sqrt(np.clip(w, 0.0, None))


@dataclass
class NoiseSpec:
    """Process intensity ``q`` (n x n, continuous time) and measurement covariance ``r`` (m x m).

    Each accepts a scalar (times identity), a diagonal, or a full matrix.
    """

    q: object = 0.0
    r: object = 1e-2
    seed: int = 0

    def q_matrix(self, n: int) -> np.ndarray:
        return _as_cov(self.q, n)

    def r_matrix(self, m: int) -> np.ndarray:
        return _as_cov(self.r, m)


@dataclass
class Excitation:
    """Random multi-level piecewise-constant perturbation of selected inputs.

    Every ``hold`` seconds each listed input jumps to a fresh level drawn
    uniformly from ``[-amplitude, amplitude]`` around its scheduled value.
    Multi-level (rather than binary) levels keep polynomial library columns
    linearly independent.
    """

    t_start: float
    t_end: float
    amplitude: dict
    hold: float = 5e-3
    seed: int = 0

    def offsets(self, kind: str, t: np.ndarray) -> np.ndarray:
        names = pm.INPUT_NAMES[kind]
        out = np.zeros((t.size, len(names)))
        n_levels = int(math.ceil((self.t_end - self.t_start) / self.hold)) + 1
        rng = np.random.default_rng(self.seed)
        levels = rng.uniform(-1.0, 1.0, size=(n_levels, len(names)))
        inside = (t >= self.t_start - _TIME_EPS) & (t < self.t_end - _TIME_EPS)
        slot = np.floor((t[inside] - self.t_start) / self.hold + _TIME_EPS).astype(int)
        for name, amp in self.amplitude.items():
            j = names.index(name)
            out[inside, j] = amp * levels[slot, j]
        return out


@dataclass
class InputStep:
    time: float
    name: str
    value: float


@dataclass
class InputSchedule:
    """Exogenous inputs plus a linearised PV source characteristic.

    ``base`` holds the nominal input vector. Input 6 (Ipv for single-stage,
    Vpv for two-stage) is corrected every step by
    ``-source_slope * (x7 - source_ref)``, i.e. a PV array linearised about its
    operating point (x7 is Vdc for single-stage and Ipv for two-stage). This
    gives the otherwise constant-power DC link a stable equilibrium.
    """

    base: list
    source_slope: float = 0.0
    source_ref: float = 0.0
    steps: list = field(default_factory=list)
    excitations: list = field(default_factory=list)

    def exogenous(self, kind: str, t: np.ndarray) -> np.ndarray:
        names = pm.INPUT_NAMES[kind]
        base = np.asarray(self.base, dtype=float)
        if base.shape != (len(names),):
            raise InvalidParameterError(f"{kind} input base must have {len(names)} entries")
        u = np.tile(base, (t.size, 1))
        for step in sorted(self.steps, key=lambda s: s.time):
            u[t >= step.time - _TIME_EPS, names.index(step.name)] = step.value
        for exc in self.excitations:
            u += exc.offsets(kind, t)
        return u


@dataclass
class ParamChange:
    unit: int
    field: str
    value: float


@dataclass
class VoltageSag:
    fraction: float
    units: Union[list, None] = None  # None: every unit


@dataclass
class Disconnect:
    unit: int


@dataclass
class Event:
    time: float
    action: Union[ParamChange, VoltageSag, Disconnect]


@dataclass
class Unit:
    kind: str
    params: PvParams
    x0: list
    inputs: InputSchedule
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    selector: list = field(default_factory=lambda: [5, 6, 7])
    # filter settings consumed by the estimation pipeline; opaque here
    filter: dict = field(default_factory=dict)


@dataclass
class Scenario:
    units: list
    t_end: float
    dt_sim: float = 1e-4
    dt_meas: float = 1e-2
    events: list = field(default_factory=list)
    name: str = ""

    def validate(self) -> None:
        if not self.units:
            raise InvalidParameterError("scenario has no units")
        if not self.t_end > 0:
            raise InvalidParameterError("t_end must be positive")
        if not 0 < self.dt_sim <= self.dt_meas:
            raise InvalidParameterError("require 0 < dt_sim <= dt_meas")
        ratio = self.dt_meas / self.dt_sim
        if abs(ratio - round(ratio)) > 1e-6:
            raise InvalidParameterError("dt_meas must be an integer multiple of dt_sim")
        times = [e.time for e in self.events]
        if any(b < a for a, b in zip(times, times[1:])):
            raise InvalidParameterError("events must be ordered in time")
        for e in self.events:
            if not 0 <= e.time <= self.t_end:
                raise InvalidParameterError(f"event at t={e.time} outside [0, t_end]")
            act = e.action
            if isinstance(act, VoltageSag) and not 0 < act.fraction <= 1:
                raise InvalidParameterError("sag fraction must lie in (0, 1]")
            if isinstance(act, (ParamChange, Disconnect)) and not 0 <= act.unit < len(self.units):
                raise InvalidParameterError(f"event refers to unknown unit {act.unit}")
        for i, unit in enumerate(self.units):
            pm.check_kind(unit.kind)
            n = pm.n_states(unit.kind)
            if len(unit.x0) != n:
                raise InvalidParameterError(f"unit {i}: x0 needs {n} entries")
            pm.selector_indices(unit.selector, n)

    def event_step(self, event: Event) -> int:
        """Index of the first simulation step with t >= event.time."""
        return int(math.ceil(event.time / self.dt_sim - _TIME_EPS))

    # --- JSON ---------------------------------------------------------
    def to_dict(self) -> dict:
        def unit_dict(u: Unit) -> dict:
            return {
                "kind": u.kind,
                "params": u.params.to_dict(),
                "x0": [float(v) for v in u.x0],
                "inputs": _jsonable(dataclasses.asdict(u.inputs)),
                "noise": _jsonable(dataclasses.asdict(u.noise)),
                "selector": [int(s) for s in u.selector],
                "filter": _jsonable(u.filter),
            }

        def event_dict(e: Event) -> dict:
            kind = {ParamChange: "param_change", VoltageSag: "voltage_sag", Disconnect: "disconnect"}[type(e.action)]
            return {"time": e.time, "type": kind, **dataclasses.asdict(e.action)}

        return {
            "name": self.name,
            "t_end": self.t_end,
            "dt_sim": self.dt_sim,
            "dt_meas": self.dt_meas,
            "units": [unit_dict(u) for u in self.units],
            "events": [event_dict(e) for e in self.events],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Scenario":
        units = []
        for ud in data["units"]:
            inp = dict(ud["inputs"])
            inp["steps"] = [InputStep(**s) for s in inp.get("steps", [])]
            inp["excitations"] = [Excitation(**e) for e in inp.get("excitations", [])]
            units.append(
                Unit(
                    kind=ud["kind"],
                    params=PvParams.from_dict(ud["params"]),
                    x0=list(ud["x0"]),
                    inputs=InputSchedule(**inp),
                    noise=NoiseSpec(**ud.get("noise", {})),
                    selector=list(ud.get("selector", [5, 6, 7])),
                    filter=dict(ud.get("filter", {})),
                )
            )
        events = []
        for ed in data.get("events", []):
            ed = dict(ed)
            time = ed.pop("time")
            kind = ed.pop("type")
            action = {"param_change": ParamChange, "voltage_sag": VoltageSag, "disconnect": Disconnect}[kind](**ed)
            events.append(Event(time, action))
        scen = cls(
            units=units,
            t_end=float(data["t_end"]),
            dt_sim=float(data.get("dt_sim", 1e-4)),
            dt_meas=float(data.get("dt_meas", 1e-2)),
            events=events,
            name=data.get("name", ""),
        )
        scen.validate()
        return scen

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "Scenario":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "Scenario":
        return cls.from_json(Path(path).read_text())


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


@dataclass
class Trajectory:
    """True states, inputs and state derivatives of one unit on the simulation grid."""

    unit: int
    kind: str
    t: np.ndarray
    x: np.ndarray
    u: np.ndarray
    xdot: np.ndarray
    active: np.ndarray

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0])

    def window(self, t_start: float, t_end: float) -> "Trajectory":
        mask = (self.t >= t_start - _TIME_EPS) & (self.t < t_end - _TIME_EPS)
        return Trajectory(self.unit, self.kind, self.t[mask], self.x[mask], self.u[mask], self.xdot[mask], self.active[mask])


@dataclass
class MeasurementSeries:
    unit: int
    selector: list
    t: np.ndarray
    y: np.ndarray
    active: np.ndarray

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0])


def step(model, x, u, dt: float, process_noise=None) -> np.ndarray:
    """One explicit Euler step ``x + f(x, u) dt + w``; ``model(x, u)`` returns f."""
    if not dt > 0:
        raise InvalidInputError("dt must be positive")
    x = np.asarray(x, dtype=float)
    nxt = x + model(x, u) * dt
    if process_noise is not None:
        nxt = nxt + process_noise
    return nxt


def rk4_step(model, x, u, dt: float) -> np.ndarray:
    """Classical RK4 with the input held over the step (verification oracle)."""
    k1 = model(x, u)
    k2 = model(x + 0.5 * dt * k1, u)
    k3 = model(x + 0.5 * dt * k2, u)
    k4 = model(x + dt * k3, u)
    return x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def unit_rng(seed: int, unit: int, stream: int) -> np.random.Generator:
    """Independent stream per (seed, unit, purpose); 0 = process, 1 = measurement."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(unit), int(stream)]))


def _simulate_unit(scenario: Scenario, index: int, integrator: str):
    unit = scenario.units[index]
    kind = unit.kind
    n = pm.n_states(kind)
    dt = scenario.dt_sim
    n_steps = int(round(scenario.t_end / dt)) + 1
    t = np.arange(n_steps) * dt
    exo = unit.inputs.exogenous(kind, t)

    sag = np.ones(n_steps)
    param_events: dict[int, list] = {}
    disconnect_at = None
    for ev in scenario.events:
        k = scenario.event_step(ev)
        act = ev.action
        if isinstance(act, VoltageSag) and (act.units is None or index in act.units):
            sag[k:] = 1.0 - act.fraction
        elif isinstance(act, ParamChange) and act.unit == index:
            param_events.setdefault(k, []).append(act)
        elif isinstance(act, Disconnect) and act.unit == index:
            disconnect_at = k if disconnect_at is None else min(disconnect_at, k)
    exo[:, 2] *= sag
    exo[:, 3] *= sag

    q = unit.noise.q_matrix(n)
    noise = None
    if np.any(q):
        rng = unit_rng(unit.noise.seed, index, 0)
        noise = rng.standard_normal((n_steps, n)) @ psd_sqrt(q).T * math.sqrt(dt)

    xs = np.zeros((n_steps, n))
    us = np.zeros_like(exo)
    fs = np.zeros((n_steps, n))
    active = np.ones(n_steps, dtype=bool)
    params = unit.params
    slope, ref = unit.inputs.source_slope, unit.inputs.source_ref
    x = np.asarray(unit.x0, dtype=float).copy()

    def model(xx, uu):
        return pm.derivative(kind, xx, uu, params)

    for k in range(n_steps):
        if k in param_events:
            for act in param_events[k]:
                params = params.replace(**{act.field: act.value})
        if disconnect_at is not None and k >= disconnect_at:
            active[k:] = False
            break
        u = exo[k].copy()
        u[5] -= slope * (x[6] - ref)
        f = model(x, u)
        xs[k], us[k], fs[k] = x, u, f
        if integrator == "euler":
            x = x + f * dt
        else:
            x = rk4_step(model, x, u, dt)
        if noise is not None:
            x = x + noise[k]
    return Trajectory(index, kind, t, xs, us, fs, active)


def _measure_unit(scenario: Scenario, traj: Trajectory) -> MeasurementSeries:
    unit = scenario.units[traj.unit]
    stride = int(round(scenario.dt_meas / scenario.dt_sim))
    k = np.arange(0, traj.t.size, stride)
    y = pm.measurement(traj.x[k], unit.selector)
    m = y.shape[1]
    r = unit.noise.r_matrix(m)
    if np.any(r):
        rng = unit_rng(unit.noise.seed, traj.unit, 1)
        y = y + rng.standard_normal(y.shape) @ psd_sqrt(r).T
    active = traj.active[k]
    y[~active] = 0.0
    return MeasurementSeries(traj.unit, list(unit.selector), traj.t[k], y, active)


def simulate(scenario: Scenario, integrator: str = "euler"):
    """Simulate every unit; returns ``(trajectories, measurements)``, one entry per unit.

    Units interact only through the shared grid-voltage input, so each is
    integrated independently with its own RNG streams.
    """
    if integrator not in ("euler", "rk4"):
        raise InvalidParameterError(f"unknown integrator {integrator!r}")
    scenario.validate()
    trajs = [_simulate_unit(scenario, i, integrator) for i in range(len(scenario.units))]
    meas = [_measure_unit(scenario, tr) for tr in trajs]
    return trajs, meas


def simulate_microgrid(scenario: Scenario):
    if len(scenario.units) != 7:
        raise InvalidParameterError(f"microgrid scenario needs 7 units, got {len(scenario.units)}")
    return simulate(scenario)


def interpolate_measurements(series: MeasurementSeries, target_dt: float) -> MeasurementSeries:
    """Piecewise-linear resampling of a measurement series onto a finer grid."""
    if series.t.size == 0:
        raise InvalidInputError("cannot interpolate an empty series")
    if series.t.size > 1 and target_dt > series.dt + _TIME_EPS:
        raise InvalidInputError("target_dt must not exceed the series spacing")
    count = int(round((series.t[-1] - series.t[0]) / target_dt)) + 1
    t_new = series.t[0] + np.arange(count) * target_dt
    t_new[-1] = series.t[-1]
    y_new = np.column_stack([np.interp(t_new, series.t, series.y[:, j]) for j in range(series.y.shape[1])]) \
        if series.y.shape[1] else np.zeros((count, 0))
    # a sample is active only if both bracketing measurements are
    idx = np.clip(np.searchsorted(series.t, t_new, side="right") - 1, 0, series.t.size - 1)
    nxt = np.clip(idx + 1, 0, series.t.size - 1)
    exact = np.isclose(t_new, series.t[idx], atol=_TIME_EPS, rtol=0)
    active = series.active[idx] & (exact | series.active[nxt])
    return MeasurementSeries(series.unit, list(series.selector), t_new, y_new, active)


# --- CSV output ---------------------------------------------------------
def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_trajectory_csv(path, trajectories) -> None:
    """``t,unit,x1..xn`` rows; units with different n share the widest header."""
    n_max = max(tr.x.shape[1] for tr in trajectories)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "unit"] + [f"x{i + 1}" for i in range(n_max)])
        for tr in trajectories:
            for k in range(tr.t.size):
                if not tr.active[k]:
                    continue
                row = [_fmt(tr.t[k]), tr.unit] + [_fmt(v) for v in tr.x[k]]
                w.writerow(row + [""] * (n_max - tr.x.shape[1]))


def write_measurement_csv(path, series_list) -> None:
    m_max = max(s.y.shape[1] for s in series_list)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "unit"] + [f"y{i + 1}" for i in range(m_max)])
        for s in series_list:
            for k in range(s.t.size):
                if not s.active[k]:
                    continue
                row = [_fmt(s.t[k]), s.unit] + [_fmt(v) for v in s.y[k]]
                w.writerow(row + [""] * (m_max - s.y.shape[1]))


def read_trajectory_csv(path) -> dict:
    """Load a trajectory CSV back as ``{unit: (t, x)}``."""
    out: dict[int, list] = {}
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        next(r)
        for row in r:
            vals = [float(v) for v in row[2:] if v != ""]
            out.setdefault(int(row[1]), []).append((float(row[0]), vals))
    return {u: (np.array([a for a, _ in rows]), np.array([b for _, b in rows])) for u, rows in out.items()}

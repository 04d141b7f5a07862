"""Smoothing, numerical differentiation and the X / Xdot / U data matrices."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import savgol_filter

from .errors import InvalidInputError

DERIVATIVE_METHODS = ("central", "forward", "sg")


@dataclass(frozen=True)
class SmoothingConfig:
    window: int = 11
    polyorder: int = 3


@dataclass
class DataMatrices:
    """Rows are time samples: ``x`` (m x n), ``xdot`` (m x n), ``u`` (m x d)."""

    x: np.ndarray
    xdot: np.ndarray
    u: np.ndarray
    dt: float

    def __post_init__(self):
        m = self.x.shape[0]
        if self.xdot.shape != self.x.shape or self.u.shape[0] != m:
            raise InvalidInputError(
                f"inconsistent data matrices: x{self.x.shape}, xdot{self.xdot.shape}, u{self.u.shape}"
            )

    @property
    def m(self) -> int:
        return self.x.shape[0]

    def to_csv(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name, mat, prefix in (("X", self.x, "x"), ("XDOT", self.xdot, "xdot"), ("U", self.u, "u")):
            with open(directory / f"{name}.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow([f"{prefix}{i + 1}" for i in range(mat.shape[1])])
                w.writerows([[format(v, ".17g") for v in row] for row in mat])


def _check_window(length: int, window: int, polyorder: int) -> None:
    if window % 2 != 1 or window < 1:
        raise InvalidInputError(f"window must be a positive odd integer, got {window}")
    if polyorder < 0 or window <= polyorder:
        raise InvalidInputError(f"need 0 <= polyorder < window, got polyorder={polyorder}, window={window}")
    if length < window:
        raise InvalidInputError(f"series of length {length} is shorter than the window {window}")


def savitzky_golay(series, window: int = 11, polyorder: int = 3, deriv: int = 0, dt: float = 1.0) -> np.ndarray:
    """Local least-squares polynomial smoothing with mirror padding at the edges.

    Works column-wise on 2-D input (time along axis 0). Derivative filters
    (``deriv > 0``) use the edge window's own polynomial fit instead, since a
    mirrored signal has a spurious zero slope at the boundary.
    """
    arr = np.asarray(series, dtype=float)
    _check_window(arr.shape[0], window, polyorder)
    mode = "mirror" if deriv == 0 else "interp"
    return savgol_filter(arr, window, polyorder, deriv=deriv, delta=dt, axis=0, mode=mode)


def differentiate(series, dt: float, method: str = "central", window: int = 11, polyorder: int = 3) -> np.ndarray:
    """Time derivative along axis 0.

    ``central``: second-order central differences inside, one-sided at the ends.
    ``forward``: ``(s[k+1] - s[k]) / dt``, backward at the last sample. This is
    the exact inverse of an explicit Euler recursion.
    ``sg``: Savitzky-Golay derivative filter.
    """
    arr = np.asarray(series, dtype=float)
    if arr.shape[0] < 3:
        raise InvalidInputError("need at least 3 samples to differentiate")
    if not dt > 0:
        raise InvalidInputError("dt must be positive")
    if method == "central":
        return np.gradient(arr, dt, axis=0, edge_order=1)
    if method == "forward":
        out = np.empty_like(arr)
        out[:-1] = (arr[1:] - arr[:-1]) / dt
        out[-1] = out[-2] if arr.shape[0] == 2 else (arr[-1] - arr[-2]) / dt
        return out
    if method == "sg":
        return savitzky_golay(arr, window, polyorder, deriv=1, dt=dt)
    raise InvalidInputError(f"unknown derivative method {method!r}; choose from {DERIVATIVE_METHODS}")


def assemble_matrices(
    t,
    x,
    u,
    smoothing: SmoothingConfig | None = SmoothingConfig(),
    derivative: str = "central",
) -> DataMatrices:
    """Build the regression data from uniformly sampled states and inputs.

    States are smoothed first (when ``smoothing`` is given) and then
    differentiated; inputs are used as recorded. With ``forward`` differences
    the final sample has no successor and is dropped.
    """
    t = np.asarray(t, dtype=float)
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if t.ndim != 1 or t.size < 3:
        raise InvalidInputError("need at least 3 timestamps")
    steps = np.diff(t)
    dt = float(steps.mean())
    if np.any(steps <= 0) or np.max(np.abs(steps - dt)) > 1e-6 * dt:
        raise InvalidInputError("timestamps must be strictly increasing and uniformly spaced")
    if x.shape[0] != t.size or u.shape[0] != t.size:
        raise InvalidInputError("x and u must have one row per timestamp")
    xs = x if smoothing is None else savitzky_golay(x, smoothing.window, smoothing.polyorder)
    xdot = differentiate(
        xs,
        dt,
        derivative,
        *(() if smoothing is None else (smoothing.window, smoothing.polyorder)),
    )
    if derivative == "forward":
        return DataMatrices(xs[:-1].copy(), xdot[:-1], u[:-1].copy(), dt)
    return DataMatrices(xs.copy(), xdot, u.copy(), dt)


def from_trajectory(traj, smoothing: SmoothingConfig | None = SmoothingConfig(), derivative: str = "central") -> DataMatrices:
    return assemble_matrices(traj.t, traj.x, traj.u, smoothing, derivative)


def load_records(truth_csv, inputs_csv, unit: int = 0):
    """Read ``t,unit,x..`` and ``t,unit,u..`` CSV files written by the simulator."""

    def read(path):
        rows = []
        with open(path, newline="") as fh:
            r = csv.reader(fh)
            next(r)
            for row in r:
                if int(row[1]) == unit:
                    rows.append([float(v) for v in [row[0]] + [c for c in row[2:] if c != ""]])
        return np.array(rows)

    xs = read(truth_csv)
    us = read(inputs_csv)
    if xs.shape[0] != us.shape[0] or not np.array_equal(xs[:, 0], us[:, 0]):
        raise InvalidInputError("truth and input records are not aligned")
    return xs[:, 0], xs[:, 1:], us[:, 1:]

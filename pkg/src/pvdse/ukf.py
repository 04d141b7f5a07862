"""Discrete-time unscented Kalman filter with equal-weight sigma points.

The discrete transition is the explicit Euler map ``F(x, u) = x + f(x, u) dt``
of any evaluable continuous model ``f`` (the physics model or an identified
``SparseModel``). Sigma points are ``x`` and ``x +/- s_i`` where ``s_i`` are the
rows of an upper-triangular ``S`` with ``S^T S = n P``.

Two covariance conventions are offered:

``mixed``
    Means use weight ``1/(2n+1)`` over all points; the state covariance uses
    ``1/(2n)`` over the ``2n`` outer points plus ``Q``; output and cross
    covariances use ``1/(2n+1)`` over the propagated points, with ``R`` added
    to the output covariance.
``consistent``
    After forming the predicted mean and covariance, a fresh sigma set is drawn
    from them and the output and cross covariances use ``1/(2n)`` over its outer
    points. On linear-Gaussian problems this reproduces the Kalman filter
    exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import pv_models as pm
from .errors import InvalidInputError, SingularityError

MODES = ("mixed", "consistent")
JITTER_START = 1e-12
JITTER_MAX = 1e-6


@dataclass
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float).reshape(-1)
        self.cov = np.asarray(self.cov, dtype=float)
        n = self.mean.size
        if self.cov.shape != (n, n):
            raise InvalidInputError(f"covariance shape {self.cov.shape} does not match mean of length {n}")
        if not np.all(np.isfinite(self.cov)) or not np.all(np.isfinite(self.mean)):
            raise InvalidInputError("belief contains non-finite values")
        if not np.allclose(self.cov, self.cov.T, rtol=1e-9, atol=1e-12 * max(1.0, np.abs(self.cov).max())):
            raise InvalidInputError("covariance must be symmetric")

    @property
    def n(self) -> int:
        return self.mean.size

    def is_psd(self) -> bool:
        tr = float(np.trace(self.cov))
        return bool(np.linalg.eigvalsh(self.cov).min() >= -1e-10 * max(tr, 1e-300))


@dataclass
class AugmentedInput:
    """Inputs of the unit together with the (measurable) parameter vector."""

    u: np.ndarray
    d: object = None

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=float)


@dataclass
class TransitionModel:
    """Continuous model ``f(x, ua) -> xdot`` discretized with step ``dt``.

    ``f`` receives a batch of states ``(p, n)`` and an ``AugmentedInput``.
    """

    f: Callable
    dt: float
    name: str = "model"

    def __post_init__(self):
        if not self.dt > 0:
            raise InvalidInputError("dt must be positive")

    def __call__(self, x, ua: AugmentedInput) -> np.ndarray:
        return x + self.f(x, ua) * self.dt


def physics_transition(kind: str, params: pm.PvParams, dt: float) -> TransitionModel:
    """Physics model; a ``PvParams`` carried in ``ua.d`` overrides ``params``."""
    pm.check_kind(kind)

    def f(x, ua):
        p = ua.d if isinstance(ua.d, pm.PvParams) else params
        return pm.derivative(kind, x, ua.u, p)

    return TransitionModel(f, dt, f"physics-{kind}")


def sparse_transition(model, dt: float) -> TransitionModel:
    """Identified model ``xdot = theta(x, u) Xi``; the parameter vector is
    already absorbed in the identified coefficients."""

    def f(x, ua):
        return model(x, ua.u)

    return TransitionModel(f, dt, "sparse")


def matrix_sqrt(p, scale: float = 1.0) -> np.ndarray:
    """Upper-triangular ``S`` with ``S^T S = scale * p``.

    Cholesky with a diagonal jitter that starts at ``1e-12 trace/n`` and doubles
    up to ``1e-6 trace/n`` when the plain factorization fails.
    """
    a = scale * np.asarray(p, dtype=float)
    a = 0.5 * (a + a.T)
    n = a.shape[0]
    try:
        return np.linalg.cholesky(a).T
    except np.linalg.LinAlgError:
        pass
    level = max(float(np.trace(a)) / n, np.finfo(float).tiny)
    jitter = JITTER_START * level
    eye = np.eye(n)
    while jitter <= JITTER_MAX * level * (1 + 1e-12):
        try:
            return np.linalg.cholesky(a + jitter * eye).T
        except np.linalg.LinAlgError:
            jitter *= 2.0
    raise np.linalg.LinAlgError("covariance is not positive semidefinite; factorization failed after maximum jitter")


def _sigma(mean, cov) -> np.ndarray:
    s = matrix_sqrt(cov, mean.size)
    return np.vstack([mean, mean + s, mean - s])


def sigma_points(belief: GaussianBelief) -> np.ndarray:
    """The ``2n+1`` points ``[x, x + s_1..s_n, x - s_1..s_n]`` as rows."""
    return _sigma(belief.mean, belief.cov)


@dataclass
class Prediction:
    belief: GaussianBelief
    y_mean: np.ndarray
    p_y: np.ndarray
    p_xy: np.ndarray
    y_points: np.ndarray
    x_points: np.ndarray = field(repr=False, default=None)


def selection_map(selector, n: int) -> Callable:
    idx = pm.selector_indices(selector, n)

    def g(x):
        return x[..., idx]

    return g


def _propagate(model: TransitionModel, points, ua):
    try:
        out = model(points, ua)
    except SingularityError as exc:
        bad = _offending_point(model, points, ua)
        raise SingularityError(f"sigma point {bad} hit a model singularity: {exc}") from exc
    if not np.all(np.isfinite(out)):
        bad = int(np.flatnonzero(~np.all(np.isfinite(out), axis=1))[0])
        raise SingularityError(f"sigma point {bad} propagated to a non-finite state")
    return out


def _offending_point(model, points, ua) -> int:
    for i, p in enumerate(points):
        try:
            model(p[None, :], ua)
        except SingularityError:
            return i
    return -1


def _predict(mean, cov, ua, model, q, r, measure, mode):
    n = mean.size
    x_pts = _propagate(model, _sigma(mean, cov), ua)
    x_mean = x_pts.mean(axis=0)
    dx = x_pts[1:] - x_mean
    p_x = dx.T @ dx / (2 * n) + q
    p_x = 0.5 * (p_x + p_x.T)
    if mode == "consistent":
        x_pts = _sigma(x_mean, p_x)
    y_pts = measure(x_pts)
    y_mean = y_pts.mean(axis=0)
    if mode == "mixed":
        dxa = x_pts - x_mean
        dya = y_pts - y_mean
        w = 1.0 / (2 * n + 1)
    else:
        dxa = x_pts[1:] - x_mean
        dya = y_pts[1:] - y_mean
        w = 1.0 / (2 * n)
    p_y = w * dya.T @ dya + r
    p_xy = w * dxa.T @ dya
    return x_mean, p_x, y_mean, 0.5 * (p_y + p_y.T), p_xy, x_pts, y_pts


def _update(x_mean, p_x, y_mean, p_y, p_xy, y):
    try:
        c = np.linalg.cholesky(p_y)
    except np.linalg.LinAlgError as exc:
        raise SingularityError("innovation covariance is singular or indefinite") from exc
    # K = P_xy P_y^-1 via the Cholesky factor of P_y
    k = np.linalg.solve(c.T, np.linalg.solve(c, p_xy.T)).T
    mean = x_mean + k @ (y - y_mean)
    cov = p_x - k @ p_y @ k.T
    return mean, 0.5 * (cov + cov.T)


def predict(belief: GaussianBelief, ua: AugmentedInput, model: TransitionModel, q, r, measure: Callable, mode: str = "mixed") -> Prediction:
    """Propagate the sigma set and form predicted state and output moments."""
    if mode not in MODES:
        raise InvalidInputError(f"unknown mode {mode!r}; choose from {MODES}")
    x_mean, p_x, y_mean, p_y, p_xy, x_pts, y_pts = _predict(
        belief.mean, belief.cov, ua, model, np.asarray(q, dtype=float), np.asarray(r, dtype=float), measure, mode
    )
    return Prediction(GaussianBelief(x_mean, p_x), y_mean, p_y, p_xy, y_pts, x_pts)


def update(pred: Prediction, y) -> GaussianBelief:
    """Kalman gain ``K = P_xy P_y^-1``; ``x+ = x- + K (y - y_hat)``, ``P+ = P- - K P_y K^T``."""
    y = np.asarray(y, dtype=float).reshape(-1)
    p_y = np.atleast_2d(pred.p_y)
    p_xy = np.atleast_2d(pred.p_xy)
    if p_xy.shape[0] != pred.belief.n:
        p_xy = p_xy.T
    mean, cov = _update(pred.belief.mean, pred.belief.cov, np.atleast_1d(pred.y_mean), p_y, p_xy, y)
    return GaussianBelief(mean, cov)


def ukf_step(belief, ua, y, model, q, r, measure, mode: str = "mixed") -> GaussianBelief:
    return update(predict(belief, ua, model, q, r, measure, mode), y)


@dataclass
class UkfConfig:
    """Filter settings; ``q`` and ``r`` are per-step covariances (scalar, diagonal or matrix)."""

    q: object = 0.0
    r: object = 1e-2
    p0: object = 1.0
    mode: str = "mixed"

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidInputError(f"unknown mode {self.mode!r}; choose from {MODES}")


def as_cov(value, n: int) -> np.ndarray:
    v = np.asarray(value, dtype=float)
    if v.ndim == 0:
        return float(v) * np.eye(n)
    if v.ndim == 1:
        if v.size != n:
            raise InvalidInputError(f"diagonal of length {v.size}, expected {n}")
        return np.diag(v)
    if v.shape != (n, n):
        raise InvalidInputError(f"covariance shape {v.shape}, expected {(n, n)}")
    return v


class UnscentedKalmanFilter:
    """Stateful wrapper around ``ukf_step`` with a swappable transition model."""

    def __init__(self, model: TransitionModel, selector, n: int, config: UkfConfig = UkfConfig()):
        self.model = model
        self.selector = list(selector)
        self.n = int(n)
        self.config = config
        self.measure = selection_map(self.selector, self.n)
        m = len(self.selector)
        self.q = as_cov(config.q, self.n)
        self.r = as_cov(config.r, m)

    def swap_model(self, model: TransitionModel) -> None:
        self.model = model

    def initial_belief(self, mean) -> GaussianBelief:
        return GaussianBelief(mean, as_cov(self.config.p0, self.n))

    def step(self, belief: GaussianBelief, ua: AugmentedInput, y) -> GaussianBelief:
        return ukf_step(belief, ua, y, self.model, self.q, self.r, self.measure, self.config.mode)

    def step_arrays(self, mean, cov, ua: AugmentedInput, y):
        """``step`` on raw arrays, skipping belief validation (hot loop)."""
        pred = _predict(mean, cov, ua, self.model, self.q, self.r, self.measure, self.config.mode)
        return _update(pred[0], pred[1], pred[2], pred[3], pred[4], y)

"""Kalman-rank observability of the linear AC subsystem and measurement-selector checks."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import pv_models as pm
from .errors import InvalidInputError

RANK_RTOL = 1e-8


@dataclass
class ObservabilityReport:
    rank: int
    full_rank: bool
    singular_values: list
    selector: list | None = None
    state_dim: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _check_dims(a, c):
    a = np.atleast_2d(np.asarray(a, dtype=float))
    c = np.atleast_2d(np.asarray(c, dtype=float))
    if a.shape[0] != a.shape[1]:
        raise InvalidInputError(f"A must be square, got {a.shape}")
    if c.shape[1] != a.shape[0]:
        raise InvalidInputError(f"C has {c.shape[1]} columns but A is {a.shape[0]}x{a.shape[0]}")
    return a, c


def observability_matrix(a, c, normalize: bool = False) -> np.ndarray:
    """Stack ``C, CA, ..., CA^(n-1)``.

    With ``normalize=True`` the powers use ``A / ||A||_2``; every block is then
    a nonzero multiple of the unnormalized one, so the rank is unchanged while
    the entries stay bounded.
    """
    a, c = _check_dims(a, c)
    n = a.shape[0]
    if normalize:
        norm = np.linalg.norm(a, 2)
        if norm > 0:
            a = a / norm
    blocks = [c]
    for _ in range(n - 1):
        blocks.append(blocks[-1] @ a)
    return np.vstack(blocks)


def numerical_rank(m, tol: float = RANK_RTOL) -> tuple[int, np.ndarray]:
    s = np.linalg.svd(np.asarray(m, dtype=float), compute_uv=False)
    if s.size == 0 or s[0] == 0:
        return 0, s
    return int(np.sum(s > tol * s[0])), s


def check_observability(a, c, tol: float = RANK_RTOL, selector=None) -> ObservabilityReport:
    """Rank of the (normalized) observability matrix against ``tol * sigma_max``."""
    if not tol > 0:
        raise InvalidInputError("tol must be positive")
    a, c = _check_dims(a, c)
    rank, s = numerical_rank(observability_matrix(a, c, normalize=True), tol)
    n = a.shape[0]
    return ObservabilityReport(rank, rank == n, s.tolist(), None if selector is None else list(selector), n)


def selection_matrix(selector, n: int) -> np.ndarray:
    """Rows of the identity picking the 1-based states in ``selector``."""
    idx = pm.selector_indices(selector, n)
    return np.eye(n)[idx]


def ac_observability(kind: str, selector, params: pm.PvParams | None = None, tol: float = RANK_RTOL) -> ObservabilityReport:
    """Observability of the AC subsystem (states 1..6) under the AC part of ``selector``."""
    params = params or pm.default_params(kind)
    n = pm.n_states(kind)
    idx = pm.selector_indices(selector, n)
    a, _ = pm.build_ac_matrices(params)
    ac_rows = [i for i in idx if i < 6]
    c = np.eye(6)[ac_rows] if ac_rows else np.zeros((1, 6))
    return check_observability(a, c, tol, selector=[int(i) + 1 for i in idx])


def linearized_observability(kind: str, selector, params: pm.PvParams | None = None, tol: float = RANK_RTOL) -> ObservabilityReport:
    """Observability of the full model linearized at the default operating point."""
    params = params or pm.default_params(kind)
    x0, u0 = pm.operating_point(kind, params)
    n = pm.n_states(kind)
    return check_observability(pm.jacobian(kind, x0, u0, params), selection_matrix(selector, n), tol, selector=list(selector))


def validate_selector(kind: str, selector, params: pm.PvParams | None = None, tol: float = RANK_RTOL) -> tuple[bool, str]:
    """Cascade rule plus full rank of the linearized model.

    The DC states do not feed back into the AC subsystem, so they must be
    measured directly: x7 for single-stage, one of x7/x8 for two-stage. With
    equal converter-side and grid-side R/L the AC subsystem alone has an
    unobservable common mode (I1 + Io) under PCC-voltage measurements; the
    DC-link power balance sees Iod, so full rank is decided on the
    linearization of the whole model.
    """
    pm.check_kind(kind)
    n = pm.n_states(kind)
    numbers = {int(i) + 1 for i in pm.selector_indices(selector, n)}
    if kind == pm.SINGLE_STAGE and 7 not in numbers:
        return False, "DC-link voltage x7 must be measured"
    if kind == pm.TWO_STAGE and not numbers & {7, 8}:
        return False, "one of the DC-side states x7, x8 must be measured"
    report = linearized_observability(kind, selector, params, tol)
    if not report.full_rank:
        return False, f"linearized model not observable: rank {report.rank} of {n}"
    ac = ac_observability(kind, selector, params, tol)
    return True, f"linearized model rank {n}; AC subsystem alone rank {ac.rank} of 6"

"""Continuous-time dq-frame models of grid-tied single-stage and two-stage PV units.

State numbering follows the usual x1..xn convention (1-based) wherever a
``selector`` is accepted:

* single-stage, n=7: ``[I1d, I1q, Iod, Ioq, Vod, Voq, Vdc]``
* two-stage,    n=8: ``[I1d, I1q, Iod, Ioq, Vod, Voq, Ipv, Vdc]``

Inputs:

* single-stage, d=6: ``[Vcd, Vcq, Vgd, Vgq, w0, Ipv]``
* two-stage,    d=7: ``[Vcd, Vcq, Vgd, Vgq, w0, Vpv, d_ref]``

All derivative functions broadcast over leading axes, so a batch of sigma
points of shape ``(p, n)`` can be pushed through in one call.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import InvalidInputError, InvalidParameterError, SingularityError

SINGLE_STAGE = "single-stage"
TWO_STAGE = "two-stage"
KINDS = (SINGLE_STAGE, TWO_STAGE)

# DC-link voltage floor (V) for the rational power-balance term.
VDC_FLOOR = 1.0

STATE_NAMES = {
    SINGLE_STAGE: ("I1d", "I1q", "Iod", "Ioq", "Vod", "Voq", "Vdc"),
    TWO_STAGE: ("I1d", "I1q", "Iod", "Ioq", "Vod", "Voq", "Ipv", "Vdc"),
}
INPUT_NAMES = {
    SINGLE_STAGE: ("Vcd", "Vcq", "Vgd", "Vgq", "w0", "Ipv"),
    TWO_STAGE: ("Vcd", "Vcq", "Vgd", "Vgq", "w0", "Vpv", "d_ref"),
}
# 0-based position of Vdc in the state vector
VDC_INDEX = {SINGLE_STAGE: 6, TWO_STAGE: 7}


def check_kind(kind: str) -> str:
    if kind not in KINDS:
        raise InvalidParameterError(f"unknown system kind {kind!r}; expected one of {KINDS}")
    return kind


def n_states(kind: str) -> int:
    return len(STATE_NAMES[check_kind(kind)])


def n_inputs(kind: str) -> int:
    return len(INPUT_NAMES[check_kind(kind)])


@dataclass(frozen=True)
class PvParams:
    """Electrical parameters of one PV unit (SI units)."""

    r_c: float
    l_c: float
    r_g: float
    l_g: float
    c_f: float
    c_dc: float
    w0: float = 377.0
    l_b: float = 5e-3
    v_grid_nominal: float = 800.0

    def __post_init__(self):
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if not np.isfinite(value) or value <= 0:
                raise InvalidParameterError(f"{f.name} must be strictly positive, got {value!r}")

    def replace(self, **changes) -> "PvParams":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "PvParams":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InvalidParameterError(f"unknown PvParams fields: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in data.items()})

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "PvParams":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "PvParams":
        return cls.from_json(Path(path).read_text())


def default_params(kind: str = SINGLE_STAGE) -> PvParams:
    """Parameters whose AC matrices reproduce the identified coefficient tables.

    1/L = 38.1665 H^-1 with R = 3.5 ohm gives R/L = 133.583 s^-1; both round to
    the tabulated 38.17 and 133.58. 1/C_f = 4000 and 1/C_dc = 166.66.
    """
    check_kind(kind)
    inv_l = 38.1665
    return PvParams(
        r_c=3.5,
        l_c=1.0 / inv_l,
        r_g=3.5,
        l_g=1.0 / inv_l,
        c_f=1.0 / 4000.0,
        c_dc=1.0 / 166.66,
        w0=377.0,
        l_b=5e-3,
        v_grid_nominal=800.0,
    )


@lru_cache(maxsize=256)
def _ac_matrices(p: PvParams):
    a = np.zeros((6, 6))
    a[0, 0] = -p.r_c / p.l_c
    a[0, 1] = p.w0
    a[0, 4] = -1.0 / p.l_c
    a[1, 0] = -p.w0
    a[1, 1] = -p.r_c / p.l_c
    a[1, 5] = -1.0 / p.l_c
    a[2, 2] = -p.r_g / p.l_g
    a[2, 3] = p.w0
    a[2, 4] = 1.0 / p.l_g
    a[3, 2] = -p.w0
    a[3, 3] = -p.r_g / p.l_g
    a[3, 5] = 1.0 / p.l_g
    a[4, 0] = 1.0 / p.c_f
    a[4, 2] = -1.0 / p.c_f
    # rotating-frame coupling of the filter capacitor: +w0*Voq into dVod, -w0*Vod into dVoq
    a[4, 5] = p.w0
    a[5, 1] = 1.0 / p.c_f
    a[5, 3] = -1.0 / p.c_f
    a[5, 4] = -p.w0

    b = np.zeros((6, 5))
    b[0, 0] = 1.0 / p.l_c
    b[1, 1] = 1.0 / p.l_c
    b[2, 2] = -1.0 / p.l_g
    b[3, 3] = -1.0 / p.l_g
    a.setflags(write=False)
    b.setflags(write=False)
    return a, b


def build_ac_matrices(params: PvParams) -> tuple[np.ndarray, np.ndarray]:
    """Return the 6x6 AC-side state matrix and the 6x5 input matrix.

    The input matrix acts on ``[Vcd, Vcq, Vgd, Vgq, w0]``; its w0 column is zero
    since the grid frequency enters through the state matrix.
    """
    if not isinstance(params, PvParams):
        raise InvalidParameterError("params must be a PvParams instance")
    a, b = _ac_matrices(params)
    return a.copy(), b.copy()


def _check_vdc(vdc):
    if np.any(~(vdc > VDC_FLOOR)):
        worst = float(np.min(vdc))
        raise SingularityError(f"DC-link voltage {worst:.6g} V is at or below the {VDC_FLOOR} V floor")


def single_stage_derivative(x, u, p: PvParams) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.shape[-1] != 7 or u.shape[-1] != 6:
        raise InvalidInputError(f"single-stage expects x[...,7], u[...,6]; got {x.shape}, {u.shape}")
    vdc = x[..., 6]
    _check_vdc(vdc)
    a, b = _ac_matrices(p)
    out = np.empty(np.broadcast_shapes(x.shape, u.shape[:-1] + (7,)))
    out[..., :6] = x[..., :6] @ a.T + u[..., :5] @ b.T
    out[..., 6] = -1.5 / p.c_dc * u[..., 2] * x[..., 2] / vdc + u[..., 5] / p.c_dc
    return out


def dc_input_current(x, kind: str = TWO_STAGE) -> np.ndarray:
    """VSC input current from the power balance Vdc*Idc = 1.5*(Vod*Iod + Voq*Ioq)."""
    x = np.asarray(x, dtype=float)
    vdc = x[..., VDC_INDEX[check_kind(kind)]]
    _check_vdc(vdc)
    return 1.5 * (x[..., 4] * x[..., 2] + x[..., 5] * x[..., 3]) / vdc


def two_stage_derivative(x, u, p: PvParams) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.shape[-1] != 8 or u.shape[-1] != 7:
        raise InvalidInputError(f"two-stage expects x[...,8], u[...,7]; got {x.shape}, {u.shape}")
    duty = u[..., 6]
    if np.any((duty < 0) | (duty >= 1)):
        raise InvalidInputError("duty cycle d_ref must lie in [0, 1)")
    idc = dc_input_current(x, TWO_STAGE)
    a, b = _ac_matrices(p)
    out = np.empty(np.broadcast_shapes(x.shape, u.shape[:-1] + (8,)))
    out[..., :6] = x[..., :6] @ a.T + u[..., :5] @ b.T
    ipv = x[..., 6]
    vdc = x[..., 7]
    out[..., 6] = u[..., 5] / p.l_b - (1.0 - duty) * vdc / p.l_b
    out[..., 7] = (1.0 - duty) * ipv / p.c_dc - idc / p.c_dc
    return out


def derivative(kind: str, x, u, p: PvParams) -> np.ndarray:
    if check_kind(kind) == SINGLE_STAGE:
        return single_stage_derivative(x, u, p)
    return two_stage_derivative(x, u, p)


def selector_indices(selector, n: int) -> np.ndarray:
    """Convert 1-based state numbers to 0-based indices, validating the range."""
    idx = np.asarray(list(selector), dtype=int).reshape(-1)
    if idx.size and (idx.min() < 1 or idx.max() > n):
        raise InvalidInputError(f"selector {idx.tolist()} out of range for n={n} (state numbers are 1-based)")
    return idx - 1


def measurement(x, selector) -> np.ndarray:
    """Select the measured components of ``x``; ``selector`` holds 1-based state numbers."""
    x = np.asarray(x, dtype=float)
    return x[..., selector_indices(selector, x.shape[-1])]


def operating_point(
    kind: str,
    p: PvParams,
    i_od: float = 10.0,
    i_oq: float = 0.0,
    v_dc: float = 800.0,
    v_pv: float = 500.0,
    v_gd: float | None = None,
    v_gq: float = 0.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Equilibrium state and input that deliver the requested grid current.

    The AC side is solved for the converter voltages that hold ``(i_od, i_oq)``
    at steady state; the DC side is balanced at ``v_dc``.
    """
    check_kind(kind)
    v_gd = p.v_grid_nominal if v_gd is None else v_gd
    a, b = _ac_matrices(p)
    free_states = [0, 1, 4, 5]
    m = np.column_stack([a[:, free_states], b[:, 0], b[:, 1]])
    rhs = -(a[:, 2] * i_od + a[:, 3] * i_oq + b[:, 2] * v_gd + b[:, 3] * v_gq)
    i1d, i1q, vod, voq, vcd, vcq = np.linalg.solve(m, rhs)
    x_ac = [i1d, i1q, i_od, i_oq, vod, voq]
    if kind == SINGLE_STAGE:
        i_pv = 1.5 * v_gd * i_od / v_dc
        return np.array(x_ac + [v_dc]), np.array([vcd, vcq, v_gd, v_gq, p.w0, i_pv])
    power = 1.5 * (vod * i_od + voq * i_oq)
    i_pv = power / v_pv
    duty = 1.0 - v_pv / v_dc
    if not 0.0 <= duty < 1.0:
        raise InvalidInputError(f"v_pv={v_pv} and v_dc={v_dc} imply duty {duty} outside [0, 1)")
    return np.array(x_ac + [i_pv, v_dc]), np.array([vcd, vcq, v_gd, v_gq, p.w0, v_pv, duty])


def jacobian(kind: str, x, u, p: PvParams) -> np.ndarray:
    """State Jacobian ``df/dx`` of the continuous model at ``(x, u)``."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    n = n_states(kind)
    a, _ = _ac_matrices(p)
    j = np.zeros((n, n))
    j[:6, :6] = a
    if kind == SINGLE_STAGE:
        vdc = x[6]
        _check_vdc(vdc)
        j[6, 2] = -1.5 * u[2] / (p.c_dc * vdc)
        j[6, 6] = 1.5 * u[2] * x[2] / (p.c_dc * vdc**2)
        return j
    vdc = x[7]
    _check_vdc(vdc)
    duty = u[6]
    j[6, 7] = -(1.0 - duty) / p.l_b
    j[7, 6] = (1.0 - duty) / p.c_dc
    j[7, 2] = -1.5 * x[4] / (p.c_dc * vdc)
    j[7, 3] = -1.5 * x[5] / (p.c_dc * vdc)
    j[7, 4] = -1.5 * x[2] / (p.c_dc * vdc)
    j[7, 5] = -1.5 * x[3] / (p.c_dc * vdc)
    j[7, 7] = 1.5 * (x[4] * x[2] + x[5] * x[3]) / (p.c_dc * vdc**2)
    return j

"""Ready-made scenarios for the case studies (identification, sweeps, parameter jump, microgrid)."""
from __future__ import annotations

import numpy as np

from . import pv_models as pm
from .simulator import (
    Disconnect,
    Event,
    Excitation,
    InputSchedule,
    NoiseSpec,
    ParamChange,
    Scenario,
    Unit,
    VoltageSag,
)

IDENTIFICATION_WINDOW = 0.5

# half-ranges of the random input levels used while identifying
EXCITATION_AMPLITUDE = {
    pm.SINGLE_STAGE: {"Vcd": 40.0, "Vcq": 40.0, "Vgd": 30.0, "Vgq": 30.0, "Ipv": 8.0},
    pm.TWO_STAGE: {"Vcd": 40.0, "Vcq": 40.0, "Vgd": 30.0, "Vgq": 30.0, "Vpv": 30.0, "d_ref": 0.03},
}
# PV source slope: S for single-stage (Ipv vs Vdc), ohm for two-stage (Vpv vs Ipv)
SOURCE_SLOPE = {pm.SINGLE_STAGE: 0.2, pm.TWO_STAGE: 2.0}


def pv_unit(
    kind: str,
    params: pm.PvParams | None = None,
    i_od: float = 10.0,
    i_oq: float = 0.0,
    v_pv: float = 500.0,
    q: float = 0.0,
    r: float = 1e-2,
    seed: int = 0,
    selector=(5, 6, 7),
    excite=(),
    hold: float = 5e-3,
) -> Unit:
    """A unit started at its equilibrium, with random excitation over each ``(t0, t1)`` in ``excite``."""
    params = params or pm.default_params(kind)
    x0, u0 = pm.operating_point(kind, params, i_od=i_od, i_oq=i_oq, v_pv=v_pv)
    ref = x0[6]
    excitations = [
        Excitation(float(t0), float(t1), dict(EXCITATION_AMPLITUDE[kind]), hold, seed=int(seed) * 1000 + i)
        for i, (t0, t1) in enumerate(excite)
    ]
    schedule = InputSchedule(list(map(float, u0)), SOURCE_SLOPE[kind], float(ref), [], excitations)
    return Unit(kind, params, list(map(float, x0)), schedule, NoiseSpec(q=q, r=r, seed=int(seed)), list(selector))


def identification_scenario(kind: str, seed: int = 0, window: float = IDENTIFICATION_WINDOW, q: float = 0.0, **kw) -> Scenario:
    unit = pv_unit(kind, seed=seed, q=q, excite=[(0.0, window)], **kw)
    return Scenario([unit], t_end=window, name=f"identify-{kind}")


def estimation_scenario(kind: str, t_end: float, seed: int = 0, q: float = 0.0, window: float = IDENTIFICATION_WINDOW, **kw) -> Scenario:
    """Excited identification window ``[0, window)`` followed by steady operation."""
    unit = pv_unit(kind, seed=seed, q=q, excite=[(0.0, window)], **kw)
    return Scenario([unit], t_end=t_end, name=f"estimate-{kind}")


def param_jump_scenario(
    kind: str = pm.TWO_STAGE,
    t_event: float = 20.0,
    t_end: float = 30.0,
    r_g_new: float = 2.90,
    seed: int = 0,
    q: float = 0.0,
    window: float = IDENTIFICATION_WINDOW,
) -> Scenario:
    """Grid resistance steps at ``t_event``; the inputs are excited during the
    initial identification window and again during the retrain window."""
    unit = pv_unit(kind, seed=seed, q=q, excite=[(0.0, window), (t_event, t_event + window)])
    events = [Event(t_event, ParamChange(0, "r_g", r_g_new))]
    return Scenario([unit], t_end=t_end, events=events, name="param-jump")


MICROGRID_KINDS = [pm.SINGLE_STAGE] * 3 + [pm.TWO_STAGE] * 4


def microgrid_units(seed: int = 0, q: float = 0.0, window: float = IDENTIFICATION_WINDOW):
    """Three single-stage and four two-stage units with distinct ratings and filters."""
    rng = np.random.default_rng(seed)
    units = []
    for i, kind in enumerate(MICROGRID_KINDS):
        base = pm.default_params(kind)
        params = base.replace(
            l_g=base.l_g * float(rng.uniform(0.8, 1.2)),
            r_g=base.r_g * float(rng.uniform(0.8, 1.2)),
            c_dc=base.c_dc * float(rng.uniform(0.8, 1.2)),
        )
        units.append(
            pv_unit(kind, params, i_od=float(rng.uniform(6.0, 14.0)), seed=seed * 100 + i, q=q, excite=[(0.0, window)])
        )
    return units


def microgrid_undervoltage_scenario(seed: int = 0, t_end: float = 10.0, t_sag: float = 8.0, fraction: float = 0.2, q: float = 0.0) -> Scenario:
    events = [Event(t_sag, VoltageSag(fraction))]
    return Scenario(microgrid_units(seed, q), t_end=t_end, events=events, name="microgrid-undervoltage")


def microgrid_failure_scenario(seed: int = 0, t_end: float = 10.0, t_fail: float = 5.0, unit: int = 0, q: float = 0.0) -> Scenario:
    events = [Event(t_fail, Disconnect(unit))]
    return Scenario(microgrid_units(seed, q), t_end=t_end, events=events, name="microgrid-failure")

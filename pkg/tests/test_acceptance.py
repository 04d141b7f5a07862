"""Acceptance criteria at their pinned tolerances.

Each test carries a ``criterion`` mark and fills the ``detail`` fixture; the
conftest hooks print one pass/fail line per criterion in the terminal summary.
"""
import time

import numpy as np
import pytest

from pvdse import experiments as ex
from pvdse import pv_models as pm
from pvdse import scenarios as sc
from pvdse import sindy
from pvdse import ukf as uk
from pvdse.observability import ac_observability, validate_selector
from pvdse.preprocessing import from_trajectory
from pvdse.simulator import simulate

# (term, 1-based column) -> value for every highlighted cell of the gamma = 8 table
BOXED = {
    ("x1", 1): -133.58, ("x2", 2): -133.58, ("x3", 3): -133.58, ("x4", 4): -133.58,
    ("x2", 1): 377.0, ("x1", 2): -377.0, ("x4", 3): 377.0, ("x3", 4): -377.0,
    ("x1", 5): 4000.0, ("x3", 5): -4000.0, ("x2", 6): 4000.0, ("x4", 6): -4000.0,
    ("u6", 7): 166.66, ("x3 u3/x7", 7): -250.0,
}
INPUT_GAIN = {
    ("x5", 1): -38.17, ("x6", 2): -38.17, ("x5", 3): 38.17, ("x6", 4): 38.17,
    ("u1", 1): 38.17, ("u2", 2): 38.17, ("u3", 3): -38.17, ("u4", 4): -38.17,
}


def close(value, target, rel):
    return abs(value - target) <= rel * abs(target)


@pytest.mark.criterion(1, "coefficient recovery at gamma=8")
def test_criterion_1_coefficient_recovery(detail):
    tic = time.perf_counter()
    trajs, _ = simulate(sc.identification_scenario(pm.SINGLE_STAGE))
    assert trajs[0].t.size == 5001 and trajs[0].dt == pytest.approx(1e-4)
    data = from_trajectory(trajs[0], None, "forward")
    spec = sindy.default_pv_library(pm.SINGLE_STAGE)
    model = sindy.feature_select_sparse_regression(data, spec, 8)
    seconds = time.perf_counter() - tic
    detail["seconds"] = round(seconds, 2)
    worst = max(abs(model.coefficient(t, c) - v) / abs(v) for (t, c), v in BOXED.items())
    detail["worst_rel_error"] = float(f"{worst:.2e}")
    assert worst < 0.01
    # no entry survives outside the highlighted cells, so the greyed 2.31 and 8.52 are absent
    assert model.nonzero_count == len(BOXED)
    assert model.coefficient("x1", 3) == 0 and model.coefficient("x2", 4) == 0
    # the +/-38.17 input gains fall below 377/8 and are greyed in the gamma = 8 table;
    # they are recovered by the least-squares stage and kept at gamma = 15
    names = spec.names
    lstsq = model.diagnostics["xi_lstsq"]
    wide = sindy.feature_select_sparse_regression(data, spec, 15)
    for (t, c), v in INPUT_GAIN.items():
        assert close(lstsq[names.index(t), c - 1], v, 0.01)
        assert close(wide.coefficient(t, c), v, 0.01)
        assert model.coefficient(t, c) == 0
    assert seconds < 30


@pytest.fixture(scope="module")
def gamma_sweep():
    return ex.gamma_sweep(pm.TWO_STAGE, ex.GAMMAS)


@pytest.mark.slow
@pytest.mark.criterion(2, "gamma monotonicity and selection")
def test_criterion_2_gamma_sweep(detail, gamma_sweep):
    s = gamma_sweep.summary
    errors = [np.inf if e is None else e for e in s["normalized_error"]]
    detail.update(nonzero=s["nonzero"], argmin=s["argmin_gamma"], ratio=float(f"{errors[0] / min(errors):.3g}"))
    assert s["nonzero"] == sorted(s["nonzero"])
    assert errors[0] >= 5 * min(errors)
    assert ex.GAMMAS[int(np.argmin(errors))] in (8, 10, 15)


@pytest.mark.slow
@pytest.mark.criterion(3, "noise-sweep ordering")
def test_criterion_3_noise_sweep(detail):
    tic = time.perf_counter()
    result = ex.noise_sweep(pm.SINGLE_STAGE, ex.SIGMAS, seeds=5)
    seconds = time.perf_counter() - tic
    med = result.summary["median_normalized_error"]
    detail.update(medians=[float(f"{m:.3g}") for m in med], seconds=round(seconds, 1))
    assert all(b >= a for a, b in zip(med, med[1:]))
    assert med[-1] < 0.05
    assert seconds < 300


@pytest.mark.slow
@pytest.mark.criterion(4, "adaptive parameter jump")
def test_criterion_4_param_jump(detail):
    result = ex.param_jump(None)
    s = result.summary
    detail.update(ratio=s["error_ratio"], latency=s["retrain_latency_s"],
                  adaptive=s["adaptive"]["post_event_error"], stale=s["stale"]["post_event_error"])
    assert s["error_ratio"] <= 0.1
    assert s["retrain_latency_s"] <= 0.5 + 1e-9


@pytest.mark.criterion(5, "observability ranks and selectors")
def test_criterion_5_observability(detail):
    rank = ac_observability(pm.SINGLE_STAGE, [5, 6]).rank
    valid = {kind: validate_selector(kind, [5, 6, 7])[0] for kind in pm.KINDS}
    rejected = not validate_selector(pm.SINGLE_STAGE, [5, 6])[0]
    detail.update(ac_rank=rank, valid_567=valid, rejects_56=rejected)
    assert all(valid.values())
    assert rejected
    # with identical converter-side and grid-side R/L the current sum I1 + Io is
    # invisible to the PCC voltages, so this rank is 4 for the tabulated parameters
    assert rank == 6


def kf_step(mean, cov, m, h, q, r, y):
    xp = m @ mean
    pp = m @ cov @ m.T + q
    s = h @ pp @ h.T + r
    k = pp @ h.T @ np.linalg.inv(s)
    return xp + k @ (y - h @ xp), pp - k @ s @ k.T


@pytest.mark.criterion(6, "UKF correctness oracles")
def test_criterion_6_ukf_oracles(detail):
    rng = np.random.default_rng(2024)
    # (a) linear-Gaussian equivalence
    n, dt = 4, 1e-3
    m = rng.normal(size=(n, n))
    m *= 0.95 / np.max(np.abs(np.linalg.eigvals(m)))
    model = uk.TransitionModel(lambda x, ua: x @ (m - np.eye(n)).T / dt, dt)
    h = np.eye(n)[[0, 1]]
    a = rng.normal(size=(n, n))
    q = 0.01 * (a @ a.T + np.eye(n))
    r = 0.05 * np.eye(2)
    mean, cov = np.zeros(n), np.eye(n)
    km, kc = mean.copy(), cov.copy()
    x = rng.normal(size=n)
    worst = 0.0
    for _ in range(100):
        x = m @ x + rng.multivariate_normal(np.zeros(n), q)
        y = h @ x + rng.multivariate_normal(np.zeros(2), r)
        post = uk.ukf_step(uk.GaussianBelief(mean, cov), uk.AugmentedInput(np.zeros(0)), y, model, q, r,
                           uk.selection_map([1, 2], n), "consistent")
        km, kc = kf_step(km, kc, m, h, q, r, y)
        mean, cov = post.mean, post.cov
        worst = max(worst, np.linalg.norm(mean - km) / np.linalg.norm(km), np.linalg.norm(cov - kc) / np.linalg.norm(kc))
    detail["a_worst_rel"] = float(f"{worst:.2e}")
    assert worst < 1e-8
    # (b) sigma-set moment reconstruction
    worst_b = 0.0
    for _ in range(100):
        k = int(rng.integers(1, 9))
        g = rng.normal(size=(k, k))
        p = g @ g.T + 1e-3 * np.eye(k)
        mu = rng.normal(size=k)
        pts = uk.sigma_points(uk.GaussianBelief(mu, p))
        dev = pts[1:] - mu
        worst_b = max(worst_b, np.linalg.norm(dev.T @ dev / (2 * k) - p) / np.linalg.norm(p))
        assert np.allclose(pts.mean(axis=0), mu, rtol=1e-12, atol=1e-12)
    detail["b_worst_rel"] = float(f"{worst_b:.2e}")
    assert worst_b < 1e-12
    # (c) scalar hand check: K = 1/4, innovation 2
    pred = uk.Prediction(uk.GaussianBelief([0.0], [[2.0]]), np.array([0.0]), np.array([[4.0]]), np.array([[1.0]]), None)
    post = uk.update(pred, [2.0])
    assert post.mean[0] == 0.5 and post.cov[0, 0] == 1.75


@pytest.mark.slow
@pytest.mark.criterion(7, "microgrid scenarios")
@pytest.mark.parametrize("name", ["microgrid-undervoltage", "microgrid-failure"])
def test_criterion_7_microgrid(detail, name):
    tic = time.perf_counter()
    result = ex.microgrid(name)
    seconds = time.perf_counter() - tic
    units = result.summary["units"]
    detail.update(scenario=name, seconds=round(seconds, 1),
                  worst=max(u["normalized_error"] for u in units if u["operating"]))
    assert len(units) == 7
    operating = [u for u in units if u["operating"]]
    assert len(operating) == (6 if name == "microgrid-failure" else 7)
    assert all(u["normalized_error"] < 0.05 for u in operating)
    assert all(u["transient_decayed"] for u in operating)
    assert seconds < 600


def csv_bytes(directory):
    return {p.relative_to(directory).as_posix(): p.read_bytes() for p in sorted(directory.rglob("*.csv"))}


@pytest.mark.slow
@pytest.mark.criterion(8, "determinism")
def test_criterion_8_determinism(detail, tmp_path):
    runs = {
        "estimate": lambda: ex.estimate_experiment(pm.TWO_STAGE, sigma=0.01, seed=7, t_end=1.0),
        "gamma-sweep": lambda: ex.gamma_sweep(pm.TWO_STAGE, (5, 15), seed=7, t_end=1.0),
        "microgrid-failure": lambda: ex.microgrid("microgrid-failure", seed=7, t_end=1.5, t_event=1.0),
    }
    for name, run in runs.items():
        first = csv_bytes(run().write(tmp_path / name / "a"))
        second = csv_bytes(run().write(tmp_path / name / "b"))
        assert first and first == second, name
    detail["experiments"] = list(runs)

"""``pv-dse`` command line: identification, estimation and the case studies.

Every subcommand exits 0 when the thresholds encoded in it pass and 1
otherwise; argument errors exit 2.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import adaptive_dse as ad
from . import experiments as ex
from . import pv_models as pm
from . import sindy
from .errors import PvDseError
from .preprocessing import from_trajectory
from .simulator import Scenario, simulate

log = logging.getLogger("pvdse")


def _gamma(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"gamma must be a number, got {text!r}")
    if not value > 1:
        raise argparse.ArgumentTypeError(f"gamma must be greater than 1, got {value:g}")
    return value


def _sigma(text: str) -> float:
    value = float(text)
    if value < 0:
        raise argparse.ArgumentTypeError("sigma must be nonnegative")
    return value


def _selector(text: str) -> list[int]:
    try:
        return [int(s) for s in text.replace(" ", "").split(",") if s]
    except ValueError:
        raise argparse.ArgumentTypeError(f"selector must be comma-separated integers, got {text!r}")


def _on_off(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("on", "true", "1", "yes"):
        return True
    if lowered in ("off", "false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError("expected on or off")


def _common(p: argparse.ArgumentParser, system_default: str | None = pm.SINGLE_STAGE) -> None:
    p.add_argument("--system", choices=pm.KINDS, default=system_default)
    p.add_argument("--seed", type=int, default=None, help="overrides the fixed default seed")
    p.add_argument("--out", type=Path, default=None, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pv-dse", description="Data-driven dynamic state estimation for grid-tied PV units.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("identify", help="identify a sparse model from a noiseless excited window")
    _common(p)
    p.add_argument("--gamma", type=_gamma, default=8.0)
    p.add_argument("--scenario", type=Path, default=None, help="scenario JSON; unit 0 over the identification window")

    p = sub.add_parser("estimate", help="identify, then run the UKF on a held-out run")
    _common(p)
    p.add_argument("--gamma", type=_gamma, default=ad.PipelineConfig.gamma)
    p.add_argument("--sigma", type=_sigma, default=0.0, help="process-noise intensity")
    p.add_argument("--t-end", type=float, default=2.0)

    p = sub.add_parser("experiment", help="run a named case study")
    p.add_argument("name", choices=ex.EXPERIMENTS)
    _common(p, system_default=None)
    p.add_argument("--gamma", type=_gamma, default=None)
    p.add_argument("--sigma", type=_sigma, default=None)
    p.add_argument("--adaptive", type=_on_off, default=None, help="param-jump: on, off, or both when omitted")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--scenario", type=Path, default=None, help="scenario JSON for estimate/param-jump/microgrid runs")
    p.add_argument("--selector", type=_selector, default=[5, 6, 7])

    p = sub.add_parser("observability", help="observability report for a measurement selector")
    p.add_argument("--system", choices=pm.KINDS, default=pm.SINGLE_STAGE)
    p.add_argument("--selector", type=_selector, default=[5, 6, 7])
    p.add_argument("--out", type=Path, default=None)
    return parser


def _seed(args) -> int:
    return ex.DEFAULT_SEED if args.seed is None else args.seed


def _emit(summary: dict, out: Path | None) -> None:
    text = json.dumps(summary, indent=2, default=ex._default)
    print(text)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "summary.json").write_text(text + "\n")


def cmd_identify(args) -> int:
    seed = _seed(args)
    if args.scenario is not None:
        scen = Scenario.load(args.scenario)
        trajs, _ = simulate(scen)
        traj = trajs[0].window(0.0, ad.PipelineConfig().window)
        kind = traj.kind
        data = from_trajectory(traj, None, "forward")
        model = sindy.feature_select_sparse_regression(data, sindy.default_pv_library(kind), args.gamma)
        result = ex.ExperimentResult("identify", {"experiment": "identify", "system": kind, "gamma": args.gamma,
                                                  "nonzero": model.nonzero_count,
                                                  "training_error": sindy.validation_error(model, data)},
                                     True, model=model)
    else:
        result = ex.identify_experiment(args.system, args.gamma, seed)
    print(result.model.table())
    if args.out is not None:
        result.write(args.out)
        (args.out / "table.txt").write_text(result.model.table() + "\n")
    _emit(result.summary, None)
    return 0 if result.passed else 1


def cmd_estimate(args) -> int:
    result = ex.estimate_experiment(args.system, args.gamma, args.sigma, _seed(args), args.t_end)
    if args.out is not None:
        result.write(args.out)
    _emit(result.summary, None)
    return 0 if result.passed else 1


def _from_scenario(args):
    scen = Scenario.load(args.scenario)
    config = ad.PipelineConfig(**({"gamma": args.gamma} if args.gamma else {}))
    if args.adaptive is not None:
        config = ad.PipelineConfig(**{**config.to_dict(), "adaptive": args.adaptive})
    simulated = simulate(scen)
    reports = ad.run_all_units(scen, config, simulated=simulated)
    units = [{"unit": r.unit, "normalized_error": ex._finite(r.normalized_error()), **r.summary()} for r in reports]
    passed = all(r.normalized_error() < 0.05 and not r.diverged for r in reports)
    summary = {"experiment": args.name, "scenario": str(args.scenario), "units": units}
    return ex.ExperimentResult(args.name, summary, passed, [ex.Run(args.name, scen, simulated, reports, summary)])


def cmd_experiment(args) -> int:
    seed = _seed(args)
    name = args.name
    if args.scenario is not None and name in ("estimate", "param-jump", "microgrid-failure", "microgrid-undervoltage"):
        result = _from_scenario(args)
    elif name == "identify":
        result = ex.identify_experiment(args.system or pm.SINGLE_STAGE, args.gamma or 8.0, seed)
    elif name == "estimate":
        result = ex.estimate_experiment(args.system or pm.SINGLE_STAGE, args.gamma or ad.PipelineConfig.gamma,
                                        args.sigma or 0.0, seed)
    elif name == "gamma-sweep":
        result = ex.gamma_sweep(args.system or pm.TWO_STAGE, seed=seed, jobs=args.jobs)
    elif name == "noise-sweep":
        kw = {"gamma": args.gamma} if args.gamma else {}
        result = ex.noise_sweep(args.system or pm.SINGLE_STAGE, seed=seed, jobs=args.jobs, **kw)
    elif name == "param-jump":
        result = ex.param_jump(args.adaptive, seed=seed, kind=args.system or pm.TWO_STAGE)
    elif name in ("microgrid-failure", "microgrid-undervoltage"):
        result = ex.microgrid(name, seed=seed)
    else:
        result = ex.observability_experiment(args.system or pm.SINGLE_STAGE, args.selector)
    if args.out is not None:
        result.write(args.out)
    _emit(result.summary, None)
    log.info("%s: %s", name, "pass" if result.passed else "FAIL")
    return 0 if result.passed else 1


def cmd_observability(args) -> int:
    result = ex.observability_experiment(args.system, args.selector)
    _emit(result.summary, args.out)
    return 0 if result.passed else 1


COMMANDS = {"identify": cmd_identify, "estimate": cmd_estimate, "experiment": cmd_experiment, "observability": cmd_observability}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    np.set_printoptions(precision=4, suppress=True)
    try:
        return COMMANDS[args.command](args)
    except PvDseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

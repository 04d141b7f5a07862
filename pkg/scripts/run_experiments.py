"""Run every named experiment and write its outputs under one results directory."""
import argparse
import json
import time
from pathlib import Path

from pvdse import experiments as ex

RUNNERS = {
    "identify": lambda seed, jobs: ex.identify_experiment(seed=seed),
    "estimate": lambda seed, jobs: ex.estimate_experiment(seed=seed),
    "gamma-sweep": lambda seed, jobs: ex.gamma_sweep(seed=seed, jobs=jobs),
    "noise-sweep": lambda seed, jobs: ex.noise_sweep(seed=seed, jobs=jobs),
    "param-jump": lambda seed, jobs: ex.param_jump(None, seed=seed),
    "microgrid-failure": lambda seed, jobs: ex.microgrid("microgrid-failure", seed=seed),
    "microgrid-undervoltage": lambda seed, jobs: ex.microgrid("microgrid-undervoltage", seed=seed),
    "observability": lambda seed, jobs: ex.observability_experiment(),
}


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", type=Path, default=Path("results"))
    parser.add_argument("--seed", type=int, default=ex.DEFAULT_SEED)
    parser.add_argument("--jobs", type=int, default=1)
    parser.add_argument("--only", nargs="+", choices=list(RUNNERS), default=list(RUNNERS))
    args = parser.parse_args()
    status = {}
    for name in args.only:
        tic = time.perf_counter()
        result = RUNNERS[name](args.seed, args.jobs)
        result.write(args.out / name)
        status[name] = {"passed": result.passed, "seconds": round(time.perf_counter() - tic, 1)}
        print(f"{name:24s} {'pass' if result.passed else 'FAIL'}  {status[name]['seconds']} s", flush=True)
    (args.out / "status.json").write_text(json.dumps(status, indent=2) + "\n")


if __name__ == "__main__":
    main()

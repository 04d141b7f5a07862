"""Print the identified coefficient tables for both systems at several gamma values."""
import argparse

from pvdse import experiments as ex
from pvdse import pv_models as pm


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--gammas", type=float, nargs="+", default=[8.0, 15.0])
    parser.add_argument("--seed", type=int, default=ex.DEFAULT_SEED)
    args = parser.parse_args()
    for kind in pm.KINDS:
        for gamma in args.gammas:
            model, _, seconds = ex.identify(kind, gamma, args.seed)
            print(f"# {kind}, gamma={gamma:g}, {model.nonzero_count} nonzero, {seconds:.2f} s")
            print(model.table())
            print()


if __name__ == "__main__":
    main()

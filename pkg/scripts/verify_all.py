"""Run the numerical checks over a range of seeds and report the worst margins.

    python scripts/verify_all.py --seeds 0 1 2 3 4
"""
import argparse
import sys

from coevolve.verify import run_all


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, nargs="+", default=list(range(5)))
    args = p.parse_args(argv)
    worst = {}
    failed = 0
    for seed in args.seeds:
        for r in run_all(seed):
            failed += not r.passed
            ratio = r.measured / r.bound if r.bound else float("inf")
            worst[r.theorem] = max(worst.get(r.theorem, 0.0), ratio)
    for name, ratio in worst.items():
        print(f"{name:12s} worst measured/bound = {ratio:.3g}")
    print(f"{failed} failing reports")
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())

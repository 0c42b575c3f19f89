"""Train the named runs into results/<name>/ (all of them by default).

    python3 scripts/train_runs.py                      # every run
    python3 scripts/train_runs.py c23_d0_contrastive_s0 --force
"""
import argparse
import logging

from threadpoolctl import threadpool_limits

from virel.experiments import RUNS, ensure_checkpoint, train_run


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("names", nargs="*", help=f"subset of: {', '.join(RUNS)}")
    ap.add_argument("--force", action="store_true", help="retrain even if a checkpoint exists")
    args = ap.parse_args()
    unknown = set(args.names) - set(RUNS)
    if unknown:
        ap.error(f"unknown runs: {sorted(unknown)}")
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    with threadpool_limits(1):
        for name in args.names or list(RUNS):
            (train_run if args.force else ensure_checkpoint)(RUNS[name])


if __name__ == "__main__":
    main()

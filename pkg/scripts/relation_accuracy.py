"""Relation classification accuracy of the trained runs (k-means, K=4, best bijection)."""
import json

from virel.experiments import RUNS, evaluate_run

NAMES = ["c23_d0_contrastive_s0", "c23_d0_contrastive_s1", "c23_d0_contrastive_s2",
         "c23_d02_contrastive_ib"]

if __name__ == "__main__":
    rows = {name: round(evaluate_run(name, RUNS[name]).accuracy, 4) for name in NAMES}
    print(json.dumps(rows, indent=2))

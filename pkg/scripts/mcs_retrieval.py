"""Top-3 MCS retrievals per task for the seen (2-4 trained) and unseen (2-3 trained) runs."""
import json

from virel.experiments import RUNS, evaluate_run

if __name__ == "__main__":
    for name in ("c24_d0_contrastive_ib", "c23_d1_contrastive_ib"):
        rep = evaluate_run(name, RUNS[name])
        retrieval = json.loads((RUNS[name].out_dir / "report.json").read_text())
        print(f"== {name}: accuracy {rep.accuracy:.3f}, ground truth in top 3 for "
              f"{sum(rep.top3_hit.values())}/{len(rep.top3_hit)} tasks")
        for t, hit in rep.top3_hit.items():
            print(f"task {t:2d} {'hit ' if hit else 'miss'} top-1 {retrieval['top1'][str(t)]}")

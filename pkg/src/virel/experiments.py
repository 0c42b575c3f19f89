"""Named training runs behind the reported numbers, and their evaluation.

Each run trains from a generated dataset (validation split = seed + 1) and
stores ``checkpoint.bin``, ``train_log.csv`` and ``config.json`` under
``results/<name>/``. Evaluation regenerates its data from the config, so a
stored checkpoint is all that is needed to re-check a result.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

from . import autodiff as ad
from .cli import load_model
from .config import RunConfig
from .discovery import RelGraph, canonicalize, evaluate_relations, retrieve
from .scene import Observation, TaskSpec, generate_dataset, load_task_family, training_view
from .train import train

log = logging.getLogger(__name__)

RESULTS = Path(__file__).resolve().parents[2] / "results"


def _run(name: str, **kw) -> RunConfig:
    return RunConfig(out=str(RESULTS / name), **kw)


RUNS: dict[str, RunConfig] = {
    **{f"c23_d0_contrastive_s{s}": _run(f"c23_d0_contrastive_s{s}", seed=s) for s in range(3)},
    "c23_d02_contrastive_ib": _run("c23_d02_contrastive_ib", distractors="0-2", ib=True),
    "c24_d0_contrastive_ib": _run("c24_d0_contrastive_ib", tasks="2-4", ib=True),
    "c23_d1_contrastive_ib": _run("c23_d1_contrastive_ib", distractors="1", ib=True,
                                  eval_tasks="2-4", eval_distractors="0"),
}


def train_run(cfg: RunConfig) -> Path:
    """Train one configuration and write its artifacts; returns the checkpoint path."""
    specs = load_task_family(cfg.tasks)
    records = [training_view(o) for o in generate_dataset(specs, cfg.examples_per_task, cfg.distractors, cfg.seed)]
    val = generate_dataset(specs, cfg.examples_per_task, cfg.distractors, cfg.seed + 1)
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json() + "\n")
    res = train(records, val, mode=cfg.mode, n_tasks=len(specs), seed=cfg.seed, epochs=cfg.epochs,
                patience=cfg.patience, lr=cfg.lr, k=cfg.k, augment_p=cfg.augment_p,
                log_path=out / "train_log.csv")
    ckpt = out / "checkpoint.bin"
    ad.save_checkpoint(res.model.params, ckpt, extra={"mode": cfg.mode, "n_tasks": len(specs),
                                                      "best_epoch": res.best_epoch})
    return ckpt


def ensure_checkpoint(cfg: RunConfig) -> Path:
    ckpt = cfg.out_dir / "checkpoint.bin"
    if not ckpt.exists():
        log.info("no checkpoint at %s; training", ckpt)
        train_run(cfg)
    return ckpt


def eval_observations(cfg: RunConfig) -> tuple[list[TaskSpec], list[Observation]]:
    """Evaluation data: a fresh draw (seed + 1) of the eval family, or the training family."""
    specs = load_task_family(cfg.eval_tasks or cfg.tasks)
    n = cfg.eval_examples_per_task or cfg.examples_per_task
    return specs, generate_dataset(specs, n, cfg.eval_distractors or cfg.distractors, cfg.seed + 1)


def ground_truth_graph(spec: TaskSpec) -> RelGraph:
    return RelGraph.from_edges(spec.n_core, [(k, l, r) for (k, l), r in spec.closed_relations().items()])


@dataclass
class RunReport:
    name: str
    accuracy: float
    top3_hit: dict[int, bool]
    top1: dict[int, list]

    def to_json(self) -> dict:
        return {"name": self.name, "accuracy": self.accuracy,
                "top3_hit": {str(t): h for t, h in self.top3_hit.items()},
                "top1": {str(t): g for t, g in self.top1.items()}}


def evaluate_run(name: str, cfg: RunConfig, checkpoint: Path | None = None) -> RunReport:
    """Relation accuracy plus per-task retrieval hits against the closed task graphs."""
    model = load_model(checkpoint or ensure_checkpoint(cfg))
    specs, obs = eval_observations(cfg)
    ev = evaluate_relations(model, obs, k=cfg.k, seed=cfg.seed)
    tallies = retrieve(ev, obs, cfg.group_size, cfg.top)
    hits, top1 = {}, {}
    for spec in specs:
        truth = canonicalize(ground_truth_graph(spec))
        entries = tallies.get(spec.task_id, [])
        hits[spec.task_id] = any(e.key == truth for e in entries)
        top1[spec.task_id] = entries[0].graph.to_list() if entries else []
    report = RunReport(name, ev.accuracy, hits, top1)
    (cfg.out_dir / "report.json").write_text(json.dumps(report.to_json(), indent=2) + "\n")
    return report

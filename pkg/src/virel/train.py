"""Training loop with online augmentation and early stopping on validation accuracy."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .crgnn import CRGNN
from .discovery import evaluate_relations
from .objectives import BatchPlan, LossWeights, total_loss
from .scene import Observation, TrainRecord, augment_arrays, render_slabs

log = logging.getLogger(__name__)

LOG_FIELDS = ["epoch", "mode", "loss", "contrastive", "classify", "ib", "val_accuracy", "seed", "seconds"]


class NumericFailure(FloatingPointError):
    pass


@dataclass
class TrainResult:
    model: CRGNN
    best_epoch: int
    best_accuracy: float
    history: list[dict] = field(default_factory=list)


def build_model(mode: str, n_tasks: int, seed: int) -> CRGNN:
    return CRGNN(n_tasks=n_tasks if mode.startswith("classify") else None,
                 ib=mode.endswith("+ib"), seed=seed)


def train_step(model: CRGNN, state: ad.AdamState, records: Sequence[TrainRecord], mode: str,
               rng: np.random.Generator, weights: LossWeights = LossWeights(),
               augment_p: float = 0.9) -> dict[str, float]:
    scenes = []
    for r in records:
        grid, masks = augment_arrays(r.grid, r.masks, rng, augment_p)
        scenes.append(render_slabs(grid, masks, len(masks), model.dtype)[0])
    task_ids = np.array([r.task_id for r in records])
    with ad.Tape() as tape:
        loss, terms, _ = total_loss(model, scenes, task_ids, mode, weights, rng=rng)
    if not np.isfinite(loss.value):
        raise NumericFailure(f"non-finite loss {float(loss.value)}")
    grads = ad.backward(tape, loss)
    ad.adam_step(model.params, {p.name: g for p, g in grads.items()}, state)
    terms["loss"] = float(loss.value)
    return terms


def train(records: Sequence[TrainRecord], val: Sequence[Observation], *, mode: str, n_tasks: int,
          seed: int = 0, epochs: int = 100, patience: int = 15, lr: float = 1e-4, k: int = 4,
          augment_p: float = 0.9, log_path: str | Path | None = None,
          plan: BatchPlan = BatchPlan()) -> TrainResult:
    """Train a CR-GNN and return the parameters of the best validation epoch."""
    model = build_model(mode, n_tasks, seed)
    state = ad.AdamState(lr=lr)
    rng = np.random.default_rng([seed, 1])
    task_ids = np.array([r.task_id for r in records])
    best_acc, best_epoch = -1.0, 0
    best_params = {n: p.value.copy() for n, p in model.params.items()}
    history = []
    fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.DictWriter(fh, LOG_FIELDS, lineterminator="\n")
        writer.writeheader()
    try:
        for epoch in range(1, epochs + 1):
            t0 = time.perf_counter()
            sums: dict[str, list[float]] = {}
            for idx in plan.batches(task_ids, rng):
                terms = train_step(model, state, [records[i] for i in idx], mode, rng,
                                   augment_p=augment_p)
                for key, v in terms.items():
                    sums.setdefault(key, []).append(v)
            acc = evaluate_relations(model, val, k=k, seed=seed).accuracy if val else float("nan")
            row = {"epoch": epoch, "mode": mode, "val_accuracy": round(acc, 6), "seed": seed,
                   "seconds": round(time.perf_counter() - t0, 2)}
            for key in ("loss", "contrastive", "classify", "ib"):
                row[key] = round(float(np.mean(sums[key])), 6) if key in sums else ""
            history.append(row)
            if fh is not None:
                writer.writerow(row)
                fh.flush()
            log.info("epoch %d loss %.4f val_acc %.4f (%.1fs)", epoch, row["loss"], acc, row["seconds"])
            if acc > best_acc:
                best_acc, best_epoch = acc, epoch
                best_params = {n: p.value.copy() for n, p in model.params.items()}
            elif epoch - best_epoch >= patience:
                break
    finally:
        if fh is not None:
            fh.close()
    model.load_arrays(best_params)
    return TrainResult(model, best_epoch, best_acc, history)

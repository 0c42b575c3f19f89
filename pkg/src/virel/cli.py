"""Command line entry point: ``virel {gen,train,eval,retrieve,export}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import autodiff as ad
from .config import ConfigError, RunConfig
from .discovery import evaluate_relations, export_embeddings, retrieval_report, retrieve
from .scene import (DatasetSchemaError, GenerationExhausted, TaskSpecError, generate_dataset,
                    load_task_family, read_dataset, read_training_records, write_dataset)
from .train import NumericFailure, build_model, train

log = logging.getLogger("virel")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class DataError(RuntimeError):
    pass


def paths(cfg: RunConfig) -> dict[str, Path]:
    out = cfg.out_dir
    return {
        "train": out / "train.jsonl",
        "val": out / "val.jsonl",
        "eval": out / "eval_data.jsonl",
        "checkpoint": out / "checkpoint.bin",
        "log": out / "train_log.csv",
        "accuracy": out / "accuracy.json",
        "retrieval": out / "retrieval.json",
        "embeddings": out / "embeddings.csv",
    }


def _eval_dataset(cfg: RunConfig):
    """Observations for eval/retrieve/export: the validation split unless another family is named."""
    if cfg.eval_tasks is None and cfg.eval_distractors is None and cfg.eval_examples_per_task is None:
        p = paths(cfg)["val"]
        if not p.exists():
            raise DataError(f"{p} missing; run `virel gen` first")
        return read_dataset(p)
    specs = load_task_family(cfg.eval_tasks or cfg.tasks)
    obs = generate_dataset(specs, cfg.eval_examples_per_task or cfg.examples_per_task,
                           cfg.eval_distractors or cfg.distractors, cfg.seed + 1)
    write_dataset(obs, paths(cfg)["eval"])
    return obs


def cmd_gen(cfg: RunConfig) -> dict:
    specs = load_task_family(cfg.tasks)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    p = paths(cfg)
    train_obs = generate_dataset(specs, cfg.examples_per_task, cfg.distractors, cfg.seed)
    val_obs = generate_dataset(specs, cfg.examples_per_task, cfg.distractors, cfg.seed + 1)
    write_dataset(train_obs, p["train"])
    write_dataset(val_obs, p["val"])
    return {"train": len(train_obs), "val": len(val_obs)}


def cmd_train(cfg: RunConfig) -> dict:
    specs = load_task_family(cfg.tasks)
    p = paths(cfg)
    if not p["train"].exists():
        raise DataError(f"{p['train']} missing; run `virel gen` first")
    records = read_training_records(p["train"])
    if any(not 0 <= r.task_id < len(specs) for r in records):
        raise DataError("dataset task ids do not match the task family")
    val = read_dataset(p["val"]) if p["val"].exists() else []
    res = train(records, val, mode=cfg.mode, n_tasks=len(specs), seed=cfg.seed, epochs=cfg.epochs,
                patience=cfg.patience, lr=cfg.lr, k=cfg.k, augment_p=cfg.augment_p, log_path=p["log"])
    ad.save_checkpoint(res.model.params, p["checkpoint"],
                       extra={"mode": cfg.mode, "n_tasks": len(specs), "best_epoch": res.best_epoch})
    return {"best_epoch": res.best_epoch, "val_accuracy": res.best_accuracy,
            "epochs_run": len(res.history)}


def load_model(path: Path):
    arrays, meta = ad.load_checkpoint(path)
    model = build_model(meta["mode"], meta["n_tasks"], seed=0)
    model.load_arrays(arrays)
    return model


def _checkpoint(cfg: RunConfig, checkpoint: str | None) -> Path:
    path = Path(checkpoint) if checkpoint else paths(cfg)["checkpoint"]
    if not path.exists():
        raise DataError(f"checkpoint {path} not found")
    return path


def cmd_eval(cfg: RunConfig, checkpoint: str | None = None) -> dict:
    model = load_model(_checkpoint(cfg, checkpoint))
    ev = evaluate_relations(model, _eval_dataset(cfg), k=cfg.k, seed=cfg.seed)
    report = {"accuracy": ev.accuracy,
              "assignment": {str(c): ev.relation_of_cluster(c).value for c in range(ev.clusters.k)},
              "k": cfg.k, "inertia": ev.clusters.inertia}
    paths(cfg)["accuracy"].write_text(json.dumps(report, indent=2) + "\n")
    return report


def cmd_retrieve(cfg: RunConfig, checkpoint: str | None = None) -> dict:
    model = load_model(_checkpoint(cfg, checkpoint))
    obs = _eval_dataset(cfg)
    ev = evaluate_relations(model, obs, k=cfg.k, seed=cfg.seed)
    report = retrieval_report(retrieve(ev, obs, cfg.group_size, cfg.top), cfg.group_size, cfg.top)
    report["accuracy"] = ev.accuracy
    paths(cfg)["retrieval"].write_text(json.dumps(report, indent=2) + "\n")
    return report


def cmd_export(cfg: RunConfig, checkpoint: str | None = None) -> dict:
    model = load_model(_checkpoint(cfg, checkpoint))
    obs = _eval_dataset(cfg)
    export_embeddings(model, obs, paths(cfg)["embeddings"])
    return {"rows": sum(len(o.masks) * (len(o.masks) - 1) // 2 for o in obs)}


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "retrieve": cmd_retrieve,
            "export": cmd_export}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="virel", description=__doc__)
    ap.add_argument("command", choices=list(COMMANDS))
    ap.add_argument("--config", help="JSON file with RunConfig fields")
    ap.add_argument("--tasks", help="task family: 2-3, 2-4 or a JSON path")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--objective", choices=["contrastive", "classify"])
    ap.add_argument("--ib", action="store_true", default=None)
    ap.add_argument("--distractors", choices=["0", "1", "0-2"])
    ap.add_argument("--examples-per-task", type=int)
    ap.add_argument("--epochs", type=int)
    ap.add_argument("--k", type=int)
    ap.add_argument("--group-size", type=int)
    ap.add_argument("--top", type=int)
    ap.add_argument("--out")
    ap.add_argument("--threads", type=int)
    ap.add_argument("--eval-tasks")
    ap.add_argument("--eval-distractors", choices=["0", "1", "0-2"])
    ap.add_argument("--eval-examples-per-task", type=int)
    ap.add_argument("--checkpoint", help="checkpoint for eval/retrieve/export")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    overrides = {k: v for k, v in vars(args).items()
                 if k not in ("command", "config", "checkpoint", "verbose") and v is not None}
    try:
        cfg = RunConfig.from_file(args.config, **overrides) if args.config else RunConfig(**overrides)
        fn = COMMANDS[args.command]
        with threadpool_limits(cfg.threads):
            if args.command == "gen":
                result = fn(cfg)
            elif args.command == "train":
                cfg.out_dir.mkdir(parents=True, exist_ok=True)
                (cfg.out_dir / "config.json").write_text(cfg.to_json() + "\n")
                result = fn(cfg)
            else:
                result = fn(cfg, args.checkpoint)
    except (ConfigError, TaskSpecError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, DatasetSchemaError, GenerationExhausted, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericFailure, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    print(json.dumps(result if args.command != "retrieve" else {
        "accuracy": result["accuracy"], "tasks": len(result["tasks"])}))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

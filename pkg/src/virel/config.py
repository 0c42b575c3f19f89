from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

DISTRACTOR_POLICIES = ("0", "1", "0-2")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    tasks: str = "2-3"  # bundled family name or path to a task JSON
    examples_per_task: int = 250
    distractors: str = "0"
    objective: str = "contrastive"
    ib: bool = False
    seed: int = 0
    epochs: int = 100
    patience: int = 15
    lr: float = 1e-4
    augment_p: float = 0.9
    k: int = 4
    group_size: int = 5
    top: int = 3
    out: str = "runs/default"
    threads: int = 1
    # retrieval/eval may target a different dataset than training
    eval_tasks: str | None = None
    eval_distractors: str | None = None
    eval_examples_per_task: int | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.distractors not in DISTRACTOR_POLICIES:
            raise ConfigError(f"distractors must be one of {DISTRACTOR_POLICIES}, got {self.distractors!r}")
        if self.eval_distractors is not None and self.eval_distractors not in DISTRACTOR_POLICIES:
            raise ConfigError(f"bad eval_distractors {self.eval_distractors!r}")
        if self.objective not in ("contrastive", "classify"):
            raise ConfigError(f"objective must be contrastive or classify, got {self.objective!r}")
        if self.examples_per_task < 1 or self.epochs < 0 or self.k < 1 or self.group_size < 2:
            raise ConfigError("examples_per_task, epochs, k and group_size must be positive")

    @property
    def mode(self) -> str:
        return self.objective + ("+ib" if self.ib else "")

    @property
    def out_dir(self) -> Path:
        return Path(self.out)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_file(cls, path: str | Path, **overrides) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: line {e.lineno}: {e.msg}") from e
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        raw.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**raw)


"""BabyARC-style relational scenes on a 16x16 grid.

A task is a small relational graph over "core" objects. Every observation of the
task places shapes so that the pairwise relations among the core objects are
exactly those the task asks for (closed under the equivalence of same-color and
same-shape), plus optional distractor objects that are unconstrained.
"""
from __future__ import annotations

import enum
import itertools
import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

GRID = 16
N_COLORS = 9
SCHEMA_VERSION = 1
MAX_ATTEMPTS = 1000

AUGMENTATIONS = ("hflip", "vflip", "rot90", "rot180", "rot270", "resize", "color")


class ShapeKind(str, enum.Enum):
    RECT_SOLID = "rect-solid"
    RECT = "rect"
    LSHAPE = "Lshape"
    LINE = "line"


class RelationType(str, enum.Enum):
    NONE = "none"
    SAME_SHAPE = "same-shape"
    SAME_COLOR = "same-color"
    INSIDE = "inside"


RELATIONS = tuple(RelationType)


class GenerationExhausted(RuntimeError):
    pass


class TooManyObjects(ValueError):
    pass


class DatasetSchemaError(ValueError):
    pass


class TaskSpecError(ValueError):
    pass


@dataclass
class SceneObject:
    shape: ShapeKind
    color: int
    mask: np.ndarray  # (16, 16) bool
    is_core: bool = True
    slot: int | None = None  # task-spec index of a core object; not serialized

    @property
    def bbox(self) -> tuple[int, int, int, int]:
        return mask_bbox(self.mask)


@dataclass
class Observation:
    grid: np.ndarray  # (16, 16) int
    objects: list[SceneObject]
    task_id: int = 0
    obs_id: int = 0
    edges: list[tuple[int, int, RelationType]] = field(default_factory=list)

    @property
    def n_objects(self) -> int:
        return len(self.objects)

    @property
    def masks(self) -> np.ndarray:
        if not self.objects:
            return np.zeros((0, GRID, GRID), dtype=bool)
        return np.stack([o.mask for o in self.objects])


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    n_core: int
    relations: tuple[tuple[tuple[int, int], RelationType], ...]

    def __post_init__(self):
        for (k, l), rel in self.relations:
            if not (0 <= k < self.n_core and 0 <= l < self.n_core) or k == l:
                raise TaskSpecError(f"task {self.task_id}: bad pair {(k, l)}")
            if rel is RelationType.NONE:
                raise TaskSpecError(f"task {self.task_id}: 'none' cannot be listed")
        self.closed_relations()  # raises on conflicting labels

    def closed_relations(self) -> dict[tuple[int, int], RelationType]:
        """Pair labels implied by the spec.

        same-color and same-shape are equivalences, so listing (0,1) and (1,2)
        as same-color forces (0,2) as well.
        """
        out: dict[tuple[int, int], RelationType] = {}
        for rel in (RelationType.SAME_COLOR, RelationType.SAME_SHAPE):
            classes = _equivalence_classes(self.n_core, [p for p, r in self.relations if r is rel])
            for cls in classes:
                for k, l in itertools.combinations(sorted(cls), 2):
                    _set_label(out, (k, l), rel, self.task_id)
        for (k, l), rel in self.relations:
            if rel is RelationType.INSIDE:
                _set_label(out, (min(k, l), max(k, l)), rel, self.task_id)
        return dict(sorted(out.items()))


def _set_label(out, pair, rel, task_id):
    if out.get(pair, rel) is not rel:
        raise TaskSpecError(f"task {task_id}: pair {pair} carries two relations")
    out[pair] = rel


def _equivalence_classes(n: int, pairs: Iterable[tuple[int, int]]) -> list[set[int]]:
    parent = list(range(n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for k, l in pairs:
        parent[find(k)] = find(l)
    groups: dict[int, set[int]] = {}
    for i in range(n):
        groups.setdefault(find(i), set()).add(i)
    return sorted(groups.values(), key=min)


# ---------------------------------------------------------------------------
# task-family config files


def parse_task_family(text: str) -> list[TaskSpec]:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise TaskSpecError(f"invalid task file at line {e.lineno}: {e.msg}") from e
    try:
        return [
            TaskSpec(
                task_id=int(t["task_id"]),
                n_core=int(t["n_core"]),
                relations=tuple(((int(p[0]), int(p[1])), RelationType(r)) for p, r in t["relations"]),
            )
            for t in doc["tasks"]
        ]
    except (KeyError, TypeError, ValueError, IndexError) as e:
        if isinstance(e, TaskSpecError):
            raise
        raise TaskSpecError(f"malformed task file: {e!r}") from e


def load_task_family(path: str | Path) -> list[TaskSpec]:
    """Load a task family from a JSON path or a bundled name ("2-3", "2-4")."""
    bundled = {"2-3": "tasks_2_3.json", "2-4": "tasks_2_4.json"}
    if str(path) in bundled:
        text = resources.files("virel.data").joinpath(bundled[str(path)]).read_text()
    else:
        text = Path(path).read_text()
    return parse_task_family(text)


# ---------------------------------------------------------------------------
# geometry helpers


def mask_bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise ValueError("empty mask")
    return int(rows[0]), int(cols[0]), int(rows[-1] - rows[0] + 1), int(cols[-1] - cols[0] + 1)


def _shape_patch(kind: ShapeKind, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    patch = np.zeros((h, w), dtype=bool)
    if kind is ShapeKind.RECT_SOLID or kind is ShapeKind.LINE:
        patch[:] = True
    elif kind is ShapeKind.RECT:
        patch[0, :] = patch[-1, :] = True
        patch[:, 0] = patch[:, -1] = True
    else:
        patch[:, 0] = True
        patch[-1, :] = True
        if rng.random() < 0.5:
            patch = patch[::-1]
        if rng.random() < 0.5:
            patch = patch[:, ::-1]
    return np.ascontiguousarray(patch)


def _sample_size(kind: ShapeKind, rng: np.random.Generator) -> tuple[int, int]:
    if kind in (ShapeKind.RECT, ShapeKind.RECT_SOLID):
        return int(rng.integers(3, 9)), int(rng.integers(3, 9))
    if kind is ShapeKind.LSHAPE:
        return int(rng.integers(2, 6)), int(rng.integers(2, 6))
    length = int(rng.integers(3, 9))
    return (length, 1) if rng.random() < 0.5 else (1, length)


def _contains(outer: SceneObject, inner: SceneObject) -> bool:
    if outer.shape is not ShapeKind.RECT:
        return False
    r0, c0, h0, w0 = outer.bbox
    r1, c1, h1, w1 = inner.bbox
    if r1 <= r0 or c1 <= c0 or r1 + h1 >= r0 + h0 or c1 + w1 >= c0 + w0:
        return False
    return not outer.mask[r1:r1 + h1, c1:c1 + w1].any()


def relation_oracle(a: SceneObject, b: SceneObject) -> RelationType:
    if _contains(a, b) or _contains(b, a):
        return RelationType.INSIDE
    if a.color == b.color:
        return RelationType.SAME_COLOR
    if a.shape is b.shape:
        return RelationType.SAME_SHAPE
    return RelationType.NONE


def oracle_edges(objects: Sequence[SceneObject], core_only: bool = True) -> list[tuple[int, int, RelationType]]:
    out = []
    for k, l in itertools.combinations(range(len(objects)), 2):
        if core_only and not (objects[k].is_core and objects[l].is_core):
            continue
        rel = relation_oracle(objects[k], objects[l])
        if rel is not RelationType.NONE:
            out.append((k, l, rel))
    return out


def paint(objects: Sequence[SceneObject]) -> np.ndarray:
    grid = np.zeros((GRID, GRID), dtype=np.int64)
    for o in objects:
        grid[o.mask] = o.color
    return grid


# ---------------------------------------------------------------------------
# generation


def _sample_attributes(spec: TaskSpec, rng: np.random.Generator):
    closed = spec.closed_relations()
    color_classes = _equivalence_classes(
        spec.n_core, [p for p, r in closed.items() if r is RelationType.SAME_COLOR])
    shape_classes = _equivalence_classes(
        spec.n_core, [p for p, r in closed.items() if r is RelationType.SAME_SHAPE])
    if len(shape_classes) > len(ShapeKind):
        raise GenerationExhausted(f"task {spec.task_id}: more shape classes than shape kinds")

    containers: dict[int, int] = {}  # inner -> container
    for (k, l), rel in closed.items():
        if rel is RelationType.INSIDE:
            outer, inner = (k, l) if rng.random() < 0.5 else (l, k)
            containers[inner] = outer

    shape_of_class = [None] * len(shape_classes)
    class_of = {i: ci for ci, cls in enumerate(shape_classes) for i in cls}
    for outer in containers.values():
        shape_of_class[class_of[outer]] = ShapeKind.RECT
    free = [k for k in ShapeKind if k not in shape_of_class]
    rng.shuffle(free)
    for ci in range(len(shape_classes)):
        if shape_of_class[ci] is None:
            shape_of_class[ci] = free.pop()
    shapes = [shape_of_class[class_of[i]] for i in range(spec.n_core)]

    palette = rng.permutation(np.arange(1, N_COLORS + 1))
    colors = [0] * spec.n_core
    for ci, cls in enumerate(color_classes):
        for i in cls:
            colors[i] = int(palette[ci])
    return shapes, colors, containers


def _free_positions(occupied: np.ndarray, h: int, w: int) -> np.ndarray:
    # occupied: (16,16) bool of claimed bbox cells; returns valid top-left corners
    if h > GRID or w > GRID:
        return np.zeros((0, 2), dtype=np.int64)
    csum = np.pad(occupied.astype(np.int64).cumsum(0).cumsum(1), ((1, 0), (1, 0)))
    window = csum[h:, w:] - csum[:-h, w:] - csum[h:, :-w] + csum[:-h, :-w]
    return np.argwhere(window == 0)


def _try_layout(shapes, colors, containers, core_flags, rng):
    n = len(shapes)
    sizes = [_sample_size(s, rng) for s in shapes]
    # containers grow to fit their inner object
    for inner, outer in containers.items():
        ih, iw = sizes[inner]
        lo_h, lo_w = max(3, ih + 2), max(3, iw + 2)
        if lo_h > 8 or lo_w > 8:
            return None
        sizes[outer] = (int(rng.integers(lo_h, 9)), int(rng.integers(lo_w, 9)))

    occupied = np.zeros((GRID, GRID), dtype=bool)
    origin: list[tuple[int, int] | None] = [None] * n
    top_level = [i for i in range(n) if i not in containers]
    # big objects first so the packing rarely fails
    top_level.sort(key=lambda i: -sizes[i][0] * sizes[i][1])
    for i in top_level:
        h, w = sizes[i]
        cands = _free_positions(occupied, h, w)
        if len(cands) == 0:
            return None
        r, c = cands[rng.integers(len(cands))]
        origin[i] = (int(r), int(c))
        occupied[r:r + h, c:c + w] = True
    for inner, outer in containers.items():
        (orow, ocol), (oh, ow) = origin[outer], sizes[outer]
        ih, iw = sizes[inner]
        r = orow + 1 + int(rng.integers(0, oh - 2 - ih + 1))
        c = ocol + 1 + int(rng.integers(0, ow - 2 - iw + 1))
        origin[inner] = (r, c)

    objects = []
    for i in range(n):
        h, w = sizes[i]
        r, c = origin[i]
        mask = np.zeros((GRID, GRID), dtype=bool)
        mask[r:r + h, c:c + w] = _shape_patch(shapes[i], h, w, rng)
        objects.append(SceneObject(shapes[i], colors[i], mask, core_flags[i], i if core_flags[i] else None))
    return objects


def generate_observation(spec: TaskSpec, n_distractors: int, rng: np.random.Generator,
                         obs_id: int = 0, max_attempts: int = MAX_ATTEMPTS) -> Observation:
    """Sample one observation whose core pairs realize ``spec`` exactly."""
    target = spec.closed_relations()
    for _ in range(max_attempts):
        shapes, colors, containers = _sample_attributes(spec, rng)
        for _ in range(n_distractors):
            shapes.append(list(ShapeKind)[rng.integers(len(ShapeKind))])
            colors.append(int(rng.integers(1, N_COLORS + 1)))
        core = [True] * spec.n_core + [False] * n_distractors
        objects = _try_layout(shapes, colors, containers, core, rng)
        if objects is None:
            continue
        got = {(k, l): r for k, l, r in oracle_edges(objects[:spec.n_core])}
        if got != target:
            continue
        order = rng.permutation(len(objects))
        objects = [objects[j] for j in order]
        return Observation(paint(objects), objects, spec.task_id, obs_id, oracle_edges(objects))
    raise GenerationExhausted(f"task {spec.task_id}: no valid layout after {max_attempts} attempts")


def distractor_count(policy: str, rng: np.random.Generator) -> int:
    if policy == "0":
        return 0
    if policy == "1":
        return 1
    if policy == "0-2":
        return int(rng.integers(0, 3))
    raise ValueError(f"unknown distractor policy {policy!r}")


def generate_dataset(specs: Sequence[TaskSpec], examples_per_task: int, distractors: str,
                     seed: int) -> list[Observation]:
    """Observations ordered by task then index; each draws from its own seeded stream."""
    out = []
    for spec in specs:
        for i in range(examples_per_task):
            rng = np.random.default_rng([seed, spec.task_id, i])
            n_d = distractor_count(distractors, rng)
            out.append(generate_observation(spec, n_d, rng, obs_id=len(out)))
    return out


# ---------------------------------------------------------------------------
# augmentation


def transform_arrays(grid: np.ndarray, masks: np.ndarray, kind: str,
                     rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Apply one augmentation to a grid and its object masks.

    Returns the new grid, new masks and, for "color", the color lookup table
    (index = old color) so callers can relabel object metadata.
    """
    if kind == "hflip":
        return grid[:, ::-1].copy(), masks[:, :, ::-1].copy(), None
    if kind == "vflip":
        return grid[::-1].copy(), masks[:, ::-1].copy(), None
    if kind in ("rot90", "rot180", "rot270"):
        k = {"rot90": 1, "rot180": 2, "rot270": 3}[kind]
        return np.rot90(grid, k).copy(), np.rot90(masks, k, axes=(1, 2)).copy(), None
    if kind == "color":
        lut = np.concatenate([[0], rng.permutation(np.arange(1, N_COLORS + 1))])
        return lut[grid], masks.copy(), lut
    if kind == "resize":
        covered = grid > 0
        if not covered.any():
            return grid.copy(), masks.copy(), None
        r0, c0, h, w = mask_bbox(covered)
        if 2 * h > GRID or 2 * w > GRID:
            return grid.copy(), masks.copy(), None
        r_new, c_new = min(r0, GRID - 2 * h), min(c0, GRID - 2 * w)

        def up(a):
            out = np.zeros(a.shape[:-2] + (GRID, GRID), dtype=a.dtype)
            block = a[..., r0:r0 + h, c0:c0 + w].repeat(2, axis=-2).repeat(2, axis=-1)
            out[..., r_new:r_new + 2 * h, c_new:c_new + 2 * w] = block
            return out

        return up(grid), up(masks), None
    raise ValueError(f"unknown augmentation {kind!r}")


def apply_augmentation(o: Observation, kind: str, rng: np.random.Generator) -> Observation:
    grid, masks, lut = transform_arrays(o.grid, o.masks, kind, rng)
    objects = [
        replace(obj, mask=m, color=int(lut[obj.color]) if lut is not None else obj.color)
        for obj, m in zip(o.objects, masks)
    ]
    return replace(o, grid=grid, objects=objects, edges=list(o.edges))


def augment_observation(o: Observation, rng: np.random.Generator, p: float = 0.9) -> Observation:
    if rng.random() >= p:
        return o
    return apply_augmentation(o, AUGMENTATIONS[rng.integers(len(AUGMENTATIONS))], rng)


def augment_arrays(grid: np.ndarray, masks: np.ndarray, rng: np.random.Generator,
                   p: float = 0.9) -> tuple[np.ndarray, np.ndarray]:
    """Training-time variant that needs no object metadata."""
    if rng.random() >= p:
        return grid, masks
    grid, masks, _ = transform_arrays(grid, masks, AUGMENTATIONS[rng.integers(len(AUGMENTATIONS))], rng)
    return grid, masks


# ---------------------------------------------------------------------------
# model input


def render_slabs(grid: np.ndarray, masks: np.ndarray, max_objects: int,
                 dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """One-hot slab per object: (max_objects, 16, 16, 9) plus a presence flag."""
    n = len(masks)
    if n > max_objects:
        raise TooManyObjects(f"{n} objects exceeds maximum {max_objects}")
    slabs = np.zeros((max_objects, GRID, GRID, N_COLORS), dtype=dtype)
    for k in range(n):
        rows, cols = np.nonzero(masks[k])
        slabs[k, rows, cols, grid[rows, cols] - 1] = 1
    present = np.zeros(max_objects, dtype=bool)
    present[:n] = True
    return slabs, present


def render_input(o: Observation, max_objects: int = 6, dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    return render_slabs(o.grid, o.masks, max_objects, dtype)


# ---------------------------------------------------------------------------
# dataset files


def observation_to_record(o: Observation) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "task_id": int(o.task_id),
        "obs_id": int(o.obs_id),
        "grid": o.grid.astype(int).tolist(),
        "masks": o.masks.astype(int).tolist(),
        "objects": [{"shape": obj.shape.value, "color": int(obj.color), "is_core": bool(obj.is_core)}
                    for obj in o.objects],
        "edges": [[int(k), int(l), r.value] for k, l, r in o.edges],
    }


def _check_version(rec: dict, lineno: int):
    v = rec.get("schema_version")
    if v != SCHEMA_VERSION:
        raise DatasetSchemaError(f"line {lineno}: schema_version {v!r}, expected {SCHEMA_VERSION}")


def record_to_observation(rec: dict, lineno: int = 0) -> Observation:
    _check_version(rec, lineno)
    masks = np.asarray(rec["masks"], dtype=bool).reshape(-1, GRID, GRID)
    objects = [SceneObject(ShapeKind(m["shape"]), int(m["color"]), masks[i], bool(m["is_core"]))
               for i, m in enumerate(rec["objects"])]
    return Observation(
        grid=np.asarray(rec["grid"], dtype=np.int64),
        objects=objects,
        task_id=int(rec["task_id"]),
        obs_id=int(rec["obs_id"]),
        edges=[(int(k), int(l), RelationType(r)) for k, l, r in rec["edges"]],
    )


def dumps_record(rec: dict) -> str:
    return json.dumps(rec, separators=(",", ":"))


def write_dataset(observations: Iterable[Observation], path: str | Path) -> None:
    with open(path, "w") as fh:
        for o in observations:
            fh.write(dumps_record(observation_to_record(o)) + "\n")


def _iter_records(path: str | Path):
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetSchemaError(f"line {lineno}: {e.msg}") from e
            _check_version(rec, lineno)
            yield lineno, rec


def read_dataset(path: str | Path) -> list[Observation]:
    return [record_to_observation(rec, lineno) for lineno, rec in _iter_records(path)]


@dataclass
class TrainRecord:
    """What the trainer is allowed to see: no objects, no edges."""
    grid: np.ndarray
    masks: np.ndarray
    task_id: int
    obs_id: int


def read_training_records(path: str | Path) -> list[TrainRecord]:
    out = []
    for _, rec in _iter_records(path):
        out.append(TrainRecord(
            grid=np.asarray(rec["grid"], dtype=np.int64),
            masks=np.asarray(rec["masks"], dtype=bool).reshape(-1, GRID, GRID),
            task_id=int(rec["task_id"]),
            obs_id=int(rec["obs_id"]),
        ))
    return out


def training_view(o: Observation) -> TrainRecord:
    return TrainRecord(o.grid, o.masks, o.task_id, o.obs_id)

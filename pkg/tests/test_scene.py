import itertools
import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from virel.scene import (AUGMENTATIONS, GRID, DatasetSchemaError, GenerationExhausted, Observation,
                         RelationType, SceneObject, ShapeKind, TaskSpec, TaskSpecError, TooManyObjects,
                         apply_augmentation, augment_observation, dumps_record, generate_dataset,
                         generate_observation, load_task_family, mask_bbox, observation_to_record,
                         oracle_edges, paint, parse_task_family, read_dataset, read_training_records,
                         relation_oracle, render_input, write_dataset)

R = RelationType


def obj(shape, color, rows, cols, core=True):
    mask = np.zeros((GRID, GRID), dtype=bool)
    mask[rows, cols] = True
    return SceneObject(ShapeKind(shape), color, mask, core)


def hollow(r, c, h, w, color):
    mask = np.zeros((GRID, GRID), dtype=bool)
    mask[r:r + h, c:c + w] = True
    mask[r + 1:r + h - 1, c + 1:c + w - 1] = False
    return SceneObject(ShapeKind.RECT, color, mask)


def test_enumerations():
    assert [k.value for k in ShapeKind] == ["rect-solid", "rect", "Lshape", "line"]
    assert [r.value for r in RelationType] == ["none", "same-shape", "same-color", "inside"]


def test_oracle_examples():
    brown, yellow = 9, 4
    rect = hollow(0, 0, 4, 4, brown)
    lshape = obj("Lshape", brown, [8, 9, 9], [8, 8, 9])
    lshape_y = obj("Lshape", yellow, [12, 13, 13], [1, 1, 2])
    assert relation_oracle(rect, lshape) is R.SAME_COLOR
    assert relation_oracle(lshape, lshape_y) is R.SAME_SHAPE
    assert relation_oracle(lshape, replace(lshape, mask=lshape.mask.copy())) is R.SAME_COLOR

    blue_box = hollow(2, 2, 7, 7, 1)
    red_line = obj("line", 2, [5, 5, 5], [4, 5, 6])
    assert relation_oracle(blue_box, red_line) is R.INSIDE
    assert relation_oracle(red_line, blue_box) is R.INSIDE


def test_inside_beats_color_and_needs_strict_interior():
    box = hollow(0, 0, 6, 6, 3)
    inner_same_color = obj("rect-solid", 3, [2, 2, 3, 3], [2, 3, 2, 3])
    assert relation_oracle(box, inner_same_color) is R.INSIDE
    on_border = obj("line", 5, [0, 0, 0], [1, 2, 3])
    assert relation_oracle(box, on_border) is R.NONE
    solid = obj("rect-solid", 3, slice(0, 6), slice(0, 6))
    assert relation_oracle(solid, inner_same_color) is R.SAME_COLOR


def test_task_family_files_match_appendix():
    six, thirteen = load_task_family("2-3"), load_task_family("2-4")
    assert len(six) == 6 and len(thirteen) == 13
    assert six[0].relations == (((0, 1), R.SAME_COLOR), ((1, 2), R.SAME_SHAPE))
    assert six[2].relations == (((0, 1), R.INSIDE),)
    assert thirteen[0].relations == (((0, 1), R.INSIDE),)
    assert thirteen[12].relations == (((0, 2), R.SAME_COLOR), ((1, 2), R.SAME_COLOR), ((2, 3), R.SAME_COLOR))
    assert [t.n_core for t in thirteen] == [2, 3, 3, 2, 3, 3, 4, 4, 4, 4, 4, 4, 4]


def test_closed_relations_add_transitive_pairs():
    spec = load_task_family("2-3")[5]
    assert spec.closed_relations() == {(0, 1): R.SAME_COLOR, (0, 2): R.SAME_COLOR, (1, 2): R.SAME_COLOR}
    spec0 = load_task_family("2-3")[0]
    assert spec0.closed_relations() == dict(spec0.relations)


def test_conflicting_spec_rejected():
    with pytest.raises(TaskSpecError):
        TaskSpec(0, 3, (((0, 1), R.SAME_COLOR), ((1, 2), R.SAME_COLOR), ((0, 2), R.INSIDE)))
    with pytest.raises(TaskSpecError):
        TaskSpec(0, 2, (((0, 2), R.SAME_COLOR),))


def test_invalid_task_file_reports_line():
    with pytest.raises(TaskSpecError, match="line 3"):
        parse_task_family('{"tasks": [\n {"task_id": 0,\n "n_core" 2}]}')


def test_generate_inside_task():
    spec = load_task_family("2-3")[2]
    o = generate_observation(spec, 0, np.random.default_rng(0))
    assert o.n_objects == 2
    assert oracle_edges(o.objects) == [(0, 1, R.INSIDE)]
    assert any(x.shape is ShapeKind.RECT for x in o.objects)


def test_generate_task0_with_distractor():
    spec = load_task_family("2-3")[0]
    for i in range(100):
        o = generate_observation(spec, 1, np.random.default_rng(i))
        assert o.n_objects == 4
        core = [j for j, x in enumerate(o.objects) if x.is_core]
        got = {relation_oracle(o.objects[a], o.objects[b]) for a, b in itertools.combinations(core, 2)}
        assert sorted(r.value for r in got) == ["none", "same-color", "same-shape"]
        assert len(o.edges) == 2


def _isomorphic_edge_sets(e1, e2, n):
    target = {(frozenset((a, b)), r) for a, b, r in e2}
    for perm in itertools.permutations(range(n)):
        if {(frozenset((perm[a], perm[b])), r) for a, b, r in e1} == target:
            return True
    return False


def test_seeds_change_layout_not_graph():
    spec = load_task_family("2-4")[9]
    a = generate_observation(spec, 0, np.random.default_rng(1))
    b = generate_observation(spec, 0, np.random.default_rng(2))
    assert not np.array_equal(a.grid, b.grid)
    norm = lambda o: [(k, l, r) for k, l, r in o.edges]
    assert _isomorphic_edge_sets(norm(a), norm(b), 4)


def test_determinism():
    spec = load_task_family("2-4")[7]
    a = generate_observation(spec, 2, np.random.default_rng(5))
    b = generate_observation(spec, 2, np.random.default_rng(5))
    assert json.dumps(observation_to_record(a)) == json.dumps(observation_to_record(b))


def test_generation_exhausted():
    # five mutually different shapes cannot exist with four shape kinds
    spec = TaskSpec(0, 5, (((0, 1), R.SAME_COLOR),))
    with pytest.raises(GenerationExhausted):
        generate_observation(spec, 0, np.random.default_rng(0), max_attempts=5)


@pytest.mark.parametrize("family,policy", [("2-3", "0"), ("2-3", "0-2"), ("2-4", "1")])
def test_grid_mask_consistency(family, policy):
    for o in generate_dataset(load_task_family(family), 10, policy, 3):
        cover = o.masks.sum(axis=0)
        assert cover.max() <= 1
        assert np.array_equal(o.grid > 0, cover == 1)
        for x in o.objects:
            assert x.mask.any() and 1 <= x.color <= 9
            assert np.all(o.grid[x.mask] == x.color)


def test_distractor_counts():
    specs = load_task_family("2-3")
    counts = {n: 0 for n in range(3)}
    for o in generate_dataset(specs, 30, "0-2", 0):
        n_core = specs[o.task_id].n_core
        assert sum(x.is_core for x in o.objects) == n_core
        counts[o.n_objects - n_core] += 1
    assert all(c > 20 for c in counts.values())


def _all_pairs(o):
    return [relation_oracle(o.objects[a], o.objects[b])
            for a, b in itertools.combinations(range(o.n_objects), 2)]


@pytest.fixture(scope="module")
def sample_observations():
    return generate_dataset(load_task_family("2-4"), 6, "0-2", 11)


@pytest.mark.parametrize("kind", AUGMENTATIONS)
def test_each_augmentation_preserves_relations(kind, sample_observations):
    rng = np.random.default_rng(0)
    for o in sample_observations:
        aug = apply_augmentation(o, kind, rng)
        assert _all_pairs(aug) == _all_pairs(o)
        assert np.array_equal(aug.grid > 0, aug.masks.any(axis=0))
        for x in aug.objects:
            assert np.all(aug.grid[x.mask] == x.color)


def test_rotation_keeps_edges(sample_observations):
    o = sample_observations[0]
    aug = apply_augmentation(o, "rot180", np.random.default_rng(0))
    assert oracle_edges(aug.objects) == oracle_edges(o.objects) == o.edges


def test_color_swap_keeps_same_color_pairs():
    a = obj("line", 3, [0, 0, 0], [0, 1, 2])
    b = obj("rect-solid", 3, slice(5, 8), slice(5, 8))
    c = obj("Lshape", 5, [12, 13, 13], [1, 1, 2])
    o = Observation(paint([a, b, c]), [a, b, c])
    lut = np.arange(10)
    lut[3], lut[5] = 5, 3
    swapped = [replace(x, color=int(lut[x.color])) for x in o.objects]
    assert [relation_oracle(swapped[i], swapped[j]) for i, j in [(0, 1), (0, 2)]] == [R.SAME_COLOR, R.NONE]


def test_resize_falls_back_when_too_big():
    big = obj("rect-solid", 2, slice(0, 10), slice(0, 10))
    o = Observation(paint([big]), [big])
    aug = apply_augmentation(o, "resize", np.random.default_rng(0))
    assert np.array_equal(aug.grid, o.grid)
    small = obj("rect-solid", 2, slice(2, 5), slice(3, 6))
    aug = apply_augmentation(Observation(paint([small]), [small]), "resize", np.random.default_rng(0))
    assert mask_bbox(aug.objects[0].mask)[2:] == (6, 6)


def test_augmentation_rate():
    spec = load_task_family("2-3")[1]
    o = generate_observation(spec, 0, np.random.default_rng(0))
    rng = np.random.default_rng(1234)
    sentinel = 0
    for _ in range(1000):
        sentinel += augment_observation(o, rng) is not o
    # binomial(1000, 0.9): sd ~ 9.5
    assert abs(sentinel - 900) <= 30


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), task=st.integers(0, 12), n_d=st.integers(0, 2),
       kinds=st.lists(st.sampled_from(AUGMENTATIONS), min_size=1, max_size=4))
def test_augmentation_property(seed, task, n_d, kinds):
    o = generate_observation(load_task_family("2-4")[task], n_d, np.random.default_rng(seed))
    before = _all_pairs(o)
    rng = np.random.default_rng(seed)
    for kind in kinds:
        o = apply_augmentation(o, kind, rng)
    assert _all_pairs(o) == before


def test_render_input():
    empty = Observation(np.zeros((GRID, GRID), dtype=np.int64), [])
    slabs, present = render_input(empty, 4)
    assert not slabs.any() and not present.any()

    x = obj("line", 4, [1, 1, 1], [2, 3, 4])
    slabs, present = render_input(Observation(paint([x]), [x]), 3)
    assert slabs.shape == (3, GRID, GRID, 9)
    assert slabs.sum() == 3 and slabs[0, :, :, 3].sum() == 3
    assert present.tolist() == [True, False, False]


def test_render_sum_matches_cell_count(sample_observations):
    for o in sample_observations:
        slabs, _ = render_input(o, 6)
        assert slabs.sum() == sum(int(x.mask.sum()) for x in o.objects)


def test_render_too_many():
    o = generate_observation(load_task_family("2-4")[6], 2, np.random.default_rng(0))
    with pytest.raises(TooManyObjects):
        render_input(o, 5)


def test_dataset_roundtrip(tmp_path, sample_observations):
    obs = sample_observations[:10]
    path = tmp_path / "d.jsonl"
    write_dataset(obs, path)
    back = read_dataset(path)
    again = tmp_path / "e.jsonl"
    write_dataset(back, again)
    assert path.read_bytes() == again.read_bytes()
    assert [o.edges for o in back] == [o.edges for o in obs]


def test_dataset_schema_version(tmp_path, sample_observations):
    rec = observation_to_record(sample_observations[0])
    rec["schema_version"] = 7
    path = tmp_path / "bad.jsonl"
    path.write_text(dumps_record(rec) + "\n")
    with pytest.raises(DatasetSchemaError, match="schema_version 7"):
        read_dataset(path)


def test_training_loader_strips_labels(tmp_path, sample_observations):
    path = tmp_path / "d.jsonl"
    write_dataset(sample_observations, path)
    recs = read_training_records(path)
    assert not hasattr(recs[0], "edges") and not hasattr(recs[0], "objects")
    assert recs[0].masks.shape[1:] == (GRID, GRID)


def test_six_task_family_histogram(tmp_path):
    obs = generate_dataset(load_task_family("2-3"), 250, "0", 0)
    path = tmp_path / "six.jsonl"
    write_dataset(obs, path)
    lines = path.read_text().splitlines()
    assert len(lines) == 1500
    hist = np.bincount([json.loads(line)["task_id"] for line in lines])
    assert hist.tolist() == [250] * 6

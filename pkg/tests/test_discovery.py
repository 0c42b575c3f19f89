import csv
import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from virel.crgnn import CRGNN
from virel.discovery import (EMPTY_CANONICAL, EXPORT_HEADER, DegenerateData, LengthMismatch,
                             NodeBudgetExceeded, RelGraph, TooFewGraphs, canonical_graph,
                             canonicalize, evaluate_relations, export_embeddings, fit_kmeans,
                             mcs_of_group, mcs_of_pair, permutation_accuracy, predict_graphs,
                             predict_observation_graph, task_mcs_retrieval)
from virel.scene import RelationType, generate_dataset, load_task_family

R = RelationType
IN, SC, SS = R.INSIDE, R.SAME_COLOR, R.SAME_SHAPE
LABELS = [IN, SC, SS]


def g(n, *edges):
    return RelGraph.from_edges(n, edges)


# -- brute-force oracles -------------------------------------------------------


def brute_mcs_size(a: RelGraph, b: RelGraph) -> int:
    lab_b = {frozenset((k, l)): lab for k, l, lab in b.edges}
    na = a.active_nodes()
    targets = list(range(b.n_nodes)) + [None]
    best = 0
    for image in itertools.product(targets, repeat=len(na)):
        used = [w for w in image if w is not None]
        if len(used) != len(set(used)):
            continue
        phi = dict(zip(na, image))
        hits = sum(1 for k, l, lab in a.edges
                   if phi[k] is not None and phi[l] is not None
                   and lab_b.get(frozenset((phi[k], phi[l]))) is lab)
        best = max(best, hits)
    return best


def brute_isomorphic(a: RelGraph, b: RelGraph) -> bool:
    na, nb = a.active_nodes(), b.active_nodes()
    if len(na) != len(nb) or len(a.edges) != len(b.edges):
        return False
    target = {(frozenset((k, l)), lab) for k, l, lab in b.edges}
    for perm in itertools.permutations(nb):
        phi = dict(zip(na, perm))
        if {(frozenset((phi[k], phi[l])), lab) for k, l, lab in a.edges} == target:
            return True
    return False


def random_graph(rng, max_nodes=5, p=0.5, labels=LABELS):
    n = int(rng.integers(1, max_nodes + 1))
    edges = [(k, l, labels[rng.integers(len(labels))])
             for k, l in itertools.combinations(range(n), 2) if rng.random() < p]
    return RelGraph.from_edges(n, edges)


def relabel(graph, perm):
    return RelGraph.from_edges(graph.n_nodes, [(perm[k], perm[l], lab) for k, l, lab in graph.edges])


# -- k-means ---------------------------------------------------------------------


def test_kmeans_separated_clouds():
    rng = np.random.default_rng(0)
    centers = rng.standard_normal((4, 20)) * 50
    pts = np.concatenate([c + rng.standard_normal((30, 20)) * 0.1 for c in centers])
    model = fit_kmeans(pts, 4, seed=0)
    means = pts.reshape(4, 30, 20).mean(axis=1)
    for m in means:
        assert np.abs(model.centroids - m).max(axis=1).min() < 1e-6


def test_kmeans_k1_is_mean():
    pts = np.random.default_rng(1).standard_normal((50, 20))
    np.testing.assert_allclose(fit_kmeans(pts, 1).centroids[0], pts.mean(axis=0), atol=1e-12)


def test_kmeans_restarts_never_worse():
    pts = np.random.default_rng(2).standard_normal((200, 20))
    best = fit_kmeans(pts, 4, seed=3)
    for s in range(5):
        assert best.inertia <= fit_kmeans(pts, 4, seed=3, n_init=1).inertia + 1e-9 or s > 0
    single = [fit_kmeans(pts, 4, seed=3 + s, n_init=1).inertia for s in range(1)]
    assert best.inertia <= min(single) + 1e-9


def test_kmeans_degenerate():
    with pytest.raises(DegenerateData):
        fit_kmeans(np.ones((10, 20)), 4)


def test_kmeans_deterministic():
    pts = np.random.default_rng(4).standard_normal((100, 20))
    assert np.array_equal(fit_kmeans(pts, 4, seed=9).centroids, fit_kmeans(pts, 4, seed=9).centroids)


# -- permutation accuracy --------------------------------------------------------


def test_permutation_accuracy_identity_and_cycle():
    labels = np.array([0, 1, 2, 3, 1, 2, 3, 3])
    assert permutation_accuracy(labels, labels, 4) == (1.0, (0, 1, 2, 3))
    cycled = (labels + 1) % 4
    acc, perm = permutation_accuracy(cycled, labels, 4)
    assert acc == 1.0
    assert all(perm[(c + 1) % 4] == c for c in range(4))


def test_permutation_accuracy_length_mismatch():
    with pytest.raises(LengthMismatch):
        permutation_accuracy([0, 1], [0], 4)


def test_random_clusters_near_chance():
    # Monte-Carlo oracle: random clusters on 10,000 labeled pairs score 0.25 plus
    # the small best-of-24 inflation (a few standard errors of ~0.0043).
    rng = np.random.default_rng(0)
    acc, _ = permutation_accuracy(rng.integers(0, 4, 10_000), rng.integers(0, 4, 10_000), 4)
    assert 0.25 <= acc < 0.27


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_permutation_accuracy_relabel_invariant(seed):
    rng = np.random.default_rng(seed)
    pred, true = rng.integers(0, 4, 60), rng.integers(0, 4, 60)
    relabeling = rng.permutation(4)
    assert permutation_accuracy(relabeling[pred], true, 4)[0] == permutation_accuracy(pred, true, 4)[0]


# -- relation graphs, canonical forms ------------------------------------------


def test_relgraph_rejects_duplicates_and_drops_none():
    with pytest.raises(ValueError):
        g(3, (0, 1, SC), (1, 0, SS))
    assert g(2, (0, 1, R.NONE)).edges == frozenset()


def test_canonicalize_invariant_under_relabeling():
    graph = g(4, (0, 1, IN), (1, 2, SC), (2, 3, SS))
    for perm in itertools.permutations(range(4)):
        assert canonicalize(relabel(graph, perm)) == canonicalize(graph)


def test_canonicalize_empty_sentinel():
    assert canonicalize(RelGraph(3)) == EMPTY_CANONICAL == canonicalize(RelGraph(0))


def test_canonical_graph_single_inside_edge():
    assert canonical_graph(g(5, (3, 4, IN))).to_list() == [[0, 1, "inside"]]


def test_canonicalize_agrees_with_brute_force():
    rng = np.random.default_rng(0)
    agree = 0
    for _ in range(100):
        a = random_graph(rng, 4, 0.6, [SC, SS])
        b = relabel(a, rng.permutation(a.n_nodes)) if rng.random() < 0.5 else random_graph(rng, 4, 0.6, [SC, SS])
        assert (canonicalize(a) == canonicalize(b)) == brute_isomorphic(a, b)
        agree += brute_isomorphic(a, b)
    assert agree > 20  # both branches exercised


def test_node_budget():
    big = RelGraph.from_edges(10, [(i, i + 1, SC) for i in range(9)])
    with pytest.raises(NodeBudgetExceeded):
        canonicalize(big)
    with pytest.raises(NodeBudgetExceeded):
        mcs_of_pair(big, big)


# -- maximum common subgraph -----------------------------------------------------


def test_mcs_idempotent():
    graph = g(4, (0, 1, IN), (1, 2, SC), (2, 3, SS), (0, 3, SC))
    assert canonicalize(mcs_of_pair(graph, graph).graph) == canonicalize(graph)


def test_mcs_disjoint_labels():
    assert mcs_of_pair(g(3, (0, 1, IN), (1, 2, IN)), g(3, (0, 1, SC), (0, 2, SS))).graph.edges == frozenset()


def test_mcs_worked_example():
    a = g(3, (0, 1, IN), (0, 2, SC), (1, 2, SC))
    b = g(3, (0, 1, IN), (1, 2, SC))
    res = mcs_of_pair(a, b)
    assert len(res.graph.edges) == brute_mcs_size(a, b) == 2
    assert canonicalize(res.graph) == canonicalize(g(3, (0, 1, IN), (1, 2, SC)))


def _assert_witnesses(res, a, b):
    a_edges = {(frozenset((k, l)), lab) for k, l, lab in a.edges}
    b_edges = {(frozenset((k, l)), lab) for k, l, lab in b.edges}
    images = list(res.map_b.values())
    assert len(images) == len(set(images))
    for k, l, lab in res.graph.edges:
        assert (frozenset((res.map_a[k], res.map_a[l])), lab) in a_edges
        assert (frozenset((res.map_b[k], res.map_b[l])), lab) in b_edges


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_mcs_matches_exhaustive(seed):
    rng = np.random.default_rng(seed)
    a, b = random_graph(rng), random_graph(rng)
    res = mcs_of_pair(a, b)
    assert len(res.graph.edges) == brute_mcs_size(a, b)
    _assert_witnesses(res, a, b)


def test_mcs_tie_break_is_canonical_minimum():
    # two different 1-edge answers; the winner must be the smaller canonical form
    a = g(3, (0, 1, SS), (1, 2, IN))
    b = g(2, (0, 1, IN))
    c = g(2, (0, 1, SS))
    both = g(4, (0, 1, IN), (2, 3, SS))
    res = mcs_of_pair(a, both)
    assert len(res.graph.edges) == 1
    assert canonicalize(res.graph) == min(canonicalize(b), canonicalize(c))


def test_mcs_deterministic_across_calls():
    rng = np.random.default_rng(7)
    pairs = [(random_graph(rng, 6, 0.7), random_graph(rng, 6, 0.7)) for _ in range(10)]
    first = [canonicalize(mcs_of_pair(a, b).graph) for a, b in pairs]
    assert first == [canonicalize(mcs_of_pair(a, b).graph) for a, b in pairs]


def test_fold_of_identical_graphs():
    graph = g(4, (0, 1, IN), (1, 2, SC), (2, 3, SC), (1, 3, SC))
    rng = np.random.default_rng(0)
    copies = [relabel(graph, rng.permutation(4)) for _ in range(5)]
    assert canonicalize(mcs_of_group(copies)) == canonicalize(graph)


# -- retrieval tallies ------------------------------------------------------------


def test_retrieval_identical_graphs():
    graph = g(3, (0, 1, IN), (1, 2, SC))
    top = task_mcs_retrieval([graph] * 23, group_size=5, top_k=3)
    # 4 full groups + a remainder of 3 (kept, >= 2)
    assert len(top) == 1 and top[0].count == 5
    assert canonicalize(top[0].graph) == canonicalize(graph)


def test_retrieval_drops_singleton_remainder():
    graph = g(2, (0, 1, SC))
    assert task_mcs_retrieval([graph] * 21, 5, 3)[0].count == 4


def test_retrieval_counts_and_order():
    tri = g(3, (0, 1, SC), (0, 2, SC), (1, 2, SC))
    path = g(3, (0, 1, SC), (1, 2, SC))
    graphs = [tri] * 10 + [path] + [tri] * 4
    top = task_mcs_retrieval(graphs, 5, 3)
    assert [(e.count, len(e.graph.edges)) for e in top] == [(2, 3), (1, 2)]
    assert top[0].to_json() == {"count": 2, "edges": [[0, 1, "same-color"], [0, 2, "same-color"],
                                                      [1, 2, "same-color"]]}


def test_retrieval_too_few():
    with pytest.raises(TooFewGraphs):
        task_mcs_retrieval([g(2, (0, 1, SC))] * 4, 5, 3)


# -- model-facing -------------------------------------------------------------------


@pytest.fixture(scope="module")
def small_eval():
    obs = generate_dataset(load_task_family("2-3"), 8, "0", 5)
    model = CRGNN(seed=0)
    return model, obs, evaluate_relations(model, obs, k=4, seed=0)


def test_predicted_graphs_follow_assignment(small_eval):
    model, obs, ev = small_eval
    graphs = predict_graphs(ev, obs)
    for o, graph in list(zip(obs, graphs))[:6]:
        assert graph == predict_observation_graph(o, model, ev.clusters, ev.assignment)


def test_prediction_single_pair_and_all_none(small_eval):
    model, obs, ev = small_eval
    two = next(o for o in obs if len(o.masks) == 2)
    c = int(ev.clusters.predict(model.relation_means([_slabs(two, model)]))[0])
    inside_first = tuple([3 if i == c else j for i, j in enumerate([0, 1, 2, 0])])
    graph = predict_observation_graph(two, model, ev.clusters, inside_first)
    assert graph.to_list() == [[0, 1, "inside"]]
    assert predict_observation_graph(two, model, ev.clusters, (0, 0, 0, 0)).edges == frozenset()


def _slabs(o, model):
    from virel.scene import render_slabs
    return render_slabs(o.grid, o.masks, len(o.masks), model.dtype)[0]


def test_export_embeddings(tmp_path, small_eval):
    model, obs, _ = small_eval
    three = [next(o for o in obs if len(o.masks) == 3)]
    path = tmp_path / "emb.csv"
    export_embeddings(model, three, path)
    rows = list(csv.reader(path.open()))
    assert rows[0] == EXPORT_HEADER and len(rows[0]) == 24
    assert len(rows) == 1 + 3
    again = tmp_path / "emb2.csv"
    export_embeddings(model, three, again)
    assert path.read_bytes() == again.read_bytes()

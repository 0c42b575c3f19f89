"""Relation discovery after training.

k-means over relation embeddings gives unnamed relation clusters; a single
global cluster->label bijection scores them. Predicted per-observation graphs
are then intersected group-wise by maximum common subgraph and the resulting
graphs tallied per task.
"""
from __future__ import annotations

import csv
import itertools
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from sklearn.cluster import KMeans

from .crgnn import CRGNN, REL_DIM, object_pairs
from .scene import RELATIONS, Observation, RelationType, render_slabs

NODE_BUDGET = 8
# serialization order of labels inside canonical forms
_LABEL_CODE = {RelationType.INSIDE: 0, RelationType.SAME_COLOR: 1, RelationType.SAME_SHAPE: 2}
_CODE_LABEL = {v: k for k, v in _LABEL_CODE.items()}
EMPTY_CANONICAL = b"<empty>"


class DegenerateData(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


class NodeBudgetExceeded(ValueError):
    pass


class TooFewGraphs(ValueError):
    pass


# ---------------------------------------------------------------------------
# clustering


@dataclass
class ClusterModel:
    centroids: np.ndarray
    inertia: float
    n_init: int
    seed: int

    @property
    def k(self) -> int:
        return len(self.centroids)

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        d = ((x[:, None, :] - self.centroids[None]) ** 2).sum(-1)
        return d.argmin(axis=1)


def fit_kmeans(embeddings: np.ndarray, k: int = 4, seed: int = 0, n_init: int = 10,
               max_iter: int = 300, tol: float = 1e-6) -> ClusterModel:
    """Lloyd's algorithm with k-means++ seeding; best inertia over ``n_init`` restarts."""
    x = np.asarray(embeddings, dtype=np.float64)
    if len(np.unique(x, axis=0)) < k:
        raise DegenerateData(f"fewer than {k} distinct points")
    km = KMeans(n_clusters=k, init="k-means++", n_init=n_init, max_iter=max_iter, tol=tol,
                random_state=seed, algorithm="lloyd").fit(x)
    return ClusterModel(km.cluster_centers_, float(km.inertia_), n_init, seed)


def permutation_accuracy(predicted: Sequence[int], true: Sequence[int],
                         k: int) -> tuple[float, tuple[int, ...]]:
    """Best mean agreement over all bijections cluster -> label.

    Returns the accuracy and the bijection as a tuple (cluster c maps to
    label ``assignment[c]``). Ties go to the lexicographically first bijection.
    """
    predicted, true = np.asarray(predicted, dtype=np.int64), np.asarray(true, dtype=np.int64)
    if predicted.shape != true.shape:
        raise LengthMismatch(f"{predicted.shape} vs {true.shape}")
    if len(true) == 0:
        raise LengthMismatch("no labeled pairs")
    conf = np.zeros((k, k), dtype=np.int64)
    np.add.at(conf, (predicted, true), 1)
    if k > 6:
        from scipy.optimize import linear_sum_assignment
        rows, cols = linear_sum_assignment(-conf)
        perm = tuple(int(c) for c in cols[np.argsort(rows)])
        return conf[np.arange(k), perm].sum() / len(true), perm
    best, best_perm = -1, None
    for perm in itertools.permutations(range(k)):
        hits = conf[np.arange(k), perm].sum()
        if hits > best:
            best, best_perm = hits, perm
    return best / len(true), best_perm


# ---------------------------------------------------------------------------
# relation graphs


@dataclass(frozen=True)
class RelGraph:
    n_nodes: int
    edges: frozenset = field(default_factory=frozenset)  # {(k, l, RelationType)}, k < l

    @classmethod
    def from_edges(cls, n_nodes: int, edges: Iterable) -> "RelGraph":
        out = {}
        for k, l, lab in edges:
            lab = RelationType(lab)
            if lab is RelationType.NONE:
                continue
            k, l = (k, l) if k < l else (l, k)
            if k == l or (k, l) in out:
                raise ValueError(f"bad or duplicate pair {(k, l)}")
            out[(k, l)] = lab
        return cls(n_nodes, frozenset((k, l, lab) for (k, l), lab in out.items()))

    def sorted_edges(self) -> list[tuple[int, int, RelationType]]:
        return sorted(self.edges, key=lambda e: (e[0], e[1], _LABEL_CODE[e[2]]))

    def to_list(self) -> list[list]:
        return [[k, l, lab.value] for k, l, lab in self.sorted_edges()]

    def active_nodes(self) -> list[int]:
        return sorted({v for k, l, _ in self.edges for v in (k, l)})

    def __str__(self):
        return ", ".join(f"[({k}, {l}), '{lab.value}']" for k, l, lab in self.sorted_edges())


@lru_cache(maxsize=65536)
def _canonical(edges: frozenset) -> tuple[tuple[int, int, int], ...]:
    nodes = sorted({v for k, l, _ in edges for v in (k, l)})
    if len(nodes) > NODE_BUDGET:
        raise NodeBudgetExceeded(f"{len(nodes)} nodes exceeds budget {NODE_BUDGET}")
    coded = [(k, l, _LABEL_CODE[lab]) for k, l, lab in edges]
    best = None
    for perm in itertools.permutations(range(len(nodes))):
        relabel = dict(zip(nodes, perm))
        form = tuple(sorted(
            (min(relabel[k], relabel[l]), max(relabel[k], relabel[l]), c) for k, l, c in coded))
        if best is None or form < best:
            best = form
    return best


def canonicalize(g: RelGraph) -> bytes:
    """Isomorphism-invariant byte string of the graph's edges.

    Isolated nodes do not take part: two graphs get the same string iff their
    edge-induced labeled graphs are isomorphic.
    """
    if g.n_nodes > NODE_BUDGET and len(g.active_nodes()) > NODE_BUDGET:
        raise NodeBudgetExceeded(f"{g.n_nodes} nodes exceeds budget {NODE_BUDGET}")
    if not g.edges:
        return EMPTY_CANONICAL
    return ";".join(f"{k}-{l}:{c}" for k, l, c in _canonical(g.edges)).encode()


def canonical_graph(g: RelGraph) -> RelGraph:
    if not g.edges:
        return RelGraph(0)
    form = _canonical(g.edges)
    n = 1 + max(l for _, l, _ in form)
    return RelGraph(n, frozenset((k, l, _CODE_LABEL[c]) for k, l, c in form))


@dataclass(frozen=True)
class McsResult:
    graph: RelGraph  # subgraph of the first input, in its node ids
    map_a: dict  # node of graph -> node of a (identity)
    map_b: dict  # node of graph -> node of b


def mcs_of_pair(a: RelGraph, b: RelGraph) -> McsResult:
    """Maximum-edge common subgraph under label-preserving node injection.

    Exhaustive branch and bound over partial maps from the nodes of ``a`` into
    ``b`` (a node may also stay unmapped). Among maximum results the one with
    the smallest canonical form wins.
    """
    na, nb = a.active_nodes(), b.active_nodes()
    if len(na) > NODE_BUDGET or len(nb) > NODE_BUDGET:
        raise NodeBudgetExceeded("mcs_of_pair is exact only up to 8 nodes")
    if not a.edges or not b.edges:
        return McsResult(RelGraph(a.n_nodes), {}, {})

    b_label = {}
    for k, l, lab in b.edges:
        b_label[(k, l)] = b_label[(l, k)] = lab
    degree = Counter(v for k, l, _ in a.edges for v in (k, l))
    order = sorted(na, key=lambda v: (-degree[v], v))
    pos = {v: i for i, v in enumerate(order)}
    # each a-edge is decided when its later endpoint (in search order) is assigned
    closing: list[list[tuple[int, RelationType]]] = [[] for _ in order]
    for k, l, lab in a.edges:
        first, last = sorted((k, l), key=pos.get)
        closing[pos[last]].append((first, lab, (k, l, lab)))
    remaining_after = [sum(len(c) for c in closing[i + 1:]) for i in range(len(order))]
    cap = len(b.edges)

    best_size = -1
    best: dict[frozenset, dict] = {}
    mapping: dict[int, int | None] = {}
    used: set[int] = set()
    matched: list = []

    def search(i: int):
        nonlocal best_size
        if i == len(order):
            size = len(matched)
            if size > best_size:
                best_size = size
                best.clear()
            if size == best_size:
                key = frozenset(matched)
                if key not in best:
                    best[key] = {v: w for v, w in mapping.items() if w is not None}
            return
        v = order[i]
        for w in itertools.chain(nb, [None]):
            if w is not None and w in used:
                continue
            gained = []
            if w is not None:
                for u, lab, edge in closing[i]:
                    wu = mapping[u]
                    if wu is not None and b_label.get((wu, w)) is lab:
                        gained.append(edge)
            bound = min(cap, len(matched) + len(gained) + remaining_after[i])
            if bound < best_size:
                continue
            mapping[v] = w
            if w is not None:
                used.add(w)
            matched.extend(gained)
            search(i + 1)
            del matched[len(matched) - len(gained):]
            if w is not None:
                used.discard(w)
            del mapping[v]

    search(0)
    winner = min(best, key=lambda s: canonicalize(RelGraph(a.n_nodes, s)))
    graph = RelGraph(a.n_nodes, winner)
    nodes = graph.active_nodes()
    full = best[winner]
    return McsResult(graph, {v: v for v in nodes}, {v: full[v] for v in nodes})


def mcs_of_group(graphs: Sequence[RelGraph]) -> RelGraph:
    acc = graphs[0]
    for g in graphs[1:]:
        acc = mcs_of_pair(acc, g).graph
    return acc


@dataclass
class TallyEntry:
    count: int
    graph: RelGraph  # canonical labeling
    key: bytes

    def to_json(self) -> dict:
        return {"count": self.count, "edges": self.graph.to_list()}


def task_mcs_retrieval(graphs: Sequence[RelGraph], group_size: int = 5,
                       top_k: int = 3) -> list[TallyEntry]:
    """Tally MCS results over consecutive groups of one task's graphs."""
    if len(graphs) < group_size:
        raise TooFewGraphs(f"{len(graphs)} graphs, need at least {group_size}")
    groups = [graphs[i:i + group_size] for i in range(0, len(graphs), group_size)]
    if len(groups[-1]) < 2:
        groups.pop()
    tally: dict[bytes, TallyEntry] = {}
    for grp in groups:
        res = mcs_of_group(grp)
        key = canonicalize(res)
        if key in tally:
            tally[key].count += 1
        else:
            tally[key] = TallyEntry(1, canonical_graph(res), key)
    ranked = sorted(tally.values(), key=lambda e: (-e.count, e.key))
    return ranked[:top_k]


# ---------------------------------------------------------------------------
# model-facing evaluation


REL_INDEX = {r: i for i, r in enumerate(RELATIONS)}


@dataclass
class PairEmbeddings:
    obs_index: np.ndarray  # (P,)
    pairs: np.ndarray  # (P, 2)
    values: np.ndarray  # (P, REL_DIM)
    labels: np.ndarray  # (P,) relation index, -1 when the pair carries no label


def embed_pairs(model: CRGNN, observations: Sequence, batch_size: int = 64,
                max_objects: int | None = None) -> PairEmbeddings:
    """Relation means for every unordered object pair of every observation."""
    obs_idx, pairs, values, labels = [], [], [], []
    for start in range(0, len(observations), batch_size):
        chunk = observations[start:start + batch_size]
        scenes = [render_slabs(o.grid, o.masks, max_objects or len(o.masks), model.dtype)[0][:len(o.masks)]
                  for o in chunk]
        mu = model.relation_means(scenes)
        values.append(mu)
        for j, o in enumerate(chunk):
            lab = {(k, l): REL_INDEX[r] for k, l, r in getattr(o, "edges", [])}
            for k, l in object_pairs(len(o.masks)):
                obs_idx.append(start + j)
                pairs.append((k, l))
                labels.append(lab.get((k, l), -1))
    return PairEmbeddings(np.asarray(obs_idx), np.asarray(pairs).reshape(-1, 2),
                          np.concatenate(values).astype(np.float64), np.asarray(labels))


@dataclass
class Evaluation:
    accuracy: float
    assignment: tuple[int, ...]  # cluster -> relation index
    clusters: ClusterModel
    embeddings: PairEmbeddings
    predicted: np.ndarray  # cluster id per pair

    def relation_of_cluster(self, c: int) -> RelationType:
        return RELATIONS[self.assignment[c]]


def evaluate_relations(model: CRGNN, observations: Sequence[Observation], k: int = 4,
                       seed: int = 0) -> Evaluation:
    """Cluster every pair embedding, then score labeled pairs under the best bijection."""
    emb = embed_pairs(model, observations)
    clusters = fit_kmeans(emb.values, k, seed=seed)
    pred = clusters.predict(emb.values)
    labeled = emb.labels >= 0
    acc, assignment = permutation_accuracy(pred[labeled], emb.labels[labeled], max(k, len(RELATIONS)))
    return Evaluation(float(acc), assignment, clusters, emb, pred)


def predict_graphs(ev: Evaluation, observations: Sequence[Observation]) -> list[RelGraph]:
    edges: list[list] = [[] for _ in observations]
    for i, (k, l), c in zip(ev.embeddings.obs_index, ev.embeddings.pairs, ev.predicted):
        rel = ev.relation_of_cluster(int(c))
        if rel is not RelationType.NONE:
            edges[i].append((int(k), int(l), rel))
    return [RelGraph.from_edges(len(o.masks), e) for o, e in zip(observations, edges)]


def predict_observation_graph(o: Observation, model: CRGNN, clusters: ClusterModel,
                              assignment: Sequence[int]) -> RelGraph:
    n = len(o.masks)
    scene = render_slabs(o.grid, o.masks, n, model.dtype)[0]
    mu = model.relation_means([scene])
    edges = []
    for (k, l), c in zip(object_pairs(n), clusters.predict(mu)):
        rel = RELATIONS[assignment[int(c)]]
        if rel is not RelationType.NONE:
            edges.append((k, l, rel))
    return RelGraph.from_edges(n, edges)


def retrieve(ev: Evaluation, observations: Sequence[Observation], group_size: int = 5,
             top_k: int = 3) -> dict[int, list[TallyEntry]]:
    graphs = predict_graphs(ev, observations)
    by_task: dict[int, list[tuple[int, RelGraph]]] = {}
    for o, g in zip(observations, graphs):
        by_task.setdefault(o.task_id, []).append((o.obs_id, g))
    return {t: task_mcs_retrieval([g for _, g in sorted(items, key=lambda x: x[0])], group_size, top_k)
            for t, items in sorted(by_task.items())}


def retrieval_report(results: dict[int, list[TallyEntry]], group_size: int, top_k: int) -> dict:
    return {
        "group_size": group_size,
        "top_k": top_k,
        "tasks": [{"task_id": t, "retrievals": [e.to_json() for e in entries]}
                  for t, entries in results.items()],
    }


EXPORT_HEADER = ["obs_id", "k", "l"] + [f"z{i}" for i in range(REL_DIM)] + ["label"]


def export_embeddings(model: CRGNN, observations: Sequence[Observation], path: str | Path) -> None:
    emb = embed_pairs(model, observations)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EXPORT_HEADER)
        for i, (k, l), z, lab in zip(emb.obs_index, emb.pairs, emb.values, emb.labels):
            w.writerow([observations[i].obs_id, int(k), int(l)] + [f"{v:.6g}" for v in z]
                       + [RELATIONS[lab].value if lab >= 0 else ""])

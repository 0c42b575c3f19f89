"""CR-GNN: object CNN -> pairwise relation MLP -> line graph -> GIN.

Objects are encoded one slab at a time, so everything the graph encoder sees
about a scene has to pass through the pairwise relation embeddings.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

OBJ_DIM = 100
REL_DIM = 20
CONV_CHANNELS = (9, 32, 32, 64, 64)
REL_HIDDEN = (128, 64)
GIN_HIDDEN = (64, 64)
SLOPE = 0.01
IB_INIT_LOGVAR = -4.0


class EmptyScene(ValueError):
    pass


class EmptyGraph(ValueError):
    pass


@dataclass
class LineGraph:
    pairs: list[tuple[int, int]]
    features: Tensor  # (P, REL_DIM)
    adjacency: np.ndarray  # (P, P)

    @property
    def n_nodes(self) -> int:
        return len(self.pairs)


def object_pairs(n: int) -> list[tuple[int, int]]:
    return list(itertools.combinations(range(n), 2))


def line_graph_adjacency(pairs: list[tuple[int, int]]) -> np.ndarray:
    p = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    share = (p[:, None, :, None] == p[None, :, None, :]).any(axis=(2, 3))
    np.fill_diagonal(share, False)
    return share.astype(np.float64)


def build_line_graph(embeddings: Tensor, n: int) -> LineGraph:
    pairs = object_pairs(n)
    if embeddings.shape[0] != len(pairs):
        raise ValueError(f"expected {len(pairs)} pair embeddings for n={n}, got {embeddings.shape[0]}")
    return LineGraph(pairs, embeddings, line_graph_adjacency(pairs))


def _he(rng, fan_in, shape, dtype):
    # Glorot init shrinks the sparse one-hot slabs to near-constant embeddings
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class CRGNN:
    """Parameters live in ``self.params`` in checkpoint registration order."""

    def __init__(self, n_tasks: int | None = None, ib: bool = False, seed: int = 0, dtype=np.float32):
        self.ib = ib
        self.n_tasks = n_tasks
        rng = np.random.default_rng(seed)
        p: dict[str, Tensor] = {}

        def dense(name, fan_in, fan_out):
            p[f"{name}.w"] = Tensor(_he(rng, fan_in, (fan_in, fan_out), dtype), True, f"{name}.w")
            p[f"{name}.b"] = Tensor(np.zeros(fan_out, dtype), True, f"{name}.b")

        for i, (cin, cout) in enumerate(zip(CONV_CHANNELS[:-1], CONV_CHANNELS[1:])):
            p[f"fo.conv{i}.w"] = Tensor(_he(rng, 9 * cin, (3, 3, cin, cout), dtype), True)
            p[f"fo.conv{i}.b"] = Tensor(np.zeros(cout, dtype), True)
        dense("fo.out", 4 * 4 * CONV_CHANNELS[-1], OBJ_DIM)

        rel_out = 2 * REL_DIM if ib else REL_DIM
        dims = (2 * OBJ_DIM,) + REL_HIDDEN + (rel_out,)
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            dense(f"fr.{i}", a, b)
        if ib:
            # start the log-variance half near-deterministic so early noise does not swamp the signal
            last = len(dims) - 2
            p[f"fr.{last}.w"].value[:, REL_DIM:] = 0.0
            p[f"fr.{last}.b"].value[REL_DIM:] = IB_INIT_LOGVAR

        for layer in range(2):
            dims = (REL_DIM,) + GIN_HIDDEN + (REL_DIM,)
            for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
                dense(f"fg.{layer}.{i}", a, b)

        if n_tasks is not None:
            dense("head", REL_DIM, n_tasks)
        for name, t in p.items():
            t.name = name
        self.params = p

    @property
    def dtype(self):
        return self.params["fr.0.w"].dtype

    def astype(self, dtype) -> "CRGNN":
        for t in self.params.values():
            t.value = t.value.astype(dtype)
        return self

    def n_parameters(self) -> int:
        return int(np.sum([t.value.size for t in self.params.values()]))

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        if list(arrays) != list(self.params):
            raise ValueError("checkpoint parameter names do not match the model")
        for name, arr in arrays.items():
            if arr.shape != self.params[name].shape:
                raise ValueError(f"{name}: shape {arr.shape} != {self.params[name].shape}")
            self.params[name].value = arr.astype(self.dtype)

    # -- components -------------------------------------------------------

    def _dense(self, name: str, x: Tensor) -> Tensor:
        return x @ self.params[f"{name}.w"] + self.params[f"{name}.b"]

    def _mlp(self, prefix: str, x: Tensor, n_layers: int) -> Tensor:
        for i in range(n_layers):
            x = self._dense(f"{prefix}.{i}", x)
            if i < n_layers - 1:
                x = ad.leaky_relu(x, SLOPE)
        return x

    def encode_objects(self, slabs) -> Tensor:
        """(n, 16, 16, 9) slabs -> (n, 100) object embeddings."""
        x = slabs if isinstance(slabs, Tensor) else Tensor(np.asarray(slabs, dtype=self.dtype))
        if x.shape[0] == 0:
            raise EmptyScene("no objects to encode")
        for i in range(4):
            x = ad.conv2d(x, self.params[f"fo.conv{i}.w"]) + self.params[f"fo.conv{i}.b"]
            x = ad.leaky_relu(x, SLOPE)
            if i in (1, 3):
                x = ad.maxpool2d(x)
        x = ad.reshape(x, (x.shape[0], -1))
        return self._dense("fo.out", x)

    def relation_head(self, a: Tensor, b: Tensor) -> Tensor:
        """Symmetrized f_r over rows of a and b: mean of f_r([a,b]) and f_r([b,a])."""
        ab = self._mlp("fr", ad.concat([a, b], axis=1), 3)
        ba = self._mlp("fr", ad.concat([b, a], axis=1), 3)
        return (ab + ba) * 0.5

    def encode_relation(self, a: Tensor, b: Tensor) -> tuple[Tensor, Tensor | None]:
        """Relation mean (and log-variance in IB mode) for row-aligned object pairs."""
        out = self.relation_head(a, b)
        if not self.ib:
            return out, None
        sel_mu = np.eye(2 * REL_DIM, REL_DIM, dtype=self.dtype)
        sel_lv = np.eye(2 * REL_DIM, REL_DIM, k=-REL_DIM, dtype=self.dtype)
        return out @ Tensor(sel_mu), out @ Tensor(sel_lv)

    def gin_embed(self, h: Tensor, adjacency: np.ndarray, readout: np.ndarray) -> Tensor:
        """Two GIN layers (eps = 0) on the line graph, then sum readout.

        ``readout`` is a (graphs x nodes) 0/1 matrix so a whole batch of line
        graphs can be processed as one block-diagonal graph.
        """
        if h.shape[0] == 0:
            raise EmptyGraph("line graph has no nodes")
        adj = Tensor(adjacency.astype(self.dtype))
        for layer in range(2):
            h = self._mlp(f"fg.{layer}", h + adj @ h, 3)
        return Tensor(readout.astype(self.dtype)) @ h

    def classify(self, g: Tensor) -> Tensor:
        return self._dense("head", g)

    # -- batched forward --------------------------------------------------

    def _relations(self, scenes: list[np.ndarray]):
        counts = [len(s) for s in scenes]
        if any(c < 2 for c in counts):
            raise EmptyGraph("every scene needs at least two objects")
        obj = self.encode_objects(np.concatenate(scenes, axis=0))
        offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
        left, right, pairs = [], [], []
        for s, (off, n) in enumerate(zip(offsets, counts)):
            for k, l in object_pairs(n):
                left.append(off + k)
                right.append(off + l)
                pairs.append((s, k, l))
        n_obj, n_pair = int(np.sum(counts)), len(pairs)
        sel_l = np.zeros((n_pair, n_obj), dtype=self.dtype)
        sel_r = np.zeros((n_pair, n_obj), dtype=self.dtype)
        sel_l[np.arange(n_pair), left] = 1
        sel_r[np.arange(n_pair), right] = 1
        mu, logvar = self.encode_relation(Tensor(sel_l) @ obj, Tensor(sel_r) @ obj)
        return mu, logvar, obj, pairs

    def relation_means(self, scenes: list[np.ndarray]) -> np.ndarray:
        """(pairs, 20) relation means, pairs in ``object_pairs`` order per scene."""
        return self._relations(scenes)[0].value

    def forward(self, scenes: list[np.ndarray], rng: np.random.Generator | None = None) -> "Forward":
        """Run the full model on a list of per-scene slab stacks.

        With ``rng`` given in IB mode, line-graph features are reparameterized
        samples; otherwise the relation means are used.
        """
        counts = [len(s) for s in scenes]
        mu, logvar, obj, pairs = self._relations(scenes)
        n_pair = len(pairs)
        owner = [s for s, _, _ in pairs]

        feats = mu
        if self.ib and rng is not None:
            noise = rng.standard_normal(mu.shape).astype(self.dtype)
            feats = mu + ad.exp(logvar * 0.5) * Tensor(noise)

        adjacency = np.zeros((n_pair, n_pair))
        start = 0
        for n in counts:
            m = n * (n - 1) // 2
            adjacency[start:start + m, start:start + m] = line_graph_adjacency(object_pairs(n))
            start += m
        readout = np.zeros((len(scenes), n_pair))
        readout[owner, np.arange(n_pair)] = 1
        graph = self.gin_embed(feats, adjacency, readout)
        return Forward(obj, mu, logvar, graph, pairs)


@dataclass
class Forward:
    objects: Tensor
    rel_mu: Tensor
    rel_logvar: Tensor | None
    graph: Tensor
    pairs: list[tuple[int, int, int]]  # (scene index, k, l) per relation row

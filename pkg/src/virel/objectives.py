"""Training objectives: graph contrastive, task classification, relation IB."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .crgnn import CRGNN, REL_DIM, Forward

MARGIN = REL_DIM * 2 / 3
MODES = ("contrastive", "classify", "contrastive+ib", "classify+ib")


class SingleTaskBatch(ValueError):
    pass


class TaskIdOutOfRange(ValueError):
    pass


@dataclass
class LossWeights:
    contrastive: float = 1.0
    classify: float = 1.0
    ib: float = 0.1

    def __post_init__(self):
        if min(self.contrastive, self.classify, self.ib) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class BatchPlan:
    tasks_per_batch: int = 4
    obs_per_task: int = 8

    def batches(self, task_ids: np.ndarray, rng: np.random.Generator) -> list[np.ndarray]:
        """One epoch of index batches; roughly len(task_ids) / batch-size of them."""
        task_ids = np.asarray(task_ids)
        tasks = np.unique(task_ids)
        by_task = {t: np.flatnonzero(task_ids == t) for t in tasks}
        per_batch = min(self.tasks_per_batch, len(tasks))
        n_batches = max(1, len(task_ids) // (per_batch * self.obs_per_task))
        out = []
        for _ in range(n_batches):
            chosen = rng.choice(tasks, size=per_batch, replace=False)
            idx = [rng.choice(by_task[t], size=min(self.obs_per_task, len(by_task[t])), replace=False)
                   for t in chosen]
            out.append(np.concatenate(idx))
        return out


def _pair_selectors(task_ids: np.ndarray, same: bool, dtype) -> np.ndarray | None:
    n = len(task_ids)
    i, j = np.triu_indices(n, k=1)
    keep = (task_ids[i] == task_ids[j]) == same
    i, j = i[keep], j[keep]
    if len(i) == 0:
        return None
    diff = np.zeros((len(i), n), dtype=dtype)
    diff[np.arange(len(i)), i] = 1
    diff[np.arange(len(i)), j] = -1
    return diff


def contrastive_loss(graph: Tensor, task_ids, margin: float = MARGIN) -> Tensor:
    """Mean intra-task distance plus mean hinged inter-task distance."""
    task_ids = np.asarray(task_ids)
    inter = _pair_selectors(task_ids, False, graph.dtype)
    if inter is None:
        raise SingleTaskBatch("contrastive loss needs at least two tasks in the batch")
    d_inter = ad.l2_norm(Tensor(inter) @ graph, axis=1)
    # max(0, margin - d) as a zero-slope leaky relu
    loss = ad.mean(ad.leaky_relu(margin - d_inter, 0.0))
    intra = _pair_selectors(task_ids, True, graph.dtype)
    if intra is not None:
        loss = loss + ad.mean(ad.l2_norm(Tensor(intra) @ graph, axis=1))
    return loss


def classify_loss(graph: Tensor, task_ids, model: CRGNN) -> Tensor:
    task_ids = np.asarray(task_ids)
    if model.n_tasks is None:
        raise ValueError("model has no classification head")
    if task_ids.min() < 0 or task_ids.max() >= model.n_tasks:
        raise TaskIdOutOfRange(f"task ids must lie in [0, {model.n_tasks})")
    return ad.softmax_cross_entropy(model.classify(graph), task_ids)


def ib_loss(mu: Tensor, logvar: Tensor) -> Tensor:
    """Mean over relation nodes of KL(N(mu, exp(logvar)) || N(0, I))."""
    kl = mu * mu + ad.exp(logvar) - logvar - 1.0
    return ad.mean(ad.sum(kl, axis=1)) * 0.5


def total_loss(model: CRGNN, scenes: list[np.ndarray], task_ids, mode: str,
               weights: LossWeights = LossWeights(), rng: np.random.Generator | None = None,
               margin: float = MARGIN) -> tuple[Tensor, dict[str, float], Forward]:
    """Weighted training loss for one batch; call inside an active ``Tape``.

    ``rng`` drives the IB reparameterization noise. Returns the loss tensor,
    the unweighted term values and the forward record.
    """
    if mode not in MODES:
        raise ValueError(f"unknown objective mode {mode!r}")
    use_ib = mode.endswith("+ib")
    if use_ib != model.ib:
        raise ValueError(f"mode {mode!r} does not match model (ib={model.ib})")
    fwd = model.forward(scenes, rng=rng if use_ib else None)
    terms: dict[str, float] = {}
    loss = None
    if mode.startswith("contrastive") and weights.contrastive:
        c = contrastive_loss(fwd.graph, task_ids, margin)
        terms["contrastive"] = float(c.value)
        loss = c * weights.contrastive
    if mode.startswith("classify") and weights.classify:
        c = classify_loss(fwd.graph, task_ids, model)
        terms["classify"] = float(c.value)
        loss = c * weights.classify if loss is None else loss + c * weights.classify
    if use_ib:
        c = ib_loss(fwd.rel_mu, fwd.rel_logvar)
        terms["ib"] = float(c.value)
        if weights.ib:
            loss = c * weights.ib if loss is None else loss + c * weights.ib
    if loss is None:
        raise ValueError("all enabled loss weights are zero")
    return loss, terms, fwd

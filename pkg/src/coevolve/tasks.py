"""Downstream task heads, losses and predictions."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.cluster import KMeans

from . import diffcore as dc
from .diffcore import Parameter, Tensor
from .magdata import MultimodalGraph
from .modevo import LatentState, info_nce_terms
from .rng import make_rng

KINDS = ("node_classification", "link_prediction", "node_clustering", "modality_retrieval")
GRAPH_CENTRIC = ("node_classification", "link_prediction", "node_clustering")


class TaskError(ValueError):
    pass


@dataclass
class TaskSpec:
    kind: str = "node_classification"
    eta: float = 0.1
    n_classes: int | None = None
    n_negatives: int = 1
    n_clusters: int | None = None
    query_modality: int = 0
    target_modality: int = 1
    tau: float = 0.07

    def __post_init__(self):
        if self.kind not in KINDS:
            raise TaskError(f"unknown task kind {self.kind!r}")
        if self.eta < 0:
            raise TaskError("eta must be nonnegative")
        if self.kind == "node_classification" and not (self.n_classes and self.n_classes >= 2):
            raise TaskError("node classification needs n_classes >= 2")
        if self.n_negatives < 1:
            raise TaskError("n_negatives must be positive")


class TaskHead:
    """Linear softmax classifier for node classification; parameter-free otherwise."""

    def __init__(self, spec: TaskSpec, latent_dim: int, seed: int = 0, dtype=np.float32):
        self.spec = spec
        self.weight = self.bias = None
        if spec.kind == "node_classification":
            rng = make_rng(seed, "init", "head")
            w = rng.normal(size=(latent_dim, spec.n_classes)) / np.sqrt(latent_dim)
            self.weight = Parameter(w.astype(dtype), "head_w")
            self.bias = Parameter(np.zeros(spec.n_classes, dtype=dtype), "head_b")

    def parameters(self) -> list[Parameter]:
        return [p for p in (self.weight, self.bias) if p is not None]

    def logits(self, h) -> Tensor:
        if self.weight is None:
            raise TaskError("this task has no classification head")
        return dc.add(dc.matmul(h, self.weight), self.bias)


def split_mask(graph: MultimodalGraph, name: str, level: str) -> np.ndarray:
    if not graph.splits or graph.split_level != level or name not in graph.splits:
        raise TaskError(f"graph has no '{name}' split over {level}")
    return graph.splits[name]


def sample_negative_pairs(graph: MultimodalGraph, count: int, seed: int) -> np.ndarray:
    """Uniform node pairs u != v that are not edges of ``graph``."""
    n = graph.n_nodes
    existing = set((graph.edges[:, 0] * n + graph.edges[:, 1]).tolist())
    rng = make_rng(seed, "negatives")
    out = []
    while len(out) < count:
        u, v = rng.integers(0, n, size=(2, max(2 * (count - len(out)), 16)))
        for a, b in zip(u.tolist(), v.tolist()):
            if a == b or min(a, b) * n + max(a, b) in existing:
                continue
            out.append((a, b))
            if len(out) == count:
                break
    return np.array(out, dtype=np.int64).reshape(-1, 2)


def classification_loss(head: TaskHead, h, labels, index) -> Tensor:
    """Mean softmax cross-entropy over the rows ``index``."""
    index = np.asarray(index, dtype=np.intp)
    lsm = dc.log_softmax(head.logits(dc.gather_rows(h, index)), axis=-1)
    picked = dc.getitem(lsm, (np.arange(len(index)), np.asarray(labels)[index]))
    return dc.scale(dc.mean(picked), -1.0)


def link_scores(h, pairs) -> Tensor:
    pairs = np.asarray(pairs, dtype=np.intp)
    return dc.tsum(dc.mul(dc.gather_rows(h, pairs[:, 0]), dc.gather_rows(h, pairs[:, 1])), axis=-1)


def link_loss(h, positives, negatives) -> Tensor:
    """Mean binary cross-entropy of sigmoid(h_u . h_v) over positives and negatives."""
    pos = dc.softplus(dc.scale(link_scores(h, positives), -1.0))
    neg = dc.softplus(link_scores(h, negatives))
    total = dc.add(dc.tsum(pos), dc.tsum(neg))
    return dc.scale(total, 1.0 / (len(positives) + len(negatives)))


def retrieval_loss(query, target, tau: float) -> Tensor:
    """Symmetric in-batch contrastive loss, averaged over both directions and rows."""
    b = query.shape[0]
    both = dc.add(info_nce_terms(query, target, tau), info_nce_terms(target, query, tau))
    return dc.scale(both, 0.5 / b)


def task_loss(spec: TaskSpec, latent: LatentState, graph: MultimodalGraph, batch,
              seed: int = 0, head: TaskHead | None = None) -> Tensor:
    """Task objective on a batch.

    ``batch`` indexes train nodes for node-level kinds and train edges (rows of
    ``graph.edges``) for link prediction.
    """
    batch = np.asarray(batch, dtype=np.intp)
    if spec.kind == "node_clustering":
        return Tensor(np.zeros((), dtype=latent.smoothed.dtype))
    if len(batch) == 0:
        raise TaskError("empty task batch")
    if spec.kind == "node_classification":
        if graph.labels is None:
            raise TaskError("node classification needs labels")
        train = split_mask(graph, "train", "nodes")
        if not train[batch].all():
            raise TaskError("classification batch contains non-train nodes")
        return classification_loss(head, latent.smoothed, graph.labels, batch)
    if spec.kind == "link_prediction":
        train = split_mask(graph, "train", "edges")
        if not train[batch].all():
            raise TaskError("link batch contains non-train edges")
        pos = graph.edges[batch]
        neg = sample_negative_pairs(graph, len(pos) * spec.n_negatives, seed)
        return link_loss(latent.smoothed, pos, neg)
    q = dc.gather_rows(latent.modal[spec.query_modality], batch)
    t = dc.gather_rows(latent.modal[spec.target_modality], batch)
    return retrieval_loss(q, t, spec.tau)


# ------------------------------------------------------------------ predict

@dataclass
class RankingPredictions:
    scores: np.ndarray          # queries x candidates, true candidate in column ``truth``
    truth: np.ndarray


def kmeans_assign(h: np.ndarray, k: int, seed: int, restarts: int = 10) -> np.ndarray:
    km = KMeans(n_clusters=k, n_init=restarts, random_state=seed % (2**32))
    return km.fit_predict(np.asarray(h, dtype=np.float64))


def link_candidates(graph: MultimodalGraph, pairs, n_negatives: int, seed: int):
    """Score-ready candidate lists: each (u, v) against sampled non-neighbours of u."""
    n = graph.n_nodes
    adj = graph.adjacency().tolil().rows
    rng = make_rng(seed, "link_eval")
    cands = np.empty((len(pairs), n_negatives + 1), dtype=np.int64)
    for q, (u, v) in enumerate(pairs):
        banned = set(adj[u]) | {u}
        pool = np.array([x for x in range(n) if x not in banned], dtype=np.int64)
        replace = len(pool) < n_negatives
        cands[q, 0] = v
        cands[q, 1:] = rng.choice(pool, size=n_negatives, replace=replace)
    return cands


def predict(spec: TaskSpec, latent: LatentState, graph: MultimodalGraph,
            head: TaskHead | None = None, split: str = "test", seed: int = 0,
            eval_negatives: int = 100):
    """Predictions on ``split``.

    Returns class labels (classification), cluster labels over all nodes
    (clustering) or :class:`RankingPredictions` (link prediction, retrieval).
    """
    h = np.asarray(latent.smoothed.value, dtype=np.float64)
    if spec.kind == "node_classification":
        if head is None or head.weight is None:
            raise TaskError("untrained head")
        idx = np.flatnonzero(split_mask(graph, split, "nodes"))
        with dc.no_grad():
            logits = head.logits(h[idx].astype(head.weight.dtype)).value
        return np.argmax(logits, axis=1)
    if spec.kind == "node_clustering":
        k = spec.n_clusters or graph.n_classes
        if not k:
            raise TaskError("cluster count unknown")
        return kmeans_assign(h, k, seed)
    if spec.kind == "link_prediction":
        pairs = graph.edges[split_mask(graph, split, "edges")]
        # candidate exclusion uses the full edge set so held-out positives are never negatives
        cands = link_candidates(graph, pairs, eval_negatives, seed)
        scores = np.einsum("qd,qcd->qc", h[pairs[:, 0]], h[cands])
        return RankingPredictions(scores, np.zeros(len(pairs), dtype=np.int64))
    if graph.splits and graph.split_level == "nodes" and split in graph.splits:
        idx = np.flatnonzero(graph.splits[split])
    else:
        idx = np.arange(graph.n_nodes)
    q = np.asarray(latent.modal[spec.query_modality].value, dtype=np.float64)[idx]
    t = np.asarray(latent.modal[spec.target_modality].value, dtype=np.float64)[idx]
    q /= np.maximum(np.linalg.norm(q, axis=1, keepdims=True), 1e-12)
    t /= np.maximum(np.linalg.norm(t, axis=1, keepdims=True), 1e-12)
    return RankingPredictions(q @ t.T, np.arange(len(idx)))

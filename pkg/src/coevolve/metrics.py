"""Evaluation metrics: ACC, macro-F1, MRR, Hits@K, NMI, ARI."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class MetricSet:
    kind: str
    values: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "values": dict(self.values)}


def _check_lengths(a, b):
    if len(a) != len(b):
        raise ValueError(f"length mismatch: {len(a)} predictions vs {len(b)} labels")


def accuracy(pred, truth) -> float:
    pred, truth = np.asarray(pred), np.asarray(truth)
    _check_lengths(pred, truth)
    return float(np.mean(pred == truth)) if len(pred) else 0.0


def macro_f1(pred, truth, n_classes: int | None = None) -> float:
    """Unweighted mean of per-class F1; a class with no support and no predictions scores 0."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    _check_lengths(pred, truth)
    classes = np.arange(n_classes) if n_classes else np.union1d(pred, truth)
    scores = []
    for c in classes:
        tp = np.sum((pred == c) & (truth == c))
        fp = np.sum((pred == c) & (truth != c))
        fn = np.sum((pred != c) & (truth == c))
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(scores)) if scores else 0.0


def ranks_from_scores(scores, true_index) -> np.ndarray:
    """1-based rank of the true candidate per row; ties count against it."""
    scores = np.asarray(scores, dtype=np.float64)
    true_index = np.asarray(true_index)
    true = scores[np.arange(len(scores)), true_index]
    ahead = (scores >= true[:, None]).sum(axis=1)
    return ahead.astype(np.int64)


def mrr(ranks) -> float:
    ranks = np.asarray(ranks, dtype=np.float64)
    return float(np.mean(1.0 / ranks)) if len(ranks) else 0.0


def hits_at_k(ranks, k: int, n_candidates: int | None = None) -> float:
    if n_candidates is not None and k > n_candidates:
        raise ValueError(f"K={k} exceeds the {n_candidates} candidates per query")
    ranks = np.asarray(ranks)
    return float(np.mean(ranks <= k)) if len(ranks) else 0.0


def contingency(truth, pred) -> np.ndarray:
    _, ti = np.unique(truth, return_inverse=True)
    _, pi = np.unique(pred, return_inverse=True)
    table = np.zeros((ti.max() + 1, pi.max() + 1), dtype=np.int64)
    np.add.at(table, (ti, pi), 1)
    return table


def nmi(truth, pred) -> float:
    """2 I(Y;C) / (H(Y) + H(C)) with natural logs; 1.0 when both entropies vanish."""
    truth, pred = np.asarray(truth), np.asarray(pred)
    _check_lengths(truth, pred)
    n = len(truth)
    table = contingency(truth, pred) / n
    py, pc = table.sum(axis=1), table.sum(axis=0)
    nz = table > 0
    mi = float(np.sum(table[nz] * np.log(table[nz] / np.outer(py, pc)[nz])))
    hy = -float(np.sum(py * np.log(py)))
    hc = -float(np.sum(pc * np.log(pc)))
    if hy + hc == 0:
        return 1.0
    return max(0.0, min(1.0, 2 * mi / (hy + hc)))


def _comb2(x):
    x = np.asarray(x, dtype=np.float64)
    return x * (x - 1) / 2


def ari(truth, pred) -> float:
    """Adjusted Rand index via pair counting; 1.0 for degenerate identical partitions."""
    truth, pred = np.asarray(truth), np.asarray(pred)
    _check_lengths(truth, pred)
    table = contingency(truth, pred)
    sum_ij = _comb2(table).sum()
    sum_a = _comb2(table.sum(axis=1)).sum()
    sum_b = _comb2(table.sum(axis=0)).sum()
    total = _comb2(len(truth))
    expected = sum_a * sum_b / total if total else 0.0
    max_index = 0.5 * (sum_a + sum_b)
    if max_index == expected:
        return 1.0
    return float((sum_ij - expected) / (max_index - expected))


def compute_metrics(kind: str, predictions, truth=None, k: int = 3,
                    n_classes: int | None = None) -> MetricSet:
    """Metrics for one task kind.

    Classification and clustering take label vectors. Ranking kinds take a
    score matrix (queries x candidates) and the index of the correct candidate
    per query.
    """
    if kind == "node_classification":
        return MetricSet(kind, {"ACC": accuracy(predictions, truth),
                                "F1": macro_f1(predictions, truth, n_classes)})
    if kind == "node_clustering":
        return MetricSet(kind, {"NMI": nmi(truth, predictions), "ARI": ari(truth, predictions)})
    if kind in ("link_prediction", "modality_retrieval"):
        scores = np.asarray(predictions)
        if truth is None:
            truth = np.zeros(len(scores), dtype=np.int64)
        _check_lengths(scores, truth)
        ranks = ranks_from_scores(scores, truth)
        return MetricSet(kind, {"MRR": mrr(ranks),
                                f"Hits@{k}": hits_at_k(ranks, k, scores.shape[1])})
    raise ValueError(f"unknown task kind {kind!r}")

"""Topology evolution through learned node-anchor affinities.

Node-node relations are never formed explicitly. A nonnegative node-anchor
affinity ``R`` (N x U) induces the row-stochastic operator
``A_E = inv(Delta) R inv(Lambda) R^T`` with ``Lambda = diag(R.sum(0))`` and
``Delta = diag(R.sum(1))``; it is applied as node -> anchor -> node.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import diffcore as dc
from .diffcore import Parameter, Tensor
from .rng import make_rng

log = logging.getLogger(__name__)

DENSE_LIMIT = 2000
# retained row maxima that are not positive are lifted to this value
AFFINITY_FLOOR = 1e-6


@dataclass
class AnchorSet:
    indices: np.ndarray
    seed: int

    def __len__(self):
        return len(self.indices)

    def __eq__(self, other):
        return isinstance(other, AnchorSet) and np.array_equal(self.indices, other.indices)


def sample_anchors(n: int, size: int, seed: int) -> AnchorSet:
    """Uniform sample of ``size`` distinct nodes, returned in ascending order."""
    if not 1 <= size <= n:
        raise ValueError(f"anchor count must lie in [1, {n}], got {size}")
    idx = make_rng(seed, "anchors").choice(n, size=size, replace=False)
    return AnchorSet(np.sort(idx).astype(np.int64), seed)


def default_anchor_count(n: int, ratio: float = 0.1) -> int:
    return max(1, min(n, math.ceil(ratio * n)))


class SimilarityLearner:
    """Multi-perspective weighted-cosine metric over every feature source.

    Sources are the modalities followed by their fused mean. Round-1 weights
    ``w`` live in the raw feature spaces; latent-round weights ``theta`` in the
    shared latent space. ``beta``/``gamma`` are the source-mixing logits.
    """

    def __init__(self, raw_dims, latent_dim: int, perspectives: int = 4, eps: float = 0.1,
                 seed: int = 0, dtype=np.float32):
        if eps < 0:
            raise ValueError("eps must be nonnegative")
        self.perspectives = perspectives
        self.eps = eps
        raw_dims = list(raw_dims) + [max(raw_dims)]
        n_src = len(raw_dims)
        rng = make_rng(seed, "init", "similarity")

        def ones_plus_noise(d):
            return (1.0 + 0.01 * rng.normal(size=(perspectives, d))).astype(dtype)
        self.w = [Parameter(ones_plus_noise(d), f"w{s}") for s, d in enumerate(raw_dims)]
        self.beta = Parameter(np.zeros(n_src, dtype=dtype), "beta")
        self.theta = [Parameter(ones_plus_noise(latent_dim), f"theta{s}") for s in range(n_src)]
        self.gamma = Parameter(np.zeros(n_src, dtype=dtype), "gamma")

    @property
    def n_sources(self) -> int:
        return len(self.w)

    def parameters(self) -> list[Parameter]:
        return [*self.w, self.beta, *self.theta, self.gamma]

    def weights(self, round_: int):
        if round_ <= 1:
            return self.w, self.beta
        return self.theta, self.gamma


@dataclass
class AffinityState:
    R: Tensor                    # N x (kept anchors), post-threshold
    anchors: AnchorSet
    kept: np.ndarray             # bool mask over anchors.indices
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def anchor_degree(self) -> Tensor:
        if "lam" not in self._cache:
            self._cache["lam"] = dc.tsum(self.R, axis=0)
        return self._cache["lam"]

    @property
    def node_degree(self) -> Tensor:
        if "delta" not in self._cache:
            self._cache["delta"] = dc.tsum(self.R, axis=1)
        return self._cache["delta"]

    @property
    def n_nodes(self) -> int:
        return self.R.shape[0]

    def full(self) -> np.ndarray:
        """R scattered back onto every sampled anchor (dropped columns are zero)."""
        out = np.zeros((self.R.shape[0], len(self.anchors)), dtype=np.float64)
        out[:, self.kept] = self.R.value
        return out


def affinity_from_matrix(r: np.ndarray, anchors: AnchorSet | None = None) -> AffinityState:
    """Wrap a precomputed nonnegative affinity (empty columns are dropped)."""
    r = np.asarray(r)
    if (r < 0).any():
        raise ValueError("affinity entries must be nonnegative")
    if (r.sum(axis=1) <= 0).any():
        raise ValueError("every node needs a positive affinity to some anchor")
    if anchors is None:
        anchors = AnchorSet(np.arange(r.shape[1]), 0)
    kept = r.sum(axis=0) > 0
    return AffinityState(Tensor(r[:, kept]), anchors, kept)


def perspective_similarity(x, w, anchor_index) -> Tensor:
    """Mean over perspectives of cos(w_p * x_i, w_p * x_u) for every node i, anchor u."""
    x = dc.as_tensor(x)
    n, d = x.shape
    k = w.shape[0]
    xw = dc.mul(dc.reshape(x, (1, n, d)), dc.reshape(w, (k, 1, d)))
    zero_rows = ~np.any(xw.value != 0, axis=-1)
    if zero_rows.any():
        log.warning("%d zero weighted feature vectors; their similarities are set to 0",
                    int(zero_rows.sum()))
    xn = dc.row_normalize(xw)
    xa = dc.getitem(xn, (slice(None), anchor_index, slice(None)))
    return dc.mean(dc.matmul(xn, dc.transpose(xa)), axis=0)


def compute_affinity(sources, learner: SimilarityLearner, anchors: AnchorSet,
                     round_: int = 1) -> AffinityState:
    """Thresholded node-anchor affinity for one round.

    ``sources`` holds one N x d matrix per modality followed by the fused
    matrix: raw features in round 1, latent embeddings afterwards.
    """
    weights, logits = learner.weights(round_)
    if len(sources) != len(weights):
        raise dc.ShapeError(f"expected {len(weights)} sources, got {len(sources)}")
    mix = dc.softmax(logits)
    r = None
    for s, (x, w) in enumerate(zip(sources, weights)):
        x = dc.as_tensor(x)
        if x.shape[1] != w.shape[1]:
            raise dc.ShapeError(f"source {s}: feature dim {x.shape[1]} != weight dim {w.shape[1]}")
        term = dc.mul(dc.getitem(mix, s), perspective_similarity(x, w, anchors.indices))
        r = term if r is None else dc.add(r, term)
    r = dc.threshold(r, learner.eps, keep_row_max=True, floor=AFFINITY_FLOOR)
    kept = r.value.sum(axis=0) > 0
    if not kept.all():
        r = dc.getitem(r, (slice(None), np.flatnonzero(kept)))
    return AffinityState(r, anchors, kept)


@dataclass
class EvolvedTopology:
    """lam * A_norm + (1 - lam) * A_E, applied without forming A_E.

    ``affinity`` may be None only when ``lam == 1``. With ``symmetrize`` the
    evolved term is replaced by (A_E + A_E^T) / 2.
    """
    lam: float
    base: sp.csr_matrix
    affinity: AffinityState | None
    symmetrize: bool = False

    def __post_init__(self):
        if not 0 <= self.lam <= 1:
            raise ValueError("lam must lie in [0, 1]")
        if self.affinity is None and self.lam != 1:
            raise ValueError("an affinity is required unless lam == 1")


def _evolved_times(aff: AffinityState, x: Tensor) -> Tensor:
    lam_d = aff.anchor_degree
    delta_d = aff.node_degree
    z_u = dc.div(dc.matmul(dc.transpose(aff.R), x), dc.reshape(lam_d, (-1, 1)))
    return dc.div(dc.matmul(aff.R, z_u), dc.reshape(delta_d, (-1, 1)))


def _evolved_t_times(aff: AffinityState, x: Tensor) -> Tensor:
    y = dc.div(x, dc.reshape(aff.node_degree, (-1, 1)))
    z_u = dc.div(dc.matmul(dc.transpose(aff.R), y), dc.reshape(aff.anchor_degree, (-1, 1)))
    return dc.matmul(aff.R, z_u)


def apply_evolved(topology: EvolvedTopology, x) -> Tensor:
    """Q X = lam * A_norm X + (1 - lam) * inv(Delta) R (inv(Lambda) (R^T X))."""
    x = dc.as_tensor(x)
    base = dc.spmm(topology.base, x)
    if topology.affinity is None:
        return base
    if topology.affinity.n_nodes != x.shape[0]:
        raise dc.ShapeError("affinity and operand disagree on node count")
    ev = _evolved_times(topology.affinity, x)
    if topology.symmetrize:
        ev = dc.scale(dc.add(ev, _evolved_t_times(topology.affinity, x)), 0.5)
    return dc.add(dc.scale(base, topology.lam), dc.scale(ev, 1.0 - topology.lam))


def dense_recover(affinity: AffinityState, symmetrize: bool = False) -> np.ndarray:
    """inv(Delta) R inv(Lambda) R^T as a dense matrix (test oracle)."""
    r = np.asarray(affinity.R.value, dtype=np.float64)
    if r.shape[0] > DENSE_LIMIT:
        raise ValueError(f"dense recovery is limited to {DENSE_LIMIT} nodes")
    a = (r / r.sum(axis=1, keepdims=True)) @ (r / r.sum(axis=0, keepdims=True)).T
    return 0.5 * (a + a.T) if symmetrize else a


def dense_operator(topology: EvolvedTopology) -> np.ndarray:
    """Q as a dense matrix (test oracle)."""
    base = topology.base.toarray()
    if topology.affinity is None:
        return base
    return topology.lam * base + (1 - topology.lam) * dense_recover(
        topology.affinity, topology.symmetrize)


def topology_delta(current: AffinityState, previous: AffinityState) -> float:
    """||R_t - R_{t-1}||_F^2 / ||R_t||_F^2 over the shared anchor set."""
    if current.anchors != previous.anchors or current.n_nodes != previous.n_nodes:
        raise ValueError("topology_delta needs states over the same nodes and anchors")
    cur, prev = current.full(), previous.full()
    denom = float(np.sum(cur * cur))
    num = float(np.sum((cur - prev) ** 2))
    if denom == 0:
        return 0.0 if num == 0 else math.inf
    return num / denom

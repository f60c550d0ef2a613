"""Multimodal attributed graphs: data model, on-disk format, generators.

On-disk layout of a dataset directory::

    manifest.json           {"n_nodes", "modalities": [{"name", "dim"}], "n_classes"}
    features_<name>.f32     uint32 rows, uint32 cols, then rows*cols float32 (LE, row-major)
    edges.tsv               "<i>\\t<j>" per line, zero-based
    labels.csv              optional, one integer per line
    splits.json             optional, {"train": [...], "val": [...], "test": [...]}

``splits.json`` may carry ``"level": "edges"`` in which case the indices refer
to rows of the canonical (sorted, ``i < j``) edge list instead of nodes.
"""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .rng import make_rng

log = logging.getLogger(__name__)

SPLIT_NAMES = ("train", "val", "test")


class DatasetError(ValueError):
    """A dataset file is missing or malformed."""


@dataclass(frozen=True)
class Modality:
    name: str
    dim: int


@dataclass
class MultimodalGraph:
    n_nodes: int
    modalities: list[Modality]
    features: dict[str, np.ndarray]
    edges: np.ndarray                    # (E, 2) int64, i < j, lexicographically sorted
    labels: np.ndarray | None = None
    n_classes: int | None = None
    splits: dict[str, np.ndarray] | None = None
    split_level: str = "nodes"
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.edges = canonical_edges(self.edges, self.n_nodes)
        self.validate()

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def modality_names(self) -> list[str]:
        return [m.name for m in self.modalities]

    def feature_list(self) -> list[np.ndarray]:
        return [self.features[m.name] for m in self.modalities]

    def edge_set(self) -> set[tuple[int, int]]:
        return {(int(i), int(j)) for i, j in self.edges}

    def adjacency(self) -> sp.csr_matrix:
        n = self.n_nodes
        i, j = self.edges[:, 0], self.edges[:, 1]
        data = np.ones(2 * len(i))
        return sp.csr_matrix((data, (np.r_[i, j], np.r_[j, i])), shape=(n, n))

    def validate(self) -> None:
        n = self.n_nodes
        if n <= 0:
            raise DatasetError("n_nodes must be positive")
        if len(self.edges) and (self.edges.min() < 0 or self.edges.max() >= n):
            raise DatasetError("edge endpoint out of range")
        for m in self.modalities:
            x = self.features.get(m.name)
            if x is None:
                raise DatasetError(f"missing features for modality {m.name!r}")
            if x.shape != (n, m.dim):
                raise DatasetError(f"features {m.name!r}: shape {x.shape}, expected {(n, m.dim)}")
            if not np.isfinite(x).all():
                raise DatasetError(f"features {m.name!r}: non-finite value")
        if self.labels is not None and len(self.labels) != n:
            raise DatasetError(f"labels: {len(self.labels)} entries, expected {n}")
        if self.splits:
            size = n if self.split_level == "nodes" else len(self.edges)
            masks = [self.splits[k] for k in SPLIT_NAMES if k in self.splits]
            for mask in masks:
                if mask.shape != (size,):
                    raise DatasetError("split mask has the wrong length")
            if masks and (np.sum(masks, axis=0) > 1).any():
                raise DatasetError("train/val/test splits overlap")


def canonical_edges(edges, n_nodes: int | None = None) -> np.ndarray:
    """Undirected, deduplicated, self-loop-free edge array with ``i < j``."""
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    e = e[e[:, 0] != e[:, 1]]
    e = np.sort(e, axis=1)
    if len(e) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    return np.unique(e, axis=0)


# ------------------------------------------------------------------ file io

def write_matrix(path, x: np.ndarray) -> None:
    x = np.ascontiguousarray(x, dtype="<f4")
    if x.ndim == 1:
        x = x[:, None]
    rows, cols = x.shape
    with open(path, "wb") as fh:
        fh.write(np.array([rows, cols], dtype="<u4").tobytes())
        fh.write(x.tobytes())


def read_matrix(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"{path.name}: missing file")
    raw = path.read_bytes()
    if len(raw) < 8:
        raise DatasetError(f"{path.name}: truncated header")
    rows, cols = (int(v) for v in np.frombuffer(raw[:8], dtype="<u4"))
    payload = len(raw) - 8
    if payload != rows * cols * 4:
        raise DatasetError(f"{path.name}: header declares {rows}x{cols} but payload has "
                           f"{payload} bytes")
    return np.frombuffer(raw[8:], dtype="<f4").reshape(rows, cols).copy()


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def save_dataset(graph: MultimodalGraph, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for m in graph.modalities:
        write_matrix(path / f"features_{m.name}.f32", graph.features[m.name])
    _write_atomic(path / "edges.tsv", "".join(f"{i}\t{j}\n" for i, j in graph.edges))
    if graph.labels is not None:
        _write_atomic(path / "labels.csv", "".join(f"{int(y)}\n" for y in graph.labels))
    if graph.splits:
        doc = {k: np.flatnonzero(graph.splits[k]).tolist() for k in SPLIT_NAMES
               if k in graph.splits}
        if graph.split_level != "nodes":
            doc["level"] = graph.split_level
        _write_atomic(path / "splits.json", json.dumps(doc))
    manifest = {
        "n_nodes": graph.n_nodes,
        "modalities": [{"name": m.name, "dim": m.dim} for m in graph.modalities],
        "n_classes": graph.n_classes,
    }
    if graph.provenance:
        manifest["provenance"] = graph.provenance
    _write_atomic(path / "manifest.json", json.dumps(manifest, indent=2))


def _read_edges(path: Path, n: int) -> np.ndarray:
    if not path.exists():
        raise DatasetError(f"{path.name}: missing file")
    rows = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2:
            raise DatasetError(f"{path.name}: row {lineno}: expected two columns")
        try:
            i, j = int(parts[0]), int(parts[1])
        except ValueError:
            raise DatasetError(f"{path.name}: row {lineno}: non-integer node index") from None
        if not (0 <= i < n and 0 <= j < n):
            raise DatasetError(f"{path.name}: row {lineno}: node index out of range [0, {n})")
        rows.append((i, j))
    return np.array(rows, dtype=np.int64).reshape(-1, 2)


def load_dataset(path) -> MultimodalGraph:
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.exists():
        raise DatasetError("manifest.json: missing file")
    manifest = json.loads(mpath.read_text())
    n = int(manifest["n_nodes"])
    modalities = [Modality(m["name"], int(m["dim"])) for m in manifest["modalities"]]
    features = {}
    for m in modalities:
        fname = f"features_{m.name}.f32"
        x = read_matrix(path / fname)
        if x.shape != (n, m.dim):
            raise DatasetError(f"{fname}: shape {x.shape} does not match manifest {(n, m.dim)}")
        bad = np.argwhere(~np.isfinite(x))
        if len(bad):
            raise DatasetError(f"{fname}: non-finite value at row {bad[0][0]}, col {bad[0][1]}")
        features[m.name] = x
    edges = _read_edges(path / "edges.tsv", n)

    labels = None
    lpath = path / "labels.csv"
    if lpath.exists():
        vals = [ln.strip() for ln in lpath.read_text().splitlines() if ln.strip()]
        try:
            labels = np.array([int(v) for v in vals], dtype=np.int64)
        except ValueError:
            raise DatasetError("labels.csv: non-integer label") from None
        if len(labels) != n:
            raise DatasetError(f"labels.csv: {len(labels)} rows, expected {n}")

    graph = MultimodalGraph(n, modalities, features, edges, labels=labels,
                            n_classes=manifest.get("n_classes"),
                            provenance=manifest.get("provenance", {}))
    spath = path / "splits.json"
    if spath.exists():
        doc = json.loads(spath.read_text())
        level = doc.get("level", "nodes")
        size = n if level == "nodes" else graph.n_edges
        splits = {}
        for k in SPLIT_NAMES:
            idx = np.asarray(doc.get(k, []), dtype=np.int64)
            if len(idx) and (idx.min() < 0 or idx.max() >= size):
                raise DatasetError(f"splits.json: '{k}' index out of range [0, {size})")
            mask = np.zeros(size, dtype=bool)
            mask[idx] = True
            splits[k] = mask
        graph.splits = splits
        graph.split_level = level
        graph.validate()
    return graph


# ------------------------------------------------------------ normalization

def normalize(graph: MultimodalGraph) -> sp.csr_matrix:
    """Symmetric normalization D^-1/2 A D^-1/2; isolated nodes give zero rows."""
    a = graph.adjacency()
    deg = np.asarray(a.sum(axis=1)).ravel()
    inv = np.zeros_like(deg)
    nz = deg > 0
    inv[nz] = 1.0 / np.sqrt(deg[nz])
    d = sp.diags(inv)
    return (d @ a @ d).tocsr()


# --------------------------------------------------------------- generators

@dataclass
class SbmMagSpec:
    blocks: int = 4
    nodes_per_block: int = 100
    p_in: float = 0.05
    p_out: float = 0.01
    dims: tuple[int, ...] = (32, 32)
    separation: tuple[float, ...] = (1.0, 1.0)
    noise: tuple[float, ...] = (1.0, 1.0)
    flip_rate: float = 0.0
    split: tuple[float, float, float] = (0.6, 0.2, 0.2)
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.p_out <= self.p_in <= 1:
            raise ValueError("need 0 <= p_out <= p_in <= 1")
        if not (len(self.dims) == len(self.separation) == len(self.noise)):
            raise ValueError("dims, separation and noise need one entry per modality")
        if not 0 <= self.flip_rate <= 1:
            raise ValueError("flip_rate must lie in [0, 1]")


def generate_sbm_mag(spec: SbmMagSpec) -> MultimodalGraph:
    """Planted-partition graph with Gaussian per-modality features.

    Each block has a random center per modality scaled to norm
    ``separation * sqrt(dim)``; node features add isotropic noise of scale
    ``noise``. With probability ``flip_rate`` (independently per modality) a
    node's features are drawn around another block's center instead.
    """
    b, per = spec.blocks, spec.nodes_per_block
    n = b * per
    labels = np.repeat(np.arange(b), per)

    rng = make_rng(spec.seed, "sbm", "edges")
    iu, ju = np.triu_indices(n, k=1)
    prob = np.where(labels[iu] == labels[ju], spec.p_in, spec.p_out)
    hit = rng.random(len(iu)) < prob
    edges = np.stack([iu[hit], ju[hit]], axis=1)

    modalities, features = [], {}
    for m, (dim, sep, noise) in enumerate(zip(spec.dims, spec.separation, spec.noise)):
        name = f"m{m}"
        r = make_rng(spec.seed, "sbm", "features", m)
        centers = r.normal(size=(b, dim))
        centers *= sep * math.sqrt(dim) / np.linalg.norm(centers, axis=1, keepdims=True)
        source = labels.copy()
        if b > 1:
            flip = r.random(n) < spec.flip_rate
            other = (labels + r.integers(1, b, size=n)) % b
            source = np.where(flip, other, labels)
        x = centers[source] + noise * r.normal(size=(n, dim))
        modalities.append(Modality(name, dim))
        features[name] = x.astype(np.float32)

    splits = node_splits(n, spec.split, make_rng(spec.seed, "sbm", "splits"), labels)
    return MultimodalGraph(n, modalities, features, edges, labels=labels, n_classes=b,
                           splits=splits, provenance={"generator": "sbm", "seed": spec.seed})


def node_splits(n: int, fractions, rng: np.random.Generator, labels=None) -> dict[str, np.ndarray]:
    """Random train/val/test node masks, stratified by label when given."""
    groups = [np.arange(n)] if labels is None else [np.flatnonzero(labels == c)
                                                    for c in np.unique(labels)]
    masks = {k: np.zeros(n, dtype=bool) for k in SPLIT_NAMES}
    for g in groups:
        g = rng.permutation(g)
        n_tr = int(round(fractions[0] * len(g)))
        n_va = int(round(fractions[1] * len(g)))
        masks["train"][g[:n_tr]] = True
        masks["val"][g[n_tr:n_tr + n_va]] = True
        masks["test"][g[n_tr + n_va:]] = True
    return masks


def edge_splits(graph: MultimodalGraph, fractions=(0.85, 0.05, 0.10), seed: int = 0) -> MultimodalGraph:
    """Copy of ``graph`` with train/val/test masks over its edge list."""
    e = graph.n_edges
    perm = make_rng(seed, "edge_splits").permutation(e)
    n_tr = int(round(fractions[0] * e))
    n_va = int(round(fractions[1] * e))
    masks = {k: np.zeros(e, dtype=bool) for k in SPLIT_NAMES}
    masks["train"][perm[:n_tr]] = True
    masks["val"][perm[n_tr:n_tr + n_va]] = True
    masks["test"][perm[n_tr + n_va:]] = True
    return replace(graph, splits=masks, split_level="edges")


# ---------------------------------------------------------------- kNN graph

def _pad(x: np.ndarray, dim: int) -> np.ndarray:
    if x.shape[1] == dim:
        return x
    out = np.zeros((x.shape[0], dim), dtype=x.dtype)
    out[:, :x.shape[1]] = x
    return out


def fused_features(features) -> np.ndarray:
    """Mean of the per-modality matrices, zero-padding narrower ones."""
    dim = max(x.shape[1] for x in features)
    return sum(_pad(np.asarray(x), dim) for x in features) / len(features)


def build_knn_graph(features, k: int = 5) -> np.ndarray:
    """Symmetrized cosine kNN edges over averaged, row-normalized modalities.

    Ties rank the lower node index first. Similarities are rounded to 12
    decimals before ranking so that ties survive floating-point noise.
    """
    feats = [np.asarray(x, dtype=np.float64) for x in features]
    n = feats[0].shape[0]
    if not 0 < k < n:
        raise ValueError(f"k must satisfy 0 < k < N (k={k}, N={n})")
    normed = []
    for x in feats:
        nrm = np.linalg.norm(x, axis=1, keepdims=True)
        normed.append(np.where(nrm > 0, x / np.where(nrm > 0, nrm, 1), 0.0))
    avg = fused_features(normed)
    nrm = np.linalg.norm(avg, axis=1, keepdims=True)
    avg = np.where(nrm > 0, avg / np.where(nrm > 0, nrm, 1), 0.0)
    sim = np.round(avg @ avg.T, 12)
    np.fill_diagonal(sim, -np.inf)
    order = np.argsort(-sim, axis=1, kind="stable")[:, :k]
    src = np.repeat(np.arange(n), k)
    return canonical_edges(np.stack([src, order.ravel()], axis=1), n)


def with_edges(graph: MultimodalGraph, edges, note: dict | None = None) -> MultimodalGraph:
    prov = dict(graph.provenance)
    if note:
        prov.update(note)
    splits = graph.splits if graph.split_level == "nodes" else None
    return replace(graph, edges=canonical_edges(edges, graph.n_nodes), splits=splits,
                   split_level="nodes", provenance=prov)


# ------------------------------------------------------------------- noise

@dataclass(frozen=True)
class NoiseSpec:
    mode: str = "add"
    ratio: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("add", "remove"):
            raise ValueError(f"unknown noise mode {self.mode!r}")
        if not 0 <= self.ratio <= 1:
            raise ValueError("noise ratio must lie in [0, 1]")


def inject_noise(graph: MultimodalGraph, spec: NoiseSpec) -> MultimodalGraph:
    """Add or remove ``floor(ratio * |E|)`` uniformly chosen edges."""
    e = graph.n_edges
    count = int(math.floor(spec.ratio * e))
    rng = make_rng(spec.seed, "noise", spec.mode)
    note = {"noise": {"mode": spec.mode, "ratio": spec.ratio, "seed": spec.seed}}
    if spec.mode == "remove":
        keep = np.ones(e, dtype=bool)
        keep[rng.choice(e, size=count, replace=False)] = False
        return with_edges(graph, graph.edges[keep], note)

    n = graph.n_nodes
    capacity = n * (n - 1) // 2 - e
    if count > 0 and capacity <= 0:
        raise ValueError("cannot add edges to a complete graph")
    if count > capacity:
        raise ValueError(f"cannot add {count} edges; only {capacity} non-edges exist")
    existing = set((graph.edges[:, 0] * n + graph.edges[:, 1]).tolist())
    added: list[int] = []
    seen: set[int] = set()
    if count > capacity // 2:
        # dense request: enumerate the complement and sample from it
        iu, ju = np.triu_indices(n, k=1)
        codes = iu * n + ju
        free = codes[~np.isin(codes, list(existing))]
        added = rng.choice(free, size=count, replace=False).tolist()
    while len(added) < count:
        i, j = rng.integers(0, n, size=2)
        if i == j:
            continue
        code = int(min(i, j) * n + max(i, j))
        if code in existing or code in seen:
            continue
        seen.add(code)
        added.append(code)
    new = np.array([(c // n, c % n) for c in added], dtype=np.int64).reshape(-1, 2)
    return with_edges(graph, np.vstack([graph.edges, new]), note)

"""Training loop for topology/modality co-evolution.

Each epoch resamples anchors, evolves the topology once from raw features,
then runs up to ``t_evo - 1`` further rounds in which the affinity is
recomputed from latent embeddings. Every round takes its own optimizer step;
rounds stop early once the relative change of the affinity falls to
``delta`` or below. With ``lam == 1`` no affinity is computed; the topology
is the fixed base graph, its change is exactly zero, and each epoch stops
after round 2.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import shutil
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import Adam, Parameter, Tensor
from .magdata import MultimodalGraph, fused_features, normalize, read_matrix, with_edges, write_matrix
from .metrics import MetricSet, compute_metrics
from .modevo import AlignmentConfig, LatentState, ModalityEncoder, SmoothingConfig, alignment_loss, project, smooth
from .rng import derive_seed, make_rng
from .tasks import RankingPredictions, TaskHead, TaskSpec, classification_loss, predict, task_loss
from .topoevo import (AffinityState, EvolvedTopology, SimilarityLearner, compute_affinity,
                      default_anchor_count, sample_anchors, topology_delta)

log = logging.getLogger(__name__)

MODES = ("full", "one_shot_te", "only_me", "task_agnostic")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    lam: float = 0.8
    eps: float = 0.1
    perspectives: int = 4
    anchors: int = 0                 # 0 selects ceil(0.1 * N)
    alpha: float = 1.0
    t_smooth: int = 10
    t_evo: int = 10
    delta: float = 1e-5
    eta: float = 0.1
    tau: float = 0.07
    batch_size: int = 512
    lr: float = 5e-3
    weight_decay: float = 1e-5
    seed: int = 0
    latent_dim: int = 256
    task: str = "node_classification"
    n_negatives: int = 1
    eval_negatives: int = 100
    n_clusters: int = 0
    query_modality: int = 0
    target_modality: int = 1
    hits_k: int = 3
    symmetrize: bool = False
    dtype: str = "float32"
    mode: str = "full"
    finetune_epochs: int = 50

    def __post_init__(self):
        self.validate()

    def validate(self):
        problems = []
        if self.epochs < 1:
            problems.append("epochs must be >= 1")
        if not 0 < self.lam <= 1:
            problems.append("lam must lie in (0, 1]")
        if self.eps < 0:
            problems.append("eps must be >= 0")
        if self.perspectives < 1:
            problems.append("perspectives must be >= 1")
        if self.anchors < 0:
            problems.append("anchors must be >= 0")
        if self.alpha <= 0:
            problems.append("alpha must be > 0")
        if self.t_smooth < 0:
            problems.append("t_smooth must be >= 0")
        if self.t_evo < 1:
            problems.append("t_evo must be >= 1")
        if self.delta <= 0:
            problems.append("delta must be > 0")
        if self.eta < 0:
            problems.append("eta must be >= 0")
        if self.tau <= 0:
            problems.append("tau must be > 0")
        if self.batch_size < 1 or self.latent_dim < 1:
            problems.append("batch_size and latent_dim must be >= 1")
        if self.lr < 0 or self.weight_decay < 0:
            problems.append("lr and weight_decay must be >= 0")
        if self.dtype not in ("float32", "float64"):
            problems.append("dtype must be float32 or float64")
        if self.mode not in MODES:
            problems.append(f"mode must be one of {MODES}")
        if problems:
            raise ValueError("; ".join(problems))

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


def ablation_mode(config: TrainConfig, mode: str) -> TrainConfig:
    """Config for one of the ablation variants."""
    if mode == "one_shot_te":
        return dataclasses.replace(config, t_evo=1, mode=mode)
    if mode == "only_me":
        return dataclasses.replace(config, lam=1.0, mode=mode)
    if mode == "task_agnostic":
        return dataclasses.replace(config, eta=0.0, mode=mode)
    if mode == "full":
        return dataclasses.replace(config, mode=mode)
    raise ValueError(f"unknown ablation mode {mode!r}")


def task_spec_for(config: TrainConfig, graph: MultimodalGraph) -> TaskSpec:
    return TaskSpec(kind=config.task, eta=config.eta, n_classes=graph.n_classes,
                    n_negatives=config.n_negatives, n_clusters=config.n_clusters or None,
                    query_modality=config.query_modality,
                    target_modality=config.target_modality, tau=config.tau)


# -------------------------------------------------------------------- model

class CoEvolutionModel:
    """All trainable state plus the per-round forward computation."""

    def __init__(self, graph: MultimodalGraph, config: TrainConfig):
        self.config = config
        self.spec = task_spec_for(config, graph)
        dtype = config.np_dtype
        feats = graph.feature_list()
        self.features = [Tensor(x.astype(dtype)) for x in feats]
        self.raw_fused = Tensor(fused_features(feats).astype(dtype))
        structure = graph
        if self.spec.kind == "link_prediction":
            train = graph.splits["train"] if graph.split_level == "edges" else None
            if train is None:
                raise TrainingError("link prediction needs an edge-level split")
            structure = with_edges(graph, graph.edges[train])
        self.base = normalize(structure).astype(dtype)
        dims = [x.shape[1] for x in feats]
        self.n_nodes = graph.n_nodes
        self.n_anchors = config.anchors or default_anchor_count(graph.n_nodes)
        self.learner = SimilarityLearner(dims, config.latent_dim, config.perspectives,
                                         config.eps, seed=config.seed, dtype=dtype)
        self.encoder = ModalityEncoder(dims, config.latent_dim, seed=config.seed, dtype=dtype)
        self.head = TaskHead(self.spec, config.latent_dim, seed=config.seed, dtype=dtype)
        self.smoothing = SmoothingConfig(config.alpha, config.t_smooth)

    @property
    def evolves(self) -> bool:
        return self.config.lam < 1

    def parameters(self) -> list[Parameter]:
        params = self.encoder.parameters() + self.head.parameters()
        if self.evolves:
            params += self.learner.parameters()
        return params

    def all_parameters(self) -> list[Parameter]:
        return self.encoder.parameters() + self.head.parameters() + self.learner.parameters()

    def anchors_for(self, anchor_seed: int):
        return sample_anchors(self.n_nodes, self.n_anchors, anchor_seed)

    def round_forward(self, anchors, round_: int, previous: LatentState | None = None,
                      detach: bool = True):
        """One co-evolution round: affinity, projection and smoothing."""
        hs, fused = project(self.features, self.encoder)
        aff = None
        if self.evolves:
            if round_ == 1:
                sources = self.features + [self.raw_fused]
            else:
                prev = dc.stop_gradient(previous.smoothed) if detach else previous.smoothed
                sources = hs + [prev]
            aff = compute_affinity(sources, self.learner, anchors, round_)
        topo = EvolvedTopology(self.config.lam, self.base, aff, self.config.symmetrize)
        return aff, LatentState(hs, fused, smooth(fused, topo, self.smoothing), round_)

    def objective(self, latent: LatentState, graph: MultimodalGraph, align_batch, task_batch,
                  seed: int, eta: float):
        l_mod = alignment_loss(latent, AlignmentConfig(self.config.tau, align_batch))
        if eta > 0:
            l_task = task_loss(self.spec, latent, graph, task_batch, seed, self.head)
            total = dc.add(l_mod, dc.scale(l_task, eta))
        else:
            with dc.no_grad():
                l_task = task_loss(self.spec, latent, graph, task_batch, seed, self.head)
            total = l_mod
        return total, l_mod, l_task

    def infer(self, anchors):
        """Forward pass through every round without recording gradients."""
        with dc.no_grad():
            prev_aff, latent = self.round_forward(anchors, 1)
            rounds, deltas = 1, []
            for k in range(2, self.config.t_evo + 1):
                aff, latent = self.round_forward(anchors, k, latent)
                rounds = k
                deltas.append(0.0 if aff is None else topology_delta(aff, prev_aff))
                prev_aff = aff
                if deltas[-1] <= self.config.delta:
                    break
        return latent, rounds, deltas

    def state(self) -> dict[str, np.ndarray]:
        return {p.name: p.value.copy() for p in self.all_parameters()}

    def load_state(self, state: dict[str, np.ndarray]):
        for p in self.all_parameters():
            if p.name in state:
                p.value = np.asarray(state[p.name], dtype=p.dtype).reshape(p.shape).copy()


# -------------------------------------------------------------------- trace

@dataclass
class EpochRecord:
    epoch: int
    anchor_seed: int
    rounds: int
    deltas: list[float]
    loss_mod: list[float]
    loss_task: list[float]
    loss_total: list[float]
    val_metric: float | None = None


@dataclass
class EvolutionTrace:
    epochs: list[EpochRecord] = field(default_factory=list)

    def to_dict(self) -> list[dict]:
        return [asdict(e) for e in self.epochs]

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, rows) -> "EvolutionTrace":
        return cls([EpochRecord(**r) for r in rows])


@dataclass
class TrainResult:
    model: CoEvolutionModel
    trace: EvolutionTrace
    best_epoch: int
    best_metric: float | None
    anchor_seed: int
    finetune: list[float] = field(default_factory=list)


# ---------------------------------------------------------------- batching

def node_pool(graph: MultimodalGraph, split: str = "train") -> np.ndarray:
    if graph.splits and graph.split_level == "nodes" and split in graph.splits:
        return np.flatnonzero(graph.splits[split])
    return np.arange(graph.n_nodes)


def round_batches(graph: MultimodalGraph, spec: TaskSpec, config: TrainConfig, epoch: int,
                  round_: int):
    rng = make_rng(config.seed, "batch", epoch, round_)
    align = np.sort(rng.permutation(graph.n_nodes)[:config.batch_size])
    if spec.kind == "link_prediction":
        pool = np.flatnonzero(graph.splits["train"])
    elif spec.kind == "node_clustering":
        pool = np.arange(graph.n_nodes)
    else:
        pool = node_pool(graph, "train")
    task = np.sort(rng.permutation(pool)[:config.batch_size])
    return align, task


def validation_metric(model: CoEvolutionModel, latent: LatentState, graph: MultimodalGraph,
                      split: str = "val") -> float | None:
    kind = model.spec.kind
    if kind == "node_clustering":
        return None
    ms = evaluate_latent(model, latent, graph, split)
    return ms.values["ACC" if kind == "node_classification" else "MRR"]


def evaluate_latent(model: CoEvolutionModel, latent: LatentState, graph: MultimodalGraph,
                    split: str = "test") -> MetricSet:
    cfg = model.config
    spec = model.spec
    preds = predict(spec, latent, graph, model.head, split=split,
                    seed=derive_seed(cfg.seed, "eval", split), eval_negatives=cfg.eval_negatives)
    if spec.kind == "node_classification":
        truth = graph.labels[graph.splits[split]]
        return compute_metrics(spec.kind, preds, truth, n_classes=graph.n_classes)
    if spec.kind == "node_clustering":
        if graph.labels is None:
            raise TrainingError("clustering evaluation needs labels")
        return compute_metrics(spec.kind, preds, graph.labels)
    assert isinstance(preds, RankingPredictions)
    return compute_metrics(spec.kind, preds.scores, preds.truth, k=cfg.hits_k)


# -------------------------------------------------------------------- train

def _finite(value: float, epoch: int, round_: int) -> float:
    if not math.isfinite(value):
        raise TrainingError(f"non-finite loss at epoch {epoch}, round {round_}")
    return value


def train(graph: MultimodalGraph, config: TrainConfig, eval_every: int = 1) -> TrainResult:
    """Run co-evolution training; returns parameters at the best validation epoch."""
    config.validate()
    model = CoEvolutionModel(graph, config)
    opt = Adam(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    eta = 0.0 if config.mode == "task_agnostic" else config.eta
    select = config.mode != "task_agnostic" and model.spec.kind != "node_clustering"
    trace = EvolutionTrace()
    best = (-math.inf, 0, None, None)    # metric, epoch, anchor seed, state

    for epoch in range(config.epochs):
        anchor_seed = derive_seed(config.seed, "anchors", epoch)
        anchors = model.anchors_for(anchor_seed)
        rec = EpochRecord(epoch, anchor_seed, 0, [], [], [], [])
        prev_aff = latent = None
        for k in range(1, config.t_evo + 1):
            align, task = round_batches(graph, model.spec, config, epoch, k)
            opt.zero_grad()
            try:
                aff, latent = model.round_forward(anchors, k, latent)
                total, l_mod, l_task = model.objective(
                    latent, graph, align, task, derive_seed(config.seed, "task", epoch, k), eta)
            except dc.NonFiniteError as exc:
                raise TrainingError(f"epoch {epoch}, round {k}: {exc}") from exc
            rec.loss_total.append(_finite(total.item(), epoch, k))
            rec.loss_mod.append(l_mod.item())
            rec.loss_task.append(l_task.item())
            total.backward()
            opt.step()
            rec.rounds = k
            if k > 1:
                # a fixed topology (lam == 1) does not change between rounds
                rec.deltas.append(0.0 if aff is None else topology_delta(aff, prev_aff))
                if rec.deltas[-1] <= config.delta:
                    prev_aff = aff
                    break
            prev_aff = aff

        if (epoch + 1) % eval_every == 0 or epoch == config.epochs - 1:
            inferred, _, _ = model.infer(anchors)
            rec.val_metric = validation_metric(model, inferred, graph) if select else None
            if not select:
                best = (0.0, epoch, anchor_seed, model.state())
            elif rec.val_metric > best[0]:
                best = (rec.val_metric, epoch, anchor_seed, model.state())
        trace.epochs.append(rec)
        log.debug("epoch %d rounds %d loss %.4f val %s", epoch, rec.rounds,
                  rec.loss_total[-1], rec.val_metric)

    metric, best_epoch, anchor_seed, state = best
    model.load_state(state)
    result = TrainResult(model, trace, best_epoch, metric if select else None, anchor_seed)
    if config.mode == "task_agnostic":
        result.finetune = finetune_head(model, graph, anchor_seed)
    return result


def finetune_head(model: CoEvolutionModel, graph: MultimodalGraph, anchor_seed: int) -> list[float]:
    """Fit the classification head on frozen embeddings; returns validation accuracies."""
    if model.spec.kind != "node_classification" or model.config.finetune_epochs <= 0:
        return []
    cfg = model.config
    latent, _, _ = model.infer(model.anchors_for(anchor_seed))
    h = Tensor(latent.smoothed.value)
    train_idx = node_pool(graph, "train")
    opt = Adam(model.head.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    history, best = [], (-math.inf, None)
    for _ in range(cfg.finetune_epochs):
        opt.zero_grad()
        classification_loss(model.head, h, graph.labels, train_idx).backward()
        opt.step()
        acc = validation_metric(model, latent, graph)
        history.append(acc)
        if acc > best[0]:
            best = (acc, {p.name: p.value.copy() for p in model.head.parameters()})
    model.load_state(best[1])
    return history


def evaluate(model: CoEvolutionModel, graph: MultimodalGraph, anchor_seed: int,
             split: str = "test") -> MetricSet:
    latent, _, _ = model.infer(model.anchors_for(anchor_seed))
    return evaluate_latent(model, latent, graph, split)


# -------------------------------------------------------------- checkpoints

def save_checkpoint(path, result: TrainResult) -> None:
    """Directory checkpoint written to a temporary sibling, then renamed into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=path.name + ".", dir=path.parent))
    model = result.model
    params = []
    for p in model.all_parameters():
        fname = f"{p.name}.f32"
        value = p.value.reshape(p.shape[0], -1) if p.ndim > 1 else p.value.reshape(-1, 1)
        write_matrix(tmp / fname, value)
        params.append({"name": p.name, "file": fname, "shape": list(p.shape)})
    manifest = {"config": asdict(model.config), "epoch": result.best_epoch,
                "metric": result.best_metric, "anchor_seed": result.anchor_seed,
                "params": params}
    (tmp / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    if path.exists():
        old = path.with_name(path.name + ".old")
        os.replace(path, old)
        os.replace(tmp, path)
        shutil.rmtree(old)
    else:
        os.replace(tmp, path)


def load_checkpoint(path, graph: MultimodalGraph):
    """Model rebuilt for ``graph`` plus the checkpoint manifest."""
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    config = TrainConfig(**manifest["config"])
    model = CoEvolutionModel(graph, config)
    state = {}
    for entry in manifest["params"]:
        state[entry["name"]] = read_matrix(path / entry["file"]).reshape(entry["shape"])
    model.load_state(state)
    return model, manifest

"""Modality evolution: projection, graph smoothing and cross-modal alignment."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Parameter, Tensor
from .rng import make_rng
from .topoevo import DENSE_LIMIT, EvolvedTopology, apply_evolved, dense_operator


class ModalityEncoder:
    """One linear map per modality into a shared latent space."""

    def __init__(self, dims, latent_dim: int, seed: int = 0, dtype=np.float32):
        self.latent_dim = latent_dim
        rng = make_rng(seed, "init", "encoder")
        self.phi = [Parameter((rng.normal(size=(d, latent_dim)) / np.sqrt(d)).astype(dtype),
                              f"phi{m}") for m, d in enumerate(dims)]

    def parameters(self) -> list[Parameter]:
        return list(self.phi)


def project(features, encoder: ModalityEncoder):
    """Per-modality embeddings X_m @ Phi_m and their plain mean."""
    if len(features) != len(encoder.phi):
        raise dc.ShapeError(f"{len(features)} feature matrices for {len(encoder.phi)} projections")
    hs = [dc.matmul(x, phi) for x, phi in zip(features, encoder.phi)]
    fused = hs[0]
    for h in hs[1:]:
        fused = dc.add(fused, h)
    return hs, dc.scale(fused, 1.0 / len(hs))


@dataclass(frozen=True)
class SmoothingConfig:
    alpha: float = 1.0
    steps: int = 10

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.steps < 0:
            raise ValueError("steps must be nonnegative")

    @property
    def contraction(self) -> float:
        return self.alpha / (self.alpha + 1.0)


@dataclass
class LatentState:
    modal: list[Tensor]
    fused: Tensor
    smoothed: Tensor
    round: int = 1


def smooth(fused, topology: EvolvedTopology, cfg: SmoothingConfig) -> Tensor:
    """Truncated series (1/(a+1)) sum_{t<=T} S^t H with S = a/(a+1) Q, by recursion."""
    c = cfg.contraction
    term = dc.as_tensor(fused)
    acc = term
    for _ in range(cfg.steps):
        term = dc.scale(apply_evolved(topology, term), c)
        acc = dc.add(acc, term)
    # divide rather than scale by the reciprocal so T = 0 gives H / (a + 1) exactly
    return dc.div(acc, Tensor(np.asarray(cfg.alpha + 1.0, dtype=acc.dtype)))


def exact_solve(fused: np.ndarray, topology: EvolvedTopology, cfg: SmoothingConfig) -> np.ndarray:
    """(1/(a+1)) (I - a/(a+1) Q)^-1 H by a dense 64-bit solve (test oracle)."""
    h = np.asarray(fused.value if isinstance(fused, Tensor) else fused, dtype=np.float64)
    n = h.shape[0]
    if n > DENSE_LIMIT:
        raise ValueError(f"exact_solve is limited to {DENSE_LIMIT} nodes")
    system = np.eye(n) - cfg.contraction * dense_operator(topology)
    try:
        return np.linalg.solve(system, h) / (cfg.alpha + 1.0)
    except np.linalg.LinAlgError as exc:
        raise RuntimeError("smoothing system is singular; the operator is not a contraction") from exc


@dataclass
class AlignmentConfig:
    tau: float = 0.07
    batch: np.ndarray | None = None

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")


def info_nce_terms(query, target, tau: float) -> Tensor:
    """Sum over rows u of -log softmax_v(cos(q_u, t_v) / tau)[u]."""
    logits = dc.scale(dc.cosine(query, target), 1.0 / tau)
    lsm = dc.log_softmax(logits, axis=-1)
    b = query.shape[0]
    return dc.scale(dc.tsum(dc.getitem(lsm, (np.arange(b), np.arange(b)))), -1.0)


def alignment_loss(latent: LatentState, cfg: AlignmentConfig) -> Tensor:
    """Contrast every modality embedding against every other source.

    Targets are the other modalities and the smoothed fused embedding; only
    the smoothed target is detached. The smoothed embedding is never a query.
    """
    n = latent.fused.shape[0]
    batch = np.arange(n) if cfg.batch is None else np.asarray(cfg.batch, dtype=np.intp)
    if len(batch) == 0:
        raise ValueError("alignment batch is empty")
    queries = [dc.gather_rows(h, batch) for h in latent.modal]
    targets = queries + [dc.gather_rows(dc.stop_gradient(latent.smoothed), batch)]
    total = None
    for m, q in enumerate(queries):
        for t_idx, t in enumerate(targets):
            if t_idx == m:
                continue
            term = info_nce_terms(q, t, cfg.tau)
            total = term if total is None else dc.add(total, term)
    return total

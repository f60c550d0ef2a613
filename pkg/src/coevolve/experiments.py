"""Scaled-down comparative experiments on synthetic SBM multimodal graphs."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .driver import TrainConfig, ablation_mode, evaluate, train
from .magdata import NoiseSpec, SbmMagSpec, generate_sbm_mag, inject_noise

# 4 blocks x 100 nodes, two weakly separated and partly mislabelled modalities
BENCH_GRAPH = SbmMagSpec(blocks=4, nodes_per_block=100, p_in=0.05, p_out=0.01, dims=(32, 32),
                         separation=(0.5, 0.5), noise=(1.0, 1.0), flip_rate=0.2)
BENCH_TRAIN = TrainConfig(epochs=100, latent_dim=32, t_evo=10, batch_size=512)


@dataclass
class RunSummary:
    mode: str
    seed: int
    noise_ratio: float
    accuracy: float
    rounds: list[int] = field(default_factory=list)


def bench_graph(seed: int, noise_ratio: float = 0.0, spec: SbmMagSpec = BENCH_GRAPH):
    graph = generate_sbm_mag(dataclasses.replace(spec, seed=seed))
    if noise_ratio > 0:
        graph = inject_noise(graph, NoiseSpec("add", noise_ratio, seed))
    return graph


def run_once(graph, config: TrainConfig, mode: str, seed: int, noise_ratio: float = 0.0):
    cfg = ablation_mode(dataclasses.replace(config, seed=seed), mode)
    result = train(graph, cfg)
    acc = evaluate(result.model, graph, result.anchor_seed).values["ACC"]
    return RunSummary(mode, seed, noise_ratio, acc, [e.rounds for e in result.trace.epochs])


def robustness(seeds=(0, 1, 2), ratio: float = 0.3, config: TrainConfig = BENCH_TRAIN,
               modes=("full", "only_me")) -> dict:
    """Mean clean accuracy, noisy accuracy and drop per mode."""
    runs = []
    for seed in seeds:
        clean, noisy = bench_graph(seed), bench_graph(seed, ratio)
        for mode in modes:
            runs.append(run_once(clean, config, mode, seed, 0.0))
            runs.append(run_once(noisy, config, mode, seed, ratio))
    out = {"runs": runs}
    for mode in modes:
        c = np.mean([r.accuracy for r in runs if r.mode == mode and r.noise_ratio == 0])
        n = np.mean([r.accuracy for r in runs if r.mode == mode and r.noise_ratio > 0])
        out[mode] = {"clean": float(c), "noisy": float(n), "drop": float(c - n)}
    return out


def ablation(seeds=(0, 1, 2), config: TrainConfig = BENCH_TRAIN,
             modes=("full", "one_shot_te", "only_me")) -> dict:
    """Mean test accuracy per ablation mode on clean graphs."""
    runs = []
    for seed in seeds:
        graph = bench_graph(seed)
        runs.extend(run_once(graph, config, mode, seed) for mode in modes)
    out = {"runs": runs}
    for mode in modes:
        out[mode] = float(np.mean([r.accuracy for r in runs if r.mode == mode]))
    return out

"""Shared fixtures-as-functions for the driver, CLI and acceptance tests."""
import dataclasses

import numpy as np

from coevolve import diffcore as dc
from coevolve.driver import CoEvolutionModel, TrainConfig
from coevolve.magdata import SbmMagSpec, generate_sbm_mag
from coevolve.rng import derive_seed

SMALL = SbmMagSpec(blocks=2, nodes_per_block=10, p_in=0.4, p_out=0.05, dims=(5, 4),
                   separation=(1.0, 1.0), split=(0.5, 0.25, 0.25))


def small_graph(seed=0):
    return generate_sbm_mag(dataclasses.replace(SMALL, seed=seed))


def gradcheck_config(**kw):
    base = dict(epochs=1, lam=0.8, eps=0.1, perspectives=2, anchors=4, latent_dim=6,
                t_smooth=3, t_evo=2, batch_size=20, dtype="float64", seed=0)
    base.update(kw)
    return TrainConfig(**base)


def unrolled_loss(model: CoEvolutionModel, graph, anchor_seed=11):
    """Both rounds' objectives, with the round-1 smoothed output kept live in round 2.

    Training steps on each round's objective, so their sum exercises every
    path the optimizer sees: w and beta through round 1, theta and gamma
    through round 2, and round 1 feeding the round-2 affinity.
    """
    anchors = model.anchors_for(anchor_seed)
    align = np.arange(graph.n_nodes)
    task = np.flatnonzero(graph.splits["train"])
    seed = derive_seed(model.config.seed, "task", 0, 2)

    def loss():
        _, first = model.round_forward(anchors, 1)
        _, second = model.round_forward(anchors, 2, first, detach=False)
        one, _, _ = model.objective(first, graph, align, task, seed, model.config.eta)
        two, _, _ = model.objective(second, graph, align, task, seed, model.config.eta)
        return dc.add(one, two)
    return loss


def full_gradcheck(seed=0, details=None, **kw):
    graph = small_graph(seed)
    model = CoEvolutionModel(graph, gradcheck_config(seed=seed, **kw))
    params = model.all_parameters()
    err = dc.grad_check(unrolled_loss(model, graph), params, step=1e-4, max_coords=24,
                        seed=seed, details=details)
    return err, [p.name for p in params]

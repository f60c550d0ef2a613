import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from coevolve import diffcore as dc
from coevolve.diffcore import Parameter, Tensor
from coevolve.modevo import (AlignmentConfig, LatentState, ModalityEncoder, SmoothingConfig,
                             alignment_loss, exact_solve, project, smooth)
from coevolve.topoevo import EvolvedTopology, affinity_from_matrix, dense_operator
from coevolve.verify import make_instance


def ring(n):
    i = np.arange(n)
    a = sp.csr_matrix((np.full(2 * n, 0.5), (np.r_[i, i], np.r_[(i + 1) % n, (i - 1) % n])),
                      shape=(n, n))
    return a


def test_identity_projection():
    x = np.random.default_rng(0).normal(size=(5, 3))
    enc = ModalityEncoder([3], 3, dtype=np.float64)
    enc.phi[0].value = np.eye(3)
    hs, fused = project([Tensor(x)], enc)
    assert np.array_equal(hs[0].value, x) and np.array_equal(fused.value, x)


def test_opposite_modalities_cancel():
    x = np.random.default_rng(1).normal(size=(4, 2))
    enc = ModalityEncoder([2, 2], 2, dtype=np.float64)
    enc.phi[0].value = np.eye(2)
    enc.phi[1].value = -np.eye(2)
    _, fused = project([Tensor(x), Tensor(x)], enc)
    assert np.array_equal(fused.value, np.zeros((4, 2)))


def test_fused_is_entrywise_mean():
    rng = np.random.default_rng(2)
    xs = [Tensor(rng.normal(size=(5, d))) for d in (3, 4)]
    enc = ModalityEncoder([3, 4], 6, seed=3, dtype=np.float64)
    hs, fused = project(xs, enc)
    assert np.allclose(fused.value, (hs[0].value + hs[1].value) / 2)


def test_tiny_alpha_leaves_features():
    inst = make_instance(n=40, anchors=5, alpha=1e-12, seed=1)
    with dc.no_grad():
        h = smooth(Tensor(inst.fused), inst.topology, inst.cfg).value
    assert np.linalg.norm(h - inst.fused) <= 1e-9 * np.linalg.norm(inst.fused)


@pytest.mark.parametrize("alpha", [0.1, 1.0, 10.0])
def test_zero_steps_is_scaled_identity(alpha):
    inst = make_instance(n=30, anchors=4, alpha=alpha, seed=2)
    with dc.no_grad():
        h = smooth(Tensor(inst.fused), inst.topology, SmoothingConfig(alpha, 0)).value
    assert np.array_equal(h, inst.fused / (alpha + 1))


def test_truncation_within_bound():
    inst = make_instance(n=60, anchors=10, alpha=1.0, lam=0.8, steps=10, seed=3)
    with dc.no_grad():
        h = smooth(Tensor(inst.fused), inst.topology, inst.cfg).value
    exact = exact_solve(inst.fused, inst.topology, inst.cfg)
    c = inst.cfg.contraction
    bound = c ** 11 / (2 * (1 - c)) * np.linalg.norm(inst.fused)
    assert np.linalg.norm(h - exact) <= bound


def test_exact_solve_empty_graph():
    fused = np.random.default_rng(4).normal(size=(3, 2))
    topo = EvolvedTopology(1.0, sp.csr_matrix((3, 3)), None)
    assert np.allclose(exact_solve(fused, topo, SmoothingConfig(1.0)), fused / 2)


def test_exact_solve_identity_operator():
    fused = np.random.default_rng(5).normal(size=(4, 2))
    topo = EvolvedTopology(1.0, sp.eye(4, format="csr"), None)
    assert np.allclose(exact_solve(fused, topo, SmoothingConfig(1.0)), fused)


def test_exact_solve_residual():
    inst = make_instance(n=80, anchors=8, seed=6)
    h = exact_solve(inst.fused, inst.topology, inst.cfg)
    q = dense_operator(inst.topology)
    c = inst.cfg.contraction
    resid = (np.eye(80) - c * q) @ h * (inst.cfg.alpha + 1) - inst.fused
    assert np.linalg.norm(resid) <= 1e-8


@settings(max_examples=20, deadline=None)
@given(st.floats(0.05, 20), st.integers(0, 12), st.integers(0, 1000))
def test_smooth_matches_power_series(alpha, steps, seed):
    rng = np.random.default_rng(seed)
    n = 12
    r = rng.random((n, 3)) + 0.05
    topo = EvolvedTopology(0.7, ring(n), affinity_from_matrix(r))
    x = rng.normal(size=(n, 2))
    cfg = SmoothingConfig(alpha, steps)
    with dc.no_grad():
        h = smooth(Tensor(x), topo, cfg).value
    s = cfg.contraction * dense_operator(topo)
    expected = sum(np.linalg.matrix_power(s, t) @ x for t in range(steps + 1)) / (alpha + 1)
    assert np.allclose(h, expected, rtol=1e-10, atol=1e-12)


def test_smoothing_config_validation():
    with pytest.raises(ValueError):
        SmoothingConfig(alpha=0.0)
    with pytest.raises(ValueError):
        SmoothingConfig(steps=-1)
    assert SmoothingConfig(1.0).contraction == 0.5


def latent(hs, smoothed):
    fused = dc.scale(dc.add(hs[0], hs[1]), 0.5)
    return LatentState(hs, fused, smoothed)


def test_single_node_batch_loss_is_zero():
    rng = np.random.default_rng(7)
    hs = [Tensor(rng.normal(size=(5, 3))) for _ in range(2)]
    loss = alignment_loss(latent(hs, Tensor(rng.normal(size=(5, 3)))),
                          AlignmentConfig(0.07, np.array([2])))
    assert loss.item() == 0.0


def test_identical_orthogonal_rows_closed_form():
    b, tau = 4, 0.5
    h = np.eye(b)
    hs = [Tensor(h), Tensor(h)]
    loss = alignment_loss(latent(hs, Tensor(h)), AlignmentConfig(tau)).item()
    per_term = -np.log(np.exp(1 / tau) / (np.exp(1 / tau) + (b - 1)))
    # 2 queries x 2 targets each, b rows per pair
    assert loss == pytest.approx(4 * b * per_term)
    assert per_term > 0


def test_alignment_gradient_and_blocked_smoothed():
    rng = np.random.default_rng(8)
    a = Parameter(rng.normal(size=(6, 3)), "a")
    b = Parameter(rng.normal(size=(6, 3)), "b")
    s = Parameter(rng.normal(size=(6, 3)), "s")

    def loss():
        return alignment_loss(latent([a, b], dc.mul(s, s)), AlignmentConfig(0.3, np.arange(1, 6)))
    assert dc.grad_check(loss, [a, b, s]) <= 1e-6
    for p in (a, b, s):
        p.zero_grad()
    loss().backward()
    assert s.grad is None or np.array_equal(s.grad, np.zeros_like(s.value))
    assert np.abs(a.grad).sum() > 0


def test_alignment_rejects_empty_batch():
    h = Tensor(np.ones((3, 2)))
    with pytest.raises(ValueError):
        alignment_loss(latent([h, h], h), AlignmentConfig(batch=np.array([], dtype=int)))

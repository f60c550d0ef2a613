import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from coevolve import diffcore as dc
from coevolve.diffcore import Tensor
from coevolve.topoevo import (AnchorSet, EvolvedTopology, SimilarityLearner, affinity_from_matrix,
                              apply_evolved, compute_affinity, default_anchor_count,
                              dense_operator, dense_recover, sample_anchors, topology_delta)

import oracles


def random_affinity(rng, n, m, density=0.5):
    r = rng.random((n, m)) * (rng.random((n, m)) < density)
    r[np.arange(n), rng.integers(0, m, n)] += 0.1    # no empty rows
    return r


def learner_with_unit_weights(dims, k=1, eps=0.0):
    learner = SimilarityLearner(dims, 4, perspectives=k, eps=eps, dtype=np.float64)
    for w in learner.w:
        w.value[:] = 1.0
    return learner


def test_anchor_sampling_full_and_deterministic():
    assert np.array_equal(sample_anchors(7, 7, 123).indices, np.arange(7))
    assert sample_anchors(50, 5, 9) == sample_anchors(50, 5, 9)
    assert default_anchor_count(400) == 40
    assert default_anchor_count(5) == 1
    with pytest.raises(ValueError):
        sample_anchors(5, 6, 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 60), st.integers(0, 2**32))
def test_anchor_sampling_distinct_sorted(n, seed):
    size = default_anchor_count(n)
    idx = sample_anchors(n, size, seed).indices
    assert len(np.unique(idx)) == size and np.all(np.diff(idx) > 0)


def test_identical_vectors_have_unit_similarity():
    x = np.array([[1.0, 2.0], [1.0, 2.0]])
    aff = compute_affinity([Tensor(x), Tensor(x)], learner_with_unit_weights([2]),
                           AnchorSet(np.array([1]), 0))
    assert np.allclose(aff.R.value, 1.0)


def test_orthogonal_pruned_unless_row_max():
    x = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.1]])
    learner = learner_with_unit_weights([2], eps=0.5)
    aff = compute_affinity([Tensor(x), Tensor(x)], learner, AnchorSet(np.array([0, 1]), 0))
    r = aff.full()
    assert r[0, 1] == 0.0 and r[1, 0] == 0.0
    assert r[0, 0] == pytest.approx(1.0)


def test_orthogonal_row_keeps_max_at_floor():
    x = np.array([[1.0, 0.0], [0.0, 1.0]])
    learner = learner_with_unit_weights([2], eps=0.5)
    aff = compute_affinity([Tensor(x), Tensor(x)], learner, AnchorSet(np.array([0]), 0))
    # node 1 is orthogonal to the only anchor; its row max survives at the floor
    assert aff.full()[1, 0] > 0


def test_equal_logits_average_sources():
    rng = np.random.default_rng(0)
    xs = [rng.normal(size=(6, 3)), rng.normal(size=(6, 3))]
    fused = (xs[0] + xs[1]) / 2
    learner = learner_with_unit_weights([3, 3])
    anchors = AnchorSet(np.array([0, 4]), 0)
    r = compute_affinity([Tensor(x) for x in xs + [fused]], learner, anchors).full()

    def cos(x):
        xn = x / np.linalg.norm(x, axis=1, keepdims=True)
        return xn @ xn[anchors.indices].T
    expected = (cos(xs[0]) + cos(xs[1]) + cos(fused)) / 3
    # no entries pruned at eps=0 except negatives, which the threshold zeros
    keep = expected >= 0
    assert np.allclose(r[keep], expected[keep])


def test_source_count_and_dim_checks():
    learner = learner_with_unit_weights([3])
    anchors = AnchorSet(np.array([0]), 0)
    with pytest.raises(dc.ShapeError):
        compute_affinity([Tensor(np.ones((2, 3)))], learner, anchors)
    with pytest.raises(dc.ShapeError):
        compute_affinity([Tensor(np.ones((2, 2)))] * 2, learner, anchors)


def test_lambda_one_is_base_propagation():
    rng = np.random.default_rng(1)
    base = sp.random(8, 8, density=0.3, random_state=1, format="csr")
    x = rng.normal(size=(8, 3))
    aff = affinity_from_matrix(random_affinity(rng, 8, 3))
    with dc.no_grad():
        out = apply_evolved(EvolvedTopology(1.0, base, aff), Tensor(x)).value
        bare = apply_evolved(EvolvedTopology(1.0, base, None), Tensor(x)).value
    assert np.allclose(out, base @ x)
    assert np.array_equal(bare, base @ x)


def test_matching_affinity_is_permutation_like():
    perm = np.random.default_rng(2).permutation(6)
    r = np.zeros((6, 6))
    r[np.arange(6), perm] = 0.7
    a = dense_recover(affinity_from_matrix(r))
    assert np.allclose(a.sum(axis=1), 1.0)
    assert np.allclose(a, np.eye(6))


def test_identity_affinity_recovers_identity():
    assert np.array_equal(dense_recover(affinity_from_matrix(np.eye(5))), np.eye(5))


def test_factorized_equals_dense_random():
    rng = np.random.default_rng(3)
    n, m = 50, 7
    aff = affinity_from_matrix(random_affinity(rng, n, m))
    base = sp.random(n, n, density=0.1, random_state=3, format="csr")
    base = base + base.T
    x = rng.normal(size=(n, 4))
    for sym in (False, True):
        topo = EvolvedTopology(0.8, base, aff, sym)
        with dc.no_grad():
            fact = apply_evolved(topo, Tensor(x)).value
        dense = dense_operator(topo) @ x
        assert np.linalg.norm(fact - dense) / np.linalg.norm(dense) <= 1e-10


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 30), st.integers(1, 8), st.integers(0, 2**32))
def test_recovered_rows_sum_to_one(n, m, seed):
    rng = np.random.default_rng(seed)
    r = random_affinity(rng, n, m)
    a = dense_recover(affinity_from_matrix(r))
    assert np.allclose(a.sum(axis=1), 1.0, atol=1e-12)
    assert np.allclose(a, oracles.recover(r))
    radius = np.abs(np.linalg.eigvals(a)).max()
    assert radius <= 1 + 1e-9


def test_delta_cases():
    rng = np.random.default_rng(4)
    r = random_affinity(rng, 10, 4)
    a = affinity_from_matrix(r)
    assert topology_delta(a, a) == 0.0
    zero = affinity_from_matrix(r)
    zero.R = Tensor(np.zeros_like(zero.R.value))
    assert topology_delta(a, zero) == pytest.approx(1.0)
    doubled = affinity_from_matrix(2 * r)
    direct = np.sum((2 * r - r) ** 2) / np.sum((2 * r) ** 2)
    assert topology_delta(doubled, a) == pytest.approx(direct)
    assert direct == pytest.approx(0.25)


def test_delta_aligns_dropped_columns():
    r1 = np.array([[1.0, 0.0, 0.5], [0.2, 0.0, 1.0]])
    r2 = np.array([[1.0, 0.3, 0.5], [0.2, 0.1, 1.0]])
    a1, a2 = affinity_from_matrix(r1), affinity_from_matrix(r2)
    assert a1.R.shape[1] == 2
    assert topology_delta(a2, a1) == pytest.approx(np.sum((r2 - r1) ** 2) / np.sum(r2 ** 2))


def test_delta_rejects_different_anchors():
    r = np.ones((3, 2))
    with pytest.raises(ValueError):
        topology_delta(affinity_from_matrix(r, AnchorSet(np.array([0, 1]), 0)),
                       affinity_from_matrix(r, AnchorSet(np.array([0, 2]), 0)))


def test_affinity_validation():
    with pytest.raises(ValueError):
        affinity_from_matrix(np.array([[-1.0, 1.0]]))
    with pytest.raises(ValueError):
        affinity_from_matrix(np.array([[0.0, 0.0], [1.0, 0.0]]))
    with pytest.raises(ValueError):
        EvolvedTopology(0.5, sp.eye(2, format="csr"), None)


def test_affinity_gradient_through_weights():
    rng = np.random.default_rng(5)
    xs = [rng.normal(size=(8, 3)), rng.normal(size=(8, 2))]
    fused = np.hstack([xs[1], np.zeros((8, 1))])
    fused = (xs[0] + fused) / 2
    learner = SimilarityLearner([3, 2], 4, perspectives=2, eps=0.2, seed=1, dtype=np.float64)
    learner.beta.value[:] = rng.normal(size=3)
    anchors = sample_anchors(8, 3, 0)
    w = rng.normal(size=(8, 3))
    sources = [Tensor(xs[0]), Tensor(xs[1]), Tensor(fused)]

    def loss():
        aff = compute_affinity(sources, learner, anchors)
        return dc.tsum(dc.mul(dc.getitem(aff.R, (slice(None), slice(0, 1))), Tensor(w[:, :1])))
    assert dc.grad_check(loss, learner.w + [learner.beta]) <= 1e-6


def test_evolved_gradient():
    rng = np.random.default_rng(6)
    r = dc.Parameter(random_affinity(rng, 9, 3, density=1.0), "r")
    x = dc.Parameter(rng.normal(size=(9, 2)), "x")
    base = sp.eye(9, format="csr")
    w = rng.normal(size=(9, 2))

    def loss():
        from coevolve.topoevo import AffinityState
        aff = AffinityState(r, AnchorSet(np.arange(3), 0), np.ones(3, bool))
        return dc.tsum(dc.mul(apply_evolved(EvolvedTopology(0.6, base, aff, True), x), Tensor(w)))
    assert dc.grad_check(loss, [r, x]) <= 1e-6

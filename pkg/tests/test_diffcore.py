import zlib

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from coevolve import diffcore as dc
from coevolve.diffcore import Adam, Parameter, Tensor, grad_check


def param(rng, *shape, name="p", offset=0.0):
    return Parameter(rng.normal(size=shape) + offset, name)


def test_quadratic_loss_is_exact():
    p = Parameter(np.array([0.3, -1.2, 2.0]), "p")
    err = grad_check(lambda: dc.tsum(dc.mul(p, p)), [p])
    assert err <= 1e-7


@pytest.mark.parametrize("name,build", [
    ("add", lambda a, b: dc.add(a, b)),
    ("sub", lambda a, b: dc.sub(a, b)),
    ("mul", lambda a, b: dc.mul(a, b)),
    ("div", lambda a, b: dc.div(a, dc.add(dc.mul(b, b), Tensor(1.0)))),
    ("matmul", lambda a, b: dc.matmul(a, dc.transpose(b))),
    ("exp", lambda a, b: dc.exp(dc.scale(a, 0.5))),
    ("log", lambda a, b: dc.log(dc.add(dc.mul(a, a), Tensor(0.5)))),
    ("softplus", lambda a, b: dc.softplus(a)),
    ("sigmoid", lambda a, b: dc.sigmoid(b)),
    ("row_normalize", lambda a, b: dc.row_normalize(a)),
    ("cosine", lambda a, b: dc.cosine(a, b)),
    ("rowwise_cosine", lambda a, b: dc.rowwise_cosine(a, b)),
    ("log_softmax", lambda a, b: dc.log_softmax(a)),
    ("softmax", lambda a, b: dc.softmax(b, axis=0)),
    ("mean", lambda a, b: dc.mean(a, axis=1, keepdims=True)),
    ("reshape", lambda a, b: dc.reshape(a, (-1,))),
    ("getitem", lambda a, b: dc.getitem(a, (np.array([0, 2, 2]), np.array([1, 0, 1])))),
    ("gather_rows", lambda a, b: dc.gather_rows(b, np.array([3, 0, 3]))),
])
def test_primitive_gradients(name, build):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    a, b = param(rng, 4, 3, name="a"), param(rng, 4, 3, name="b")
    w = rng.normal(size=build(Tensor(a.value), Tensor(b.value)).shape)
    err = grad_check(lambda: dc.tsum(dc.mul(build(a, b), Tensor(w))), [a, b])
    assert err <= 1e-6, name


def test_spmm_gradient_uses_transpose():
    rng = np.random.default_rng(3)
    m = sp.random(5, 4, density=0.5, random_state=3, format="csr")
    x = param(rng, 4, 2)
    w = rng.normal(size=(5, 2))
    assert grad_check(lambda: dc.tsum(dc.mul(dc.spmm(m, x), Tensor(w))), [x]) <= 1e-7


def test_batched_matmul_broadcast_gradient():
    rng = np.random.default_rng(4)
    a, b = param(rng, 2, 3, 4, name="a"), param(rng, 4, 5, name="b")
    w = rng.normal(size=(2, 3, 5))
    assert grad_check(lambda: dc.tsum(dc.mul(dc.matmul(a, b), Tensor(w))), [a, b]) <= 1e-6


def test_cosine_self_similarity_is_stationary():
    x = Parameter(np.array([[1.0, 2.0, -0.5]]), "x")
    c = dc.rowwise_cosine(x, x)
    assert np.isclose(c.item(), 1.0)
    c.backward()
    assert np.allclose(x.grad, 0.0, atol=1e-12)


@given(st.integers(2, 9), st.floats(-5, 5))
def test_equal_logits_softmax_uniform(k, c):
    x = Parameter(np.full(k, c), "x")
    s = dc.softmax(x)
    assert np.allclose(s.value, 1.0 / k)
    # jacobian rows sum to zero: d(sum s)/dx = 0
    dc.tsum(s).backward()
    assert np.allclose(x.grad, 0.0, atol=1e-12)


def test_threshold_straight_through():
    x = Parameter(np.array([[0.6, 0.4]]), "x")
    out = dc.threshold(x, 0.5)
    assert np.array_equal(out.value, [[0.6, 0.0]])
    dc.backward(out, np.array([[3.0, 7.0]]))
    assert np.array_equal(x.grad, [[3.0, 0.0]])


def test_threshold_keeps_row_max_and_lifts_to_floor():
    x = Tensor(np.array([[0.1, 0.2], [-0.3, -0.1]]))
    out = dc.threshold(x, 0.5, floor=1e-6)
    assert np.array_equal(out.value, [[0.0, 0.2], [0.0, 1e-6]])


def test_stop_gradient_excluded_from_check():
    p = Parameter(np.array([1.0, -2.0]), "p")
    q = Parameter(np.array([0.5, 0.5]), "q")
    # blocked path through p would give a nonzero numeric derivative without freezing
    loss = lambda: dc.tsum(dc.mul(dc.stop_gradient(dc.mul(p, p)), q))
    details = {}
    assert grad_check(loss, [p, q], details=details) <= 1e-8
    p.zero_grad()
    loss().backward()
    assert np.array_equal(p.grad if p.grad is not None else np.zeros(2), np.zeros(2))


def test_grad_check_rejects_float32():
    p = Parameter(np.ones(2, dtype=np.float32), "p")
    with pytest.raises(TypeError):
        grad_check(lambda: dc.tsum(p), [p])


def test_grad_check_detects_wrong_rule():
    p = Parameter(np.array([0.7, 1.3]), "p")

    def bad():
        out = dc.mul(p, p)
        return dc.tsum(Tensor(out.value, parents=(p,), backward=lambda g: (g * 3.0,),
                              op="bad", requires_grad=True))
    assert grad_check(bad, [p]) > 0.1


def test_shape_error_and_nonfinite():
    with pytest.raises(dc.ShapeError):
        dc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(dc.NonFiniteError) as info:
        dc.log(Tensor(np.array([0.0])))
    assert info.value.op == "log"


def test_shared_subexpression_accumulates():
    p = Parameter(np.array([2.0]), "p")
    y = dc.mul(p, p)
    dc.tsum(dc.add(y, y)).backward()
    assert np.allclose(p.grad, [8.0])


def test_no_grad_records_nothing():
    p = Parameter(np.array([1.0]), "p")
    with dc.no_grad():
        y = dc.mul(p, p)
    assert not y.requires_grad and y._parents == ()


def test_adam_minimizes_quadratic_and_skips_unused():
    p = Parameter(np.array([3.0, -2.0]), "p")
    unused = Parameter(np.array([1.0]), "u")
    opt = Adam([p, unused], lr=0.1, weight_decay=0.0)
    for _ in range(300):
        opt.zero_grad()
        dc.tsum(dc.mul(p, p)).backward()
        opt.step()
    assert np.linalg.norm(p.value) < 1e-2
    assert unused.value[0] == 1.0


def test_adam_first_step_moves_by_lr():
    # bias-corrected first step is lr * sign(g)
    p = Parameter(np.array([1.0, -1.0]), "p")
    opt = Adam([p], lr=5e-3, weight_decay=0.0)
    opt.zero_grad()
    dc.tsum(dc.mul(p, p)).backward()
    opt.step()
    assert np.allclose(p.value, [1 - 5e-3, -1 + 5e-3], atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-3, 3)))
def test_log_softmax_normalizes(x):
    out = dc.log_softmax(Tensor(x)).value
    assert np.allclose(np.exp(out).sum(axis=-1), 1.0)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-3, 3)))
def test_row_normalize_unit_or_zero(x):
    out = dc.row_normalize(Tensor(x)).value
    norms = np.linalg.norm(out, axis=1)
    nonzero = np.linalg.norm(x, axis=1) > 0
    assert np.allclose(norms[nonzero], 1.0) and np.allclose(norms[~nonzero], 0.0)

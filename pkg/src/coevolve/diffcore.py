"""A small reverse-mode differentiation facility over numpy arrays.

Only the operations the co-evolution pipeline needs are provided. Each
primitive computes its value eagerly and, when any input requires a gradient,
records a backward rule. :func:`build_tape` orders the recorded nodes so that
``backward`` visits each exactly once in reverse topological order.

Includes an Adam optimizer and a central-difference gradient checker.
"""
from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp


class ShapeError(ValueError):
    """Operands of a primitive have incompatible shapes."""


class NonFiniteError(FloatingPointError):
    """A primitive produced a NaN or infinity."""

    def __init__(self, op: str):
        super().__init__(f"non-finite value produced by primitive '{op}'")
        self.op = op


_GRAD_ENABLED = contextvars.ContextVar("grad_enabled", default=True)
_SG_FREEZE = contextvars.ContextVar("sg_freeze", default=None)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording backward rules."""
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


class Tensor:
    __array_priority__ = 100

    def __init__(self, value, requires_grad: bool = False, parents: tuple = (),
                 backward: Callable | None = None, op: str = "leaf"):
        self.value = np.asarray(value)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = parents
        self._backward = backward
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def T(self):
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value.item())

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def backward(self, grad=None):
        backward(self, grad)


class Parameter(Tensor):
    """A named trainable leaf tensor with a gradient accumulator."""

    def __init__(self, value, name: str = "", requires_grad: bool = True):
        super().__init__(np.array(value, copy=True), requires_grad=requires_grad)
        self.name = name

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(value, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    value = np.asarray(value)
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(op)
    needs = _GRAD_ENABLED.get() and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(value, op=op)
    return Tensor(value, requires_grad=True, parents=tuple(parents), backward=backward, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _broadcast_check(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)
    return _make(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)
    return _make(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    """Hadamard product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a, b)
    return _make(a.value * b.value, (a, b),
                 lambda g: (_unbroadcast(g * b.value, a.shape),
                            _unbroadcast(g * a.value, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("div", a, b)
    out = a.value / b.value

    def bw(g):
        return (_unbroadcast(g / b.value, a.shape),
                _unbroadcast(-g * out / b.value, b.shape))
    return _make(out, (a, b), bw, "div")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.value * c, (a,), lambda g: (g * c,), "scale")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.value)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.value)
    return _make(out, (a,), lambda g: (g / a.value,), "log")


def softplus(a) -> Tensor:
    """log(1 + exp(a)), evaluated stably."""
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.value)
    sig = np.exp(a.value - out)
    return _make(out, (a,), lambda g: (g * sig,), "softplus")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(-np.logaddexp(0.0, -a.value))
    return _make(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def threshold(a, eps: float, keep_row_max: bool = True, floor: float = 0.0) -> Tensor:
    """Zero entries below ``eps``.

    With ``keep_row_max`` the largest entry of every row (last axis, lowest
    index on ties) survives regardless of ``eps``. Surviving entries that are
    below ``floor`` are lifted to ``floor``. The backward rule is the identity
    on surviving entries that were not lifted and zero elsewhere.
    """
    a = as_tensor(a)
    x = a.value
    keep = x >= eps
    if keep_row_max and x.shape[-1] > 0:
        top = np.argmax(x, axis=-1)
        np.put_along_axis(keep, top[..., None], True, axis=-1)
    lifted = keep & (x < floor)
    out = np.where(keep, x, 0.0).astype(x.dtype, copy=False)
    if lifted.any():
        out = np.where(lifted, floor, out).astype(x.dtype, copy=False)
    passthrough = keep & ~lifted
    return _make(out, (a,), lambda g: (np.where(passthrough, g, 0.0),), "threshold")


def stop_gradient(a) -> Tensor:
    """Pass the value through and block gradient flow.

    Inside :func:`grad_check` the value is frozen at its unperturbed state so
    that finite differences see the same blocked path the analytic gradient
    sees.
    """
    a = as_tensor(a)
    frozen = _SG_FREEZE.get()
    value = a.value
    if frozen is not None:
        value = frozen.visit(value)
    return Tensor(np.array(value, copy=True), op="stop_gradient")


# ------------------------------------------------------------------- shapes

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    return _make(np.swapaxes(a.value, -1, -2), (a,),
                 lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def getitem(a, idx) -> Tensor:
    """Indexing, including gathering rows by an integer index array."""
    a = as_tensor(a)

    def bw(g):
        out = np.zeros(a.shape, dtype=g.dtype)
        np.add.at(out, idx, g)
        return (out,)
    return _make(a.value[idx], (a,), bw, "getitem")


def gather_rows(a, index) -> Tensor:
    return getitem(a, np.asarray(index, dtype=np.intp))


# --------------------------------------------------------------- reductions

def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _make(out, (a,), bw, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    n = a.value.size if axis is None else np.prod([a.shape[x] for x in np.atleast_1d(axis)])
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# ------------------------------------------------------------------ linear

def matmul(a, b) -> Tensor:
    """Matrix product; leading axes broadcast as in ``np.matmul``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    out = a.value @ b.value

    def bw(g):
        ga = g @ np.swapaxes(b.value, -1, -2)
        gb = np.swapaxes(a.value, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    return _make(out, (a, b), bw, "matmul")


def spmm(m: sp.spmatrix, x) -> Tensor:
    """Constant sparse matrix times a dense tensor."""
    x = as_tensor(x)
    if m.shape[1] != x.shape[0]:
        raise ShapeError(f"spmm: {m.shape} @ {x.shape}")
    out = np.asarray(m @ x.value, dtype=x.dtype)
    mt = m.T.tocsr()
    return _make(out, (x,), lambda g: (np.asarray(mt @ g, dtype=g.dtype),), "spmm")


# --------------------------------------------------------------- composites

def row_normalize(a, axis: int = -1) -> Tensor:
    """L2-normalize along ``axis``; all-zero rows map to zero rows."""
    a = as_tensor(a)
    x = a.value
    norm = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    safe = np.where(norm > 0, norm, 1.0)
    y = np.where(norm > 0, x / safe, 0.0).astype(x.dtype, copy=False)

    def bw(g):
        proj = (g * y).sum(axis=axis, keepdims=True)
        return (np.where(norm > 0, (g - y * proj) / safe, 0.0),)
    return _make(y, (a,), bw, "row_normalize")


def cosine(a, b) -> Tensor:
    """Cosine similarity between every row of ``a`` and every row of ``b``."""
    return matmul(row_normalize(a), transpose(row_normalize(b)))


def rowwise_cosine(a, b) -> Tensor:
    """Cosine similarity between matching rows of ``a`` and ``b``."""
    return tsum(mul(row_normalize(a), row_normalize(b)), axis=-1)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    x = a.value
    shifted = x - x.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    soft = np.exp(out)
    return _make(out, (a,), lambda g: (g - soft * g.sum(axis=axis, keepdims=True),),
                 "log_softmax")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    x = a.value
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)
    return _make(out, (a,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),),
                 "softmax")


# ----------------------------------------------------------------- backward

def build_tape(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that require grad, in topological order."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor, grad=None) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every trainable leaf."""
    if not root.requires_grad:
        return
    if grad is None:
        if root.value.size != 1:
            raise ShapeError("backward of a non-scalar needs an explicit gradient")
        grad = np.ones_like(root.value)
    grads = {id(root): np.asarray(grad, dtype=root.dtype)}
    for node in reversed(build_tape(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype)
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------- optimizer

class Adam:
    """Adam with L2 weight decay folded into the gradient."""

    def __init__(self, params: Iterable[Parameter], lr: float = 5e-3,
                 weight_decay: float = 1e-5, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.t = 0
        self._m = {id(p): np.zeros_like(p.value) for p in self.params}
        self._v = {id(p): np.zeros_like(p.value) for p in self.params}

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        self.t += 1
        b1, b2 = self.betas
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p in self.params:
            # parameters untouched by the last forward pass are left alone
            if p.grad is None or not p.requires_grad:
                continue
            g = p.grad + self.weight_decay * p.value
            m = self._m[id(p)]
            v = self._v[id(p)]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.value = (p.value - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(
                p.value.dtype, copy=False)


# ---------------------------------------------------------- gradient check

@dataclass
class _Freezer:
    values: list = field(default_factory=list)
    replay: bool = False
    cursor: int = 0

    def visit(self, value):
        if not self.replay:
            self.values.append(np.array(value, copy=True))
            return value
        out = self.values[self.cursor]
        self.cursor += 1
        return out


def grad_check(loss_fn: Callable[[], Tensor], params: Sequence[Parameter],
               step: float = 1e-4, max_coords: int = 64, seed: int = 0,
               details: dict | None = None) -> float:
    """Max relative error between analytic and central-difference gradients.

    Up to ``max_coords`` coordinates per parameter are sampled. Values passing
    through :func:`stop_gradient` are frozen at their unperturbed state while
    differencing, so only the unblocked path is compared.
    """
    params = [p for p in params if p.requires_grad]
    for p in params:
        if p.dtype != np.float64:
            raise TypeError(f"grad_check needs float64 parameters; {p.name} is {p.dtype}")
    freezer = _Freezer()
    token = _SG_FREEZE.set(freezer)
    try:
        loss = loss_fn()
        if not np.isfinite(loss.value).all():
            raise NonFiniteError("loss")
        for p in params:
            p.zero_grad()
        backward(loss)
        analytic = {id(p): (np.zeros_like(p.value) if p.grad is None else p.grad.copy())
                    for p in params}
        freezer.replay = True

        def evaluate():
            freezer.cursor = 0
            with no_grad():
                val = loss_fn().value
            if not np.isfinite(val).all():
                raise NonFiniteError("loss")
            return float(val)

        rng = np.random.default_rng(seed)
        worst = 0.0
        for p in params:
            flat = p.value.reshape(-1)
            coords = np.arange(flat.size)
            if flat.size > max_coords:
                coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            errs = []
            for c in coords:
                orig = flat[c]
                flat[c] = orig + step
                up = evaluate()
                flat[c] = orig - step
                down = evaluate()
                flat[c] = orig
                num = (up - down) / (2 * step)
                ana = analytic[id(p)].reshape(-1)[c]
                errs.append(abs(ana - num) / max(1e-8, abs(ana) + abs(num)))
            if details is not None:
                details[p.name] = max(errs) if errs else 0.0
            worst = max(worst, max(errs) if errs else 0.0)
        return worst
    finally:
        _SG_FREEZE.reset(token)

"""A small reverse-mode autodiff engine over float64 numpy arrays.

Only the operations needed by the ponder model and its loss are provided.
Each op records its parents and a closure mapping the output gradient to the
parents' gradients; :func:`backward` walks the graph once in a fixed
topological order, so gradient accumulation is deterministic.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64

_grad_enabled = True
_op_counts = {"forward": 0, "backward": 0}


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block; ops return plain leaf tensors."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def count_ops():
    """Yield a dict that accumulates forward/backward op counts inside the block."""
    start = dict(_op_counts)
    counts = {"forward": 0, "backward": 0}
    try:
        yield counts
    finally:
        for k in counts:
            counts[k] = _op_counts[k] - start[k]


class RngStream:
    """Seeded Philox stream; child streams are derived from integer keys."""

    def __init__(self, seed: int, *path: int):
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, *self.path])
        self.generator = np.random.Generator(np.random.Philox(ss))

    def child(self, *path: int) -> "RngStream":
        return RngStream(self.seed, *self.path, *path)

    def random(self, size=None):
        return self.generator.random(size)

    def normal(self, scale=1.0, size=None):
        return self.generator.normal(0.0, scale, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size)

    def permutation(self, n):
        return self.generator.permutation(n)

    def choice(self, a, size=None, replace=True, p=None):
        return self.generator.choice(a, size=size, replace=replace, p=p)

    def bernoulli(self, p) -> bool:
        return bool(self.generator.random() < p)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, path={self.path})"


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "name", "op", "_parents", "_backward")

    def __init__(self, value, requires_grad=False, name=None, _parents=(), _backward=None, op="leaf"):
        self.value = np.asarray(value, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self.op = op
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def item(self) -> float:
        return float(self.value)

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.value.shape}, op={self.op}{label})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by constants")
        return mul(self, 1.0 / np.asarray(other, dtype=DTYPE))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def custom_op(value, parents: Sequence[Tensor], backward_fn: Callable, op: str = "custom") -> Tensor:
    """Create a graph node from a value and a rule ``g -> grads of parents``."""
    _op_counts["forward"] += 1
    if not _grad_enabled or not any(p.requires_grad for p in parents):
        return Tensor(value, op=op)
    return Tensor(value, requires_grad=True, _parents=tuple(parents), _backward=backward_fn, op=op)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a, b, opname):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{opname}: incompatible shapes {a.shape} and {b.shape}") from None


# elementwise -----------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "add")
    return custom_op(
        a.value + b.value, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def neg(a) -> Tensor:
    return custom_op(-a.value, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "mul")
    av, bv = a.value, b.value
    return custom_op(
        av * bv, (a, b),
        lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)), "mul")


def tanh(a) -> Tensor:
    out = np.tanh(a.value)
    return custom_op(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a) -> Tensor:
    out = _sigmoid(a.value)
    return custom_op(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def _sigmoid(x):
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def log_sigmoid(a) -> Tensor:
    """``log(sigmoid(a))`` without the underflow of composing the two."""
    x = a.value
    out = -np.logaddexp(0.0, -x)
    s = _sigmoid(x)
    return custom_op(out, (a,), lambda g: (g * (1.0 - s),), "log_sigmoid")


def relu(a) -> Tensor:
    mask = a.value > 0
    return custom_op(a.value * mask, (a,), lambda g: (g * mask,), "relu")


def exp(a) -> Tensor:
    out = np.exp(a.value)
    return custom_op(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    x = a.value
    return custom_op(np.log(x), (a,), lambda g: (g / x,), "log")


# reductions and shape ops ----------------------------------------------------

def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return custom_op(a.value.sum(axis=axis, keepdims=keepdims), (a,), back, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    count = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    orig = a.shape
    return custom_op(a.value.reshape(shape), (a,), lambda g: (g.reshape(orig),), "reshape")


def transpose(a, axes) -> Tensor:
    inverse = np.argsort(axes)
    return custom_op(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def index(a, key) -> Tensor:
    """Basic (non-fancy) indexing."""
    shape = a.shape

    def back(g):
        out = np.zeros(shape, dtype=DTYPE)
        out[key] = g
        return (out,)

    return custom_op(a.value[key], (a,), back, "index")


def concat(tensors: Sequence[Tensor], axis=-1) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
                s != r for i, (s, r) in enumerate(zip(t.shape, tensors[0].shape)) if i != ax):
            raise ValueError(f"concat: incompatible shapes {tensors[0].shape} and {t.shape} on axis {axis}")
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return custom_op(
        np.concatenate([t.value for t in tensors], axis=ax), tuple(tensors),
        lambda g: tuple(np.split(g, splits, axis=ax)), "concat")


# linear algebra --------------------------------------------------------------

_NARROW = 16


def matmul(a, b) -> Tensor:
    """``a @ b`` for ``(..., m, k) @ (k, n)`` or equal-batch ``(..., m, k) @ (..., k, n)``."""
    a, b = _lift(a), _lift(b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {av.shape} and {bv.shape}")
    if bv.ndim == 2:
        a2 = av.reshape(-1, av.shape[-1])
        # BLAS picks kernels by shape, and a lone row or a narrow output can
        # round differently from the same row inside a larger batch.  Keep
        # every row's result independent of how many rows come with it.
        if bv.shape[1] < _NARROW:
            out = np.einsum("ij,jk->ik", a2, bv)
        elif a2.shape[0] == 1:
            out = (np.vstack([a2, a2]) @ bv)[:1]
        else:
            out = a2 @ bv
        out = out.reshape(*av.shape[:-1], bv.shape[-1])

        def back(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ bv.T).reshape(av.shape), a2.T @ g2

        return custom_op(out, (a, b), back, "matmul")
    if av.shape[:-2] != bv.shape[:-2]:
        raise ValueError(f"matmul: batch shapes differ, {av.shape} and {bv.shape}")
    return custom_op(
        av @ bv, (a, b),
        lambda g: (g @ np.swapaxes(bv, -1, -2), np.swapaxes(av, -1, -2) @ g), "matmul")


def softmax(a, axis=-1) -> Tensor:
    x = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(x)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return custom_op(out, (a,), back, "softmax")


def layer_norm(x, gamma, beta, eps=1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    xv = x.value
    mu = xv.mean(axis=-1, keepdims=True)
    xc = xv - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gv = gamma.value
    d = xv.shape[-1]

    def back(g):
        gx = g * gv
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(xv.ndim - 1))
        return dx, (g * xhat).sum(axis=red), g.sum(axis=red)

    if gv.shape != (d,) or beta.shape != (d,):
        raise ValueError(f"layer_norm: gain/bias shapes {gv.shape}, {beta.shape} do not match width {d}")
    return custom_op(xhat * gv + beta.value, (x, gamma, beta), back, "layer_norm")


def embedding_lookup(table, ids) -> Tensor:
    ids = np.asarray(ids)
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise ValueError(f"embedding_lookup: ids must lie in [0, {vocab}), got range [{ids.min()}, {ids.max()}]")

    def back(g):
        out = np.zeros(table.shape, dtype=DTYPE)
        np.add.at(out, ids, g)
        return (out,)

    return custom_op(table.value[ids], (table,), back, "embedding")


def dropout(x, rate: float, rng: RngStream | None, training: bool) -> Tensor:
    """Inverted dropout; the identity when not training or when ``rate == 0``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate!r}")
    if not training or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return custom_op(x.value * keep, (x,), lambda g: (g * keep,), "dropout")


def cross_entropy_with_logits(logits, targets) -> Tensor:
    """Per-row negative log-likelihood of integer ``targets`` under ``softmax(logits)``."""
    z = logits.value
    targets = np.asarray(targets)
    if targets.shape != z.shape[:-1]:
        raise ValueError(f"cross_entropy: logits {z.shape} do not match targets {targets.shape}")
    shifted = z - z.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logsum
    nll = -np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]

    def back(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, targets[..., None],
                          np.take_along_axis(grad, targets[..., None], axis=-1) - 1.0, axis=-1)
        return (grad * g[..., None],)

    return custom_op(nll, (logits,), back, "cross_entropy")


# backward --------------------------------------------------------------------

def _topological(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> dict[str, np.ndarray]:
    """Back-propagate from a scalar ``root``.

    Sets ``.grad`` on every node that requires a gradient and returns the
    gradients of named leaves keyed by name.
    """
    if root.value.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    grads = {id(root): np.ones_like(root.value)}
    named = {}
    for node in reversed(_topological(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g
        if node._backward is None:
            if node.name is not None:
                named[node.name] = g
            continue
        _op_counts["backward"] += 1
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    return named


# gradient checking -----------------------------------------------------------

@dataclass
class GradCheckReport:
    errors: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-4

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tol

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        worst = max(self.errors, key=self.errors.get) if self.errors else "-"
        return f"grad_check {status}: max rel err {self.max_error:.3e} (worst {worst}, tol {self.tol:g})"


def grad_check(f: Callable[[dict[str, Tensor]], Tensor], params: dict[str, np.ndarray],
               step: float = 1e-5, tol: float = 1e-4, floor: float = 1e-6) -> GradCheckReport:
    """Compare analytic gradients of ``f`` with central differences.

    The relative error of an entry is ``|a - n| / max(|a|, |n|, floor)``;
    ``floor`` keeps entries whose true gradient is ~0 from dominating.
    """
    leaves = {k: Tensor(np.array(v, dtype=DTYPE), requires_grad=True, name=k) for k, v in params.items()}
    analytic = backward(f(leaves))
    report = GradCheckReport(tol=tol)
    base = {k: np.array(v, dtype=DTYPE) for k, v in params.items()}
    with no_grad():
        for name, value in base.items():
            a = analytic.get(name, np.zeros_like(value))
            worst = 0.0
            flat = value.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                up = f({k: Tensor(v) for k, v in base.items()}).item()
                flat[i] = orig - step
                down = f({k: Tensor(v) for k, v in base.items()}).item()
                flat[i] = orig
                num = (up - down) / (2 * step)
                ai = a.reshape(-1)[i]
                err = abs(ai - num) / max(abs(ai), abs(num), floor)
                worst = max(worst, err)
            report.errors[name] = worst
    return report

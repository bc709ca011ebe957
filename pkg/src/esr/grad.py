"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every op builds a :class:`Node` holding its value and a closure mapping the
upstream gradient to one gradient per parent. Elementwise binary ops accept
operands of identical shape, or a 0-d scalar with an array; anything else must
go through :func:`broadcast_to` explicitly.
"""

from __future__ import annotations

import builtins
import string
from typing import Callable, Iterable, Sequence

import numpy as np

EPS = 1e-12


class GradError(ValueError):
    pass


class Node:
    __slots__ = ("value", "parents", "backward_fn", "grad", "requires_grad", "op")

    def __init__(self, value, parents: Sequence["Node"] = (), backward_fn=None,
                 requires_grad: bool = False, op: str = "leaf"):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.grad = None
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def param(value) -> Node:
    """A leaf that accumulates gradients."""
    return Node(np.array(value, dtype=np.float64), requires_grad=True)


def const(value) -> Node:
    return value if isinstance(value, Node) else Node(value)


def _make(value, parents, backward_fn, op):
    parents = tuple(parents)
    if any(p.requires_grad for p in parents):
        return Node(value, parents, backward_fn, requires_grad=True, op=op)
    return Node(value, op=op)


def custom_grad(value, parents: Sequence[Node], backward: Callable, op: str = "custom") -> Node:
    """Node with an explicit backward rule ``backward(g) -> [grad per parent]``.

    Shapes returned by the rule are checked when gradients are propagated.
    """
    return _make(value, [const(p) for p in parents], backward, op)


class Tape:
    """Topologically ordered record of every node an output depends on."""

    def __init__(self, output: Node):
        self.output = output
        order, seen = [], set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        self.nodes = order

    def backward(self, grad=None) -> None:
        out = self.output
        if grad is None:
            if out.value.size != 1:
                raise GradError(f"backward: output of shape {out.shape} needs an explicit gradient")
            grad = np.ones_like(out.value)
        grads = {id(out): np.asarray(grad, dtype=np.float64)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node.parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node.backward_fn(g)
            for p, pg in zip(node.parents, parent_grads):
                if not p.requires_grad or pg is None:
                    continue
                pg = np.asarray(pg, dtype=np.float64)
                if pg.shape != p.shape:
                    raise GradError(
                        f"{node.op}: backward produced gradient of shape {pg.shape} "
                        f"for parent of shape {p.shape}")
                key = id(p)
                grads[key] = grads[key] + pg if key in grads else pg


def backward(output: Node, grad=None) -> Tape:
    tape = Tape(output)
    tape.backward(grad)
    return tape


# ---------------------------------------------------------------- elementwise

def _binary_shapes(op, a: Node, b: Node):
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise GradError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _reduce_to(g, shape):
    return g.sum() if shape == () and g.shape != () else g


def add(a, b) -> Node:
    a, b = const(a), const(b)
    _binary_shapes("add", a, b)
    return _make(a.value + b.value, (a, b),
                 lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)), "add")


def sub(a, b) -> Node:
    a, b = const(a), const(b)
    _binary_shapes("sub", a, b)
    return _make(a.value - b.value, (a, b),
                 lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)), "sub")


def mul(a, b) -> Node:
    a, b = const(a), const(b)
    _binary_shapes("mul", a, b)
    return _make(a.value * b.value, (a, b),
                 lambda g: (_reduce_to(g * b.value, a.shape), _reduce_to(g * a.value, b.shape)),
                 "mul")


def _guard(x, eps):
    return np.where(x == 0, eps, x)


def div(a, b, eps: float = EPS) -> Node:
    a, b = const(a), const(b)
    _binary_shapes("div", a, b)
    bv = _guard(b.value, eps)
    out = a.value / bv
    return _make(out, (a, b),
                 lambda g: (_reduce_to(g / bv, a.shape), _reduce_to(-g * out / bv, b.shape)),
                 "div")


def neg(a) -> Node:
    a = const(a)
    return _make(-a.value, (a,), lambda g: (-g,), "neg")


def square(a) -> Node:
    a = const(a)
    return _make(a.value ** 2, (a,), lambda g: (2.0 * a.value * g,), "square")


def exp(a) -> Node:
    a = const(a)
    out = np.exp(a.value)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a, eps: float = EPS) -> Node:
    """Natural log of ``max(a, eps)``."""
    a = const(a)
    safe = np.maximum(a.value, eps)
    return _make(np.log(safe), (a,), lambda g: (g / safe,), "log")


def tanh(a) -> Node:
    a = const(a)
    out = np.tanh(a.value)
    return _make(out, (a,), lambda g: (g * (1.0 - out ** 2),), "tanh")


def relu(a) -> Node:
    a = const(a)
    mask = a.value > 0
    return _make(a.value * mask, (a,), lambda g: (g * mask,), "relu")


def abs(a) -> Node:  # noqa: A001 - mirrors numpy naming
    a = const(a)
    sign = np.sign(a.value)
    return _make(np.abs(a.value), (a,), lambda g: (g * sign,), "abs")


def where(cond, a, b) -> Node:
    """Select from ``a`` where the constant boolean ``cond`` holds, else ``b``."""
    a, b = const(a), const(b)
    cond = np.asarray(cond, dtype=bool)
    for name, x in (("a", a), ("b", b)):
        if x.ndim and x.shape != cond.shape:
            raise GradError(f"where: shape mismatch cond {cond.shape} vs {name} {x.shape}")
    return _make(np.where(cond, a.value, b.value), (a, b),
                 lambda g: (_reduce_to(np.where(cond, g, 0.0), a.shape),
                            _reduce_to(np.where(cond, 0.0, g), b.shape)),
                 "where")


# ---------------------------------------------------------------- reductions

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def sum(a, axis=None, keepdims: bool = False) -> Node:  # noqa: A001
    a = const(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.value.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Node:
    a = const(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(sum(a, axes, keepdims), 1.0 / count)


def logsumexp(a, axis=-1, keepdims: bool = False) -> Node:
    a = const(a)
    m = a.value.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.exp(a.value - m)
    tot = s.sum(axis=axis, keepdims=True)
    out_k = np.log(tot) + m
    soft = s / tot

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    out = out_k if keepdims else np.squeeze(out_k, axis=axis)
    return _make(out, (a,), bw, "logsumexp")


def softmax(a, axis=-1) -> Node:
    a = const(a)
    m = a.value.max(axis=axis, keepdims=True)
    e = np.exp(a.value - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw, "softmax")


def log_softmax(a, axis=-1) -> Node:
    a = const(a)
    m = a.value.max(axis=axis, keepdims=True)
    shifted = a.value - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def bw(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), bw, "log_softmax")


# ---------------------------------------------------------------- shape ops

def reshape(a, shape) -> Node:
    a = const(a)
    return _make(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Node:
    a = const(a)
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = np.argsort(axes)
    return _make(a.value.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def expand_dims(a, axis) -> Node:
    a = const(a)
    return _make(np.expand_dims(a.value, axis), (a,), lambda g: (g.reshape(a.shape),),
                 "expand_dims")


def broadcast_to(a, shape) -> Node:
    """Explicit numpy-style broadcast; the gradient sums over broadcast axes."""
    a = const(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.value, shape)
    except ValueError:
        raise GradError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from None
    lead = len(shape) - a.ndim

    def bw(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(a.shape) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return _make(out.copy(), (a,), bw, "broadcast_to")


def getitem(a, index) -> Node:
    a = const(a)

    def bw(g):
        full = np.zeros(a.shape)
        np.add.at(full, index, g)
        return (full,)

    return _make(a.value[index], (a,), bw, "getitem")


def take(a, indices, axis: int = 0) -> Node:
    """Gather rows of ``a`` (embedding lookup)."""
    a = const(a)
    indices = np.asarray(indices)
    if axis != 0:
        raise GradError("take: only axis=0 is supported")

    def bw(g):
        full = np.zeros(a.shape)
        np.add.at(full, indices, g)
        return (full,)

    return _make(np.take(a.value, indices, axis=0), (a,), bw, "take")


def concatenate(nodes: Iterable, axis: int = 0) -> Node:
    nodes = [const(n) for n in nodes]
    ref = nodes[0].shape
    ax = axis % len(ref)
    for n in nodes[1:]:
        if n.ndim != len(ref) or any(n.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise GradError(f"concatenate: shape mismatch {ref} vs {n.shape} on axis {axis}")
    sizes = np.cumsum([n.shape[ax] for n in nodes])[:-1]
    return _make(np.concatenate([n.value for n in nodes], axis=ax), nodes,
                 lambda g: tuple(np.split(g, sizes, axis=ax)), "concatenate")


def stack(nodes: Iterable, axis: int = 0) -> Node:
    nodes = [const(n) for n in nodes]
    for n in nodes[1:]:
        if n.shape != nodes[0].shape:
            raise GradError(f"stack: shape mismatch {nodes[0].shape} vs {n.shape}")
    return _make(np.stack([n.value for n in nodes], axis=axis), nodes,
                 lambda g: tuple(np.moveaxis(g, axis, 0)), "stack")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Node:
    a, b = const(a), const(b)
    if a.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise GradError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    return _make(a.value @ b.value, (a, b),
                 lambda g: (g @ np.swapaxes(b.value, -1, -2), np.swapaxes(a.value, -1, -2) @ g),
                 "matmul")


def einsum(subscripts: str, *operands) -> Node:
    """Differentiable einsum; requires explicit output and no repeated index in an operand."""
    operands = [const(o) for o in operands]
    if "->" not in subscripts:
        raise GradError("einsum: explicit '->' output required")
    lhs, out_subs = subscripts.replace(" ", "").split("->")
    in_subs = lhs.split(",")
    if len(in_subs) != len(operands):
        raise GradError(f"einsum: {len(in_subs)} subscripts for {len(operands)} operands")
    sizes = {}
    for subs, o in zip(in_subs, operands):
        if len(set(subs)) != len(subs) or len(subs) != o.ndim:
            raise GradError(f"einsum: bad subscripts '{subs}' for shape {o.shape}")
        for c, n in zip(subs, o.shape):
            if sizes.setdefault(c, n) != n:
                raise GradError(f"einsum: size mismatch on index '{c}' ({sizes[c]} vs {n}) "
                                f"in '{subscripts}'")
    vals = [o.value for o in operands]
    out = np.einsum(subscripts, *vals, optimize=True)

    def bw(g):
        grads = []
        for k, o in enumerate(operands):
            if not o.requires_grad:
                grads.append(None)
                continue
            others = [s for i, s in enumerate(in_subs) if i != k] + [out_subs]
            avail = set("".join(others))
            target = "".join(c for c in in_subs[k] if c in avail)
            expr = ",".join(others) + "->" + target
            gk = np.einsum(expr, *[v for i, v in enumerate(vals) if i != k], g, optimize=True)
            if len(target) != len(in_subs[k]):
                gk = np.expand_dims(gk, tuple(i for i, c in enumerate(in_subs[k]) if c not in avail))
                gk = np.broadcast_to(gk, o.shape).copy()
            grads.append(gk)
        return grads

    return _make(out, operands, bw, "einsum")


def inv(a) -> Node:
    """Matrix inverse over the last two axes."""
    a = const(a)
    ainv = np.linalg.inv(a.value)
    ainv_t = np.swapaxes(ainv, -1, -2)
    return _make(ainv, (a,), lambda g: (-(ainv_t @ g @ ainv_t),), "inv")


def logdet(a) -> Node:
    """log det over the last two axes; the determinant must be positive."""
    a = const(a)
    sign, ld = np.linalg.slogdet(a.value)
    if np.any(sign <= 0):
        raise GradError("logdet: matrix is singular or has non-positive determinant")
    ainv_t = np.swapaxes(np.linalg.inv(a.value), -1, -2)
    return _make(ld, (a,), lambda g: (np.asarray(g)[..., None, None] * ainv_t,), "logdet")


# ---------------------------------------------------------------- checking

def grad_check(fn: Callable, point, h: float = 1e-5) -> float:
    """Max per-coordinate relative error between backprop and central differences.

    ``fn`` maps a list of Nodes (one per array in ``point``) to a scalar Node.
    Relative error is ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    single = isinstance(point, np.ndarray) or np.isscalar(point)
    arrays = [np.array(point, dtype=np.float64)] if single else \
        [np.array(p, dtype=np.float64) for p in point]

    def evaluate(arrs):
        out = fn([Node(x) for x in arrs])
        v = float(np.asarray(out.value))
        if not np.isfinite(v):
            raise GradError("grad_check: function value is not finite")
        return v

    leaves = [param(x) for x in arrays]
    out = fn(leaves)
    if not np.isfinite(out.value).all():
        raise GradError("grad_check: function value is not finite")
    backward(out)
    worst = 0.0
    for k, x in enumerate(arrays):
        analytic = leaves[k].grad if leaves[k].grad is not None else np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            orig = x[idx]
            x[idx] = orig + h
            fp = evaluate(arrays)
            x[idx] = orig - h
            fm = evaluate(arrays)
            x[idx] = orig
            num = (fp - fm) / (2 * h)
            a = analytic[idx]
            worst = max(worst, builtins.abs(a - num) / max(1e-8, builtins.abs(a) + builtins.abs(num)))
    return worst


def letters(n: int, skip: str = "") -> str:
    """``n`` distinct einsum index letters not in ``skip``."""
    pool = [c for c in string.ascii_letters if c not in skip]
    return "".join(pool[:n])

"""Small reverse-mode autodiff over dense float64 arrays.

Every value lives on a :class:`Tape`. Backward rules are written in terms of
the same differentiable operations used in the forward pass, so the
gradients returned by :func:`grad` with ``create_graph=True`` are ordinary
tape nodes and can be differentiated again.

Public primitives: ``matmul``, ``add``, ``sub``, ``scale``, ``relu``,
``mean``, ``sum``, ``softmax_xent``. A handful of helper ops (``mul``,
``transpose``, ``expand``, ``softmax``) exist only because the backward
rules of the primitives need them.
"""

from __future__ import annotations

import itertools
from collections.abc import Callable, Sequence

import numpy as np

_ids = itertools.count()


class ShapeError(ValueError):
    """Raised when operand shapes do not fit an operation's shape rule."""


class Node:
    """A value recorded on a tape.

    ``requires_grad`` is true when the node depends on at least one
    variable; constants and everything computed only from constants are
    not differentiated through.
    """

    __slots__ = ("id", "tape", "value", "op", "parents", "attrs", "requires_grad")

    def __init__(self, tape, value, op, parents=(), attrs=None, requires_grad=False):
        self.id = next(_ids)
        self.tape = tape
        self.value = value
        self.op = op
        self.parents = tuple(parents)
        self.attrs = attrs or {}
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def numpy(self) -> np.ndarray:
        return self.value.copy()

    def item(self) -> float:
        if self.value.size != 1:
            raise ValueError(f"item() needs a single-element node, got shape {self.shape}")
        return float(self.value.reshape(()))

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op!r}, shape={self.shape})"

    # operator sugar; all of these route through the module-level ops
    def __add__(self, other):
        return add(self, _lift(self.tape, other))

    def __radd__(self, other):
        return add(_lift(self.tape, other), self)

    def __sub__(self, other):
        return sub(self, _lift(self.tape, other))

    def __rsub__(self, other):
        return sub(_lift(self.tape, other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Ordered record of nodes.

    Nodes are appended in creation order, which is a topological order since
    an op can only consume nodes that already exist. ``rng_seed`` seeds
    :attr:`rng` for callers that draw randomness while building a graph.
    """

    def __init__(self, rng_seed: int = 0):
        self.rng_seed = rng_seed
        self.rng = np.random.default_rng(rng_seed)
        self.nodes: list[Node] = []

    def _record(self, value, op, parents=(), attrs=None) -> Node:
        value = np.asarray(value, dtype=np.float64)
        requires = any(p.requires_grad for p in parents)
        node = Node(self, value, op, parents, attrs, requires)
        self.nodes.append(node)
        return node

    def variable(self, value) -> Node:
        """A differentiable leaf. The array is copied."""
        node = self._record(np.array(value, dtype=np.float64), "variable")
        node.requires_grad = True
        return node

    def constant(self, value) -> Node:
        return self._record(np.array(value, dtype=np.float64), "constant")

    def replay(self) -> list[np.ndarray]:
        """Recompute every node from the leaves, in tape order.

        Returns the recomputed values; the stored values are left untouched.
        """
        fresh: dict[int, np.ndarray] = {}
        out = []
        for node in self.nodes:
            if node.op in ("variable", "constant"):
                val = node.value
            else:
                args = [fresh[p.id] for p in node.parents]
                kwargs = {k: v for k, v in node.attrs.items() if not k.startswith("_")}
                val = _FORWARD[node.op](*args, **kwargs)
            fresh[node.id] = val
            out.append(val)
        return out

    def __len__(self):
        return len(self.nodes)


def _lift(tape: Tape, x) -> Node:
    if isinstance(x, Node):
        return x
    return tape.constant(x)


def _tape_of(nodes: Sequence[Node]) -> Tape:
    tape = nodes[0].tape
    for n in nodes[1:]:
        if n.tape is not tape:
            raise ValueError("operands live on different tapes")
    return tape


# forward kernels -------------------------------------------------------------

def _f_matmul(a, b):
    return a @ b


def _f_add(a, b):
    return a + b


def _f_sub(a, b):
    return a - b


def _f_mul(a, b):
    return a * b


def _f_scale(a, c):
    return a * c


def _f_relu(a):
    return np.where(a > 0, a, 0.0)


def _f_mean(a):
    return np.asarray(a.mean())


def _f_sum(a, axis=None):
    return np.asarray(a.sum(axis=axis))


def _f_transpose(a):
    return a.T.copy()


def _f_expand(a, shape, axis=None):
    if axis is None:
        return np.broadcast_to(a, shape).copy()
    return np.broadcast_to(np.expand_dims(a, axis), shape).copy()


def _f_softmax(a):
    z = a - a.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _f_softmax_xent(a, labels):
    m = a.max(axis=1, keepdims=True)
    lse = (m + np.log(np.exp(a - m).sum(axis=1, keepdims=True)))[:, 0]
    return lse - a[np.arange(a.shape[0]), labels]


_FORWARD: dict[str, Callable] = {
    "matmul": _f_matmul,
    "add": _f_add,
    "sub": _f_sub,
    "mul": _f_mul,
    "scale": _f_scale,
    "relu": _f_relu,
    "mean": _f_mean,
    "sum": _f_sum,
    "transpose": _f_transpose,
    "expand": _f_expand,
    "softmax": _f_softmax,
    "softmax_xent": _f_softmax_xent,
}


# public ops ------------------------------------------------------------------

def _check_broadcast(op, a: Node, b: Node):
    """Same shape, or a row vector ``b`` added to every row of matrix ``a``."""
    if a.shape == b.shape:
        return None
    if a.value.ndim == 2 and b.value.ndim == 1 and a.shape[1] == b.shape[0]:
        return 0
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def matmul(a: Node, b: Node) -> Node:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _tape_of([a, b])._record(_f_matmul(a.value, b.value), "matmul", (a, b))


def add(a: Node, b: Node) -> Node:
    axis = _check_broadcast("add", a, b)
    return _tape_of([a, b])._record(a.value + b.value, "add", (a, b), {"_bcast": axis})


def sub(a: Node, b: Node) -> Node:
    axis = _check_broadcast("sub", a, b)
    return _tape_of([a, b])._record(a.value - b.value, "sub", (a, b), {"_bcast": axis})


def mul(a: Node, b: Node) -> Node:
    """Element-wise product of equal-shaped nodes (backward helper)."""
    if a.shape != b.shape:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    return _tape_of([a, b])._record(a.value * b.value, "mul", (a, b))


def scale(a: Node, c: float) -> Node:
    c = float(c)
    return a.tape._record(a.value * c, "scale", (a,), {"c": c})


def relu(a: Node) -> Node:
    return a.tape._record(_f_relu(a.value), "relu", (a,))


def mean(a: Node) -> Node:
    if a.value.size == 0:
        raise ShapeError("mean: empty operand")
    return a.tape._record(_f_mean(a.value), "mean", (a,))


def sum(a: Node, axis: int | None = None) -> Node:  # noqa: A001 - mirrors numpy
    if axis is not None and not 0 <= axis < a.value.ndim:
        raise ShapeError(f"sum: axis {axis} out of range for shape {a.shape}")
    return a.tape._record(_f_sum(a.value, axis), "sum", (a,), {"axis": axis})


def transpose(a: Node) -> Node:
    if a.value.ndim != 2:
        raise ShapeError(f"transpose: needs a matrix, got shape {a.shape}")
    return a.tape._record(_f_transpose(a.value), "transpose", (a,))


def expand(a: Node, shape: tuple[int, ...], axis: int | None = None) -> Node:
    """Broadcast ``a`` to ``shape``; ``axis`` names the inserted dimension."""
    shape = tuple(shape)
    try:
        val = _f_expand(a.value, shape, axis)
    except ValueError as exc:
        raise ShapeError(f"expand: cannot broadcast {a.shape} to {shape}") from exc
    return a.tape._record(val, "expand", (a,), {"shape": shape, "axis": axis})


def softmax(a: Node) -> Node:
    if a.value.ndim != 2:
        raise ShapeError(f"softmax: needs (n, C) logits, got shape {a.shape}")
    return a.tape._record(_f_softmax(a.value), "softmax", (a,))


def softmax_xent(logits: Node, labels) -> Node:
    """Per-row cross-entropy ``-log softmax(logits)[label]``, shape (n,)."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.value.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise ShapeError(
            f"softmax_xent: logits shape {logits.shape} does not match {labels.shape[0]} labels"
        )
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError(f"softmax_xent: label out of range for {logits.shape[1]} classes")
    val = _f_softmax_xent(logits.value, labels)
    return logits.tape._record(val, "softmax_xent", (logits,), {"labels": labels})


# backward rules --------------------------------------------------------------
# Each rule maps (node, upstream gradient node) to one gradient node per
# parent (None where the parent needs none). Rules only use the ops above.

def _unbroadcast(g: Node, axis):
    return g if axis is None else sum(g, axis=0)


def _b_matmul(node, g):
    a, b = node.parents
    ga = matmul(g, transpose(b)) if a.requires_grad else None
    gb = matmul(transpose(a), g) if b.requires_grad else None
    return ga, gb


def _b_add(node, g):
    axis = node.attrs["_bcast"]
    return g, _unbroadcast(g, axis)


def _b_sub(node, g):
    axis = node.attrs["_bcast"]
    return g, scale(_unbroadcast(g, axis), -1.0)


def _b_mul(node, g):
    a, b = node.parents
    return (mul(g, b) if a.requires_grad else None,
            mul(g, a) if b.requires_grad else None)


def _b_scale(node, g):
    return (scale(g, node.attrs["c"]),)


def _b_relu(node, g):
    (a,) = node.parents
    # subgradient 0 at 0; the mask is constant so the second derivative is 0
    mask = node.tape.constant((a.value > 0).astype(np.float64))
    return (mul(g, mask),)


def _b_mean(node, g):
    (a,) = node.parents
    return (scale(expand(g, a.shape), 1.0 / a.value.size),)


def _b_sum(node, g):
    (a,) = node.parents
    axis = node.attrs["axis"]
    return (expand(g, a.shape, axis),)


def _b_transpose(node, g):
    return (transpose(g),)


def _b_expand(node, g):
    (a,) = node.parents
    axis = node.attrs["axis"]
    if axis is not None:
        return (sum(g, axis=axis),)
    # full broadcast from a scalar or a row vector
    if a.value.ndim == 0:
        return (sum(g),)
    if a.value.ndim == 1 and g.value.ndim == 2:
        return (sum(g, axis=0),)
    return (g,)


def _b_softmax(node, g):
    # ds = s * (g - rowsum(g * s))
    s = node
    inner = sum(mul(g, s), axis=1)
    return (mul(s, sub(g, expand(inner, s.shape, axis=1))),)


def _b_softmax_xent(node, g):
    (z,) = node.parents
    labels = node.attrs["labels"]
    onehot = np.zeros(z.shape)
    onehot[np.arange(z.shape[0]), labels] = 1.0
    diff = sub(softmax(z), node.tape.constant(onehot))
    return (mul(diff, expand(g, z.shape, axis=1)),)


_BACKWARD: dict[str, Callable] = {
    "matmul": _b_matmul,
    "add": _b_add,
    "sub": _b_sub,
    "mul": _b_mul,
    "scale": _b_scale,
    "relu": _b_relu,
    "mean": _b_mean,
    "sum": _b_sum,
    "transpose": _b_transpose,
    "expand": _b_expand,
    "softmax": _b_softmax,
    "softmax_xent": _b_softmax_xent,
}


def _ancestors(output: Node) -> list[Node]:
    """Nodes that ``output`` depends on through differentiable paths."""
    seen: dict[int, Node] = {}
    stack = [output]
    while stack:
        n = stack.pop()
        if n.id in seen or not n.requires_grad:
            continue
        seen[n.id] = n
        stack.extend(n.parents)
    return sorted(seen.values(), key=lambda n: n.id, reverse=True)


def detach(node: Node) -> Node:
    """A constant copy of ``node`` on the same tape."""
    return node.tape.constant(node.value)


def grad(output: Node, wrt: Sequence[Node], create_graph: bool = False) -> list[Node]:
    """Gradients of scalar ``output`` with respect to each node in ``wrt``.

    With ``create_graph`` the returned nodes are differentiable functions of
    the tape's variables. Without it they are constants. A node that
    ``output`` does not depend on gets an all-zero gradient.
    """
    if output.value.size != 1:
        raise ShapeError(f"grad: output must be scalar, got shape {output.shape}")
    wrt = list(wrt)
    tape = output.tape
    for w in wrt:
        if w.tape is not tape:
            raise ValueError("grad: wrt node is on a different tape")

    grads: dict[int, Node] = {output.id: tape.constant(np.ones_like(output.value))}
    for node in _ancestors(output):
        g = grads.get(node.id)
        if g is None or not node.parents:
            continue
        for parent, pg in zip(node.parents, _BACKWARD[node.op](node, g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(parent.id)
            grads[parent.id] = pg if prev is None else add(prev, pg)

    out = []
    for w in wrt:
        g = grads.get(w.id)
        if g is None:
            out.append(tape.constant(np.zeros_like(w.value)))
        elif create_graph:
            out.append(g)
        else:
            out.append(detach(g))
    return out


def finite_diff(f: Callable[[list[np.ndarray]], float], params: Sequence[np.ndarray],
                h: float = 1e-5) -> list[np.ndarray]:
    """Central-difference gradient of ``f`` at ``params``.

    ``f`` receives a list of arrays shaped like ``params`` and returns a
    scalar. The inputs are not modified.
    """
    if not h > 0:
        raise ValueError(f"finite_diff: step must be positive, got {h}")
    params = [np.array(p, dtype=np.float64) for p in params]

    def call(ps):
        val = float(f(ps))
        if not np.isfinite(val):
            raise FloatingPointError("finite_diff: f returned a non-finite value")
        return val

    out = []
    for p in params:
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = call(params)
            flat[i] = orig - h
            down = call(params)
            flat[i] = orig
            gflat[i] = (up - down) / (2 * h)
        out.append(g)
    return out

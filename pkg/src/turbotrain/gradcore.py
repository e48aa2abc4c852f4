"""Minimal eager reverse-mode autodiff over dense float64 arrays.

A :class:`Graph` is a tape. Every op evaluates immediately and appends one
node; node ids are list positions, so insertion order is a valid topological
order and :func:`backward` is a single reverse sweep.

There is no broadcasting. Elementwise ops demand identical shapes; use
``gather`` with repeated indices when a row needs to be tiled.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when op inputs do not satisfy the op's shape rule."""


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    value: np.ndarray
    attrs: dict = field(default_factory=dict)
    aux: object = None
    is_param: bool = False
    needs_grad: bool = False
    name: str | None = None


def _as_array(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("leaf values must be finite")
    return arr


def _same_shape(op: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# Each op is (forward, backward). forward(values, attrs) -> (out, aux);
# backward(g, values, out, aux, attrs) -> one gradient (or None) per input.

def _add_fwd(v, at):
    _same_shape("add", v[0], v[1])
    return v[0] + v[1], None


def _sub_fwd(v, at):
    _same_shape("sub", v[0], v[1])
    return v[0] - v[1], None


def _mul_fwd(v, at):
    _same_shape("mul", v[0], v[1])
    return v[0] * v[1], None


def _matmul_fwd(v, at):
    a, b = v
    if b.ndim != 2 or a.ndim < 1:
        raise ShapeError(f"matmul: right operand must be 2-D, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: inner extents differ for shapes {a.shape} and {b.shape}")
    return a @ b, None


def _matmul_bwd(g, v, out, aux, at, need=(True, True)):
    a, b = v
    k, n = b.shape
    ga = g @ b.T if need[0] else None
    gb = a.reshape(-1, k).T @ g.reshape(-1, n) if need[1] else None
    return [ga, gb]


def _mul_bwd(g, v, out, aux, at, need=(True, True)):
    return [g * v[1] if need[0] else None, g * v[0] if need[1] else None]


def _log_fwd(v, at):
    if np.any(v[0] <= 0):
        raise ValueError("log: input has non-positive entries")
    return np.log(v[0]), None


def _power_fwd(v, at):
    p = at["p"]
    x = v[0]
    if float(p) != int(p) and np.any(x < 0):
        raise ValueError(f"power: negative base with non-integer exponent {p}")
    if p < 1 and np.any(x == 0):
        raise ValueError(f"power: zero base with exponent {p} has no finite derivative")
    return x**p, None


def _reduce_axis(x: np.ndarray, axis):
    return None if axis is None else int(axis) % x.ndim


def _sum_fwd(v, at):
    return np.sum(v[0], axis=at.get("axis")), None


def _sum_bwd(g, v, out, aux, at):
    x = v[0]
    axis = _reduce_axis(x, at.get("axis"))
    if axis is None:
        return [np.full(x.shape, float(g))]
    return [np.broadcast_to(np.expand_dims(g, axis), x.shape).copy()]


def _mean_fwd(v, at):
    return np.mean(v[0], axis=at.get("axis")), None


def _mean_bwd(g, v, out, aux, at):
    x = v[0]
    axis = _reduce_axis(x, at.get("axis"))
    count = x.size if axis is None else x.shape[axis]
    return [gi / count for gi in _sum_bwd(g, v, out, aux, at)]


def _min_fwd(v, at):
    x = v[0]
    if x.size == 0:
        raise ShapeError(f"min: cannot reduce empty array of shape {x.shape}")
    axis = at.get("axis")
    if axis is None:
        idx = np.argmin(x)
        return x.reshape(-1)[idx].copy(), idx
    idx = np.argmin(x, axis=axis)
    return np.take_along_axis(x, np.expand_dims(idx, axis), axis).squeeze(axis), idx


def _min_bwd(g, v, out, aux, at):
    x = v[0]
    gx = np.zeros_like(x)
    axis = _reduce_axis(x, at.get("axis"))
    if axis is None:
        gx.reshape(-1)[aux] = g
    else:
        np.put_along_axis(gx, np.expand_dims(aux, axis), np.expand_dims(g, axis), axis)
    return [gx]


def _gather_fwd(v, at):
    x = v[0]
    idx = at["index"]
    if x.ndim == 0:
        raise ShapeError("gather: input must have at least one axis")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ShapeError(f"gather: index out of range for shape {x.shape}")
    return x[idx], None


def _gather_bwd(g, v, out, aux, at):
    x, idx = v[0], at["index"]
    rows = x.shape[0]
    if rows == 1:  # row tiling, e.g. a broadcast bias
        return [g.reshape(len(idx), -1).sum(axis=0).reshape(x.shape)]
    width = x.size // rows if rows else 0
    flat_g = g.reshape(-1, width)
    # scatter-add via bincount; far faster than np.add.at for repeated rows
    ids = (idx.reshape(-1, 1) * width + np.arange(width)).reshape(-1)
    gx = np.bincount(ids, weights=flat_g.reshape(-1), minlength=rows * width)
    return [gx.reshape(x.shape)]


def _concat_fwd(v, at):
    axis = at.get("axis", 0)
    ref = v[0].shape
    for x in v[1:]:
        if x.ndim != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(x.shape, ref)) if i != axis % len(ref)
        ):
            raise ShapeError(f"concat: shapes {[a.shape for a in v]} disagree off axis {axis}")
    return np.concatenate(v, axis=axis), None


def _concat_bwd(g, v, out, aux, at):
    axis = at.get("axis", 0)
    bounds = np.cumsum([x.shape[axis] for x in v])[:-1]
    return np.split(g, bounds, axis=axis)


def _reshape_fwd(v, at):
    shape = tuple(at["shape"])
    if int(np.prod(shape)) != v[0].size:
        raise ShapeError(f"reshape: cannot view shape {v[0].shape} as {shape}")
    return v[0].reshape(shape), None


def _transpose_fwd(v, at):
    axes = tuple(at["axes"])
    if sorted(axes) != list(range(v[0].ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {v[0].shape}")
    return np.transpose(v[0], axes), None


def _clip_fwd(v, at):
    return np.clip(v[0], at["lo"], at["hi"]), None


def _smooth_l1_fwd(v, at):
    x = v[0]
    beta = at.get("beta", 1.0)
    ax = np.abs(x)
    return np.where(ax < beta, 0.5 * x * x / beta, ax - 0.5 * beta), None


def _smooth_l1_bwd(g, v, out, aux, at):
    x = v[0]
    beta = at.get("beta", 1.0)
    return [g * np.where(np.abs(x) < beta, x / beta, np.sign(x))]


_OPS: dict[str, tuple[Callable, Callable]] = {
    "add": (_add_fwd, lambda g, v, o, a, at: [g, g]),
    "sub": (_sub_fwd, lambda g, v, o, a, at: [g, -g]),
    "mul": (_mul_fwd, _mul_bwd),
    "matmul": (_matmul_fwd, _matmul_bwd),
    # relu subgradient at 0 is 0
    "relu": (lambda v, at: (np.maximum(v[0], 0.0), None), lambda g, v, o, a, at: [g * (v[0] > 0)]),
    "sigmoid": (
        lambda v, at: (0.5 * (1.0 + np.tanh(0.5 * v[0])), None),
        lambda g, v, o, a, at: [g * o * (1.0 - o)],
    ),
    "log": (_log_fwd, lambda g, v, o, a, at: [g / v[0]]),
    "exp": (lambda v, at: (np.exp(v[0]), None), lambda g, v, o, a, at: [g * o]),
    "power": (_power_fwd, lambda g, v, o, a, at: [g * at["p"] * v[0] ** (at["p"] - 1)]),
    "scale": (lambda v, at: (at["c"] * v[0], None), lambda g, v, o, a, at: [at["c"] * g]),
    "sum": (_sum_fwd, _sum_bwd),
    "mean": (_mean_fwd, _mean_bwd),
    "min": (_min_fwd, _min_bwd),
    "gather": (_gather_fwd, _gather_bwd),
    "concat": (_concat_fwd, _concat_bwd),
    "reshape": (_reshape_fwd, lambda g, v, o, a, at: [g.reshape(v[0].shape)]),
    "transpose": (_transpose_fwd, lambda g, v, o, a, at: [np.transpose(g, np.argsort(at["axes"]))]),
    "clip": (_clip_fwd, lambda g, v, o, a, at: [g * ((v[0] >= at["lo"]) & (v[0] <= at["hi"]))]),
    "smooth_l1": (_smooth_l1_fwd, _smooth_l1_bwd),
}

OP_KINDS = frozenset(_OPS)
# backward rules that can skip work for inputs needing no gradient
_SELECTIVE = frozenset({"matmul", "mul"})


class Graph:
    """Eager expression tape. Ops return integer node ids."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def _push(self, node: Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def param(self, value, name: str | None = None) -> int:
        """Add a differentiable leaf."""
        return self._push(Node("param", (), _as_array(value), is_param=True, needs_grad=True, name=name))

    def const(self, value) -> int:
        return self._push(Node("const", (), _as_array(value)))

    def value(self, nid: int) -> np.ndarray:
        return self.nodes[nid].value

    def aux(self, nid: int):
        return self.nodes[nid].aux

    @property
    def params(self) -> list[int]:
        return [i for i, n in enumerate(self.nodes) if n.is_param]

    def forward(self, op: str, *inputs: int, **attrs) -> int:
        """Evaluate ``op`` on existing nodes and record it on the tape."""
        if op not in _OPS:
            raise ValueError(f"unknown op kind {op!r}")
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise ValueError(f"{op}: input id {i} is not on this graph")
        fwd, _ = _OPS[op]
        vals = [self.nodes[i].value for i in inputs]
        out, aux = fwd(vals, attrs)
        out = np.asarray(out, dtype=np.float64)
        needs = any(self.nodes[i].needs_grad for i in inputs)
        return self._push(Node(op, tuple(inputs), out, attrs, aux, needs_grad=needs))

    # convenience wrappers
    def add(self, a, b):
        return self.forward("add", a, b)

    def sub(self, a, b):
        return self.forward("sub", a, b)

    def mul(self, a, b):
        return self.forward("mul", a, b)

    def matmul(self, a, b):
        return self.forward("matmul", a, b)

    def relu(self, x):
        return self.forward("relu", x)

    def sigmoid(self, x):
        return self.forward("sigmoid", x)

    def log(self, x):
        return self.forward("log", x)

    def exp(self, x):
        return self.forward("exp", x)

    def power(self, x, p: float):
        return self.forward("power", x, p=p)

    def scale(self, x, c: float):
        return self.forward("scale", x, c=float(c))

    def sum(self, x, axis: int | None = None):
        return self.forward("sum", x, axis=axis)

    def mean(self, x, axis: int | None = None):
        return self.forward("mean", x, axis=axis)

    def min(self, x, axis: int | None = None):
        """Min-reduce; the winning (lowest) index is kept in ``aux``."""
        return self.forward("min", x, axis=axis)

    def gather(self, x, index):
        return self.forward("gather", x, index=np.asarray(index, dtype=np.int64))

    def concat(self, xs: Sequence[int], axis: int = 0):
        return self.forward("concat", *xs, axis=axis)

    def reshape(self, x, shape):
        return self.forward("reshape", x, shape=tuple(int(s) for s in shape))

    def transpose(self, x, axes):
        return self.forward("transpose", x, axes=tuple(axes))

    def clip(self, x, lo: float, hi: float):
        return self.forward("clip", x, lo=lo, hi=hi)

    def smooth_l1(self, x, beta: float = 1.0):
        return self.forward("smooth_l1", x, beta=beta)

    # composites built from the primitives above
    def linear(self, x, w, b):
        """``x @ w + b`` with the bias row tiled by gather."""
        y = self.matmul(x, w)
        shape = self.value(y).shape
        rows = int(np.prod(shape[:-1]))
        bias = self.gather(self.reshape(b, (1, self.value(b).size)), np.zeros(rows, np.int64))
        return self.add(y, self.reshape(bias, shape))

    def ones_like(self, x) -> int:
        return self.const(np.ones_like(self.value(x)))

    def one_minus(self, x) -> int:
        return self.sub(self.ones_like(x), x)


def backward(graph: Graph, root: int) -> dict[int, np.ndarray]:
    """Gradients of a scalar ``root`` w.r.t. every parameter leaf.

    Parameters that do not influence ``root`` receive exact zeros.
    """
    nodes = graph.nodes
    if nodes[root].value.shape != ():
        raise ShapeError(f"backward: root must be scalar, got shape {nodes[root].value.shape}")
    grads: list[np.ndarray | None] = [None] * (root + 1)
    grads[root] = np.ones((), dtype=np.float64)
    for nid in range(root, -1, -1):
        g = grads[nid]
        node = nodes[nid]
        if g is None or not node.needs_grad or not node.inputs:
            continue
        _, bwd = _OPS[node.op]
        vals = [nodes[i].value for i in node.inputs]
        if node.op in _SELECTIVE:
            need = tuple(nodes[i].needs_grad for i in node.inputs)
            parts = bwd(g, vals, node.value, node.aux, node.attrs, need=need)
        else:
            parts = bwd(g, vals, node.value, node.aux, node.attrs)
        for i, gi in zip(node.inputs, parts):
            if gi is None or not nodes[i].needs_grad:
                continue
            gi = np.asarray(gi, dtype=np.float64).reshape(nodes[i].value.shape)
            # gradients are never modified in place, so sharing arrays is safe
            grads[i] = gi if grads[i] is None else grads[i] + gi
    out = {}
    for nid, node in enumerate(nodes):
        if node.is_param:
            g = grads[nid] if nid <= root else None
            out[nid] = np.zeros_like(node.value) if g is None else np.array(g)
    return out


def flatten_gradients(gm: dict, order: Sequence) -> np.ndarray:
    """Concatenate gradients in ``order`` into one flat vector."""
    missing = [k for k in order if k not in gm]
    if missing:
        raise KeyError(f"no gradient for parameter(s) {missing}")
    if not order:
        return np.zeros(0)
    return np.concatenate([np.asarray(gm[k], dtype=np.float64).reshape(-1) for k in order])


def unflatten_gradients(vec: np.ndarray, order: Sequence, shapes: dict) -> dict:
    """Inverse of :func:`flatten_gradients` given the parameter shapes."""
    sizes = [int(np.prod(shapes[k])) for k in order]
    if sum(sizes) != vec.size:
        raise ShapeError(f"vector of length {vec.size} does not cover {sum(sizes)} parameter entries")
    out, start = {}, 0
    for k, n in zip(order, sizes):
        out[k] = vec[start:start + n].reshape(shapes[k]).copy()
        start += n
    return out

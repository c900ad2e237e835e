"""Differentiable operations over dense float64 arrays.

Every op takes Nodes (or array-likes, which become constants), computes its
forward value with numpy and registers a closure that maps the output
gradient to input gradients. Ops are collected in ``OPS`` so the gradient
test-suite can enumerate them.
"""

from __future__ import annotations

import math

import numpy as np

from .engine import (
    DTYPE, AutodiffError, Node, ShapeError, accumulate, as_node, make_result,
)

OPS: dict[str, object] = {}

_GELU_C = math.sqrt(2.0 / math.pi)
_MASKED = -1e30


class DomainError(AutodiffError, ValueError):
    pass


def register(name):
    def deco(fn):
        OPS[name] = fn
        return fn
    return deco


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# --- elementwise arithmetic -------------------------------------------------

@register("add")
def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape("add", a, b)

    def back(g):
        accumulate(a, _unbroadcast(g, a.shape))
        accumulate(b, _unbroadcast(g, b.shape))
    return make_result(a.values + b.values, "add", (a, b), back)


@register("sub")
def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape("sub", a, b)

    def back(g):
        accumulate(a, _unbroadcast(g, a.shape))
        accumulate(b, -_unbroadcast(g, b.shape))
    return make_result(a.values - b.values, "sub", (a, b), back)


@register("mul")
def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape("mul", a, b)

    def back(g):
        if a.requires_grad:
            accumulate(a, _unbroadcast(g * b.values, a.shape))
        if b.requires_grad:
            accumulate(b, _unbroadcast(g * a.values, b.shape))
    return make_result(a.values * b.values, "mul", (a, b), back)


@register("neg")
def neg(a) -> Node:
    a = as_node(a)
    return make_result(-a.values, "neg", (a,), lambda g: accumulate(a, -g))


@register("power")
def power(x, p: float) -> Node:
    """x ** p for a constant exponent p."""
    x = as_node(x)
    p = float(p)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.power(x.values, p)

    def back(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = p * np.power(x.values, p - 1.0)
        if p < 1.0:
            # subgradient 0 where the derivative blows up at the origin
            d = np.where(x.values == 0.0, 0.0, d)
        accumulate(x, g * d)
    return make_result(out, "power", (x,), back)


@register("exp")
def exp(x) -> Node:
    x = as_node(x)
    with np.errstate(over="ignore"):  # overflow surfaces as NonFiniteError
        out = np.exp(x.values)
    return make_result(out, "exp", (x,), lambda g: accumulate(x, g * out))


@register("log")
def log(x) -> Node:
    x = as_node(x)
    if (x.values <= 0).any():
        raise DomainError("log: input must be strictly positive")
    return make_result(np.log(x.values), "log", (x,),
                       lambda g: accumulate(x, g / x.values))


# --- activations ------------------------------------------------------------

@register("sigmoid")
def sigmoid(x) -> Node:
    x = as_node(x)
    out = _sigmoid(x.values)
    return make_result(out, "sigmoid", (x,),
                       lambda g: accumulate(x, g * out * (1.0 - out)))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    z = np.asarray(z, dtype=DTYPE)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@register("tanh")
def tanh(x) -> Node:
    x = as_node(x)
    out = np.tanh(x.values)
    return make_result(out, "tanh", (x,),
                       lambda g: accumulate(x, g * (1.0 - out * out)))


@register("relu")
def relu(x) -> Node:
    x = as_node(x)
    mask = x.values > 0
    return make_result(x.values * mask, "relu", (x,),
                       lambda g: accumulate(x, g * mask))


@register("gelu")
def gelu(x) -> Node:
    """GELU, tanh form."""
    x = as_node(x)
    v = x.values
    v2 = v * v
    t = np.tanh(_GELU_C * v * (1.0 + 0.044715 * v2))
    out = 0.5 * v * (1.0 + t)

    def back(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * v2)
        accumulate(x, g * (0.5 * (1.0 + t) + 0.5 * v * dt))
    return make_result(out, "gelu", (x,), back)


@register("softmax")
def softmax(x) -> Node:
    """Softmax over the last axis."""
    x = as_node(x)
    out = _softmax(x.values)

    def back(g):
        accumulate(x, out * (g - (g * out).sum(axis=-1, keepdims=True)))
    return make_result(out, "softmax", (x,), back)


def _softmax(v: np.ndarray) -> np.ndarray:
    z = v - v.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# --- linear algebra and shape ----------------------------------------------

@register("matmul")
def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    # a shared 2-D weight folds the batch dims into one GEMM
    folded = b.ndim == 2 and a.ndim > 2
    k = a.shape[-1]
    if folded:
        out = (a.values.reshape(-1, k) @ b.values).reshape(a.shape[:-1] + (b.shape[1],))
    else:
        out = a.values @ b.values

    def back(g):
        if folded:
            g2 = g.reshape(-1, g.shape[-1])
            if a.requires_grad:
                accumulate(a, (g2 @ b.values.T).reshape(a.shape))
            if b.requires_grad:
                accumulate(b, a.values.reshape(-1, k).T @ g2)
            return
        if a.requires_grad:
            accumulate(a, _unbroadcast(g @ np.swapaxes(b.values, -1, -2), a.shape))
        if b.requires_grad:
            accumulate(b, _unbroadcast(np.swapaxes(a.values, -1, -2) @ g, b.shape))
    return make_result(out, "matmul", (a, b), back)


@register("reshape")
def reshape(x, shape) -> Node:
    x = as_node(x)
    try:
        out = x.values.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, tuple(shape)) from None
    return make_result(out, "reshape", (x,),
                       lambda g: accumulate(x, g.reshape(x.shape)))


@register("transpose")
def transpose(x, axes) -> Node:
    x = as_node(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_result(np.transpose(x.values, axes), "transpose", (x,),
                       lambda g: accumulate(x, np.transpose(g, inv)))


@register("concat")
def concat(nodes, axis: int = -1) -> Node:
    nodes = [as_node(n) for n in nodes]
    try:
        out = np.concatenate([n.values for n in nodes], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(n.shape for n in nodes)) from None
    sizes = [n.shape[axis] for n in nodes]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        for n, piece in zip(nodes, np.split(g, splits, axis=axis)):
            accumulate(n, piece)
    return make_result(out, "concat", nodes, back)


@register("sum")
def sum_(x, axis=None, keepdims: bool = False) -> Node:
    x = as_node(x)
    out = x.values.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        accumulate(x, np.broadcast_to(g, x.shape))
    return make_result(out, "sum", (x,), back)


@register("mean")
def mean(x, axis=None, keepdims: bool = False) -> Node:
    x = as_node(x)
    out = x.values.mean(axis=axis, keepdims=keepdims)
    count = x.values.size // max(out.size, 1) if x.values.size else 1

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        accumulate(x, np.broadcast_to(g / count, x.shape))
    return make_result(out, "mean", (x,), back)


@register("l2_norm")
def l2_norm(x, axis: int = -1) -> Node:
    """Euclidean norm along ``axis``; gradient at the zero vector is 0."""
    x = as_node(x)
    n = np.sqrt((x.values ** 2).sum(axis=axis))

    def back(g):
        ne = np.expand_dims(n, axis)
        safe = np.where(ne > 0, ne, 1.0)
        d = np.where(ne > 0, x.values / safe, 0.0)
        accumulate(x, np.expand_dims(g, axis) * d)
    return make_result(n, "l2_norm", (x,), back)


@register("select")
def select(x, index, axis: int = -1) -> Node:
    """Pick entries along one axis by integer index (like ``np.take``)."""
    x = as_node(x)
    index = np.asarray(index, dtype=np.int64)
    size = x.shape[axis]
    if index.size and (index.min() < -size or index.max() >= size):
        raise ShapeError("select", x.shape, index.shape)
    out = np.take(x.values, index, axis=axis)

    def back(g):
        full = np.zeros(x.shape, dtype=DTYPE)
        moved = np.moveaxis(full, axis, 0)
        gm = np.moveaxis(g, axis, 0) if index.ndim else g[np.newaxis]
        np.add.at(moved, index.reshape(-1), gm.reshape((index.size,) + moved.shape[1:]))
        accumulate(x, full)
    return make_result(out, "select", (x,), back)


@register("gather_positions")
def gather_positions(x, positions) -> Node:
    """x: (B, T, d), positions: (B,) -> (B, d) with row b taken at positions[b]."""
    x = as_node(x)
    positions = np.asarray(positions, dtype=np.int64)
    if x.ndim != 3 or positions.shape != (x.shape[0],):
        raise ShapeError("gather_positions", x.shape, positions.shape)
    if positions.size and (positions.min() < 0 or positions.max() >= x.shape[1]):
        raise ShapeError("gather_positions", x.shape, positions.shape)
    rows = np.arange(x.shape[0])
    out = x.values[rows, positions]

    def back(g):
        full = np.zeros(x.shape, dtype=DTYPE)
        full[rows, positions] = g
        accumulate(x, full)
    return make_result(out, "gather_positions", (x,), back)


@register("embedding")
def embedding(table, indices) -> Node:
    """Row gather: (V, d) table, integer indices of any shape -> (*indices.shape, d)."""
    table = as_node(table)
    indices = np.asarray(indices, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError("embedding", table.shape, indices.shape)
    if indices.size and (indices.min() < 0 or indices.max() >= table.shape[0]):
        raise IndexError(
            f"embedding: index out of range [0, {table.shape[0]}) "
            f"(got min {indices.min()}, max {indices.max()})")
    out = table.values[indices]

    def back(g):
        full = np.zeros(table.shape, dtype=DTYPE)
        np.add.at(full, indices.reshape(-1), g.reshape(-1, table.shape[1]))
        accumulate(table, full)
    return make_result(out, "embedding", (table,), back)


# --- composite layers ------------------------------------------------------

@register("layer_norm")
def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Node:
    x, gamma, beta = as_node(x), as_node(gamma), as_node(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError("layer_norm", x.shape, gamma.shape, beta.shape)
    mu = x.values.mean(axis=-1, keepdims=True)
    xc = x.values - mu
    inv = 1.0 / np.sqrt((xc ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.values + beta.values

    def back(g):
        lead = tuple(range(g.ndim - 1))
        if gamma.requires_grad:
            accumulate(gamma, (g * xhat).sum(axis=lead))
        if beta.requires_grad:
            accumulate(beta, g.sum(axis=lead))
        if x.requires_grad:
            dxhat = g * gamma.values
            dx = inv / d * (d * dxhat - dxhat.sum(axis=-1, keepdims=True)
                            - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
            accumulate(x, dx)
    return make_result(out, "layer_norm", (x, gamma, beta), back)


def attention_weights(q: np.ndarray, k: np.ndarray, causal: bool = True) -> np.ndarray:
    scores = q @ np.swapaxes(k, -1, -2) / math.sqrt(q.shape[-1])
    if causal:
        t, s = scores.shape[-2:]
        mask = np.triu(np.ones((t, s), dtype=bool), k=1 + s - t)
        scores = np.where(mask, _MASKED, scores)
    return _softmax(scores)


@register("attention")
def attention(q, k, v, causal: bool = True) -> Node:
    """Scaled dot-product attention. q: (..., T, dh); k, v: (..., S, dh)."""
    q, k, v = as_node(q), as_node(k), as_node(v)
    if (q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]
            or q.shape[:-2] != k.shape[:-2] or k.shape[:-2] != v.shape[:-2]):
        raise ShapeError("attention", q.shape, k.shape, v.shape)
    scale = 1.0 / math.sqrt(q.shape[-1])
    p = attention_weights(q.values, k.values, causal)
    out = p @ v.values

    def back(g):
        if v.requires_grad:
            accumulate(v, np.swapaxes(p, -1, -2) @ g)
        dp = g @ np.swapaxes(v.values, -1, -2)
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * scale
        if q.requires_grad:
            accumulate(q, ds @ k.values)
        if k.requires_grad:
            accumulate(k, np.swapaxes(ds, -1, -2) @ q.values)
    return make_result(out, "attention", (q, k, v), back)


# --- losses -------------------------------------------------------------------

@register("bce")
def bce(prob, labels, eps: float = 1e-12) -> Node:
    """Mean binary cross-entropy of probabilities against 0/1 labels."""
    prob = as_node(prob)
    y = np.asarray(labels, dtype=DTYPE)
    if y.shape != prob.shape:
        raise ShapeError("bce", prob.shape, y.shape)
    p = np.clip(prob.values, eps, 1.0 - eps)
    n = max(p.size, 1)
    out = -(y * np.log(p) + (1.0 - y) * np.log1p(-p)).sum() / n

    def back(g):
        inside = (prob.values > eps) & (prob.values < 1.0 - eps)
        d = (-y / p + (1.0 - y) / (1.0 - p)) * inside / n
        accumulate(prob, g * d)
    return make_result(out, "bce", (prob,), back)


@register("cross_entropy")
def cross_entropy(logits, targets) -> Node:
    """Mean token cross-entropy; logits (B, V), integer targets (B,)."""
    logits = as_node(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy", logits.shape, targets.shape)
    vocab = logits.shape[1]
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise IndexError(f"cross_entropy: target outside vocabulary of size {vocab}")
    z = logits.values - logits.values.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(len(targets))
    n = max(len(targets), 1)
    out = (lse - z[rows, targets]).sum() / n

    def back(g):
        d = np.exp(z - lse[:, None])
        d[rows, targets] -= 1.0
        accumulate(logits, g * d / n)
    return make_result(out, "cross_entropy", (logits,), back)

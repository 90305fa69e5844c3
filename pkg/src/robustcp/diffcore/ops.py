"""Differentiable ops. Each returns a new Node on the operands' tape."""

from __future__ import annotations

import numpy as np

from .numeric import sigmoid as _sigmoid
from .tape import Node, ShapeError


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _lift(a, like: Node) -> Node:
    return a if isinstance(a, Node) else like.tape.const(a)


def _broadcast_shape(op: str, a: Node, b: Node) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.describe()} with {b.describe()}") from None


def add(a, b) -> Node:
    a, b = (a, _lift(b, a)) if isinstance(a, Node) else (_lift(a, b), b)
    _broadcast_shape("add", a, b)
    return a.tape.record("add", (a, b), a.value + b.value,
                         lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Node:
    a, b = (a, _lift(b, a)) if isinstance(a, Node) else (_lift(a, b), b)
    _broadcast_shape("subtract", a, b)
    return a.tape.record("subtract", (a, b), a.value - b.value,
                         lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def neg(a: Node) -> Node:
    return a.tape.record("negate", (a,), -a.value, lambda g: (-g,))


def scale(a: Node, c: float) -> Node:
    c = float(c)
    return a.tape.record("scale", (a,), a.value * c, lambda g: (g * c,))


def mul(a, b) -> Node:
    """Elementwise product (numpy broadcasting)."""
    a, b = (a, _lift(b, a)) if isinstance(a, Node) else (_lift(a, b), b)
    _broadcast_shape("mul", a, b)
    av, bv = a.value, b.value
    return a.tape.record("mul", (a, b), av * bv,
                         lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)))


def sum(a: Node, axis: int | None = None) -> Node:  # noqa: A001 - mirrors numpy
    if axis is None:
        shape = a.shape
        return a.tape.record("sum", (a,), a.value.sum(),
                             lambda g: (np.broadcast_to(g, shape).copy(),))
    ax = axis % a.value.ndim
    return a.tape.record("sum", (a,), a.value.sum(axis=ax),
                         lambda g: (np.broadcast_to(np.expand_dims(g, ax), a.shape).copy(),))


def affine(x: Node, w: Node, b: Node) -> Node:
    """``x @ w.T + b`` for x of shape (d,) or (n, d), w of shape (out, d)."""
    if w.value.ndim != 2 or x.value.ndim not in (1, 2) or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"affine: input {x.describe()} incompatible with weight {w.describe()}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"affine: bias {b.describe()} incompatible with weight {w.describe()}")
    xv, wv = x.value, w.value

    def vjp(g):
        gx = g @ wv
        gw = np.outer(g, xv) if g.ndim == 1 else g.T @ xv
        gb = g if g.ndim == 1 else g.sum(axis=0)
        return gx, gw, gb

    return x.tape.record("affine", (x, w, b), affine_value(xv, wv, b.value), vjp)


def affine_value(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    return x @ w.T + b


def relu(a: Node) -> Node:
    # Subgradient at exactly 0 is 0.
    mask = a.value > 0
    return a.tape.record("relu", (a,), np.where(mask, a.value, 0.0), lambda g: (g * mask,))


def sigmoid(a: Node) -> Node:
    s = _sigmoid(a.value)
    return a.tape.record("sigmoid", (a,), s, lambda g: (g * s * (1.0 - s),))


def take_label(logits: Node, y) -> Node:
    """Pick ``logits[..., y]``: a scalar for (K,) logits, shape (n,) for (n, K)."""
    y = np.asarray(y, dtype=np.int64)
    v = logits.value
    if v.ndim == 1:
        if y.ndim != 0:
            raise ShapeError(f"take_label: scalar label required for {logits.describe()}")
        rows = ()
    elif v.ndim == 2 and y.shape == (v.shape[0],):
        rows = (np.arange(v.shape[0]),)
    else:
        raise ShapeError(f"take_label: labels of shape {y.shape} do not match {logits.describe()}")
    if np.any(y < 0) or np.any(y >= v.shape[-1]):
        raise IndexError(f"take_label: label out of range for {logits.describe()}")
    idx = rows + (y,)

    def vjp(g):
        out = np.zeros_like(v)
        out[idx] = g
        return (out,)

    return logits.tape.record("take_label", (logits,), v[idx], vjp)


def shift(logits: Node, tau: Node) -> Node:
    """``logits - tau`` with one threshold per row (tau shape == logits.shape[:-1])."""
    if tau.shape != logits.shape[:-1]:
        raise ShapeError(f"shift: threshold {tau.describe()} does not match rows of {logits.describe()}")
    return logits.tape.record(
        "shift", (logits, tau), logits.value - tau.value[..., None],
        lambda g: (g, -g.sum(axis=-1)),
    )


def logsumexp(a: Node) -> Node:
    """Row-wise log-sum-exp over the last axis."""
    v = a.value
    m = v.max(axis=-1, keepdims=True)
    e = np.exp(v - m)
    se = e.sum(axis=-1, keepdims=True)
    out = (np.log(se) + m)[..., 0]
    soft = e / se
    return a.tape.record("logsumexp", (a,), out, lambda g: (g[..., None] * soft,))

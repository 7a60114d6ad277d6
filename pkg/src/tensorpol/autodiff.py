"""Reverse-mode differentiation on numpy arrays.

Covers exactly the primitives the network needs: elementwise arithmetic,
dense matmul, channel mixing, dyadic products, rank-2 tensor helpers,
activations, reductions, and edge<->node gather/scatter. Values are
computed eagerly; when a Tape is active, each op appends a node carrying
local-gradient closures, and `backward` replays the tape in reverse.

One tape per worker thread (the active tape is thread-local). No tape
active means pure inference: ops compute values and record nothing.
"""

from __future__ import annotations

import threading

import numpy as np


class ShapeMismatch(ValueError):
    """Operands have incompatible shapes."""


class NonScalarLoss(ValueError):
    """backward() requires a single-element loss node."""


_STATE = threading.local()


def _tape_stack():
    stack = getattr(_STATE, "tapes", None)
    if stack is None:
        stack = []
        _STATE.tapes = stack
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Topologically ordered record of DiffValue nodes (eager append)."""

    def __init__(self):
        self.nodes = []
        self.consumed = False

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack().pop()
        return False


class DiffValue:
    """A value in the differentiation graph.

    `rules` holds (parent, grad_fn) pairs where grad_fn maps the output
    adjoint to the parent's local gradient contribution. Adjoint storage
    lives inside backward(), never on the node, so backward passes over
    different tapes can run concurrently even when they share parameters.
    """

    __slots__ = ("value", "rules", "needs_grad", "is_param")

    def __init__(self, value, needs_grad=False, is_param=False):
        self.value = np.asarray(value)
        self.rules = ()
        self.needs_grad = needs_grad
        self.is_param = is_param

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"DiffValue(shape={self.value.shape}, needs_grad={self.needs_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(x) -> DiffValue:
    return DiffValue(x)


def parameter(x) -> DiffValue:
    return DiffValue(x, needs_grad=True, is_param=True)


def _wrap(x) -> DiffValue:
    return x if isinstance(x, DiffValue) else DiffValue(x)


def _node(value, rules) -> DiffValue:
    """Build an op output; records on the active tape when a grad path exists."""
    tape = active_tape()
    if tape is None:
        return DiffValue(value)
    live = tuple((p, fn) for p, fn in rules if p.needs_grad)
    out = DiffValue(value, needs_grad=bool(live))
    if live:
        out.rules = live
        tape.nodes.append(out)
    return out


def backward(tape: Tape, loss: DiffValue):
    """Accumulate d(loss)/d(param) for every parameter on the path to `loss`.

    Returns a dict mapping parameter DiffValues to gradient arrays; the tape
    is consumed. Parameters off the path are absent from the map.
    """
    if tape.consumed:
        raise RuntimeError("tape already consumed by a previous backward()")
    if loss.value.size != 1:
        raise NonScalarLoss(f"loss has shape {loss.value.shape}")
    adjoints = {loss: np.ones_like(loss.value)}
    grads = {}
    for node in reversed(tape.nodes):
        g = adjoints.pop(node, None)
        if g is None:
            continue
        for parent, fn in node.rules:
            contrib = fn(g)
            prev = adjoints.get(parent)
            adjoints[parent] = contrib if prev is None else prev + contrib
            if parent.is_param:
                grads[parent] = adjoints[parent]
    tape.nodes.clear()
    tape.consumed = True
    return grads


def _unbroadcast(g, shape):
    """Sum `g` down to `shape`, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b) -> DiffValue:
    a, b = _wrap(a), _wrap(b)
    return _node(
        a.value + b.value,
        [
            (a, lambda g: _unbroadcast(g, a.value.shape)),
            (b, lambda g: _unbroadcast(g, b.value.shape)),
        ],
    )


def sub(a, b) -> DiffValue:
    a, b = _wrap(a), _wrap(b)
    return _node(
        a.value - b.value,
        [
            (a, lambda g: _unbroadcast(g, a.value.shape)),
            (b, lambda g: _unbroadcast(-g, b.value.shape)),
        ],
    )


def neg(a) -> DiffValue:
    a = _wrap(a)
    return _node(-a.value, [(a, lambda g: -g)])


def mul(a, b) -> DiffValue:
    """Elementwise product with numpy broadcasting; either side may be scalar."""
    a, b = _wrap(a), _wrap(b)
    return _node(
        a.value * b.value,
        [
            (a, lambda g: _unbroadcast(g * b.value, a.value.shape)),
            (b, lambda g: _unbroadcast(g * a.value, b.value.shape)),
        ],
    )


def matmul(a, b) -> DiffValue:
    """Dense 2-D product: (n, k) @ (k, m)."""
    a, b = _wrap(a), _wrap(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ShapeMismatch(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.value.shape[1] != b.value.shape[0]:
        raise ShapeMismatch(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    return _node(
        a.value @ b.value,
        [
            (a, lambda g: g @ b.value.T),
            (b, lambda g: a.value.T @ g),
        ],
    )


def mix_channels(x, w) -> DiffValue:
    """Apply a (C, D) map along axis 1 of x (N, C, ...), keeping trailing axes."""
    x, w = _wrap(x), _wrap(w)
    if x.value.ndim < 2 or x.value.shape[1] != w.value.shape[0]:
        raise ShapeMismatch(f"mix_channels: {x.shape} with map {w.shape}")
    n, c = x.value.shape[:2]
    xf = x.value.reshape(n, c, -1)

    def grad_w(g):
        return np.einsum("nct,ndt->cd", xf, g.reshape(n, w.value.shape[1], -1))

    def grad_x(g):
        gx = np.einsum("ndt,cd->nct", g.reshape(n, w.value.shape[1], -1), w.value)
        return gx.reshape(x.value.shape)

    return _node(
        np.einsum("nc...,cd->nd...", x.value, w.value),
        [(x, grad_x), (w, grad_w)],
    )


# ---------------------------------------------------------------------------
# rank-2 tensor helpers (all act on the last two axes)


def outer(u, w) -> DiffValue:
    """Dyadic product over the last axis: (..., 3) x (..., 3) -> (..., 3, 3)."""
    u, w = _wrap(u), _wrap(w)
    return _node(
        u.value[..., :, None] * w.value[..., None, :],
        [
            (u, lambda g: _unbroadcast((g * w.value[..., None, :]).sum(-1), u.value.shape)),
            (w, lambda g: _unbroadcast((g * u.value[..., :, None]).sum(-2), w.value.shape)),
        ],
    )


def transpose_mat(x) -> DiffValue:
    x = _wrap(x)
    return _node(
        np.swapaxes(x.value, -1, -2),
        [(x, lambda g: np.swapaxes(g, -1, -2))],
    )


def sym_mat(x) -> DiffValue:
    """(A + A^T) / 2 over the last two axes; self-adjoint, so grad is sym(g)."""
    x = _wrap(x)
    return _node(
        0.5 * (x.value + np.swapaxes(x.value, -1, -2)),
        [(x, lambda g: 0.5 * (g + np.swapaxes(g, -1, -2)))],
    )


def _tl(a):
    s = 0.5 * (a + np.swapaxes(a, -1, -2))
    tr = np.trace(s, axis1=-2, axis2=-1)
    return s - tr[..., None, None] / 3.0 * np.eye(3, dtype=a.dtype)


def traceless_mat(x) -> DiffValue:
    """Symmetric traceless projection; an orthogonal projector, grad is TL(g)."""
    x = _wrap(x)
    return _node(_tl(x.value), [(x, _tl)])


def trace_mat(x) -> DiffValue:
    x = _wrap(x)

    def grad(g):
        return g[..., None, None] * np.eye(x.value.shape[-1], dtype=g.dtype)

    return _node(np.trace(x.value, axis1=-2, axis2=-1), [(x, grad)])


def iso_mat(x) -> DiffValue:
    """Embed scalars on the diagonal: (...,) -> (..., 3, 3) as x * I."""
    x = _wrap(x)
    return _node(
        x.value[..., None, None] * np.eye(3, dtype=x.value.dtype),
        [(x, lambda g: np.trace(g, axis1=-2, axis2=-1))],
    )


def norm_over_last(x, ndim) -> DiffValue:
    """Euclidean norm over the last `ndim` axes, zero subgradient at zero."""
    x = _wrap(x)
    axes = tuple(range(-ndim, 0))
    n = np.sqrt(np.sum(x.value * x.value, axis=axes))

    def grad(g):
        safe = np.where(n == 0.0, 1.0, n)
        scale = (g / safe).reshape(g.shape + (1,) * ndim)
        return np.where(n.reshape(scale.shape) == 0.0, 0.0, scale * x.value)

    return _node(n, [(x, grad)])


def frobenius_norm(x) -> DiffValue:
    return norm_over_last(x, 2)


# ---------------------------------------------------------------------------
# shape plumbing


def concat(parts, axis=-1) -> DiffValue:
    parts = [_wrap(p) for p in parts]
    sizes = [p.value.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)
    rules = []
    for p, start in zip(parts, offsets[:-1]):
        length = p.value.shape[axis]

        def grad(g, start=start, length=length):
            index = [slice(None)] * g.ndim
            index[axis] = slice(start, start + length)
            return g[tuple(index)]

        rules.append((p, grad))
    return _node(np.concatenate([p.value for p in parts], axis=axis), rules)


def narrow(x, axis, start, length) -> DiffValue:
    """Contiguous slice along one axis (grad zero-pads back)."""
    x = _wrap(x)
    index = [slice(None)] * x.value.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)

    def grad(g):
        out = np.zeros_like(x.value)
        out[index] = g
        return out

    return _node(x.value[index], [(x, grad)])


def reshape(x, shape) -> DiffValue:
    x = _wrap(x)
    return _node(
        x.value.reshape(shape),
        [(x, lambda g: g.reshape(x.value.shape))],
    )


def expand_dims(x, axis) -> DiffValue:
    x = _wrap(x)
    return _node(
        np.expand_dims(x.value, axis),
        [(x, lambda g: np.squeeze(g, axis=axis))],
    )


# ---------------------------------------------------------------------------
# activations


def _sigmoid(x):
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def sigmoid(x) -> DiffValue:
    x = _wrap(x)
    s = _sigmoid(x.value)
    return _node(s, [(x, lambda g: g * s * (1.0 - s))])


def _silu_grad(g, x, s):
    # x * (1 - s) underflows to 0 for large x; inf inputs would raise here
    with np.errstate(invalid="ignore"):
        return g * s * (1.0 + x * (1.0 - s))


def silu(x) -> DiffValue:
    x = _wrap(x)
    s = _sigmoid(x.value)
    return _node(
        x.value * s,
        [(x, lambda g: _silu_grad(g, x.value, s))],
    )


def softplus(x) -> DiffValue:
    x = _wrap(x)
    return _node(
        np.logaddexp(0.0, x.value),
        [(x, lambda g: g * _sigmoid(x.value))],
    )


# ---------------------------------------------------------------------------
# reductions and graph aggregation


def sum_over(x, axis=None, keepdims=False) -> DiffValue:
    x = _wrap(x)

    def grad(g):
        if axis is None:
            return np.broadcast_to(g, x.value.shape).copy()
        gg = g if keepdims else np.expand_dims(g, axis)
        return np.broadcast_to(gg, x.value.shape).copy()

    return _node(np.sum(x.value, axis=axis, keepdims=keepdims), [(x, grad)])


def gather(x, idx) -> DiffValue:
    """Select rows along axis 0: (N, ...) -> (len(idx), ...)."""
    x = _wrap(x)
    idx = np.asarray(idx, dtype=np.intp)

    def grad(g):
        out = np.zeros_like(x.value)
        np.add.at(out, idx, g)
        return out

    return _node(x.value[idx], [(x, grad)])


def scatter_sum(x, idx, n) -> DiffValue:
    """Sum rows of x (E, ...) onto n destinations given by idx (E,)."""
    x = _wrap(x)
    idx = np.asarray(idx, dtype=np.intp)
    if len(idx) != x.value.shape[0]:
        raise ShapeMismatch(f"scatter_sum: {len(idx)} indices for {x.value.shape[0]} rows")
    out = np.zeros((n,) + x.value.shape[1:], dtype=x.value.dtype)
    np.add.at(out, idx, x.value)
    return _node(out, [(x, lambda g: g[idx])])

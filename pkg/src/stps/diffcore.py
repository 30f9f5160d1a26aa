"""Small reverse-mode differentiation core over numpy float64 arrays.

Only the operations the forecaster needs are provided. Every op takes and
returns :class:`Node` objects; ``backward`` sweeps the recorded graph in
reverse topological order and accumulates gradients additively.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class Node:
    """A float64 array participating in reverse-mode differentiation."""

    __slots__ = ("value", "grad", "requires_grad", "parents", "backward_fn", "name")

    def __init__(self, value, requires_grad=False, parents=(), backward_fn=None, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self, retain_intermediate=False):
        backward(self, retain_intermediate=retain_intermediate)


def constant(value) -> Node:
    return value if isinstance(value, Node) else Node(value)


def parameter(value, name=None) -> Node:
    return Node(np.array(value, dtype=np.float64), requires_grad=True, name=name)


def _make(value, parents, backward_fn):
    if any(p.requires_grad for p in parents):
        return Node(value, True, parents, backward_fn)
    return Node(value)


def _sum_to_leading(g, ndim):
    """Collapse extra leading axes of ``g`` so that it has ``ndim`` axes."""
    if g.ndim == ndim:
        return g
    return g.reshape((-1,) + g.shape[g.ndim - ndim:]).sum(axis=0)


# ---------------------------------------------------------------- linear algebra

def matmul(a: Node, b: Node) -> Node:
    if a.value.ndim < 2 or b.value.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    lead_a, lead_b = a.shape[:-2], b.shape[:-2]
    if lead_a and lead_b and lead_a != lead_b:
        raise ShapeError(f"matmul batch dimensions disagree: {a.shape} x {b.shape}")
    av, bv = a.value, b.value
    out = np.matmul(av, bv)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _sum_to_leading(np.matmul(g, np.swapaxes(bv, -1, -2)), av.ndim)
        if b.requires_grad:
            if not lead_b and lead_a:
                gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _sum_to_leading(np.matmul(np.swapaxes(av, -1, -2), g), bv.ndim)
        return ga, gb

    return _make(out, (a, b), bw)


def transpose(a: Node) -> Node:
    if a.value.ndim < 2:
        raise ShapeError(f"transpose needs rank >= 2, got shape {a.shape}")
    return _make(np.swapaxes(a.value, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def affine(x: Node, W: Node, b: Node) -> Node:
    """``x @ W + b`` along the last axis of ``x``."""
    p, q = W.shape
    if x.shape[-1] != p or b.shape != (q,):
        raise ShapeError(f"affine shapes disagree: x {x.shape}, W {W.shape}, b {b.shape}")
    xv, Wv = x.value.reshape(-1, p), W.value
    out = (xv @ Wv + b.value).reshape(x.shape[:-1] + (q,))

    def bw(g):
        g2 = g.reshape(-1, q)
        gx = (g2 @ Wv.T).reshape(x.shape) if x.requires_grad else None
        gW = xv.T @ g2 if W.requires_grad else None
        gb = g2.sum(axis=0) if b.requires_grad else None
        return gx, gW, gb

    return _make(out, (x, W, b), bw)


# ---------------------------------------------------------------- elementwise

def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op} needs equal shapes, got {a.shape} and {b.shape}")


def add(a: Node, b: Node) -> Node:
    _same_shape(a, b, "add")
    return _make(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a: Node, b: Node) -> Node:
    _same_shape(a, b, "sub")
    return _make(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a: Node, b: Node) -> Node:
    _same_shape(a, b, "mul")
    av, bv = a.value, b.value
    return _make(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a: Node, s: float) -> Node:
    s = float(s)
    if not np.isfinite(s):
        raise ValueError(f"scale factor must be finite, got {s}")
    return _make(a.value * s, (a,), lambda g: (g * s,))


def shift(a: Node, c: float) -> Node:
    c = float(c)
    return _make(a.value + c, (a,), lambda g: (g,))


def relu(a: Node) -> Node:
    mask = a.value > 0
    return _make(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def absolute(a: Node) -> Node:
    sign = np.sign(a.value)
    return _make(np.abs(a.value), (a,), lambda g: (g * sign,))


def square(a: Node) -> Node:
    v = a.value
    return _make(v * v, (a,), lambda g: (2.0 * v * g,))


def dropout(a: Node, rate: float, training: bool, rng: np.random.Generator | None = None) -> Node:
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in training mode needs a seeded generator")
    # float32 uniforms are plenty for a keep/drop decision and half the cost
    mask = (rng.random(a.shape, dtype=np.float32) >= rate) * (1.0 / (1.0 - rate))
    return _make(a.value * mask, (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------- reductions & layout

def sum_all(a: Node) -> Node:
    shape = a.shape
    return _make(np.sum(a.value), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a: Node) -> Node:
    shape, size = a.shape, a.value.size
    return _make(np.mean(a.value), (a,), lambda g: (np.full(shape, float(g) / size),))


def reshape(a: Node, shape) -> Node:
    old = a.shape
    return _make(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def concat(parts: Sequence[Node], axis: int) -> Node:
    if not parts:
        raise ShapeError("concat needs at least one part")
    values = [p.value for p in parts]
    ndim = values[0].ndim
    ax = axis % ndim
    for v in values[1:]:
        if v.ndim != ndim or v.shape[:ax] + v.shape[ax + 1:] != values[0].shape[:ax] + values[0].shape[ax + 1:]:
            raise ShapeError(
                f"concat along axis {axis} needs matching other dimensions, got "
                f"{[tuple(x.shape) for x in values]}")
    cuts = np.cumsum([v.shape[ax] for v in values])[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=ax))

    return _make(np.concatenate(values, axis=ax), tuple(parts), bw)


def concat_features(parts: Sequence[Node]) -> Node:
    """Concatenate ``[..., n, d_i]`` parts along the feature axis."""
    if parts and len({p.shape[:-1] for p in parts}) != 1:
        raise ShapeError(f"concat_features needs a shared leading shape, got {[p.shape for p in parts]}")
    return concat(parts, axis=-1)


def gather(a: Node, indices, axis: int = 0) -> Node:
    idx = np.asarray(indices, dtype=np.intp)
    ax = axis % a.value.ndim
    size = a.shape[ax]
    if idx.size and (idx.min() < 0 or idx.max() >= size):
        bad = int(idx[(idx < 0) | (idx >= size)].flat[0])
        raise IndexError(f"index {bad} out of range for axis of size {size}")
    out = np.take(a.value, idx, axis=ax)
    shape = a.shape

    def bw(g):
        ga = np.zeros(shape)
        if idx.ndim == 1 and ax == 0:
            np.add.at(ga, idx, g)
        else:
            ga_m = np.moveaxis(ga, ax, 0)
            g_m = np.moveaxis(g, list(range(ax, ax + idx.ndim)), list(range(idx.ndim)))
            np.add.at(ga_m, idx, g_m)
        return (ga,)

    return _make(out, (a,), bw)


def embedding_lookup(bank: Node, indices) -> Node:
    """Row gather from a ``K x d`` bank; output shape is ``indices.shape + (d,)``."""
    if bank.value.ndim != 2:
        raise ShapeError(f"embedding bank must be 2-d, got {bank.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    K, d = bank.shape
    if idx.size and (idx.min() < 0 or idx.max() >= K):
        bad = int(idx[(idx < 0) | (idx >= K)].flat[0])
        raise IndexError(f"embedding index {bad} out of range for bank with K={K} rows")
    flat = idx.reshape(-1)
    out = bank.value[flat].reshape(idx.shape + (d,))

    def bw(g):
        gb = np.zeros((K, d))
        np.add.at(gb, flat, g.reshape(-1, d))
        return (gb,)

    return _make(out, (bank,), bw)


def weighted_lookup(bank: Node, indices, weights: Node, bias: Node) -> Node:
    """Gather bank rows per slot and contract the slot axis with learned weights.

    ``indices`` has shape ``(..., L)``; the result is
    ``sum_k weights[k] * bank[indices[..., k]] + bias`` with shape ``(..., d)``.
    Equivalent to ``embedding_lookup`` followed by a linear map over the slot
    axis, but without materialising the ``(..., L, d)`` intermediate.
    """
    idx = np.asarray(indices, dtype=np.intp)
    K, d = bank.shape
    L = idx.shape[-1]
    if weights.shape != (L,) or bias.shape != (1,):
        raise ShapeError(f"slot weights {weights.shape} / bias {bias.shape} do not fit {L} slots")
    if idx.size and (idx.min() < 0 or idx.max() >= K):
        bad = int(idx[(idx < 0) | (idx >= K)].flat[0])
        raise IndexError(f"embedding index {bad} out of range for bank with K={K} rows")
    lead = idx.shape[:-1]
    flat = idx.reshape(-1, L)
    R = flat.shape[0]
    cells = (np.arange(R)[:, None] * K + flat).reshape(-1)
    w = weights.value
    mix = np.bincount(cells, weights=np.tile(w, R), minlength=R * K).reshape(R, K)
    bv = bank.value
    out = (mix @ bv + bias.value[0]).reshape(lead + (d,))

    def bw(g):
        g2 = g.reshape(R, d)
        gbank = mix.T @ g2 if bank.requires_grad else None
        gw = None
        if weights.requires_grad:
            proj = g2 @ bv.T
            gw = np.take_along_axis(proj, flat, axis=1).sum(axis=0)
        gbias = np.array([g2.sum()]) if bias.requires_grad else None
        return gbank, gw, gbias

    return _make(out, (bank, weights, bias), bw)


# ---------------------------------------------------------------- blocks

@dataclass
class BlockParams:
    """Two pointwise layers plus an optional learned skip projection."""

    w1: Node
    b1: Node
    w2: Node
    b2: Node
    ws: Node | None = None
    bs: Node | None = None

    @property
    def in_width(self):
        return self.w1.shape[0]

    @property
    def out_width(self):
        return self.w2.shape[1]


def residual_block(x: Node, params: BlockParams, rate: float = 0.0, training: bool = False,
                   rng: np.random.Generator | None = None) -> Node:
    """layer1 -> relu -> dropout -> layer2, plus the (projected) input."""
    p, h = params.w1.shape
    if params.w2.shape[0] != h:
        raise ShapeError(f"hidden widths disagree: {params.w1.shape} then {params.w2.shape}")
    q = params.w2.shape[1]
    if x.shape[-1] != p:
        raise ShapeError(f"block expects width {p}, got input shape {x.shape}")
    hidden = dropout(relu(affine(x, params.w1, params.b1)), rate, training, rng)
    out = affine(hidden, params.w2, params.b2)
    if params.ws is None:
        if p != q:
            raise ShapeError(f"identity skip impossible for width change {p} -> {q}")
        return add(out, x)
    return add(out, affine(x, params.ws, params.bs))


# ---------------------------------------------------------------- backward

def _topological(root: Node) -> list[Node]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Node, retain_intermediate: bool = False) -> None:
    """Populate ``grad`` on every leaf reachable from the scalar ``loss``.

    Leaf gradients accumulate across calls until cleared; intermediate
    gradients are kept only when ``retain_intermediate`` is set.
    """
    if loss.value.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    pending = {id(loss): np.ones_like(loss.value)}
    for node in reversed(_topological(loss)):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if not node.parents:
            node.grad = g if node.grad is None else node.grad + g
            continue
        if retain_intermediate:
            node.grad = g
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            pending[key] = pending[key] + pg if key in pending else pg


# ---------------------------------------------------------------- parameters & AdamW

@dataclass
class ParamEntry:
    node: Node
    adam_m: np.ndarray
    adam_v: np.ndarray
    step_count: int = 0


@dataclass
class ParameterStore:
    entries: dict[str, ParamEntry] = field(default_factory=dict)

    def add(self, name: str, value) -> Node:
        if name in self.entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        node = parameter(value, name=name)
        self.entries[name] = ParamEntry(node, np.zeros(node.shape), np.zeros(node.shape))
        return node

    def __getitem__(self, name) -> Node:
        return self.entries[name].node

    def __contains__(self, name):
        return name in self.entries

    def names(self) -> list[str]:
        return sorted(self.entries)

    def zero_grad(self):
        for e in self.entries.values():
            e.node.grad = None

    def reset_moments(self):
        for e in self.entries.values():
            e.adam_m[...] = 0.0
            e.adam_v[...] = 0.0
            e.step_count = 0

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: e.node.value.copy() for k, e in self.entries.items()}

    def restore(self, values: dict[str, np.ndarray]):
        for k, v in values.items():
            self.entries[k].node.value[...] = v

    def with_grad(self) -> list[str]:
        return [k for k in self.names() if self.entries[k].node.grad is not None]


def adamw_step(store: ParameterStore, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8,
               weight_decay=1e-3, names: Iterable[str] | None = None) -> None:
    """Decoupled-weight-decay Adam update, then clear gradients."""
    selected = store.names() if names is None else list(names)
    for name in selected:
        if store.entries[name].node.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient")
    for name in selected:
        e = store.entries[name]
        theta, g = e.node.value, e.node.grad
        e.step_count += 1
        e.adam_m *= beta1
        e.adam_m += (1.0 - beta1) * g
        e.adam_v *= beta2
        e.adam_v += (1.0 - beta2) * g * g
        m_hat = e.adam_m / (1.0 - beta1 ** e.step_count)
        v_hat = e.adam_v / (1.0 - beta2 ** e.step_count)
        if weight_decay:
            theta *= 1.0 - lr * weight_decay
        theta -= lr * m_hat / (np.sqrt(v_hat) + eps)
        e.node.grad = None


# ---------------------------------------------------------------- gradient checking

def grad_check(f: Callable[[], Node], params: Sequence[Node], step: float = 1e-5) -> float:
    """Max over coordinates of |analytic - numeric| / max(1, |numeric|).

    ``f`` rebuilds the scalar graph from the current parameter values; it must
    be deterministic (dropout off).
    """
    for p in params:
        p.grad = None
    loss = f()
    backward(loss)
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.value.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = float(f().value)
            flat[i] = orig - step
            down = float(f().value)
            flat[i] = orig
            numeric = (up - down) / (2.0 * step)
            worst = max(worst, abs(gflat[i] - numeric) / max(1.0, abs(numeric)))
        p.grad = None
    return worst

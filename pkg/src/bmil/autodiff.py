"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Node` wraps a numpy array and remembers, for each parent, a closure
mapping the upstream gradient to the parent's gradient contribution. Graphs are
built on the fly by the operations below and discarded after ``backward``.

Only two broadcasting forms are accepted: a trailing-axis vector against a
higher-rank array (the bias-add pattern, also used for per-feature scaling) and
a python scalar constant. Everything else must match shapes exactly.
"""

from __future__ import annotations

import contextlib
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

_GRAD_ENABLED = True


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf shows up in a forward value or a gradient."""


class ShapeError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block; results are constants."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {what}")


class Node:
    """A value in the computation graph.

    Leaves are created directly (``Node(array, requires_grad=True)``); interior
    nodes come out of the operations in this module.
    """

    __slots__ = ("value", "grad", "requires_grad", "name", "_parents")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        arr = np.array(value, dtype=np.float64)
        _check_finite(arr, name or "leaf value")
        self.value = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple = ()

    @classmethod
    def _make(cls, value: np.ndarray, parents: Sequence[tuple["Node", Callable]], what: str) -> "Node":
        _check_finite(value, what)
        node = cls.__new__(cls)
        node.value = value
        node.grad = None
        node.name = None
        live = tuple(p for p in parents if p[0].requires_grad) if _GRAD_ENABLED else ()
        node.requires_grad = bool(live)
        node._parents = live
        return node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Node":
        return Node._make(self.value, (), "detach")

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeError(f"expected a scalar, got shape {self.value.shape}")
        return float(self.value.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Node{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)


def as_node(x) -> Node:
    if isinstance(x, Node):
        return x
    return Node(x)


def _is_scalar_const(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


def _broadcast_kind(a: np.ndarray, b: np.ndarray) -> str:
    if a.shape == b.shape:
        return "same"
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return "row_b"
    if a.ndim == 1 and b.ndim >= 1 and b.shape[-1] == a.shape[0]:
        return "row_a"
    raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}")


def _sum_to_row(g: np.ndarray) -> np.ndarray:
    return g.reshape(-1, g.shape[-1]).sum(axis=0)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Node:
    if _is_scalar_const(b):
        a = as_node(a)
        return Node._make(a.value + b, ((a, lambda g: g),), "add")
    if _is_scalar_const(a):
        return add(b, a)
    a, b = as_node(a), as_node(b)
    kind = _broadcast_kind(a.value, b.value)
    out = a.value + b.value
    if kind == "same":
        return Node._make(out, ((a, lambda g: g), (b, lambda g: g)), "add")
    if kind == "row_b":
        return Node._make(out, ((a, lambda g: g), (b, _sum_to_row)), "add")
    return Node._make(out, ((a, _sum_to_row), (b, lambda g: g)), "add")


def neg(a) -> Node:
    a = as_node(a)
    return Node._make(-a.value, ((a, lambda g: -g),), "neg")


def sub(a, b) -> Node:
    if _is_scalar_const(a):
        return add(neg(b), a)
    if _is_scalar_const(b):
        return add(a, -b)
    return add(a, neg(b))


def mul(a, b) -> Node:
    if _is_scalar_const(b):
        return scale(a, b)
    if _is_scalar_const(a):
        return scale(b, a)
    a, b = as_node(a), as_node(b)
    kind = _broadcast_kind(a.value, b.value)
    av, bv = a.value, b.value
    out = av * bv
    if kind == "same":
        return Node._make(out, ((a, lambda g: g * bv), (b, lambda g: g * av)), "mul")
    if kind == "row_b":
        return Node._make(out, ((a, lambda g: g * bv), (b, lambda g: _sum_to_row(g * av))), "mul")
    return Node._make(out, ((a, lambda g: _sum_to_row(g * bv)), (b, lambda g: g * av)), "mul")


def scale(a, c: float) -> Node:
    a = as_node(a)
    c = float(c)
    return Node._make(a.value * c, ((a, lambda g: g * c),), "scale")


def tanh(a) -> Node:
    a = as_node(a)
    y = np.tanh(a.value)
    return Node._make(y, ((a, lambda g: g * (1.0 - y * y)),), "tanh")


def sigmoid(a) -> Node:
    a = as_node(a)
    y = _sigmoid(a.value)
    return Node._make(y, ((a, lambda g: g * y * (1.0 - y)),), "sigmoid")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def log(a) -> Node:
    a = as_node(a)
    if np.any(a.value <= 0):
        raise NonFiniteError("log of a non-positive value")
    av = a.value
    return Node._make(np.log(av), ((a, lambda g: g / av),), "log")


def exp(a) -> Node:
    a = as_node(a)
    y = np.exp(a.value)
    return Node._make(y, ((a, lambda g: g * y),), "exp")


def softplus(a) -> Node:
    """``log(1 + exp(a))`` computed without overflow."""
    a = as_node(a)
    av = a.value
    return Node._make(np.logaddexp(0.0, av), ((a, lambda g: g * _sigmoid(av)),), "softplus")


def square(a) -> Node:
    a = as_node(a)
    av = a.value
    return Node._make(av * av, ((a, lambda g: 2.0 * g * av),), "square")


def clip(a, lo: float, hi: float) -> Node:
    """Clamp values; the gradient is zero where the clamp is active."""
    a = as_node(a)
    av = a.value
    inside = (av >= lo) & (av <= hi)
    return Node._make(np.clip(av, lo, hi), ((a, lambda g: g * inside),), "clip")


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum(a, axis: int | None = None) -> Node:  # noqa: A001 - mirrors numpy
    a = as_node(a)
    shape = a.value.shape
    if axis is None:
        out = np.array(a.value.sum())
        return Node._make(out, ((a, lambda g: np.broadcast_to(g, shape).copy()),), "sum")
    ax = axis % len(shape)
    out = a.value.sum(axis=ax)
    return Node._make(out, ((a, lambda g: np.broadcast_to(np.expand_dims(g, ax), shape).copy()),), "sum")


def mean(a, axis: int | None = None) -> Node:
    a = as_node(a)
    n = a.value.size if axis is None else a.value.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def reshape(a, shape: Sequence[int]) -> Node:
    a = as_node(a)
    old = a.value.shape
    return Node._make(a.value.reshape(shape), ((a, lambda g: g.reshape(old)),), "reshape")


def concat(nodes: Sequence, axis: int = -1) -> Node:
    nodes = [as_node(n) for n in nodes]
    vals = [n.value for n in nodes]
    out = np.concatenate(vals, axis=axis)
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [v.shape[ax] for v in vals])
    parents = []
    for i, n in enumerate(nodes):
        lo, hi = int(bounds[i]), int(bounds[i + 1])
        idx = (slice(None),) * ax + (slice(lo, hi),)
        parents.append((n, lambda g, idx=idx: g[idx]))
    return Node._make(out, parents, "concat")


def stack(nodes: Sequence, axis: int = 0) -> Node:
    nodes = [as_node(n) for n in nodes]
    out = np.stack([n.value for n in nodes], axis=axis)
    parents = [(n, lambda g, i=i: np.take(g, i, axis=axis)) for i, n in enumerate(nodes)]
    return Node._make(out, parents, "stack")


class _IndexedGrad:
    """Gradient that touches only ``parent[key]``; the engine scatters it in place."""

    __slots__ = ("key", "g", "basic")

    def __init__(self, key, g, basic: bool):
        self.key, self.g, self.basic = key, g, basic


def _is_basic_key(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (int, np.integer, slice)) or k is Ellipsis for k in parts)


def take(a, key) -> Node:
    """Index a node with any numpy key; repeated indices accumulate gradient."""
    a = as_node(a)
    basic = _is_basic_key(key)
    out = np.asarray(a.value[key], dtype=np.float64)
    return Node._make(out, ((a, lambda g: _IndexedGrad(key, g, basic)),), "take")


def unstack(a, axis: int = 0) -> list[Node]:
    """Split along ``axis`` into separate nodes (cheap per-step access to a sequence)."""
    a = as_node(a)
    n = a.value.shape[axis]
    lead = (slice(None),) * (axis % a.value.ndim)
    return [take(a, lead + (i,)) for i in range(n)]


# slice is the spelled-out name used by callers that want it explicit
slice_ = take


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Node:
    """``a @ b`` where ``b`` is 2-D and ``a`` has any leading batch axes."""
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    if bv.ndim != 2 or av.shape[-1] != bv.shape[0]:
        raise ShapeError(f"matmul shapes {av.shape} @ {bv.shape}")
    out = av @ bv

    def grad_b(g):
        return av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])

    return Node._make(out, ((a, lambda g: g @ bv.T), (b, grad_b)), "matmul")


def linear(x, weight, bias) -> Node:
    """``x @ weight + bias`` fused into one node."""
    x, weight, bias = as_node(x), as_node(weight), as_node(bias)
    xv, wv = x.value, weight.value
    if wv.ndim != 2 or xv.shape[-1] != wv.shape[0] or bias.value.shape != (wv.shape[1],):
        raise ShapeError(f"linear shapes {xv.shape} @ {wv.shape} + {bias.value.shape}")
    out = xv @ wv + bias.value

    def grad_w(g):
        return xv.reshape(-1, xv.shape[-1]).T @ g.reshape(-1, g.shape[-1])

    return Node._make(out, ((x, lambda g: g @ wv.T), (weight, grad_w), (bias, _sum_to_row)), "linear")


def conv1d(x, kernels, bias=None, stride: int = 1, padding: int = 1) -> Node:
    """1-D cross-correlation over the sequence axis.

    ``x`` is ``(L, C_in)`` or ``(B, L, C_in)``; ``kernels`` is
    ``(kernel_size, C_in, C_out)``. Zero padding on both ends.
    """
    x, kernels = as_node(x), as_node(kernels)
    xv, kv = x.value, kernels.value
    squeeze = xv.ndim == 2
    if squeeze:
        xv = xv[None]
    if kv.ndim != 3 or xv.shape[-1] != kv.shape[1]:
        raise ShapeError(f"conv1d shapes {x.value.shape} with kernels {kv.shape}")
    bsz, length, c_in = xv.shape
    ksize, _, c_out = kv.shape
    l_out = (length + 2 * padding - ksize) // stride + 1
    if l_out < 1:
        raise ShapeError("conv1d output would be empty")
    xp = np.zeros((bsz, length + 2 * padding, c_in))
    xp[:, padding:padding + length] = xv
    idx = np.arange(l_out)[:, None] * stride + np.arange(ksize)[None, :]
    cols = xp[:, idx, :].reshape(bsz, l_out, ksize * c_in)
    wmat = kv.reshape(ksize * c_in, c_out)
    out = cols @ wmat
    parents = []
    if bias is not None:
        bias = as_node(bias)
        out = out + bias.value
        parents.append((bias, _sum_to_row))
    if squeeze:
        out = out[0]

    def grad_x(g):
        g3 = g[None] if squeeze else g
        gcols = (g3 @ wmat.T).reshape(bsz, l_out, ksize, c_in)
        gxp = np.zeros_like(xp)
        for j in range(ksize):
            np.add.at(gxp, (slice(None), idx[:, j]), gcols[:, :, j, :])
        gx = gxp[:, padding:padding + length]
        return gx[0] if squeeze else gx

    def grad_k(g):
        g3 = g[None] if squeeze else g
        return (cols.reshape(-1, ksize * c_in).T @ g3.reshape(-1, c_out)).reshape(kv.shape)

    parents = [(x, grad_x), (kernels, grad_k)] + parents
    return Node._make(out, parents, "conv1d")


def _shared_backward(compute: Callable[[np.ndarray], tuple]) -> list[Callable]:
    """Per-parent closures over one joint backward computation (run once per ``g``)."""
    cache: dict = {}

    def part(i):
        def fn(g):
            if cache.get("g") is not g:
                cache["g"] = g
                cache["out"] = compute(g)
            return cache["out"][i]
        return fn

    return part


def gru_cell(h, xproj, u_zr, u_h) -> Node:
    """Fused GRU update given input-side pre-activations ``xproj = x W_x + b``.

    ``xproj`` columns are ordered ``z | r | candidate``. Returns
    ``h + z * (tanh(xh + (r * h) U_h) - h)`` with
    ``[z, r] = sigmoid([xz, xr] + h U_zr)``.
    """
    h, xproj, u_zr, u_h = as_node(h), as_node(xproj), as_node(u_zr), as_node(u_h)
    hv, xv, uzr, uh = h.value, xproj.value, u_zr.value, u_h.value
    hs = hv.shape[-1]
    if xv.shape[:-1] != hv.shape[:-1] or xv.shape[-1] != 3 * hs or uzr.shape != (hs, 2 * hs) or uh.shape != (hs, hs):
        raise ShapeError(f"gru_cell shapes h={hv.shape} xproj={xv.shape} u_zr={uzr.shape} u_h={uh.shape}")
    zr = _sigmoid(xv[..., :2 * hs] + hv @ uzr)
    z, r = zr[..., :hs], zr[..., hs:]
    rh = r * hv
    cand = np.tanh(xv[..., 2 * hs:] + rh @ uh)
    out = hv + z * (cand - hv)

    def compute(g):
        dh = g * (1.0 - z)
        da_h = g * z * (1.0 - cand * cand)
        drh = da_h @ uh.T
        da_zr = np.concatenate([g * (cand - hv), drh * hv], axis=-1) * zr * (1.0 - zr)
        dh = dh + drh * r + da_zr @ uzr.T
        dx = np.concatenate([da_zr, da_h], axis=-1)
        flat_h = hv.reshape(-1, hs)
        d_uzr = flat_h.T @ da_zr.reshape(-1, 2 * hs)
        d_uh = rh.reshape(-1, hs).T @ da_h.reshape(-1, hs)
        return dh, dx, d_uzr, d_uh

    part = _shared_backward(compute)
    return Node._make(out, ((h, part(0)), (xproj, part(1)), (u_zr, part(2)), (u_h, part(3))), "gru_cell")


def gru_sequence(h0, xproj, u_zr, u_h) -> Node:
    """Unroll :func:`gru_cell` over the leading axis of ``xproj`` in one node.

    ``xproj`` is ``(T, ..., 3H)``; the result stacks the hidden states
    ``h_1 .. h_T`` as ``(T, ..., H)``. Weight gradients are formed with one
    matrix product over all steps instead of one per step.
    """
    h0, xproj, u_zr, u_h = as_node(h0), as_node(xproj), as_node(u_zr), as_node(u_h)
    h0v, xv, uzr, uh = h0.value, xproj.value, u_zr.value, u_h.value
    hs = h0v.shape[-1]
    steps = xv.shape[0]
    if xv.shape[1:-1] != h0v.shape[:-1] or xv.shape[-1] != 3 * hs or uzr.shape != (hs, 2 * hs) or uh.shape != (hs, hs):
        raise ShapeError(f"gru_sequence shapes h0={h0v.shape} xproj={xv.shape}")
    hseq = np.empty(xv.shape[:-1] + (hs,))
    zrs = np.empty(xv.shape[:-1] + (2 * hs,))
    cands = np.empty_like(hseq)
    h = h0v
    for t in range(steps):
        zr = _sigmoid(xv[t, ..., :2 * hs] + h @ uzr)
        cand = np.tanh(xv[t, ..., 2 * hs:] + (zr[..., hs:] * h) @ uh)
        h = h + zr[..., :hs] * (cand - h)
        hseq[t], zrs[t], cands[t] = h, zr, cand

    def compute(g):
        dx = np.empty_like(xv)
        dh = np.zeros_like(h0v)
        for t in range(steps - 1, -1, -1):
            hp = h0v if t == 0 else hseq[t - 1]
            zr, cand = zrs[t], cands[t]
            z, r = zr[..., :hs], zr[..., hs:]
            gt = g[t] + dh
            da_h = gt * z * (1.0 - cand * cand)
            drh = da_h @ uh.T
            da_zr = np.concatenate([gt * (cand - hp), drh * hp], axis=-1) * zr * (1.0 - zr)
            dh = gt * (1.0 - z) + drh * r + da_zr @ uzr.T
            dx[t, ..., :2 * hs] = da_zr
            dx[t, ..., 2 * hs:] = da_h
        prev = np.concatenate([h0v[None], hseq[:-1]], axis=0).reshape(-1, hs)
        d_uzr = prev.T @ dx[..., :2 * hs].reshape(-1, 2 * hs)
        rh = (zrs[..., hs:].reshape(-1, hs)) * prev
        d_uh = rh.T @ dx[..., 2 * hs:].reshape(-1, hs)
        return dh, dx, d_uzr, d_uh

    part = _shared_backward(compute)
    return Node._make(hseq, ((h0, part(0)), (xproj, part(1)), (u_zr, part(2)), (u_h, part(3))), "gru_sequence")


# ---------------------------------------------------------------------------
# backward


def _toposort(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack_: list[tuple[Node, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for parent, _ in node._parents:
            if id(parent) not in seen:
                stack_.append((parent, False))
    return order


def backward(root: Node) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every grad-requiring leaf."""
    if root.value.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.value.shape}")
    if not root.requires_grad:
        return
    order = _toposort(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    owned: set[int] = set()
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node._parents:
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, fn in node._parents:
            pg = fn(g)
            key = id(parent)
            if isinstance(pg, _IndexedGrad):
                if not np.isfinite(pg.g).all():
                    raise NonFiniteError("non-finite gradient during backward")
                buf = grads.get(key)
                if buf is None:
                    buf = np.zeros(parent.value.shape)
                    owned.add(key)
                elif key not in owned:
                    buf = np.array(buf)
                    owned.add(key)
                if pg.basic:
                    buf[pg.key] += pg.g
                else:
                    np.add.at(buf, pg.key, pg.g)
                grads[key] = buf
                continue
            if not np.isfinite(pg).all():
                raise NonFiniteError("non-finite gradient during backward")
            prev = grads.get(key)
            if prev is None:
                grads[key] = pg
            elif key in owned:
                prev += pg
            else:
                # asarray keeps 0-d sums as arrays so later += stays in place
                grads[key] = np.asarray(prev + pg)
                owned.add(key)


def zero_grad(params: Iterable[Node]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class RmsPropState:
    """RMSProp with linearly decaying learning rate.

    ``effective_lr = base_lr * max(0, 1 - step_count / total_steps)``.
    """

    total_steps: int
    base_lr: float = 3e-4
    decay: float = 0.99
    epsilon: float = 1e-8
    max_grad_norm: float | None = None
    step_count: int = 0
    square_avg: list[np.ndarray] = field(default_factory=list)

    @property
    def effective_lr(self) -> float:
        return self.base_lr * max(0.0, 1.0 - self.step_count / self.total_steps)


def rmsprop_step(params: Sequence[Node], state: RmsPropState) -> bool:
    """Apply one update in place. Returns False (and warns) once the schedule is spent."""
    if not state.square_avg:
        state.square_avg = [np.zeros_like(p.value) for p in params]
    if len(state.square_avg) != len(params):
        raise ValueError("parameter list changed between optimizer steps")
    if state.step_count >= state.total_steps:
        logger.warning("rmsprop_step called after the decay schedule ended; skipping")
        return False
    lr = state.effective_lr
    grads = [np.zeros_like(p.value) if p.grad is None else p.grad for p in params]
    if state.max_grad_norm is not None:
        norm = float(np.sqrt(np.sum([np.sum(g * g) for g in grads])))
        if norm > state.max_grad_norm:
            grads = [g * (state.max_grad_norm / (norm + 1e-12)) for g in grads]
    for p, g, sq in zip(params, grads, state.square_avg):
        sq *= state.decay
        sq += (1.0 - state.decay) * g * g
        p.value = p.value - lr * g / (np.sqrt(sq) + state.epsilon)
    state.step_count += 1
    return True

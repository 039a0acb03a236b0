"""Reverse-mode automatic differentiation on numpy arrays.

A global :class:`Tape` records every operation whose output needs gradients,
in creation order (which is automatically topological: an operation's inputs
exist before its output). :func:`backward` seeds the loss gradient and walks
the tape in reverse, invoking each recorded node's backward rule exactly once.
Backward rules skip gradient computation for parents that do not require it,
so freezing a parameter set (e.g. the network weights during an architecture
step) also skips the work of differentiating with respect to it.

Broadcasting is deliberately narrow: :func:`add` supports same-shape operands,
scalars, and right-aligned bias shapes; :func:`mul` supports same-shape and
scalar operands. Everything else must match shapes exactly, which keeps each
backward rule short enough to audit by eye.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

from . import precision
from .errors import ShapeError


class Tensor:
    """An n-d float array plus the bookkeeping needed for backprop.

    ``grad`` is allocated lazily on first accumulation and is always the same
    shape as ``values``. Tensors with ``requires_grad=False`` never receive
    gradient accumulation.
    """

    __slots__ = ("values", "grad", "requires_grad", "node_id", "tape_gen")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=precision.dtype())
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node_id = -1  # index into the active tape, -1 for leaves
        self.tape_gen = -1

    @property
    def shape(self):
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.values.copy())

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"

    # thin operator sugar over the module-level ops
    def __add__(self, other):
        return add(self, as_tensor(other))

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, as_tensor(other))

    def __rmul__(self, other):
        return mul(as_tensor(other), self)

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "parents", "backward_fn")

    def __init__(self, out, parents, backward_fn):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of operations; cleared between optimization steps."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.generation = 0

    def reset(self) -> None:
        self.nodes.clear()
        self.generation += 1


_TAPE = Tape()
_GRAD_ENABLED = True


def active_tape() -> Tape:
    return _TAPE


def reset_tape() -> None:
    """Drop all recorded nodes. Call once per optimization step."""
    _TAPE.reset()


@contextmanager
def no_grad():
    """Evaluate without recording; outputs have ``requires_grad=False``."""
    global _GRAD_ENABLED
    saved = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = saved


def _record(out: Tensor, parents, backward_fn) -> Tensor:
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node_id = len(_TAPE.nodes)
        out.tape_gen = _TAPE.generation
        _TAPE.nodes.append(_Node(out, parents, backward_fn))
    return out


def _accum(t: Tensor, g) -> None:
    """Accumulate into t.grad without copying.

    Backward rules hand over arrays they own (or views of the node's own
    output gradient, which is final by the time the rule runs); a rule that
    would alias one buffer to two different tensors must copy for the second,
    see :func:`add`.
    """
    if t.grad is None:
        t.grad = g if isinstance(g, np.ndarray) else np.asarray(g, dtype=precision.dtype())
    else:
        t.grad = t.grad + g if t.grad.base is not None else t.grad.__iadd__(g)


def backward(loss: Tensor) -> None:
    """Fill ``.grad`` on every ancestor of ``loss`` by reverse tape traversal.

    Gradients accumulate additively across calls; use ``zero_grad`` between
    optimization steps. Raises for non-scalar losses and for tensors recorded
    on a tape that has since been reset.
    """
    if loss.values.shape != ():
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.values.shape}")
    if not loss.requires_grad:
        raise ValueError("backward on a tensor with requires_grad=False: nothing to differentiate")
    if loss.tape_gen != _TAPE.generation:
        raise ValueError("backward on a stale tensor: the tape has been reset since it was recorded")

    nodes = _TAPE.nodes
    needed = bytearray(loss.node_id + 1)
    needed[loss.node_id] = 1
    for idx in range(loss.node_id, -1, -1):
        if needed[idx]:
            for p in nodes[idx].parents:
                if p.node_id >= 0 and p.tape_gen == _TAPE.generation and p.node_id < idx:
                    needed[p.node_id] = 1

    _accum(loss, np.ones((), dtype=precision.dtype()))
    for idx in range(loss.node_id, -1, -1):
        if needed[idx]:
            node = nodes[idx]
            if node.out.grad is not None:
                node.backward_fn(node.out.grad)


# ---------------------------------------------------------------------------
# elementwise and shape ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    """a + b. Shapes must match, or b must be a scalar or a right-aligned
    trailing shape of a (bias add)."""
    av, bv = a.values, b.values
    if av.shape == bv.shape:
        out = Tensor(av + bv)

        def _bwd(g):
            if a.requires_grad:
                _accum(a, g)
            if b.requires_grad:
                # copy when g's buffer was just handed to `a`
                _accum(b, g.copy() if (a.requires_grad and a.grad is g) else g)

        return _record(out, (a, b), _bwd)
    if bv.shape == ():
        out = Tensor(av + bv)

        def _bwd(g):
            if a.requires_grad:
                _accum(a, g)
            if b.requires_grad:
                _accum(b, g.sum())

        return _record(out, (a, b), _bwd)
    if bv.ndim < av.ndim and av.shape[av.ndim - bv.ndim:] == bv.shape:
        out = Tensor(av + bv)
        lead = tuple(range(av.ndim - bv.ndim))

        def _bwd(g):
            if a.requires_grad:
                _accum(a, g)
            if b.requires_grad:
                _accum(b, g.sum(axis=lead))

        return _record(out, (a, b), _bwd)
    raise ShapeError(f"add: cannot combine shapes {av.shape} and {bv.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    """a - b for same-shape or scalar operands."""
    av, bv = a.values, b.values
    if av.shape != bv.shape and bv.shape != () and av.shape != ():
        raise ShapeError(f"sub: cannot combine shapes {av.shape} and {bv.shape}")
    out = Tensor(av - bv)

    def _bwd(g):
        if a.requires_grad:
            _accum(a, g if av.shape == g.shape else g.sum())
        if b.requires_grad:
            _accum(b, -g if bv.shape == g.shape else -g.sum())

    return _record(out, (a, b), _bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; one operand may be a scalar."""
    av, bv = a.values, b.values
    if av.shape != bv.shape and av.shape != () and bv.shape != ():
        raise ShapeError(f"mul: cannot combine shapes {av.shape} and {bv.shape}")
    out = Tensor(av * bv)

    def _bwd(g):
        if a.requires_grad:
            ga = g * bv
            _accum(a, ga if ga.shape == av.shape else ga.sum())
        if b.requires_grad:
            gb = g * av
            _accum(b, gb if gb.shape == bv.shape else gb.sum())

    return _record(out, (a, b), _bwd)


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.values, 0.0))
    if not (_GRAD_ENABLED and x.requires_grad):
        return out
    mask = x.values > 0

    def _bwd(g):
        _accum(x, g * mask)

    return _record(out, (x,), _bwd)


def absolute(x: Tensor) -> Tensor:
    """|x| with subgradient 0 at x == 0."""
    out = Tensor(np.abs(x.values))
    if not (_GRAD_ENABLED and x.requires_grad):
        return out
    sign = np.sign(x.values)

    def _bwd(g):
        _accum(x, g * sign)

    return _record(out, (x,), _bwd)


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.values.reshape(shape))
    orig = x.values.shape

    def _bwd(g):
        _accum(x, g.reshape(orig))

    return _record(out, (x,), _bwd)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out = Tensor(x.values.transpose(axes))
    inv = tuple(np.argsort(axes))

    def _bwd(g):
        _accum(x, np.ascontiguousarray(g.transpose(inv)))

    return _record(out, (x,), _bwd)


def take_row(x: Tensor, i: int) -> Tensor:
    """Row i of a 2-d tensor, as a 1-d tensor."""
    if x.values.ndim != 2:
        raise ShapeError(f"take_row expects a 2-d tensor, got shape {x.values.shape}")
    out = Tensor(x.values[i].copy())

    def _bwd(g):
        full = np.zeros_like(x.values)
        full[i] = g
        _accum(x, full)

    return _record(out, (x,), _bwd)


def index(x: Tensor, i: int) -> Tensor:
    """Element i of a 1-d tensor, as a scalar tensor."""
    if x.values.ndim != 1:
        raise ShapeError(f"index expects a 1-d tensor, got shape {x.values.shape}")
    out = Tensor(x.values[i])

    def _bwd(g):
        full = np.zeros_like(x.values)
        full[i] = g
        _accum(x, full)

    return _record(out, (x,), _bwd)


def _reduce_axes(x: Tensor, axis):
    if axis is None:
        return tuple(range(x.values.ndim))
    if isinstance(axis, int):
        return (axis % x.values.ndim,)
    return tuple(a % x.values.ndim for a in axis)


def tsum(x: Tensor, axis=None) -> Tensor:
    axes = _reduce_axes(x, axis)
    out = Tensor(x.values.sum(axis=axes))

    def _bwd(g):
        ge = np.expand_dims(g, axes)
        _accum(x, np.broadcast_to(ge, x.values.shape).copy())

    return _record(out, (x,), _bwd)


def tmean(x: Tensor, axis=None) -> Tensor:
    axes = _reduce_axes(x, axis)
    count = math.prod(x.values.shape[a] for a in axes)
    out = Tensor(x.values.mean(axis=axes))

    def _bwd(g):
        ge = np.expand_dims(g, axes) / count
        _accum(x, np.broadcast_to(ge, x.values.shape).copy())

    return _record(out, (x,), _bwd)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-d matrix product; backward accumulates g·bᵀ and aᵀ·g."""
    av, bv = a.values, b.values
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {av.shape} and {bv.shape}")
    out = Tensor(av @ bv)

    def _bwd(g):
        if a.requires_grad:
            _accum(a, g @ bv.T)
        if b.requires_grad:
            _accum(b, av.T @ g)

    return _record(out, (a, b), _bwd)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product for stacks of matrices: (B,m,k) x (B,k,n)."""
    av, bv = a.values, b.values
    if (
        av.ndim != 3
        or bv.ndim != 3
        or av.shape[0] != bv.shape[0]
        or av.shape[2] != bv.shape[1]
    ):
        raise ShapeError(f"bmm: incompatible shapes {av.shape} and {bv.shape}")
    out = Tensor(np.matmul(av, bv))

    def _bwd(g):
        if a.requires_grad:
            _accum(a, np.matmul(g, bv.transpose(0, 2, 1)))
        if b.requires_grad:
            _accum(b, np.matmul(av.transpose(0, 2, 1), g))

    return _record(out, (a, b), _bwd)


def softmax(x: Tensor, axis: int) -> Tensor:
    """Max-stabilized softmax along ``axis``; each slice sums to 1."""
    if not -x.values.ndim <= axis < x.values.ndim:
        raise ShapeError(f"softmax: axis {axis} out of range for shape {x.values.shape}")
    ax = axis % x.values.ndim
    shifted = x.values - x.values.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=ax, keepdims=True)
    out = Tensor(y)

    def _bwd(g):
        dot = (g * y).sum(axis=ax, keepdims=True)
        _accum(x, y * (g - dot))

    return _record(out, (x,), _bwd)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x @ weight + bias over the trailing axis; x may have any leading shape."""
    cin, cout = weight.values.shape
    if x.values.shape[-1] != cin:
        raise ShapeError(f"linear: input shape {x.values.shape} does not end in {cin}")
    if x.values.ndim == 2:
        return add(matmul(x, weight), bias)
    lead = x.values.shape[:-1]
    y = add(matmul(reshape(x, (-1, cin)), weight), bias)
    return reshape(y, lead + (cout,))


# ---------------------------------------------------------------------------
# multi-head attention contractions
# ---------------------------------------------------------------------------

def head_logits(q: Tensor, keys: Tensor, heads: int) -> Tensor:
    """Per-head query/key dot products.

    q: (P, heads, d); keys: (P, n, heads, d) -> logits (P, heads, n), where P
    indexes query positions and n the keys each position attends over.
    """
    qv, kv = q.values, keys.values
    if qv.ndim != 3 or kv.ndim != 4 or qv.shape[0] != kv.shape[0] \
            or qv.shape[1] != heads or kv.shape[2] != heads or qv.shape[2] != kv.shape[3]:
        raise ShapeError(f"head_logits: incompatible shapes {qv.shape} and {kv.shape}")
    out = Tensor(np.einsum("phd,pnhd->phn", qv, kv))

    def _bwd(g):
        if q.requires_grad:
            _accum(q, np.einsum("phn,pnhd->phd", g, kv))
        if keys.requires_grad:
            _accum(keys, np.einsum("phn,phd->pnhd", g, qv))

    return _record(out, (q, keys), _bwd)


def head_mix(attn: Tensor, vals: Tensor, heads: int) -> Tensor:
    """Per-head attention-weighted value sums.

    attn: (P, heads, n); vals: (P, n, heads, d) -> (P, heads, d).
    """
    av, vv = attn.values, vals.values
    if av.ndim != 3 or vv.ndim != 4 or av.shape[0] != vv.shape[0] \
            or av.shape[1] != heads or vv.shape[2] != heads or av.shape[2] != vv.shape[1]:
        raise ShapeError(f"head_mix: incompatible shapes {av.shape} and {vv.shape}")
    out = Tensor(np.einsum("phn,pnhd->phd", av, vv))

    def _bwd(g):
        if attn.requires_grad:
            _accum(attn, np.einsum("phd,pnhd->phn", g, vv))
        if vals.requires_grad:
            _accum(vals, np.einsum("phn,phd->pnhd", av, g))

    return _record(out, (attn, vals), _bwd)


# ---------------------------------------------------------------------------
# spatial ops: feature maps are (H, W, C) or batched (B, H, W, C)
# ---------------------------------------------------------------------------

def _spatial_view(x: Tensor):
    v = x.values
    if v.ndim == 3:
        return v[None], False
    if v.ndim == 4:
        return v, True
    raise ShapeError(f"expected a (H,W,C) or (B,H,W,C) tensor, got shape {v.shape}")


def avgpool2d(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2; spatial extents must be even."""
    v, batched = _spatial_view(x)
    b, h, w, c = v.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avgpool2d requires even spatial extents, got shape {x.values.shape}")
    y = v.reshape(b, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))
    out = Tensor(y if batched else y[0])

    def _bwd(g):
        gb = g if batched else g[None]
        gx = np.repeat(np.repeat(gb, 2, axis=1), 2, axis=2) / 4.0
        _accum(x, gx if batched else gx[0])

    return _record(out, (x,), _bwd)


def upsample_nearest2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of both spatial extents."""
    v, batched = _spatial_view(x)
    y = np.repeat(np.repeat(v, 2, axis=1), 2, axis=2)
    out = Tensor(y if batched else y[0])

    def _bwd(g):
        gb = g if batched else g[None]
        b, h2, w2, c = gb.shape
        gx = gb.reshape(b, h2 // 2, 2, w2 // 2, 2, c).sum(axis=(2, 4))
        _accum(x, gx if batched else gx[0])

    return _record(out, (x,), _bwd)


def unfold(x: Tensor, k: int) -> Tensor:
    """Gather the zero-padded k x k neighbourhood of every pixel.

    Output shape (H, W, k*k, C); window index di*k + dj corresponds to the
    spatial offset (di - k//2, dj - k//2), row-major over the window.
    """
    if k < 1 or k % 2 == 0:
        raise ShapeError(f"unfold requires an odd window size, got k={k}")
    v, batched = _spatial_view(x)
    b, h, w, c = v.shape
    pad = k // 2
    vp = np.pad(v, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(vp, (k, k), axis=(1, 2))
    # win: (B, H, W, C, k, k) -> (B, H, W, k*k, C)
    y = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(b, h, w, k * k, c)
    out = Tensor(y if batched else y[0])

    def _bwd(g):
        gb = g if batched else g[None]
        gp = np.zeros((b, h + 2 * pad, w + 2 * pad, c), dtype=precision.dtype())
        for di in range(k):
            for dj in range(k):
                gp[:, di:di + h, dj:dj + w, :] += gb[:, :, :, di * k + dj, :]
        gx = gp[:, pad:pad + h, pad:pad + w, :]
        _accum(x, gx if batched else np.ascontiguousarray(gx[0]))

    return _record(out, (x,), _bwd)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def l1_loss(pred: Tensor, target: Tensor, weight=None) -> Tensor:
    """Mean absolute difference; subgradient at zero difference is 0.

    ``weight`` is an optional non-differentiable array broadcastable to the
    operand shape; the loss becomes sum(weight*|d|) / sum(broadcast weight),
    and 0 when the weight is identically zero.
    """
    if pred.values.shape != target.values.shape:
        raise ShapeError(
            f"l1_loss: shape mismatch {pred.values.shape} vs {target.values.shape}"
        )
    d = pred.values - target.values
    sign = np.sign(d)
    if weight is None:
        denom = d.size
        val = np.abs(d).sum() / denom
        wfull = None
    else:
        wfull = np.broadcast_to(np.asarray(weight, dtype=precision.dtype()), d.shape)
        denom = wfull.sum()
        val = (np.abs(d) * wfull).sum() / denom if denom > 0 else 0.0
    out = Tensor(val)

    def _bwd(g):
        if denom <= 0:
            return
        gd = g * sign / denom if wfull is None else g * sign * wfull / denom
        if pred.requires_grad:
            _accum(pred, gd)
        if target.requires_grad:
            _accum(target, -gd)

    return _record(out, (pred, target), _bwd)


def cross_entropy(logits: Tensor, labels, smoothing: float = 0.0) -> Tensor:
    """Label-smoothed cross entropy, mean over the batch.

    The target distribution is q = (1 - smoothing)*onehot + smoothing/K.
    """
    lv = logits.values
    if lv.ndim != 2:
        raise ShapeError(f"cross_entropy expects (batch, classes) logits, got {lv.shape}")
    labels = np.asarray(labels)
    n, k = lv.shape
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy: {n} logit rows but labels shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(
            f"cross_entropy: labels must lie in [0, {k}), got range "
            f"[{labels.min()}, {labels.max()}]"
        )
    if not 0.0 <= smoothing < 1.0:
        raise ValueError(f"cross_entropy: smoothing must lie in [0, 1), got {smoothing}")

    m = lv.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(lv - m).sum(axis=1, keepdims=True))
    logp = lv - lse
    q = np.full((n, k), smoothing / k, dtype=precision.dtype())
    q[np.arange(n), labels] += 1.0 - smoothing
    out = Tensor(-(q * logp).sum() / n)

    def _bwd(g):
        p = np.exp(logp)
        _accum(logits, g * (p - q) / n)

    return _record(out, (logits,), _bwd)

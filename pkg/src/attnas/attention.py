"""Candidate self-attention operators and the bottleneck block built on them.

Two operator families are searchable: windowed local multi-head attention
(window 3/5/7, heads 4/8) and global token attention over all positions,
giving seven candidates in a fixed order (the candidate index used
everywhere else in the package):

    0 LocalSA_k3_h4   1 LocalSA_k3_h8   2 LocalSA_k5_h4   3 LocalSA_k5_h8
    4 LocalSA_k7_h4   5 LocalSA_k7_h8   6 NonLocalSA

Local attention logits are (q.k)/sqrt(d_head) + q.r, where r is a learned
relative-position table of shape (k, k, d_head), shared across heads and
zero-initialized. Out-of-bounds neighbours are gathered with zero padding and
participate in the softmax with zero key/value content (no masking). The
global operator scales by sqrt(C) and uses no positional term.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .layers import Linear
from .tensor import (
    Tensor,
    add,
    avgpool2d,
    bmm,
    head_logits,
    head_mix,
    matmul,
    mul,
    relu,
    reshape,
    softmax,
    transpose,
    unfold,
)

WINDOW_SIZES = (3, 5, 7)
HEAD_COUNTS = (4, 8)
REDUCTION_RATIO = 4
MIN_MID_CHANNELS = 8


@dataclass(frozen=True)
class CandidateOp:
    """One searchable operator: local windowed attention or global attention."""

    kind: str  # "local" | "nonlocal"
    window: int | None = None
    heads: int | None = None

    @property
    def name(self) -> str:
        if self.kind == "local":
            return f"LocalSA_k{self.window}_h{self.heads}"
        return "NonLocalSA"

    @staticmethod
    def from_name(name: str) -> "CandidateOp":
        for op in ALL_CANDIDATES:
            if op.name == name:
                return op
        if name == "LocalSA_k3_h8":  # stem op, also a candidate; kept for clarity
            return CandidateOp("local", 3, 8)
        raise ValueError(f"unknown operation name {name!r}")


ALL_CANDIDATES: tuple[CandidateOp, ...] = tuple(
    [CandidateOp("local", k, h) for k in WINDOW_SIZES for h in HEAD_COUNTS]
    + [CandidateOp("nonlocal")]
)

STEM_OP = CandidateOp("local", 3, 8)


def mid_channels(cout: int) -> int:
    """Bottleneck width: cout / 4, floored, never below 8."""
    return max(cout // REDUCTION_RATIO, MIN_MID_CHANNELS)


class BlockParams:
    """Parameters of one bottleneck block for one candidate operator.

    reduce: cin -> cmid, then q/k/v projections cmid -> cmid, then
    expand: cmid -> cout, plus a projection shortcut when cin != cout and a
    relative-position table for the local operator.
    """

    def __init__(self, rng: np.random.Generator, cin: int, cmid: int, cout: int, op: CandidateOp):
        if op.kind == "local" and cmid % op.heads != 0:
            raise ConfigError(
                f"{op.name}: mid channels {cmid} not divisible by {op.heads} heads"
            )
        self.cin, self.cmid, self.cout = cin, cmid, cout
        self.op = op
        self.reduce = Linear(rng, cin, cmid)
        self.query = Linear(rng, cmid, cmid)
        self.key = Linear(rng, cmid, cmid)
        self.value = Linear(rng, cmid, cmid)
        if op.kind == "local":
            d_head = cmid // op.heads
            self.pos = Tensor(np.zeros((op.window, op.window, d_head)), requires_grad=True)
        else:
            self.pos = None
        self.expand = Linear(rng, cmid, cout)
        self.shortcut = Linear(rng, cin, cout) if cin != cout else None

    def named_parameters(self, prefix: str = "block"):
        out = []
        out += self.reduce.named_parameters(f"{prefix}.reduce")
        out += self.query.named_parameters(f"{prefix}.query")
        out += self.key.named_parameters(f"{prefix}.key")
        out += self.value.named_parameters(f"{prefix}.value")
        if self.pos is not None:
            out.append((f"{prefix}.pos", self.pos))
        out += self.expand.named_parameters(f"{prefix}.expand")
        if self.shortcut is not None:
            out += self.shortcut.named_parameters(f"{prefix}.shortcut")
        return out

    def parameters(self):
        return [t for _, t in self.named_parameters()]


def block_param_count(op: CandidateOp, cin: int, cmid: int, cout: int) -> int:
    """Closed-form trainable-scalar count of one block; must match enumeration."""
    n = cin * cmid + cmid            # reduce
    n += 3 * (cmid * cmid + cmid)    # q, k, v
    n += cmid * cout + cout          # expand
    if op.kind == "local":
        n += op.window * op.window * (cmid // op.heads)
    if cin != cout:
        n += cin * cout + cout       # projection shortcut
    return n


def _spatial_shape(x: Tensor):
    if x.values.ndim == 3:
        h, w, c = x.values.shape
        return 1, h, w, c, False
    if x.values.ndim == 4:
        b, h, w, c = x.values.shape
        return b, h, w, c, True
    raise ShapeError(f"attention expects (H,W,C) or (B,H,W,C), got shape {x.values.shape}")


def local_multihead_sa(x: Tensor, p: BlockParams, k: int, h: int) -> Tensor:
    """Windowed multi-head attention over each pixel's k x k neighbourhood.

    Queries come from the centre pixel; keys and values from the zero-padded
    window. Heads split the channel axis; outputs are concatenated back.
    Spatial shape is preserved.
    """
    b, hh, ww, c, _ = _spatial_shape(x)
    if c % h != 0:
        raise ConfigError(f"local attention: {c} channels not divisible by {h} heads")
    d = c // h
    k2 = k * k
    bp = b * hh * ww

    flat = reshape(x, (-1, c))
    q = p.query(flat)
    kf = reshape(p.key(flat), x.values.shape)
    vf = reshape(p.value(flat), x.values.shape)

    keys = reshape(unfold(kf, k), (bp, k2, h, d))
    vals = reshape(unfold(vf, k), (bp, k2, h, d))

    # scale the content logits only: (q.k)/sqrt(d) + q.r
    q_scaled = mul(reshape(q, (bp, h, d)), Tensor(1.0 / math.sqrt(d)))
    content = head_logits(q_scaled, keys, h)  # (bp, h, k2)
    r = reshape(p.pos, (k2, d))
    pos_logits = reshape(matmul(reshape(q, (bp * h, d)), transpose(r, (1, 0))), (bp, h, k2))
    logits = add(content, pos_logits)

    attn = softmax(logits, axis=2)
    out = head_mix(attn, vals, h)  # (bp, h, d)
    return reshape(out, x.values.shape)


def non_local_sa(x: Tensor, p: BlockParams) -> Tensor:
    """Global attention across all spatial positions of the feature map."""
    b, hh, ww, c, _ = _spatial_shape(x)
    n = hh * ww

    flat = reshape(x, (-1, c))
    q = reshape(mul(p.query(flat), Tensor(1.0 / math.sqrt(c))), (b, n, c))
    k = reshape(p.key(flat), (b, n, c))
    v = reshape(p.value(flat), (b, n, c))

    logits = bmm(q, transpose(k, (0, 2, 1)))  # scaled dot products
    attn = softmax(logits, axis=2)  # rows sum to 1
    out = bmm(attn, v)
    return reshape(out, x.values.shape)


def apply_candidate(x: Tensor, p: BlockParams) -> Tensor:
    if p.op.kind == "local":
        return local_multihead_sa(x, p, p.op.window, p.op.heads)
    return non_local_sa(x, p)


def bottleneck_block(x: Tensor, op: CandidateOp, p: BlockParams, stride: int = 1) -> Tensor:
    """reduce -> relu -> attention -> relu -> expand, plus a residual shortcut.

    At stride 2 both the branch output and the shortcut are average-pooled
    before the addition; the shortcut is an identity when cin == cout, else a
    pooled-then-projected path.
    """
    if stride not in (1, 2):
        raise ConfigError(f"stride must be 1 or 2, got {stride}")
    if op is not p.op and op != p.op:
        raise ConfigError(f"block parameters were built for {p.op.name}, not {op.name}")

    hidden = relu(p.reduce(x))
    attended = relu(apply_candidate(hidden, p))
    branch = p.expand(attended)
    if stride == 2:
        branch = avgpool2d(branch)

    shortcut = avgpool2d(x) if stride == 2 else x
    if p.shortcut is not None:
        shortcut = p.shortcut(shortcut)
    return add(branch, shortcut)

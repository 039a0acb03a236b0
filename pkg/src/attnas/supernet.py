"""Stage-wise supernet, softmax-mixed layers, and discretization.

The macro network is a chain: a fixed stem block, a list of stages (each a
run of searchable layers, the first carrying the stage's stride and channel
transition), global average pooling, and a fully connected classifier. Every
searchable layer holds all seven candidate blocks with disjoint weights; its
output is the softmax(alpha)-weighted sum of the candidate outputs, so
gradients reach both the block weights and the architecture parameters.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np

from . import precision
from .attention import (
    ALL_CANDIDATES,
    STEM_OP,
    BlockParams,
    CandidateOp,
    block_param_count,
    bottleneck_block,
    mid_channels,
)
from .errors import ConfigError
from .layers import Linear
from .tensor import Tensor, add, index, mul, reshape, softmax, take_row, tmean

NUM_CANDIDATES = len(ALL_CANDIDATES)

ARCH_FORMAT_VERSION = 1


@dataclass(frozen=True)
class StageSpec:
    channels: int
    layers: int
    stride: int


@dataclass(frozen=True)
class MacroConfig:
    """Macro-architecture: input geometry, stem, stages, classifier head."""

    input_size: tuple[int, int] = (32, 32)
    input_channels: int = 3
    stem_channels: int = 16
    stages: tuple[StageSpec, ...] = (
        StageSpec(16, 3, 1),
        StageSpec(32, 3, 2),
        StageSpec(32, 3, 1),
        StageSpec(64, 3, 2),
        StageSpec(64, 3, 1),
    )
    num_classes: int = 10

    @property
    def num_search_layers(self) -> int:
        return sum(s.layers for s in self.stages)

    @property
    def final_channels(self) -> int:
        return self.stages[-1].channels

    def final_spatial(self) -> tuple[int, int]:
        h, w = self.input_size
        for s in self.stages:
            if s.stride == 2:
                h, w = h // 2, w // 2
        return h, w

    def num_downsamples(self) -> int:
        return sum(1 for s in self.stages if s.stride == 2)

    @staticmethod
    def desk(
        size: int = 16,
        classes: int = 3,
        stage_channels=(8, 16),
        layers_per_stage: int = 2,
    ) -> "MacroConfig":
        """Small configuration for CPU-scale runs: alternating strides 1,2,..."""
        stages = tuple(
            StageSpec(c, layers_per_stage, 2 if i % 2 == 1 else 1)
            for i, c in enumerate(stage_channels)
        )
        return MacroConfig(
            input_size=(size, size),
            stem_channels=stage_channels[0],
            stages=stages,
            num_classes=classes,
        )

    def to_dict(self) -> dict:
        return {
            "input_size": list(self.input_size),
            "input_channels": self.input_channels,
            "stem_channels": self.stem_channels,
            "stages": [[s.channels, s.layers, s.stride] for s in self.stages],
            "num_classes": self.num_classes,
        }

    @staticmethod
    def from_dict(d: dict) -> "MacroConfig":
        return MacroConfig(
            input_size=tuple(d["input_size"]),
            input_channels=int(d["input_channels"]),
            stem_channels=int(d["stem_channels"]),
            stages=tuple(StageSpec(*[int(v) for v in s]) for s in d["stages"]),
            num_classes=int(d["num_classes"]),
        )


def shape_trace(cfg: MacroConfig) -> list[tuple[str, tuple[int, int, int]]]:
    """Input shape of every row of the macro table, stem through classifier."""
    h, w = cfg.input_size
    rows = [("stem", (h, w, cfg.input_channels))]
    c = cfg.stem_channels
    for i, s in enumerate(cfg.stages, start=1):
        rows.append((f"stage{i}", (h, w, c)))
        if s.stride == 2:
            h, w = h // 2, w // 2
        c = s.channels
    rows.append(("pooling", (h, w, c)))
    rows.append(("output", (1, 1, c)))
    return rows


def _layer_plan(cfg: MacroConfig):
    """Flat list of (stage_idx, layer_in_stage, cin, cout, stride)."""
    plan = []
    cin = cfg.stem_channels
    for si, s in enumerate(cfg.stages):
        for j in range(s.layers):
            stride = s.stride if j == 0 else 1
            plan.append((si, j, cin, s.channels, stride))
            cin = s.channels
    return plan


def _check_divisibility(cfg: MacroConfig) -> None:
    for si, j, _, cout, _ in _layer_plan(cfg):
        cmid = mid_channels(cout)
        for op in ALL_CANDIDATES:
            if op.kind == "local" and cmid % op.heads != 0:
                raise ConfigError(
                    f"stage {si + 1} layer {j}: mid channels {cmid} (from {cout} output "
                    f"channels) not divisible by {op.heads} heads for {op.name}"
                )
    stem_mid = mid_channels(cfg.stem_channels)
    if stem_mid % STEM_OP.heads != 0:
        raise ConfigError(
            f"stem: mid channels {stem_mid} not divisible by {STEM_OP.heads} heads"
        )


class ArchParams:
    """Architecture parameters: one length-7 row per searchable layer.

    Rows are zero-initialized (uniform attention over candidates). With stage
    tying enabled, layers at the same depth of same-parity stages share one
    row, which is how the non-stage-wise ablation arm is realized.
    """

    def __init__(self, cfg: MacroConfig, tie_stages: bool = False):
        self.cfg = cfg
        self.tie_stages = tie_stages
        plan = _layer_plan(cfg)
        if tie_stages:
            groups: dict[tuple[int, int], int] = {}
            rows = []
            for si, j, *_ in plan:
                key = (si % 2, j)
                if key not in groups:
                    groups[key] = len(groups)
                rows.append(groups[key])
            self.layer_rows = tuple(rows)
            n_rows = len(groups)
        else:
            self.layer_rows = tuple(range(len(plan)))
            n_rows = len(plan)
        self.alpha = Tensor(np.zeros((n_rows, NUM_CANDIDATES)), requires_grad=True)

    @property
    def num_layers(self) -> int:
        return len(self.layer_rows)

    def row_tensor(self, layer_idx: int) -> Tensor:
        return take_row(self.alpha, self.layer_rows[layer_idx])

    def matrix(self) -> np.ndarray:
        """Per-layer alpha values as an (L, 7) array (tied rows repeated)."""
        return self.alpha.values[list(self.layer_rows)].copy()

    def load_matrix(self, matrix: np.ndarray) -> None:
        """Warm-start from a per-layer (L, 7) matrix.

        Under stage tying, tied layers must carry identical rows already (as
        produced by a tied search); each group's row is taken from its first
        layer.
        """
        matrix = np.asarray(matrix, dtype=precision.dtype())
        if matrix.shape != (self.num_layers, NUM_CANDIDATES):
            raise ConfigError(
                f"alpha matrix shape {matrix.shape} does not match "
                f"({self.num_layers}, {NUM_CANDIDATES}) for this configuration"
            )
        for layer_idx, row in enumerate(self.layer_rows):
            self.alpha.values[row] = matrix[layer_idx]


class MixedLayer:
    """All seven candidate blocks for one searchable layer, weights disjoint."""

    def __init__(self, rng: np.random.Generator, cin: int, cout: int, stride: int):
        self.cin, self.cout, self.stride = cin, cout, stride
        cmid = mid_channels(cout)
        self.blocks = [BlockParams(rng, cin, cmid, cout, op) for op in ALL_CANDIDATES]

    def named_parameters(self, prefix: str):
        out = []
        for b, block in enumerate(self.blocks):
            out += block.named_parameters(f"{prefix}.cand{b}")
        return out


def mixed_forward(x: Tensor, layer: MixedLayer, alpha_row: Tensor) -> Tensor:
    """softmax(alpha)-weighted sum of all candidate block outputs."""
    weights = softmax(alpha_row, 0)
    out = None
    for b, block in enumerate(layer.blocks):
        y = mul(bottleneck_block(x, block.op, block, layer.stride), index(weights, b))
        out = y if out is None else add(out, y)
    return out


class Supernet:
    """The weight-sharing search network: stem, mixed layers, pooled classifier."""

    def __init__(self, cfg: MacroConfig, seed: int):
        _check_divisibility(cfg)
        self.cfg = cfg
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.stem = BlockParams(
            rng, cfg.input_channels, mid_channels(cfg.stem_channels), cfg.stem_channels, STEM_OP
        )
        self.layers = [
            MixedLayer(rng, cin, cout, stride)
            for _, _, cin, cout, stride in _layer_plan(cfg)
        ]
        self.head = Linear(rng, cfg.final_channels, cfg.num_classes)

    def features(self, x: Tensor, arch: ArchParams) -> Tensor:
        y = bottleneck_block(x, STEM_OP, self.stem, stride=1)
        for i, layer in enumerate(self.layers):
            y = mixed_forward(y, layer, arch.row_tensor(i))
        return y

    def logits(self, x: Tensor, arch: ArchParams) -> Tensor:
        feats = self.features(x, arch)
        spatial = (1, 2) if feats.values.ndim == 4 else (0, 1)
        return self.head(tmean(feats, axis=spatial))

    def named_parameters(self):
        out = self.stem.named_parameters("stem")
        for i, layer in enumerate(self.layers):
            out += layer.named_parameters(f"layer{i}")
        out += self.head.named_parameters("head")
        return out

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def param_count(self) -> int:
        return sum(t.size for t in self.parameters())


def build_supernet(cfg: MacroConfig, seed: int, tie_stages: bool = False):
    """Construct the supernet and zero-initialized architecture parameters."""
    net = Supernet(cfg, seed)
    arch = ArchParams(cfg, tie_stages=tie_stages)
    return net, arch


def supernet_param_count(cfg: MacroConfig) -> int:
    """Analytic trainable-scalar count of the supernet (w only, no alpha)."""
    stem_mid = mid_channels(cfg.stem_channels)
    n = block_param_count(STEM_OP, cfg.input_channels, stem_mid, cfg.stem_channels)
    for _, _, cin, cout, _ in _layer_plan(cfg):
        cmid = mid_channels(cout)
        n += sum(block_param_count(op, cin, cmid, cout) for op in ALL_CANDIDATES)
    n += cfg.final_channels * cfg.num_classes + cfg.num_classes
    return n


def space_size(cfg: MacroConfig) -> int:
    """Exact size of the discrete space: 7 ** (number of searchable layers)."""
    return NUM_CANDIDATES ** cfg.num_search_layers


# ---------------------------------------------------------------------------
# discrete architectures
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Architecture:
    """A fully discrete network description; the search's portable output."""

    macro: MacroConfig
    choices: tuple[str, ...]
    seed: int = 0
    config_hash: str = ""

    def __post_init__(self):
        if len(self.choices) != self.macro.num_search_layers:
            raise ConfigError(
                f"architecture has {len(self.choices)} choices but the macro "
                f"configuration defines {self.macro.num_search_layers} searchable layers"
            )
        for name in self.choices:
            CandidateOp.from_name(name)

    def ops(self) -> list[CandidateOp]:
        return [CandidateOp.from_name(n) for n in self.choices]

    def to_json(self) -> str:
        doc = {
            "macro": self.macro.to_dict(),
            "choices": list(self.choices),
            "seed": self.seed,
            "config_hash": self.config_hash,
            "version": ARCH_FORMAT_VERSION,
        }
        return json.dumps(doc, indent=2) + "\n"

    @staticmethod
    def from_json(text: str) -> "Architecture":
        doc = json.loads(text)
        version = doc.get("version")
        if version != ARCH_FORMAT_VERSION:
            raise ConfigError(
                f"architecture file version {version!r} is not supported "
                f"(expected {ARCH_FORMAT_VERSION})"
            )
        return Architecture(
            macro=MacroConfig.from_dict(doc["macro"]),
            choices=tuple(doc["choices"]),
            seed=int(doc.get("seed", 0)),
            config_hash=str(doc.get("config_hash", "")),
        )


def config_hash(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def discretize(arch_params: ArchParams, cfg: MacroConfig, seed: int = 0,
               config_digest: str = "") -> Architecture:
    """Pick the argmax candidate per layer; ties break to the lowest index."""
    choices = []
    for layer_idx in range(arch_params.num_layers):
        row = arch_params.alpha.values[arch_params.layer_rows[layer_idx]]
        choices.append(ALL_CANDIDATES[int(np.argmax(row))].name)
    return Architecture(macro=cfg, choices=tuple(choices), seed=seed, config_hash=config_digest)


def _round8(x: float) -> int:
    return max(8, int(math.floor(x / 8.0 + 0.5)) * 8)


def scale_macro(cfg: MacroConfig, initial_channels: int) -> MacroConfig:
    """Widen the whole channel ladder so the stem has ``initial_channels``.

    Every stage is scaled by the same ratio and rounded to the nearest
    multiple of 8 (keeping head divisibility attainable).
    """
    ratio = initial_channels / cfg.stem_channels
    stem = initial_channels
    stages = tuple(
        StageSpec(_round8(s.channels * ratio), s.layers, s.stride) for s in cfg.stages
    )
    return MacroConfig(
        input_size=cfg.input_size,
        input_channels=cfg.input_channels,
        stem_channels=stem,
        stages=stages,
        num_classes=cfg.num_classes,
    )


class DiscreteNet:
    """A standalone network instantiated from an Architecture: one block per layer."""

    def __init__(self, arch: Architecture, initial_channels: int | None = None, seed: int = 0):
        cfg = arch.macro if initial_channels is None else scale_macro(arch.macro, initial_channels)
        _check_divisibility(cfg)
        self.arch = arch
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.stem = BlockParams(
            rng, cfg.input_channels, mid_channels(cfg.stem_channels), cfg.stem_channels, STEM_OP
        )
        ops = arch.ops()
        self.blocks = []
        self.strides = []
        for (si, j, cin, cout, stride), op in zip(_layer_plan(cfg), ops):
            cmid = mid_channels(cout)
            if op.kind == "local" and cmid % op.heads != 0:
                raise ConfigError(
                    f"stage {si + 1} layer {j}: scaled mid channels {cmid} not "
                    f"divisible by {op.heads} heads for {op.name}"
                )
            self.blocks.append(BlockParams(rng, cin, cmid, cout, op))
            self.strides.append(stride)
        self.head = Linear(rng, cfg.final_channels, cfg.num_classes)

    def features(self, x: Tensor) -> Tensor:
        y = bottleneck_block(x, STEM_OP, self.stem, stride=1)
        for block, stride in zip(self.blocks, self.strides):
            y = bottleneck_block(y, block.op, block, stride)
        return y

    def logits(self, x: Tensor) -> Tensor:
        feats = self.features(x)
        spatial = (1, 2) if feats.values.ndim == 4 else (0, 1)
        return self.head(tmean(feats, axis=spatial))

    def named_parameters(self):
        out = self.stem.named_parameters("stem")
        for i, block in enumerate(self.blocks):
            out += block.named_parameters(f"block{i}")
        out += self.head.named_parameters("head")
        return out

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def param_count(self) -> int:
        return sum(t.size for t in self.parameters())


def instantiate(arch: Architecture, initial_channels: int | None = None, seed: int = 0) -> DiscreteNet:
    """Fresh standalone network for an architecture, optionally widened."""
    return DiscreteNet(arch, initial_channels=initial_channels, seed=seed)


def arch_param_count(arch: Architecture, initial_channels: int | None = None) -> int:
    """Analytic trainable-scalar count of a discrete architecture."""
    cfg = arch.macro if initial_channels is None else scale_macro(arch.macro, initial_channels)
    stem_mid = mid_channels(cfg.stem_channels)
    n = block_param_count(STEM_OP, cfg.input_channels, stem_mid, cfg.stem_channels)
    for (si, j, cin, cout, _), op in zip(_layer_plan(cfg), arch.ops()):
        n += block_param_count(op, cin, mid_channels(cout), cout)
    n += cfg.final_channels * cfg.num_classes + cfg.num_classes
    return n

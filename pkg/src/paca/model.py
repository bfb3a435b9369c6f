"""Four-stage pyramid models built from the transformer blocks.

Each stage embeds (stem or strided transition), runs its blocks, and hands
a coarser grid to the next stage. The classification head is final layer
norm, global average pooling over the sequence, and one fully-connected
layer. Presets b0/b1/b2 exist in two geometry flavors: "in1k" (224x224,
cluster attention in stages 1-3) and "c100" (32x32, cluster attention in
stages 1-2); stage 4 always runs plain attention. "tiny-debug" is a
2-stage toy for fast tests, not a published configuration.

Parameters live in a flat name -> Tensor registry; checkpoints serialize
that registry to a small self-describing binary format.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .attention import ClusterAssignment, init_layer_norm
from .blocks import (
    MHSA,
    PACA,
    BlockParams,
    ConvSpec,
    PatchEmbedParams,
    init_block,
    init_patch_embed,
    stem,
    transition,
    transformer_block,
)
from .attention import _linear_init, apply_norm, linear
from .tensor import Tensor, ShapeError, reshape, stack, tmean

__all__ = [
    "StageConfig",
    "ModelConfig",
    "PaCaModel",
    "LayerRetention",
    "preset",
    "build_model",
    "forward",
    "param_count",
    "save_checkpoint",
    "load_checkpoint",
    "config_hash",
    "CheckpointError",
    "CheckpointHeaderError",
    "CheckpointConfigError",
    "CheckpointTensorError",
    "CheckpointTruncatedError",
    "debug_counters",
]


@dataclass(frozen=True)
class StageConfig:
    conv: ConvSpec
    channels: int
    depth: int
    heads: int
    expansion: int
    variant: str = PACA
    clusters: int = 0
    reduction: int = 1

    def validate(self) -> None:
        if self.conv.c_out != self.channels:
            raise ValueError(f"conv c_out {self.conv.c_out} != stage channels {self.channels}")
        if self.channels % self.heads:
            raise ValueError(f"channels {self.channels} not divisible by heads {self.heads}")
        if self.variant == PACA:
            if self.clusters < 1:
                raise ValueError("cluster-attention stage needs clusters >= 1")
            if self.channels % self.reduction:
                raise ValueError(f"channels {self.channels} not divisible by reduction {self.reduction}")
        elif self.variant != MHSA:
            raise ValueError(f"unknown variant {self.variant!r}")


@dataclass(frozen=True)
class ModelConfig:
    stages: tuple[StageConfig, ...]
    input_size: tuple[int, int]
    classes: int
    flavor: str

    def validate(self) -> None:
        if not self.stages:
            raise ValueError("model needs at least one stage")
        if self.classes < 2:
            raise ValueError("classes must be >= 2")
        for s in self.stages:
            s.validate()
        h, w = self.input_size
        c_in = 3
        for i, s in enumerate(self.stages):
            h, w = s.conv.out_extent(h), s.conv.out_extent(w)
            if h < 1 or w < 1:
                raise ValueError(f"stage {i} collapses the grid to {h}x{w}")
            c_in = s.channels

    def stage_extents(self) -> list[tuple[int, int]]:
        h, w = self.input_size
        out = []
        for s in self.stages:
            h, w = s.conv.out_extent(h), s.conv.out_extent(w)
            out.append((h, w))
        return out


_CHANNELS = {"b0": (32, 64, 160, 256), "b1": (64, 128, 320, 512), "b2": (64, 128, 320, 512)}
_DEPTHS = {"b0": (2, 2, 2, 2), "b1": (2, 2, 2, 2), "b2": (3, 4, 6, 3)}
_HEADS = (1, 2, 5, 8)
_EXPANSIONS = (8, 8, 4, 4)
_REDUCTION = 4


def preset(name: str, flavor: str = "in1k", classes: int | None = None) -> ModelConfig:
    """Build one of the published configurations (or the tiny-debug toy)."""
    name = name.replace("_", "-").lower()
    if name == "tiny-debug":
        stages = (
            StageConfig(ConvSpec(3, 1, 1, 8), 8, 1, 1, 4, PACA, clusters=4, reduction=2),
            StageConfig(ConvSpec(3, 2, 1, 16), 16, 1, 2, 4, MHSA),
        )
        cfg = ModelConfig(stages, (16, 16), classes or 4, "synth")
        cfg.validate()
        return cfg
    if name not in _CHANNELS:
        raise ValueError(f"unknown preset {name!r} (expected b0, b1, b2 or tiny-debug)")
    if flavor not in ("in1k", "c100"):
        raise ValueError(f"unknown flavor {flavor!r} (expected in1k or c100)")
    ch, depths = _CHANNELS[name], _DEPTHS[name]
    if flavor == "in1k":
        convs = [ConvSpec(7, 4, 3, ch[0])] + [ConvSpec(3, 2, 1, ch[i]) for i in (1, 2, 3)]
        variants = (PACA, PACA, PACA, MHSA)
        clusters = (49, 49, 49, 0)
        input_size, default_classes = (224, 224), 1000
    else:
        convs = [ConvSpec(3, 1, 1, ch[0]), ConvSpec(3, 2, 1, ch[1]), ConvSpec(3, 2, 1, ch[2]), ConvSpec(3, 1, 1, ch[3])]
        variants = (PACA, PACA, MHSA, MHSA)
        clusters = (64, 64, 0, 0)
        input_size, default_classes = (32, 32), 100
    stages = tuple(
        StageConfig(
            convs[i],
            ch[i],
            depths[i],
            _HEADS[i],
            _EXPANSIONS[i],
            variants[i],
            clusters=clusters[i],
            reduction=_REDUCTION if variants[i] == PACA else 1,
        )
        for i in range(4)
    )
    cfg = ModelConfig(stages, input_size, classes or default_classes, flavor)
    cfg.validate()
    return cfg


# --------------------------------------------------------------------------
# assembly
# --------------------------------------------------------------------------


@dataclass
class LayerRetention:
    """Per-block explanation payload kept only on request."""

    layer: int
    stage: int
    hw: tuple[int, int]
    assignment: ClusterAssignment
    attention: Tensor


@dataclass
class PaCaModel:
    config: ModelConfig
    embeds: list[PatchEmbedParams]
    blocks: list[list[BlockParams]]
    final_norm: object
    head_w: Tensor
    head_b: Tensor
    registry: dict[str, Tensor] = field(default_factory=dict)

    def paca_layers(self) -> list[int]:
        """Global indices of the cluster-attention blocks."""
        out, idx = [], 0
        for stage_blocks in self.blocks:
            for bp in stage_blocks:
                if bp.variant == PACA:
                    out.append(idx)
                idx += 1
        return out


class _DebugCounters:
    """Cheap observability hooks for tests."""

    def __init__(self):
        self.retained_records = 0

    def reset(self):
        self.retained_records = 0


debug_counters = _DebugCounters()


def build_model(cfg: ModelConfig, seed: int, dtype=np.float32) -> PaCaModel:
    """Deterministic init: same (cfg, seed) gives bitwise-identical weights."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    registry: dict[str, Tensor] = {}
    embeds, blocks = [], []
    c_in = 3
    for i, s in enumerate(cfg.stages):
        embed = init_patch_embed(rng, c_in, s.conv, dtype)
        embeds.append(embed)
        registry[f"stage{i}.embed.conv.w"] = embed.w
        registry[f"stage{i}.embed.conv.b"] = embed.b
        registry[f"stage{i}.embed.norm.gamma"] = embed.norm.gamma
        registry[f"stage{i}.embed.norm.beta"] = embed.norm.beta
        stage_blocks = []
        for j in range(s.depth):
            bp = init_block(rng, s.channels, s.heads, s.expansion, s.variant, s.clusters, s.reduction, dtype)
            stage_blocks.append(bp)
            base = f"stage{i}.block{j}"
            registry[f"{base}.norm1.gamma"] = bp.norm1.gamma
            registry[f"{base}.norm1.beta"] = bp.norm1.beta
            for nm, t in (
                ("wq", bp.attn.wq), ("bq", bp.attn.bq), ("wk", bp.attn.wk), ("bk", bp.attn.bk),
                ("wv", bp.attn.wv), ("bv", bp.attn.bv), ("wo", bp.attn.wo), ("bo", bp.attn.bo),
            ):
                registry[f"{base}.attn.{nm}"] = t
            if bp.cluster is not None:
                registry[f"{base}.cluster.conv.w"] = bp.cluster.conv_w
                registry[f"{base}.cluster.conv.b"] = bp.cluster.conv_b
                registry[f"{base}.cluster.lin.w"] = bp.cluster.lin_w
                registry[f"{base}.cluster.lin.b"] = bp.cluster.lin_b
                registry[f"{base}.cluster.norm.gamma"] = bp.cluster.norm.gamma
                registry[f"{base}.cluster.norm.beta"] = bp.cluster.norm.beta
            registry[f"{base}.norm2.gamma"] = bp.norm2.gamma
            registry[f"{base}.norm2.beta"] = bp.norm2.beta
            for nm, t in (
                ("fc1.w", bp.ffn.fc1_w), ("fc1.b", bp.ffn.fc1_b), ("dw.w", bp.ffn.dw_w),
                ("dw.b", bp.ffn.dw_b), ("fc2.w", bp.ffn.fc2_w), ("fc2.b", bp.ffn.fc2_b),
            ):
                registry[f"{base}.ffn.{nm}"] = t
        blocks.append(stage_blocks)
        c_in = s.channels
    final_norm = init_layer_norm(c_in, dtype)
    registry["final_norm.gamma"] = final_norm.gamma
    registry["final_norm.beta"] = final_norm.beta
    head_w, head_b = _linear_init(rng, c_in, cfg.classes, dtype)
    registry["head.w"] = head_w
    registry["head.b"] = head_b
    return PaCaModel(cfg, embeds, blocks, final_norm, head_w, head_b, registry)


def _forward_one(model: PaCaModel, image: Tensor, retain: bool) -> tuple[Tensor, list[LayerRetention] | None]:
    retained: list[LayerRetention] | None = [] if retain else None
    x, hw = stem(image, model.embeds[0])
    layer = 0
    for i, stage_blocks in enumerate(model.blocks):
        if i > 0:
            x, hw = transition(x, hw, model.embeds[i])
        for bp in stage_blocks:
            x, assign, attn = transformer_block(x, hw, bp)
            if retain and assign is not None:
                retained.append(LayerRetention(layer, i, hw, assign, attn))
                debug_counters.retained_records += 1
            layer += 1
    pooled = tmean(apply_norm(x, model.final_norm), axis=0)
    logits = reshape(linear(reshape(pooled, (1, pooled.shape[0])), model.head_w, model.head_b), (model.config.classes,))
    return logits, retained


def forward(
    model: PaCaModel, batch: Tensor, retain_explanations: bool = False
) -> tuple[Tensor, list[list[LayerRetention]] | None]:
    """Run a (B, H0, W0, 3) batch through the pipeline; images are independent.

    Returns (logits (B, classes), retained) where ``retained`` holds one
    list of LayerRetention per image, or None unless explicitly requested.
    """
    bd = batch.data
    if bd.ndim != 4 or bd.shape[3] != 3 or (bd.shape[1], bd.shape[2]) != model.config.input_size:
        raise ShapeError(
            f"batch shape {bd.shape} does not match input geometry {model.config.input_size} + RGB"
        )
    per_image, retained_all = [], [] if retain_explanations else None
    for b in range(bd.shape[0]):
        logits, retained = _forward_one(model, Tensor(bd[b]), retain_explanations)
        per_image.append(logits)
        if retain_explanations:
            retained_all.append(retained)
    return stack(per_image), retained_all


def param_count(model: PaCaModel) -> int:
    return sum(t.data.size for t in model.registry.values())


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

_MAGIC = b"PACA"
_VERSION = 1


class CheckpointError(Exception):
    """Base class for checkpoint load/save failures."""


class CheckpointHeaderError(CheckpointError):
    """Magic bytes or version do not match."""


class CheckpointConfigError(CheckpointError):
    """Stored config hash does not match the requested configuration."""


class CheckpointTensorError(CheckpointError):
    """Tensor name/shape in the file disagrees with the model registry."""


class CheckpointTruncatedError(CheckpointError):
    """File ended mid-record."""


def canonical_config_text(cfg: ModelConfig) -> str:
    lines = [
        f"flavor={cfg.flavor}",
        f"input={cfg.input_size[0]}x{cfg.input_size[1]}",
        f"classes={cfg.classes}",
    ]
    for i, s in enumerate(cfg.stages):
        lines.append(
            f"stage{i}=k:{s.conv.k},s:{s.conv.s},p:{s.conv.p},c:{s.channels},"
            f"depth:{s.depth},heads:{s.heads},exp:{s.expansion},variant:{s.variant},"
            f"clusters:{s.clusters},reduction:{s.reduction}"
        )
    return "\n".join(lines)


def config_hash(cfg: ModelConfig) -> int:
    """64-bit FNV-1a over the canonical config text."""
    h = 0xCBF29CE484222325
    for byte in canonical_config_text(cfg).encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def save_checkpoint(model: PaCaModel, path) -> None:
    """Bit-exact dump of the sorted parameter registry (little-endian f32)."""
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<IQI", _VERSION, config_hash(model.config), len(model.registry)))
        for name in sorted(model.registry):
            t = model.registry[name]
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", t.data.ndim))
            f.write(struct.pack(f"<{t.data.ndim}Q", *t.data.shape))
            f.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def _read_exact(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise CheckpointTruncatedError(f"truncated while reading {what} at byte offset {f.tell() - len(buf)}")
    return buf


def load_checkpoint(path, cfg: ModelConfig) -> PaCaModel:
    """Rebuild a model for ``cfg`` and fill it with the stored parameters."""
    model = build_model(cfg, seed=0)
    seen = set()
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != _MAGIC:
            raise CheckpointHeaderError("bad magic bytes (not a checkpoint)")
        version, stored_hash, count = struct.unpack("<IQI", _read_exact(f, 16, "header"))
        if version != _VERSION:
            raise CheckpointHeaderError(f"unsupported checkpoint version {version}")
        if stored_hash != config_hash(cfg):
            raise CheckpointConfigError("checkpoint was written for a different model configuration")
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(f, 2, "name length"))
            name = _read_exact(f, name_len, "name").decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(f, 1, "rank"))
            shape = struct.unpack(f"<{rank}Q", _read_exact(f, 8 * rank, "extents"))
            target = model.registry.get(name)
            if target is None:
                raise CheckpointTensorError(f"unknown parameter {name!r} in checkpoint")
            if tuple(shape) != target.data.shape:
                raise CheckpointTensorError(f"shape mismatch for {name!r}: file {shape}, model {target.data.shape}")
            n_elems = int(np.prod(shape, dtype=np.int64))
            payload = _read_exact(f, 4 * n_elems, f"payload of {name!r}")
            target.data = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
            seen.add(name)
        if f.read(1):
            raise CheckpointError("trailing data after last tensor")
    missing = set(model.registry) - seen
    if missing:
        raise CheckpointTensorError(f"checkpoint missing {len(missing)} parameters (e.g. {sorted(missing)[0]!r})")
    return model

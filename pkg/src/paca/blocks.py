"""Composite network blocks: stem/transition embeddings, the inverted
bottleneck FFN, and the residual transformer block in its two variants.

Stems and transitions are overlapping strided convolutions followed by
layer norm; the zero padding they (and the FFN's depthwise conv) carry is
what gives the network its positional sensitivity, so no explicit
positional encoding exists anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import (
    AttentionParams,
    ClusterAssignment,
    ClusterParams,
    LayerNormParams,
    apply_norm,
    fan_out_normal,
    init_attention_params,
    init_cluster_params,
    init_layer_norm,
    linear,
    mhsa,
    paca_attention,
)
from .tensor import Tensor, ShapeError, add, conv2d, flop_meter, gelu, reshape

__all__ = [
    "ConvSpec",
    "PatchEmbedParams",
    "MBlockParams",
    "BlockParams",
    "init_patch_embed",
    "init_mblock",
    "init_block",
    "stem",
    "transition",
    "mblock_ffn",
    "transformer_block",
]

PACA = "paca"
MHSA = "mhsa"


@dataclass(frozen=True)
class ConvSpec:
    """Kernel / stride / zero-pad / output-channel quadruple."""

    k: int
    s: int
    p: int
    c_out: int

    def __post_init__(self):
        if self.k < 1 or self.s < 1 or self.p < 0 or self.c_out < 1:
            raise ValueError(f"invalid conv spec {self}")

    def out_extent(self, size: int) -> int:
        return (size + 2 * self.p - self.k) // self.s + 1


@dataclass
class PatchEmbedParams:
    """Convolution + layer norm used by both the stem and the transitions."""

    spec: ConvSpec
    w: Tensor
    b: Tensor
    norm: LayerNormParams


@dataclass
class MBlockParams:
    """Inverted bottleneck FFN: expand C -> eC, depthwise 3x3, GELU, project back."""

    expansion: int
    fc1_w: Tensor
    fc1_b: Tensor
    dw_w: Tensor
    dw_b: Tensor
    fc2_w: Tensor
    fc2_b: Tensor


@dataclass
class BlockParams:
    """One transformer block; ``variant`` fixes the attention flavor."""

    variant: str
    norm1: LayerNormParams
    attn: AttentionParams
    cluster: ClusterParams | None
    norm2: LayerNormParams
    ffn: MBlockParams


def init_patch_embed(rng: np.random.Generator, c_in: int, spec: ConvSpec, dtype=np.float32) -> PatchEmbedParams:
    w = Tensor(fan_out_normal(rng, (spec.k, spec.k, c_in, spec.c_out), dtype=dtype), requires_grad=True)
    b = Tensor(np.zeros(spec.c_out, dtype=dtype), requires_grad=True)
    return PatchEmbedParams(spec, w, b, init_layer_norm(spec.c_out, dtype))


def init_mblock(rng: np.random.Generator, dim: int, expansion: int, dtype=np.float32) -> MBlockParams:
    hidden = dim * expansion
    from .attention import _linear_init  # shared truncated-normal linear init

    fc1_w, fc1_b = _linear_init(rng, dim, hidden, dtype)
    dw_w = Tensor(fan_out_normal(rng, (3, 3, 1, hidden), groups=hidden, dtype=dtype), requires_grad=True)
    dw_b = Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True)
    fc2_w, fc2_b = _linear_init(rng, hidden, dim, dtype)
    return MBlockParams(expansion, fc1_w, fc1_b, dw_w, dw_b, fc2_w, fc2_b)


def init_block(
    rng: np.random.Generator,
    dim: int,
    heads: int,
    expansion: int,
    variant: str = PACA,
    clusters: int = 0,
    reduction: int = 1,
    dtype=np.float32,
) -> BlockParams:
    if variant not in (PACA, MHSA):
        raise ValueError(f"unknown block variant {variant!r}")
    cluster = init_cluster_params(rng, dim, clusters, reduction, dtype) if variant == PACA else None
    return BlockParams(
        variant,
        init_layer_norm(dim, dtype),
        init_attention_params(rng, dim, heads, dtype),
        cluster,
        init_layer_norm(dim, dtype),
        init_mblock(rng, dim, expansion, dtype),
    )


def _embed(xmap: Tensor, p: PatchEmbedParams) -> tuple[Tensor, tuple[int, int]]:
    y = conv2d(xmap, p.w, p.b, stride=p.spec.s, pad=p.spec.p)
    oh, ow, c = y.shape
    return apply_norm(reshape(y, (oh * ow, c)), p.norm), (oh, ow)


def stem(image: Tensor, p: PatchEmbedParams) -> tuple[Tensor, tuple[int, int]]:
    """Embed an (H0, W0, 3) image into a token sequence plus its grid shape."""
    if image.data.ndim != 3:
        raise ShapeError(f"stem expects an (H, W, 3) image, got {image.shape}")
    return _embed(image, p)


def transition(x: Tensor, hw: tuple[int, int], p: PatchEmbedParams) -> tuple[Tensor, tuple[int, int]]:
    """Downsample a token sequence between stages (conv on its 2-D layout + LN)."""
    h, w = hw
    n, c = x.shape
    if n != h * w:
        raise ShapeError(f"sequence length {n} != H*W = {h}*{w}")
    return _embed(reshape(x, (h, w, c)), p)


def mblock_ffn(x: Tensor, hw: tuple[int, int], p: MBlockParams) -> Tensor:
    """fc (C -> eC), depthwise 3x3 on the 2-D layout, GELU, fc (eC -> C)."""
    h, w = hw
    n, c = x.shape
    if n != h * w:
        raise ShapeError(f"sequence length {n} != H*W = {h}*{w}")
    with flop_meter.scope("ffn"):
        hidden = linear(x, p.fc1_w, p.fc1_b)
        e = hidden.shape[-1]
        hidden = conv2d(reshape(hidden, (h, w, e)), p.dw_w, p.dw_b, stride=1, pad=1, groups=e)
        hidden = gelu(reshape(hidden, (n, e)))
        return linear(hidden, p.fc2_w, p.fc2_b)


def transformer_block(
    x: Tensor, hw: tuple[int, int], bp: BlockParams
) -> tuple[Tensor, ClusterAssignment | None, Tensor | None]:
    """Pre-norm residual block: x + Attn(LN(x)), then + FFN(LN(.)).

    The cluster variant surfaces its assignment and attention matrix so a
    caller can retain them for visualization; the plain variant returns None
    for both.
    """
    normed = apply_norm(x, bp.norm1)
    if bp.variant == PACA:
        attended, assign, attn = paca_attention(normed, hw, bp.cluster, bp.attn)
    else:
        attended = mhsa(normed, bp.attn)
        assign, attn = None, None
    z = add(x, attended)
    out = add(z, mblock_ffn(apply_norm(z, bp.norm2), hw, bp.ffn))
    return out, assign, attn

"""The three attention mechanisms.

* ``mhsa``: vanilla patch-to-patch multi-head self-attention, quadratic in
  sequence length.
* ``nested_embed_tokens``: strided-convolution key/value reduction. Shrinks
  the key sequence by a fixed patch ratio but stays quadratic.
* ``paca_attention``: patch-to-cluster attention. A lightweight learnable
  clustering head assigns the N positions to M latent clusters
  (column-stochastic over the spatial axis), pools them into M tokens, and
  attends queries against those. With M fixed the attention matrix costs
  Theta(N * M * C): linear in sequence length.

All mechanisms operate on a single (N, C) sequence; heads split the channel
axis. Queries keep full length N in every variant. Softmax rows of every
attention matrix sum to 1; cluster-assignment columns sum to 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    Tensor,
    ShapeError,
    add,
    conv2d,
    flop_meter,
    gelu,
    layer_norm,
    matmul,
    reshape,
    scale,
    softmax,
    transpose,
)

__all__ = [
    "LayerNormParams",
    "AttentionParams",
    "ClusterParams",
    "NestedEmbedParams",
    "ClusterAssignment",
    "trunc_normal",
    "fan_out_normal",
    "init_layer_norm",
    "init_attention_params",
    "init_cluster_params",
    "init_nested_embed_params",
    "scaled_attention",
    "mhsa",
    "compute_clusters",
    "paca_tokens",
    "paca_attention",
    "nested_embed_tokens",
    "nested_attention",
    "linear",
    "apply_norm",
]


# --------------------------------------------------------------------------
# parameters
# --------------------------------------------------------------------------


@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor
    eps: float = 1e-5


@dataclass
class AttentionParams:
    """Q/K/V/output projection weights for one attention layer."""

    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    heads: int

    @property
    def dim(self) -> int:
        return self.wq.shape[0]

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


@dataclass
class ClusterParams:
    """Learnable clustering head: 3x3 conv squeeze C -> c, then linear c -> M.

    ``norm`` is the layer norm applied to the pooled cluster tokens.
    """

    conv_w: Tensor
    conv_b: Tensor
    lin_w: Tensor
    lin_b: Tensor
    norm: LayerNormParams
    clusters: int
    reduction: int


@dataclass
class NestedEmbedParams:
    """Strided k=s=patch conv + layer norm for the key/value reduction baseline."""

    conv_w: Tensor
    conv_b: Tensor
    norm: LayerNormParams
    patch: int


@dataclass
class ClusterAssignment:
    """Column-stochastic (N, M) assignment of positions to clusters."""

    matrix: Tensor
    height: int
    width: int

    @property
    def clusters(self) -> int:
        return self.matrix.shape[1]


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) resampled until everything lies within 2 std."""
    out = rng.standard_normal(shape) * std
    bound = 2.0 * std
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum())) * std
        bad = np.abs(out) > bound
    return out.astype(dtype)


def fan_out_normal(rng: np.random.Generator, shape, groups: int = 1, dtype=np.float32) -> np.ndarray:
    """Conv kernel init, std = sqrt(2 / (k*k*Cout/groups))."""
    k, _, _, cout = shape
    std = np.sqrt(2.0 / (k * k * cout / groups))
    return (rng.standard_normal(shape) * std).astype(dtype)


def init_layer_norm(dim: int, dtype=np.float32) -> LayerNormParams:
    return LayerNormParams(Tensor(np.ones(dim, dtype=dtype), requires_grad=True),
                           Tensor(np.zeros(dim, dtype=dtype), requires_grad=True))


def _linear_init(rng, fan_in, fan_out, dtype):
    w = Tensor(trunc_normal(rng, (fan_in, fan_out), dtype=dtype), requires_grad=True)
    b = Tensor(np.zeros(fan_out, dtype=dtype), requires_grad=True)
    return w, b


def init_attention_params(rng: np.random.Generator, dim: int, heads: int, dtype=np.float32) -> AttentionParams:
    if dim % heads:
        raise ShapeError(f"channels {dim} not divisible by heads {heads}")
    wq, bq = _linear_init(rng, dim, dim, dtype)
    wk, bk = _linear_init(rng, dim, dim, dtype)
    wv, bv = _linear_init(rng, dim, dim, dtype)
    wo, bo = _linear_init(rng, dim, dim, dtype)
    return AttentionParams(wq, bq, wk, bk, wv, bv, wo, bo, heads)


def init_cluster_params(
    rng: np.random.Generator, dim: int, clusters: int, reduction: int, dtype=np.float32
) -> ClusterParams:
    if dim % reduction:
        raise ShapeError(f"channels {dim} not divisible by reduction ratio {reduction}")
    if clusters < 1:
        raise ValueError("cluster count must be >= 1")
    c = dim // reduction
    conv_w = Tensor(fan_out_normal(rng, (3, 3, dim, c), dtype=dtype), requires_grad=True)
    conv_b = Tensor(np.zeros(c, dtype=dtype), requires_grad=True)
    lin_w, lin_b = _linear_init(rng, c, clusters, dtype)
    return ClusterParams(conv_w, conv_b, lin_w, lin_b, init_layer_norm(dim, dtype), clusters, reduction)


def init_nested_embed_params(rng: np.random.Generator, dim: int, patch: int, dtype=np.float32) -> NestedEmbedParams:
    conv_w = Tensor(fan_out_normal(rng, (patch, patch, dim, dim), dtype=dtype), requires_grad=True)
    conv_b = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)
    return NestedEmbedParams(conv_w, conv_b, init_layer_norm(dim, dtype), patch)


# --------------------------------------------------------------------------
# mechanics
# --------------------------------------------------------------------------


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return add(matmul(x, w), b)


def apply_norm(x: Tensor, p: LayerNormParams) -> Tensor:
    return layer_norm(x, p.gamma, p.beta, p.eps)


def _split_heads(t: Tensor, heads: int) -> Tensor:
    n, c = t.shape
    return transpose(reshape(t, (n, heads, c // heads)), (1, 0, 2))


def _merge_heads(t: Tensor) -> Tensor:
    h, n, d = t.shape
    return reshape(transpose(t, (1, 0, 2)), (n, h * d))


def scaled_attention(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """Per-head scaled dot-product attention.

    q: (h, N, d), k/v: (h, M, d). Scores are scaled by 1/sqrt(d) per head
    and softmaxed per row. Returns (output (h, N, d), attention (h, N, M)).
    """
    if q.data.ndim != 3 or k.data.shape != v.data.shape or q.data.shape[::2] != (k.data.shape[0], k.data.shape[2]):
        raise ShapeError(f"scaled_attention shapes inconsistent: q={q.shape} k={k.shape} v={v.shape}")
    d = q.shape[-1]
    with flop_meter.scope("attn_matrix"):
        scores = scale(matmul(q, transpose(k, (0, 2, 1))), 1.0 / np.sqrt(d))
    with flop_meter.scope("softmax_norm"):
        attn = softmax(scores, axis=-1)
    with flop_meter.scope("attn_apply"):
        out = matmul(attn, v)
    return out, attn


def mhsa(x: Tensor, p: AttentionParams, want_attn: bool = False):
    """Full patch-to-patch multi-head self-attention on an (N, C) sequence."""
    with flop_meter.scope("qkv_proj"):
        q = linear(x, p.wq, p.bq)
        k = linear(x, p.wk, p.bk)
        v = linear(x, p.wv, p.bv)
    out, attn = scaled_attention(_split_heads(q, p.heads), _split_heads(k, p.heads), _split_heads(v, p.heads))
    with flop_meter.scope("out_proj"):
        y = linear(_merge_heads(out), p.wo, p.bo)
    return (y, attn) if want_attn else y


def compute_clusters(x: Tensor, hw: tuple[int, int], p: ClusterParams) -> ClusterAssignment:
    """Assign every spatial position a distribution over M clusters.

    3x3 conv (stride 1, pad 1) squeezes C to c while mixing local context,
    GELU, then a linear map to M logits. Softmax runs along the *spatial*
    axis, so each cluster column is a distribution over positions: the
    columns double as heatmaps.
    """
    h, w = hw
    n, c_in = x.shape
    if n != h * w:
        raise ShapeError(f"sequence length {n} != H*W = {h}*{w}")
    with flop_meter.scope("clustering"):
        u = gelu(conv2d(reshape(x, (h, w, c_in)), p.conv_w, p.conv_b, stride=1, pad=1))
        logits = linear(reshape(u, (n, u.shape[-1])), p.lin_w, p.lin_b)
    with flop_meter.scope("softmax_norm"):
        assign = softmax(logits, axis=0)
    return ClusterAssignment(assign, h, w)


def paca_tokens(assign: ClusterAssignment, x: Tensor, norm: LayerNormParams) -> Tensor:
    """Pool the sequence into M cluster tokens: LN(assign^T . x).

    Each pre-norm token is a convex combination of the input tokens, a
    global weighted pooling with learned, input-dependent weights.
    """
    if assign.matrix.shape[0] != x.shape[0]:
        raise ShapeError(f"assignment rows {assign.matrix.shape[0]} != sequence length {x.shape[0]}")
    with flop_meter.scope("clustering"):
        z = matmul(transpose(assign.matrix, (1, 0)), x)
    return apply_norm(z, norm)


def paca_attention(
    x: Tensor, hw: tuple[int, int], cp: ClusterParams, ap: AttentionParams
) -> tuple[Tensor, ClusterAssignment, Tensor]:
    """Patch-to-cluster attention: queries from all N positions, keys and
    values from the M pooled cluster tokens.

    Returns (output (N, C), cluster assignment, attention (h, N, M)); the
    last two feed the forward explainer.
    """
    assign = compute_clusters(x, hw, cp)
    z = paca_tokens(assign, x, cp.norm)
    with flop_meter.scope("qkv_proj"):
        q = linear(x, ap.wq, ap.bq)
        k = linear(z, ap.wk, ap.bk)
        v = linear(z, ap.wv, ap.bv)
    out, attn = scaled_attention(_split_heads(q, ap.heads), _split_heads(k, ap.heads), _split_heads(v, ap.heads))
    with flop_meter.scope("out_proj"):
        y = linear(_merge_heads(out), ap.wo, ap.bo)
    return y, assign, attn


def nested_embed_tokens(x: Tensor, hw: tuple[int, int], p: NestedEmbedParams) -> Tensor:
    """Key/value reduction by a nested patch embedding: k=s=patch conv + LN.

    Yields M = N / patch^2 tokens. M scales with N, so downstream attention
    stays quadratic; this is the reduction baseline, not the cluster path.
    """
    h, w = hw
    n, c_in = x.shape
    if n != h * w:
        raise ShapeError(f"sequence length {n} != H*W = {h}*{w}")
    if h % p.patch or w % p.patch:
        raise ShapeError(f"extents ({h},{w}) not divisible by patch {p.patch}")
    with flop_meter.scope("clustering"):
        z = conv2d(reshape(x, (h, w, c_in)), p.conv_w, p.conv_b, stride=p.patch, pad=0)
    m = (h // p.patch) * (w // p.patch)
    return apply_norm(reshape(z, (m, z.shape[-1])), p.norm)


def nested_attention(
    x: Tensor, hw: tuple[int, int], np_: NestedEmbedParams, ap: AttentionParams, want_attn: bool = False
):
    """Attention with nested-patch-embedded keys/values (reduction baseline)."""
    z = nested_embed_tokens(x, hw, np_)
    with flop_meter.scope("qkv_proj"):
        q = linear(x, ap.wq, ap.bq)
        k = linear(z, ap.wk, ap.bk)
        v = linear(z, ap.wv, ap.bv)
    out, attn = scaled_attention(_split_heads(q, ap.heads), _split_heads(k, ap.heads), _split_heads(v, ap.heads))
    with flop_meter.scope("out_proj"):
        y = linear(_merge_heads(out), ap.wo, ap.bo)
    return (y, attn) if want_attn else y

"""Exact FLOP accounting for the attention mechanisms.

Conventions (shared with the engine's meter so analytic and instrumented
counts can be compared for exact equality):

  * one multiply-add in a matmul or convolution counts as 2 FLOPs;
  * softmax counts exp + divide = 2 FLOPs per element;
  * additions of biases, layer norms, GELUs, and scalings are not counted.

"Peak activation elements" is a framework-neutral memory proxy: the number
of simultaneously live activation elements while the attention matrix is
applied (input, projections, key/value source intermediates, attention
matrix, context output).

With the cluster count fixed, cluster attention's per-layer cost is an
affine function of sequence length; vanilla and nested-reduction attention
grow quadratically.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .attention import (
    init_attention_params,
    init_cluster_params,
    init_nested_embed_params,
    mhsa,
    nested_attention,
    paca_attention,
)
from .tensor import Tensor, flop_meter

__all__ = [
    "FlopReport",
    "ScalingReport",
    "MECHANISMS",
    "attention_flops",
    "measure_attention_flops",
    "scaling_report",
    "fit_loglog_slope",
    "write_scaling_csv",
]

MECHANISMS = ("vanilla", "nested", "paca")

_COMPONENTS = ("qkv_proj", "attn_matrix", "attn_apply", "clustering", "out_proj", "softmax_norm", "ffn")


@dataclass
class FlopReport:
    mechanism: str
    n: int
    qkv_proj: int = 0
    attn_matrix: int = 0
    attn_apply: int = 0
    clustering: int = 0
    out_proj: int = 0
    softmax_norm: int = 0
    ffn: int = 0
    peak_activation_elems: int = 0

    @property
    def total(self) -> int:
        return sum(getattr(self, c) for c in _COMPONENTS)

    @property
    def attention_total(self) -> int:
        """Cost of forming and applying the attention matrix."""
        return self.attn_matrix + self.attn_apply

    def components(self) -> dict[str, int]:
        return {c: getattr(self, c) for c in _COMPONENTS}


def _validate(mechanism: str, n: int, c: int, heads: int, m_or_p: int, reduction: int) -> None:
    if mechanism not in MECHANISMS:
        raise ValueError(f"unknown mechanism {mechanism!r} (expected one of {MECHANISMS})")
    if n < 1 or c < 1 or heads < 1:
        raise ValueError("n, c, heads must be positive")
    if c % heads:
        raise ValueError(f"channels {c} not divisible by heads {heads}")
    if mechanism == "paca":
        if m_or_p < 1:
            raise ValueError("cluster count must be >= 1")
        if c % reduction:
            raise ValueError(f"channels {c} not divisible by reduction {reduction}")
    if mechanism == "nested":
        if m_or_p < 1:
            raise ValueError("patch size must be >= 1")
        if n % (m_or_p * m_or_p):
            raise ValueError(f"sequence length {n} not divisible by patch^2 = {m_or_p**2}")


def attention_flops(
    mechanism: str, n: int, c: int, heads: int, m_or_p: int = 0, reduction: int = 4, expansion: int = 0
) -> FlopReport:
    """Closed-form per-layer FLOP counts for one attention mechanism.

    ``m_or_p`` is the cluster count for "paca", the nested patch size for
    "nested", and ignored for "vanilla". ``expansion`` > 0 additionally
    accounts the inverted-bottleneck FFN.
    """
    _validate(mechanism, n, c, heads, m_or_p if mechanism != "vanilla" else 1, reduction)
    r = FlopReport(mechanism, n)
    if mechanism == "vanilla":
        m = n
        r.qkv_proj = 6 * n * c * c
        r.clustering = 0
        r.peak_activation_elems = 5 * n * c + heads * n * n
    elif mechanism == "paca":
        m = m_or_p
        cc = c // reduction
        r.qkv_proj = 2 * n * c * c + 4 * m * c * c
        r.clustering = 2 * n * 9 * c * cc + 2 * n * cc * m + 2 * m * n * c
        r.softmax_norm = 2 * n * m  # spatial softmax of the assignment
        r.peak_activation_elems = 3 * n * c + n * cc + n * m + 3 * m * c + heads * n * m
    else:  # nested
        p = m_or_p
        m = n // (p * p)
        r.qkv_proj = 2 * n * c * c + 4 * m * c * c
        r.clustering = 2 * m * p * p * c * c  # strided k=s=p reduction conv
        r.peak_activation_elems = 3 * n * c + 3 * m * c + heads * n * m
    r.attn_matrix = 2 * n * m * c
    r.attn_apply = 2 * n * m * c
    r.softmax_norm += 2 * heads * n * m
    r.out_proj = 2 * n * c * c
    if expansion:
        hidden = c * expansion
        r.ffn = 2 * n * c * hidden + 2 * n * hidden * 9 + 2 * n * hidden * c
    return r


def measure_attention_flops(
    mechanism: str, n: int, c: int, heads: int, m_or_p: int = 0, reduction: int = 4, seed: int = 0
) -> FlopReport:
    """Run the real mechanism under the engine's meter and report its tallies.

    The sequence is laid out on a square sqrt(n) x sqrt(n) grid (required by
    the convolutional paths). Component labels match ``attention_flops``;
    the peak-memory field uses the same closed form on both sides.
    """
    _validate(mechanism, n, c, heads, m_or_p if mechanism != "vanilla" else 1, reduction)
    side = int(round(np.sqrt(n)))
    if mechanism != "vanilla" and side * side != n:
        raise ValueError(f"instrumented runs need a square grid; n={n} is not a perfect square")
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((n, c)).astype(np.float32))
    ap = init_attention_params(rng, c, heads)
    with flop_meter:
        if mechanism == "vanilla":
            mhsa(x, ap)
        elif mechanism == "paca":
            cp = init_cluster_params(rng, c, m_or_p, reduction)
            paca_attention(x, (side, side), cp, ap)
        else:
            npar = init_nested_embed_params(rng, c, m_or_p)
            nested_attention(x, (side, side), npar, ap)
        totals = dict(flop_meter.totals)
    report = FlopReport(mechanism, n)
    for key, value in totals.items():
        if key not in _COMPONENTS:
            raise RuntimeError(f"unexpected metered scope {key!r}")
        setattr(report, key, value)
    report.peak_activation_elems = attention_flops(mechanism, n, c, heads, m_or_p, reduction).peak_activation_elems
    return report


def fit_loglog_slope(ns, values) -> float:
    """Least-squares slope of log(value) against log(n)."""
    ns = np.asarray(ns, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    return float(np.polyfit(np.log(ns), np.log(values), 1)[0])


@dataclass
class ScalingReport:
    mechanism: str
    ns: list[int]
    reports: list[FlopReport]
    slope: float


def scaling_report(
    mechanism: str,
    c: int,
    heads: int,
    m_or_p: int,
    ns: list[int],
    reduction: int = 4,
    instrumented: bool = False,
) -> ScalingReport:
    """FLOP table over several sequence lengths plus the fitted exponent.

    The exponent is fitted on the attention cost proper (matrix + apply),
    the term whose growth separates the mechanisms; projections and the
    key/value-source overhead appear in the table for auditing.
    """
    if len(ns) < 3:
        raise ValueError("need at least 3 sequence lengths to fit a slope")
    fn = measure_attention_flops if instrumented else attention_flops
    reports = [fn(mechanism, n, c, heads, m_or_p, reduction) for n in ns]
    slope = fit_loglog_slope(ns, [r.attention_total for r in reports])
    return ScalingReport(mechanism, list(ns), reports, slope)


def write_scaling_csv(report: ScalingReport, path: str) -> None:
    header = ["mechanism", "n", *_COMPONENTS, "total", "peak_activation_elems"]
    with open(path, "w", encoding="utf-8") as f:
        f.write(",".join(header) + "\n")
        for r in report.reports:
            row = [r.mechanism, str(r.n)]
            row += [str(getattr(r, comp)) for comp in _COMPONENTS]
            row += [str(r.total), str(r.peak_activation_elems)]
            f.write(",".join(row) + "\n")
        footer = ["fitted_slope", f"{report.slope:.6f}"] + [""] * (len(header) - 2)
        f.write(",".join(footer) + "\n")

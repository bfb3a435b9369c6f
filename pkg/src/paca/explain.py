"""Forward explanation from the learned cluster assignments.

A trained model's cluster-assignment columns are distributions over the
spatial positions, so each one reads directly as a heatmap. Masking the
input with (1 - heatmap) acts as an adversarial occlusion of that cluster's
support: the larger the drop in the true-class probability, the more
important the cluster. Near-ties (within 1e-3) are broken by the lower
Shannon entropy of the raw column, the more spatially precise cluster.

Images here are float arrays in [0, 1], (H0, W0, 3). The same machinery can
visualize attention-matrix columns instead (head-averaged, renormalized to
distributions over positions) via ``source="attention"``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import NORM_MEAN, NORM_STD
from .model import LayerRetention, PaCaModel, forward
from .tensor import Tensor

__all__ = [
    "Heatmap",
    "ImportanceReport",
    "extract_heatmaps",
    "mask_image",
    "bilinear_upsample",
    "heatmap_importance",
    "cluster_importance",
    "rank_clusters",
    "export_heatmap",
    "unit_image",
    "predict_probs",
]

TIE_EPS = 1e-3


@dataclass
class Heatmap:
    values: np.ndarray  # (h, w), min 0 / max 1 unless the slice was constant
    layer: int
    cluster: int


@dataclass
class ImportanceReport:
    layer: int
    importance: np.ndarray  # (M,) true-class probability drops
    entropy: np.ndarray  # (M,) Shannon entropy of each raw column
    rank: np.ndarray  # (M,) position of each cluster in the ordering
    order: list[int]  # cluster indices, most important first
    correct_prediction: bool  # False flags an unreliable report
    prob_original: float


def unit_image(image_u8: np.ndarray) -> np.ndarray:
    return image_u8.astype(np.float32) / 255.0


def _model_input(image01: np.ndarray) -> np.ndarray:
    return (image01.astype(np.float32) - np.float32(NORM_MEAN)) / np.float32(NORM_STD)


def predict_probs(model: PaCaModel, image01: np.ndarray) -> np.ndarray:
    """Softmax class probabilities for a single [0,1] image."""
    logits, _ = forward(model, Tensor(_model_input(image01)[None]))
    z = logits.data[0] - logits.data[0].max()
    e = np.exp(z)
    return e / e.sum()


def _minmax(grid: np.ndarray) -> np.ndarray:
    lo, hi = grid.min(), grid.max()
    if hi == lo:
        return np.zeros_like(grid)  # no spatial preference: inert mask
    return (grid - lo) / (hi - lo)


def _retained_record(model: PaCaModel, image01: np.ndarray, layer: int | None):
    logits, retained = forward(model, Tensor(_model_input(image01)[None]), retain_explanations=True)
    records = {r.layer: r for r in retained[0]}
    if not records:
        raise ValueError("model has no cluster-attention layers to explain")
    if layer is None:
        layer = max(records)
    if layer not in records:
        raise ValueError(f"block {layer} is not a cluster-attention layer (have {sorted(records)})")
    return logits.data[0], records[layer]


def _columns(record: LayerRetention, source: str) -> np.ndarray:
    """Column-stochastic (N, M) slices backing the heatmaps."""
    if source == "clusters":
        return record.assignment.matrix.data
    if source == "attention":
        cols = record.attention.data.mean(axis=0)  # (N, M) after head average
        z = cols - cols.max(axis=0, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=0, keepdims=True)
    raise ValueError(f"unknown source {source!r} (expected 'clusters' or 'attention')")


def extract_heatmaps(
    model: PaCaModel, image01: np.ndarray, layer: int | None = None, source: str = "clusters"
) -> list[Heatmap]:
    """Min-max-normalized spatial heatmap for every cluster of one block."""
    _, record = _retained_record(model, image01, layer)
    h, w = record.hw
    cols = _columns(record, source)
    return [Heatmap(_minmax(cols[:, m].reshape(h, w)), record.layer, m) for m in range(cols.shape[1])]


def bilinear_upsample(src: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Resize (h, w) -> size with half-pixel-centered bilinear sampling."""
    h, w = src.shape
    hh, ww = size
    sy = np.clip((np.arange(hh) + 0.5) * h / hh - 0.5, 0, h - 1)
    sx = np.clip((np.arange(ww) + 0.5) * w / ww - 0.5, 0, w - 1)
    y0 = np.floor(sy).astype(int)
    x0 = np.floor(sx).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (sy - y0)[:, None]
    fx = (sx - x0)[None, :]
    top = src[np.ix_(y0, x0)] * (1 - fx) + src[np.ix_(y0, x1)] * fx
    bot = src[np.ix_(y1, x0)] * (1 - fx) + src[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bot * fy


def mask_image(image01: np.ndarray, hm: Heatmap | np.ndarray) -> np.ndarray:
    """Occlude the cluster's support: x * upsample(1 - heatmap), per channel."""
    vals = hm.values if isinstance(hm, Heatmap) else np.asarray(hm)
    mask = 1.0 - bilinear_upsample(vals.astype(np.float64), image01.shape[:2])
    return (image01 * mask[:, :, None]).astype(image01.dtype)


def heatmap_importance(model: PaCaModel, image01: np.ndarray, label: int, hm) -> float:
    """True-class probability drop caused by masking with this heatmap."""
    p0 = predict_probs(model, image01)[label]
    pm = predict_probs(model, mask_image(image01, hm))[label]
    return float(p0 - pm)


def _entropy(p: np.ndarray) -> float:
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def rank_clusters(importance: np.ndarray, entropy: np.ndarray, tie_eps: float = TIE_EPS) -> list[int]:
    """Order clusters by descending importance; near-ties by ascending entropy.

    Runs of consecutive scores within tie_eps of the run's head count as one
    tie group. The result is invariant under any strictly monotone rescaling
    of all scores (only comparisons and gaps enter).
    """
    m = len(importance)
    order = sorted(range(m), key=lambda i: (-importance[i], i))
    result: list[int] = []
    i = 0
    while i < m:
        j = i
        while j + 1 < m and abs(importance[order[j + 1]] - importance[order[i]]) <= tie_eps:
            j += 1
        result.extend(sorted(order[i : j + 1], key=lambda c: (entropy[c], c)))
        i = j + 1
    return result


def cluster_importance(
    model: PaCaModel, image01: np.ndarray, label: int, layer: int | None = None, source: str = "clusters"
) -> ImportanceReport:
    """Score every cluster of one block by its adversarial-mask effect."""
    logits, record = _retained_record(model, image01, layer)
    z = logits - logits.max()
    probs = np.exp(z) / np.exp(z).sum()
    correct = int(np.argmax(logits)) == int(label)
    p0 = float(probs[label])
    h, w = record.hw
    cols = _columns(record, source)
    n_clusters = cols.shape[1]
    importance = np.empty(n_clusters)
    entropy = np.empty(n_clusters)
    for m in range(n_clusters):
        hm = _minmax(cols[:, m].reshape(h, w))
        pm = predict_probs(model, mask_image(image01, hm))[label]
        importance[m] = p0 - float(pm)
        entropy[m] = _entropy(cols[:, m])
    order = rank_clusters(importance, entropy)
    rank = np.empty(n_clusters, dtype=np.int64)
    for pos, c in enumerate(order):
        rank[c] = pos
    return ImportanceReport(record.layer, importance, entropy, rank, order, correct, p0)


# --------------------------------------------------------------------------
# image export
# --------------------------------------------------------------------------


def _colormap_blue_red(t: np.ndarray) -> np.ndarray:
    """Linear blue -> red ramp over [0, 1], as (..., 3) float in 0..255."""
    return np.stack([255.0 * t, np.zeros_like(t), 255.0 * (1.0 - t)], axis=-1)


def export_heatmap(hm: Heatmap, path: str, mode: str = "gray", image01: np.ndarray | None = None) -> None:
    """Write a heatmap as binary PGM (gray) or blended over the image as PPM."""
    if mode == "gray":
        vals = np.rint(255.0 * hm.values).astype(np.uint8)
        h, w = vals.shape
        with open(path, "wb") as f:
            f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
            f.write(vals.tobytes())
    elif mode == "overlay":
        if image01 is None:
            raise ValueError("overlay export needs the source image")
        up = bilinear_upsample(hm.values.astype(np.float64), image01.shape[:2])
        blend = 0.5 * (255.0 * image01) + 0.5 * _colormap_blue_red(up)
        pixels = np.clip(np.rint(blend), 0, 255).astype(np.uint8)
        h, w = pixels.shape[:2]
        with open(path, "wb") as f:
            f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
            f.write(pixels.tobytes())
    else:
        raise ValueError(f"unknown export mode {mode!r}")

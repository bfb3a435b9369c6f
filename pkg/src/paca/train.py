"""Desk-scale supervised training: loss, AdamW, schedule, loop, metrics.

The loop is fully deterministic given (seed, config, dataset): batch order,
initialization, and optimizer state all derive from explicit seeds, and the
engine's accumulation order is fixed. Metrics go to a CSV with columns
step, lr, loss, eval_top1 (eval column empty between evaluations).
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .data import Batch, Dataset, batch_iter, normalize_images
from .model import PaCaModel, forward, save_checkpoint
from .tensor import Tape, Tensor, backward, log_softmax, mul, tsum

__all__ = [
    "TrainConfig",
    "OptimizerState",
    "cross_entropy",
    "adamw_step",
    "lr_at",
    "train_loop",
    "evaluate",
    "clip_gradients",
]


@dataclass
class TrainConfig:
    steps: int = 200
    lr: float = 5e-4
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 32
    warmup_steps: int | None = None  # None -> 5% of steps
    seed: int = 0
    grad_clip: float | None = 5.0
    eval_every: int = 0  # 0 disables periodic eval
    augment: bool = False

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not (0 <= self.betas[0] < 1 and 0 <= self.betas[1] < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be >= 1")
        if self.warmup_steps is None:
            self.warmup_steps = max(1, round(0.05 * self.steps))


@dataclass
class OptimizerState:
    """First/second moment buffers mirroring the parameter registry."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood over the batch, stable via log-sum-exp."""
    labels = np.asarray(labels, dtype=np.int64)
    b, k = logits.shape
    if labels.shape != (b,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {b}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range [0, {k})")
    pick = np.zeros((b, k), dtype=logits.data.dtype)
    pick[np.arange(b), labels] = -1.0 / b
    return tsum(mul(log_softmax(logits, axis=1), Tensor(pick)))


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to cfg.lr, then cosine decay to zero at cfg.steps."""
    if step < cfg.warmup_steps:
        return cfg.lr * (step + 1) / cfg.warmup_steps
    span = max(1, cfg.steps - cfg.warmup_steps)
    t = min(step - cfg.warmup_steps, span)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * t / span))


def clip_gradients(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    total = 0.0
    for t in params.values():
        if t.grad is not None:
            total += float((t.grad.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if norm > max_norm > 0:
        factor = np.float32(max_norm / norm)
        for t in params.values():
            if t.grad is not None:
                t.grad *= factor
    return norm


def adamw_step(params: dict[str, Tensor], state: OptimizerState, cfg: TrainConfig, lr: float) -> None:
    """Decoupled-weight-decay Adam with bias correction.

    Rank-0/1 tensors (biases, norm scales/shifts) are exempt from decay.
    """
    state.step += 1
    b1, b2 = cfg.betas
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        if cfg.weight_decay and p.data.ndim > 1:
            update = update + cfg.weight_decay * p.data
        p.data -= np.asarray(lr * update, dtype=p.data.dtype)


def evaluate(model: PaCaModel, ds: Dataset, batch_size: int = 64) -> float:
    """Top-1 accuracy; argmax ties resolve to the lowest class index."""
    correct = 0
    for start in range(0, len(ds), batch_size):
        imgs = normalize_images(ds.images[start : start + batch_size])
        logits, _ = forward(model, Tensor(imgs))
        pred = np.argmax(logits.data, axis=1)
        correct += int((pred == ds.labels[start : start + batch_size]).sum())
    return correct / len(ds)


def train_loop(
    model: PaCaModel,
    ds: Dataset,
    cfg: TrainConfig,
    eval_ds: Dataset | None = None,
    out_dir: str | None = None,
    verbose: bool = False,
) -> list[tuple[int, float, float, float | None]]:
    """Run cfg.steps optimizer steps; returns (step, lr, loss, eval_top1) rows.

    Writes metrics.csv plus final/best checkpoints under out_dir when given.
    Aborts with the step index if the loss goes non-finite.
    """
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    state = OptimizerState()
    rows: list[tuple[int, float, float, float | None]] = []
    best_top1 = -1.0
    step = 0
    epoch = 0
    while step < cfg.steps:
        for batch in batch_iter(ds, cfg.batch_size, cfg.seed, epoch=epoch, augment=cfg.augment):
            if step >= cfg.steps:
                break
            with Tape() as tape:
                logits, _ = forward(model, batch.images)
                loss = cross_entropy(logits, batch.labels)
            loss_val = loss.item()
            if not math.isfinite(loss_val):
                raise RuntimeError(f"non-finite loss at step {step}")
            backward(loss, tape, keep_intermediate_grads=False)
            if cfg.grad_clip is not None:
                clip_gradients(model.registry, cfg.grad_clip)
            lr = lr_at(step, cfg)
            adamw_step(model.registry, state, cfg, lr)
            for p in model.registry.values():
                p.grad = None
            top1: float | None = None
            if cfg.eval_every and eval_ds is not None and (step + 1) % cfg.eval_every == 0:
                top1 = evaluate(model, eval_ds, cfg.batch_size)
                if out_dir and top1 > best_top1:
                    best_top1 = top1
                    save_checkpoint(model, os.path.join(out_dir, "best.ckpt"))
            rows.append((step, lr, loss_val, top1))
            if verbose and (step % 10 == 0 or top1 is not None):
                extra = f" top1={top1:.4f}" if top1 is not None else ""
                print(f"step {step:5d}  lr {lr:.3e}  loss {loss_val:.4f}{extra}")
            step += 1
        epoch += 1
    if out_dir:
        save_checkpoint(model, os.path.join(out_dir, "final.ckpt"))
        write_metrics_csv(os.path.join(out_dir, "metrics.csv"), rows)
    return rows


def write_metrics_csv(path: str, rows: list[tuple[int, float, float, float | None]]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("step,lr,loss,eval_top1\n")
        for step, lr, loss, top1 in rows:
            f.write(f"{step},{lr:.8g},{loss:.8g},{'' if top1 is None else f'{top1:.6g}'}\n")

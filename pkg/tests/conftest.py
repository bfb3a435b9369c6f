"""Shared fixtures and the finite-difference gradient checker."""

import numpy as np
import pytest

from paca.data import synth_dataset
from paca.model import build_model, preset
from paca.tensor import Tape, backward
from paca.train import TrainConfig, train_loop


def finite_difference(f, arrays, step=1e-5):
    """Central-difference gradients of scalar f() w.r.t. each array element."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat, gf = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = f()
            flat[i] = orig - step
            lo = f()
            flat[i] = orig
            gf[i] = (hi - lo) / (2 * step)
        grads.append(g)
    return grads


def max_rel_err(a, b, floor=1e-9):
    """Element-wise relative error, ignoring differences below the floor."""
    diff = np.abs(a - b)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    rel = diff / denom
    rel[diff <= floor] = 0.0
    return float(rel.max()) if rel.size else 0.0


def assert_grads_match(build_loss, leaves, rtol=1e-6, floor=1e-9, step=1e-5):
    """Tape gradients of build_loss() must match finite differences.

    ``leaves`` are float64 Tensors with requires_grad; build_loss() must
    recompute the loss from their current data.
    """
    for t in leaves:
        t.grad = None
    with Tape() as tape:
        loss = build_loss()
    backward(loss, tape)
    fd = finite_difference(lambda: build_loss().item(), [t.data for t in leaves], step=step)
    for t, g_fd in zip(leaves, fd):
        assert t.grad is not None, "leaf missing gradient"
        err = max_rel_err(t.grad, g_fd, floor=floor)
        assert err < rtol, f"gradient mismatch: max rel err {err:.3e}"


@pytest.fixture(scope="session")
def trained_tiny():
    """tiny-debug model trained 200 steps on the 4-class synthetic set (seed 7)."""
    ds = synth_dataset(7, 512, 4, geometry=(16, 16))
    model = build_model(preset("tiny-debug"), seed=7)
    train_loop(model, ds, TrainConfig(steps=200, seed=7))
    return model, ds

"""Dense tensors with reverse-mode automatic differentiation.

A deliberately small engine: numpy arrays for storage and arithmetic, an
explicit execution tape for gradients, and exactly the operations the
cluster-attention networks need (matmul, softmax, layer norm, GELU, 2-D
convolution with groups, plus elementwise/shape plumbing).

Conventions:
  * float32 is the working precision; pass float64 arrays for gradient
    checking.
  * Layout is row-major and channels-last: a token sequence is (N, C),
    a feature map is (H, W, C).
  * Ops never mask NaN/Inf. ``set_debug_checks(True)`` asserts finiteness
    after every op.
  * One forward/backward pass runs on a single logical thread; tensors may
    be handed between threads as long as nobody mutates mid-pass.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "tensor",
    "zeros",
    "ones",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "reshape",
    "transpose",
    "tsum",
    "tmean",
    "stack",
    "softmax",
    "log_softmax",
    "layer_norm",
    "gelu",
    "conv2d",
    "backward",
    "set_debug_checks",
    "flop_meter",
]

DEFAULT_DTYPE = np.float32

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Raised when operand shapes are inconsistent with an op's contract."""


_DEBUG_CHECKS = False


def set_debug_checks(enabled: bool) -> None:
    """Toggle post-op finiteness assertions (NaN/Inf is an error state)."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


class FlopMeter:
    """Scoped FLOP tally for the cost-model cross checks.

    Convention: one multiply-add counts as 2 FLOPs (matmul, conv2d);
    softmax counts exp + divide = 2 FLOPs per element. Nothing else is
    metered. Counts land in the innermost active scope label.
    """

    def __init__(self):
        self.active = False
        self.totals: dict[str, int] = {}
        self._labels = ["other"]

    def add(self, flops: int) -> None:
        if self.active:
            label = self._labels[-1]
            self.totals[label] = self.totals.get(label, 0) + int(flops)

    def total(self) -> int:
        return sum(self.totals.values())

    def scope(self, label: str) -> "_FlopScope":
        return _FlopScope(self, label)

    def __enter__(self) -> "FlopMeter":
        self.totals = {}
        self.active = True
        return self

    def __exit__(self, *exc) -> None:
        self.active = False


class _FlopScope:
    def __init__(self, meter: FlopMeter, label: str):
        self._meter = meter
        self._label = label

    def __enter__(self):
        self._meter._labels.append(self._label)
        return self

    def __exit__(self, *exc):
        self._meter._labels.pop()


flop_meter = FlopMeter()


class Tensor:
    """A dense array plus optional gradient buffer.

    ``requires_grad`` marks leaves (parameters, or inputs under test);
    op outputs inherit it whenever any parent requires grad and a tape
    is recording.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, np.ndarray) and dtype is None:
            arr = data if data.dtype in (np.float32, np.float64) else data.astype(DEFAULT_DTYPE)
        else:
            arr = np.asarray(data, dtype=dtype or DEFAULT_DTYPE)
        if any(d < 1 for d in arr.shape):
            raise ShapeError(f"zero-sized extent in shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; scalars stay scalars (no dtype promotion)
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, s):
        return scale(self, 1.0 / float(s))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, dtype=DEFAULT_DTYPE, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=DEFAULT_DTYPE, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


# --------------------------------------------------------------------------
# tape
# --------------------------------------------------------------------------

_tls = threading.local()


def _tape_stack() -> list:
    stack = getattr(_tls, "tapes", None)
    if stack is None:
        stack = []
        _tls.tapes = stack
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Execution-ordered record of differentiable ops.

    Recording happens while the tape is entered as a context manager.
    Replaying entries in reverse execution order is a valid reverse
    topological traversal, so ``backward`` visits each op exactly once.
    """

    def __init__(self):
        self._entries: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []
        self._output_ids: set[int] = set()

    def __len__(self) -> int:
        return len(self._entries)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _tape_stack().pop()
        assert popped is self, "tapes must unwind in LIFO order"


def _finish(out: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap an op result, recording it on the active tape when needed."""
    if _DEBUG_CHECKS and not np.isfinite(out).all():
        raise FloatingPointError("non-finite values produced by op")
    tape = _active_tape()
    requires = tape is not None and any(p.requires_grad for p in parents)
    result = Tensor.__new__(Tensor)
    result.data = out
    result.grad = None
    result.requires_grad = requires
    if requires:
        tape._entries.append((result, backward_fn))
        tape._output_ids.add(id(result))
    return result


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


def backward(loss: Tensor, tape: Tape, keep_intermediate_grads: bool = True) -> None:
    """Populate ``grad`` on every reachable requires-grad tensor.

    Gradients accumulate with ``+=`` semantics, so tensors used several
    times collect contributions from every use. ``keep_intermediate_grads``
    can be switched off to drop activation gradients as soon as they have
    been consumed (training-loop memory saver; leaves always keep theirs).
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if len(tape) == 0:
        raise ValueError("backward on an empty tape: loss is detached from any recorded op")
    if id(loss) not in tape._output_ids:
        raise ValueError("loss was not produced under this tape (detached loss)")
    loss.grad = np.ones_like(loss.data)
    for out, fn in reversed(tape._entries):
        if out.grad is None:
            continue
        fn(out.grad)
        if not keep_intermediate_grads:
            out.grad = None


# --------------------------------------------------------------------------
# elementwise / shape ops
# --------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient back down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _coerce(other) -> Tensor | float:
    if isinstance(other, Tensor):
        return other
    if isinstance(other, (int, float, np.floating, np.integer)):
        return float(other)
    raise TypeError(f"expected Tensor or scalar, got {type(other).__name__}")


def add(a: Tensor, b) -> Tensor:
    b = _coerce(b)
    if isinstance(b, float):
        out = a.data + b

        def back(g):
            if a.requires_grad:
                _accum(a, g)

        return _finish(out, (a,), back)
    out = a.data + b.data

    def back(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.data.shape))

    return _finish(out, (a, b), back)


def sub(a: Tensor, b) -> Tensor:
    b = _coerce(b)
    if isinstance(b, float):
        return add(a, -b)
    out = a.data - b.data

    def back(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g, b.data.shape))

    return _finish(out, (a, b), back)


def mul(a: Tensor, b) -> Tensor:
    b = _coerce(b)
    if isinstance(b, float):
        return scale(a, b)
    out = a.data * b.data

    def back(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _finish(out, (a, b), back)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = a.data * s

    def back(g):
        if a.requires_grad:
            _accum(a, g * s)

    return _finish(out, (a,), back)


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(d) for d in shape)
    out = a.data.reshape(shape)

    def back(g):
        if a.requires_grad:
            _accum(a, g.reshape(a.data.shape))

    return _finish(out, (a,), back)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = a.data.transpose(axes)

    def back(g):
        if a.requires_grad:
            _accum(a, g.transpose(inv))

    return _finish(out, (a,), back)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if not a.requires_grad:
            return
        gg = g
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        _accum(a, np.broadcast_to(gg, a.data.shape))

    return _finish(np.asarray(out), (a,), back)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else a.data.shape[axis]
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def back(g):
        if not a.requires_grad:
            return
        gg = g / count
        if axis is not None and not keepdims:
            gg = np.expand_dims(gg, axis)
        _accum(a, np.broadcast_to(gg, a.data.shape))

    return _finish(np.asarray(out), (a,), back)


def stack(parts: Iterable[Tensor]) -> Tensor:
    """Stack equal-shape tensors along a new leading axis."""
    parts = list(parts)
    if not parts:
        raise ValueError("stack of no tensors")
    base = parts[0].data.shape
    for p in parts:
        if p.data.shape != base:
            raise ShapeError(f"stack shape mismatch: {p.data.shape} vs {base}")
    out = np.stack([p.data for p in parts], axis=0)

    def back(g):
        for i, p in enumerate(parts):
            if p.requires_grad:
                _accum(p, g[i])

    return _finish(out, parts, back)


# --------------------------------------------------------------------------
# numerics
# --------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product: 2-D x 2-D, or batched 3-D x 3-D with equal batch."""
    ad, bd = a.data, b.data
    if ad.ndim not in (2, 3) or bd.ndim != ad.ndim:
        raise ShapeError(f"matmul ranks unsupported: {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[-2] or (ad.ndim == 3 and ad.shape[0] != bd.shape[0]):
        raise ShapeError(f"matmul shape mismatch: {ad.shape} @ {bd.shape}")
    out = ad @ bd
    batch = ad.shape[0] if ad.ndim == 3 else 1
    flop_meter.add(2 * batch * ad.shape[-2] * ad.shape[-1] * bd.shape[-1])

    def back(g):
        if a.requires_grad:
            _accum(a, g @ bd.swapaxes(-1, -2))
        if b.requires_grad:
            _accum(b, ad.swapaxes(-1, -2) @ g)

    return _finish(out, (a, b), back)


def softmax(x: Tensor, axis: int) -> Tensor:
    """Stabilized softmax along ``axis``; slices sum to 1."""
    xd = x.data
    if not -xd.ndim <= axis < xd.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {xd.shape}")
    shifted = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    flop_meter.add(2 * xd.size)

    def back(g):
        if x.requires_grad:
            _accum(x, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _finish(y, (x,), back)


def log_softmax(x: Tensor, axis: int) -> Tensor:
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    ls = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = np.exp(ls)

    def back(g):
        if x.requires_grad:
            _accum(x, g - y * g.sum(axis=axis, keepdims=True))

    return _finish(ls, (x,), back)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    xd = x.data
    c = xd.shape[-1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(f"layer_norm affine shapes {gamma.data.shape}/{beta.data.shape} do not match C={c}")
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gamma.data * xhat + beta.data

    def back(g):
        lead = tuple(range(g.ndim - 1))
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).sum(axis=lead))
        if beta.requires_grad:
            _accum(beta, g.sum(axis=lead))
        if x.requires_grad:
            dxh = g * gamma.data
            term = dxh - dxh.mean(axis=-1, keepdims=True) - xhat * (dxh * xhat).mean(axis=-1, keepdims=True)
            _accum(x, inv * term)

    return _finish(out, (x, gamma, beta), back)


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian error linear unit, x * Phi(x), via erf."""
    xd = x.data
    phi = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    out = xd * phi

    def back(g):
        if x.requires_grad:
            pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT_2PI
            _accum(x, g * (phi + xd * pdf))

    return _finish(out, (x,), back)


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------


def _conv_out_extent(size: int, k: int, stride: int, pad: int) -> int:
    padded = size + 2 * pad
    if padded < k:
        raise ShapeError(f"kernel {k} exceeds padded input extent {padded}")
    return (padded - k) // stride + 1


def conv2d(
    x: Tensor,
    w: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    pad: int = 0,
    groups: int = 1,
) -> Tensor:
    """Cross-correlation on a (H, W, Cin) map with (k, k, Cin/groups, Cout) weights.

    Explicit zero padding, floor-division output extents. groups=Cin=Cout is
    the depthwise case and takes a fast shift-and-add path; accumulation
    order is fixed, so repeated runs are bit-identical.
    """
    xd, wd = x.data, w.data
    if xd.ndim != 3 or wd.ndim != 4:
        raise ShapeError(f"conv2d expects (H,W,Cin) and (k,k,Cin/g,Cout), got {xd.shape} and {wd.shape}")
    h, wdt, cin = xd.shape
    k, k2, cin_g, cout = wd.shape
    if k != k2:
        raise ShapeError(f"non-square kernel {wd.shape}")
    if cin % groups or cout % groups or cin_g != cin // groups:
        raise ShapeError(f"groups={groups} incompatible with Cin={cin}, Cout={cout}, w={wd.shape}")
    if bias is not None and bias.data.shape != (cout,):
        raise ShapeError(f"bias shape {bias.data.shape} does not match Cout={cout}")
    oh = _conv_out_extent(h, k, stride, pad)
    ow = _conv_out_extent(wdt, k, stride, pad)
    flop_meter.add(2 * oh * ow * k * k * cin_g * cout)

    xp = np.pad(xd, ((pad, pad), (pad, pad), (0, 0))) if pad else xd
    bias_d = bias.data if bias is not None else None

    if groups == cin == cout:
        out, ctx = _dw_forward(xp, wd, bias_d, stride, oh, ow)
        back = _dw_backward(x, w, bias, ctx, stride, pad, k, oh, ow)
    elif groups == 1:
        out, ctx = _dense_forward(xp, wd, bias_d, stride, k, oh, ow, cin, cout)
        back = _dense_backward(x, w, bias, ctx, stride, pad, k, oh, ow, cin, cout)
    else:
        out, ctx = _grouped_forward(xp, wd, bias_d, stride, k, oh, ow, groups, cin_g, cout)
        back = _grouped_backward(x, w, bias, ctx, stride, pad, k, oh, ow, groups, cin_g, cout)

    parents = (x, w) if bias is None else (x, w, bias)
    return _finish(out, parents, back)


def _dense_forward(xp, wd, bias_d, stride, k, oh, ow, cin, cout):
    win = sliding_window_view(xp, (k, k), axis=(0, 1))[::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2)).reshape(oh * ow, k * k * cin)
    wmat = wd.reshape(k * k * cin, cout)
    out = cols @ wmat
    if bias_d is not None:
        out += bias_d
    return out.reshape(oh, ow, cout), (cols, wmat, xp.shape)


def _dense_backward(x, w, bias, ctx, stride, pad, k, oh, ow, cin, cout):
    cols, wmat, xp_shape = ctx

    def back(g):
        g2 = g.reshape(oh * ow, cout)
        if bias is not None and bias.requires_grad:
            _accum(bias, g2.sum(axis=0))
        if w.requires_grad:
            _accum(w, (cols.T @ g2).reshape(k, k, cin, cout))
        if x.requires_grad:
            dcols = (g2 @ wmat.T).reshape(oh, ow, k, k, cin)
            dxp = np.zeros(xp_shape, dtype=g.dtype)
            for ky in range(k):
                for kx in range(k):
                    dxp[ky : ky + stride * oh : stride, kx : kx + stride * ow : stride] += dcols[:, :, ky, kx]
            _accum(x, dxp[pad : pad + x.data.shape[0], pad : pad + x.data.shape[1]] if pad else dxp)

    return back


def _dw_forward(xp, wd, bias_d, stride, oh, ow):
    k = wd.shape[0]
    c = wd.shape[3]
    out = np.zeros((oh, ow, c), dtype=xp.dtype)
    for ky in range(k):
        for kx in range(k):
            out += xp[ky : ky + stride * oh : stride, kx : kx + stride * ow : stride] * wd[ky, kx, 0]
    if bias_d is not None:
        out += bias_d
    return out, (xp,)


def _dw_backward(x, w, bias, ctx, stride, pad, k, oh, ow):
    (xp,) = ctx

    def back(g):
        if bias is not None and bias.requires_grad:
            _accum(bias, g.sum(axis=(0, 1)))
        if w.requires_grad:
            dw = np.empty_like(w.data)
            for ky in range(k):
                for kx in range(k):
                    patch = xp[ky : ky + stride * oh : stride, kx : kx + stride * ow : stride]
                    dw[ky, kx, 0] = (patch * g).sum(axis=(0, 1))
            _accum(w, dw)
        if x.requires_grad:
            dxp = np.zeros(xp.shape, dtype=g.dtype)
            for ky in range(k):
                for kx in range(k):
                    dxp[ky : ky + stride * oh : stride, kx : kx + stride * ow : stride] += g * w.data[ky, kx, 0]
            _accum(x, dxp[pad : pad + x.data.shape[0], pad : pad + x.data.shape[1]] if pad else dxp)

    return back


def _grouped_forward(xp, wd, bias_d, stride, k, oh, ow, groups, cin_g, cout):
    cout_g = cout // groups
    out = np.empty((oh, ow, cout), dtype=xp.dtype)
    cols_all = []
    for gi in range(groups):
        xs = xp[:, :, gi * cin_g : (gi + 1) * cin_g]
        win = sliding_window_view(xs, (k, k), axis=(0, 1))[::stride, ::stride]
        cols = np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2)).reshape(oh * ow, k * k * cin_g)
        wmat = wd[:, :, :, gi * cout_g : (gi + 1) * cout_g].reshape(k * k * cin_g, cout_g)
        res = cols @ wmat
        if bias_d is not None:
            res += bias_d[gi * cout_g : (gi + 1) * cout_g]
        out[:, :, gi * cout_g : (gi + 1) * cout_g] = res.reshape(oh, ow, cout_g)
        cols_all.append(cols)
    return out, (cols_all, xp.shape)


def _grouped_backward(x, w, bias, ctx, stride, pad, k, oh, ow, groups, cin_g, cout):
    cols_all, xp_shape = ctx
    cout_g = cout // groups

    def back(g):
        if bias is not None and bias.requires_grad:
            _accum(bias, g.reshape(oh * ow, cout).sum(axis=0))
        dw = np.zeros_like(w.data) if w.requires_grad else None
        dxp = np.zeros(xp_shape, dtype=g.dtype) if x.requires_grad else None
        for gi in range(groups):
            g2 = g[:, :, gi * cout_g : (gi + 1) * cout_g].reshape(oh * ow, cout_g)
            wmat = w.data[:, :, :, gi * cout_g : (gi + 1) * cout_g].reshape(k * k * cin_g, cout_g)
            if dw is not None:
                dw[:, :, :, gi * cout_g : (gi + 1) * cout_g] = (cols_all[gi].T @ g2).reshape(k, k, cin_g, cout_g)
            if dxp is not None:
                dcols = (g2 @ wmat.T).reshape(oh, ow, k, k, cin_g)
                for ky in range(k):
                    for kx in range(k):
                        dxp[
                            ky : ky + stride * oh : stride,
                            kx : kx + stride * ow : stride,
                            gi * cin_g : (gi + 1) * cin_g,
                        ] += dcols[:, :, ky, kx]
        if dw is not None:
            _accum(w, dw)
        if dxp is not None:
            _accum(x, dxp[pad : pad + x.data.shape[0], pad : pad + x.data.shape[1]] if pad else dxp)

    return back

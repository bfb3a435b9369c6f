"""Engine ops against independent oracles, plus gradient and tape contracts."""

import numpy as np
import pytest

from conftest import assert_grads_match, max_rel_err
from paca.tensor import (
    Tape,
    Tensor,
    ShapeError,
    backward,
    conv2d,
    gelu,
    layer_norm,
    log_softmax,
    matmul,
    mul,
    reshape,
    set_debug_checks,
    softmax,
    stack,
    tensor,
    tmean,
    transpose,
    tsum,
)


def matmul_oracle(a, b):
    m, k = a.shape
    k2, n = b.shape
    out = np.zeros((m, n), dtype=a.dtype)
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for p in range(k):
                acc += a[i, p] * b[p, j]
            out[i, j] = acc
    return out


def conv_oracle(x, w, b, stride, pad, groups):
    h, wd, cin = x.shape
    k, _, cin_g, cout = w.shape
    cout_g = cout // groups
    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    oh = (h + 2 * pad - k) // stride + 1
    ow = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((oh, ow, cout), dtype=x.dtype)
    for oy in range(oh):
        for ox in range(ow):
            for oc in range(cout):
                gi = oc // cout_g
                acc = 0.0
                for ky in range(k):
                    for kx in range(k):
                        for ic in range(cin_g):
                            acc += xp[oy * stride + ky, ox * stride + kx, gi * cin_g + ic] * w[ky, kx, ic, oc]
                out[oy, ox, oc] = acc + (b[oc] if b is not None else 0.0)
    return out


class TestMatmul:
    def test_identity(self):
        a = tensor([[1.0, 2.0], [3.0, 4.0]])
        eye = tensor(np.eye(2, dtype=np.float32))
        assert np.array_equal(matmul(eye, a).data, a.data)

    def test_hand_arithmetic(self):
        out = matmul(tensor([[1.0, 2.0]]), tensor([[3.0], [4.0]]))
        assert out.data.tolist() == [[11.0]]

    def test_against_triple_loop(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((5, 7)).astype(np.float32)
        b = rng.standard_normal((7, 3)).astype(np.float32)
        got = matmul(tensor(a), tensor(b)).data
        assert np.abs(got - matmul_oracle(a, b)).max() < 1e-6

    def test_batched_matches_per_slice(self):
        rng = np.random.default_rng(1)
        a = rng.standard_normal((3, 4, 5))
        b = rng.standard_normal((3, 5, 2))
        got = matmul(tensor(a, dtype=np.float64), tensor(b, dtype=np.float64)).data
        for i in range(3):
            assert np.allclose(got[i], a[i] @ b[i])

    def test_shape_error_reports_both_shapes(self):
        with pytest.raises(ShapeError) as exc:
            matmul(tensor(np.ones((2, 3))), tensor(np.ones((4, 2))))
        assert "(2, 3)" in str(exc.value) and "(4, 2)" in str(exc.value)

    def test_repeated_runs_bit_identical(self):
        rng = np.random.default_rng(2)
        a = tensor(rng.standard_normal((16, 16)).astype(np.float32))
        b = tensor(rng.standard_normal((16, 16)).astype(np.float32))
        first = matmul(a, b).data
        for _ in range(3):
            assert np.array_equal(matmul(a, b).data, first)


class TestSoftmax:
    def test_uniform_input(self):
        out = softmax(tensor([0.0, 0.0, 0.0]), axis=0)
        assert np.allclose(out.data, [1 / 3, 1 / 3, 1 / 3])

    def test_large_input_stable(self):
        out = softmax(tensor([1000.0, 0.0]), axis=0)
        assert abs(out.data[0] - 1.0) < 1e-6 and abs(out.data[1]) < 1e-6

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(3)
        out = softmax(tensor(rng.standard_normal((4, 6)).astype(np.float32)), axis=1)
        assert np.abs(out.data.sum(axis=1) - 1.0).max() < 1e-6

    def test_no_overflow_at_magnitude_1e4(self):
        rng = np.random.default_rng(4)
        for axis in (0, 1):
            x = tensor((rng.random((8, 5)).astype(np.float32) - 0.5) * 2e4)
            out = softmax(x, axis=axis)
            assert np.isfinite(out.data).all()
            assert np.abs(out.data.sum(axis=axis) - 1.0).max() < 1e-6

    def test_bad_axis(self):
        with pytest.raises(ShapeError):
            softmax(tensor([1.0, 2.0]), axis=3)


class TestLayerNorm:
    def _params(self, c, dtype=np.float32):
        return tensor(np.ones(c, dtype=dtype)), tensor(np.zeros(c, dtype=dtype))

    def test_constant_vector_zeroed(self):
        g, b = self._params(6)
        out = layer_norm(tensor(np.full(6, 3.7, dtype=np.float32)), g, b)
        assert np.abs(out.data).max() < 1e-6

    def test_affine_collapse(self):
        gamma = tensor(np.zeros(4, dtype=np.float32))
        beta = tensor(np.full(4, 2.5, dtype=np.float32))
        out = layer_norm(tensor(np.arange(8, dtype=np.float32).reshape(2, 4)), gamma, beta)
        assert np.all(out.data == 2.5)

    def test_against_two_pass_oracle(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((3, 8))
        g = rng.standard_normal(8)
        b = rng.standard_normal(8)
        eps = 1e-5
        want = np.empty_like(x)
        for i in range(3):
            mu = x[i].mean()
            var = ((x[i] - mu) ** 2).mean()
            want[i] = g * (x[i] - mu) / np.sqrt(var + eps) + b
        got = layer_norm(tensor(x, dtype=np.float64), tensor(g, dtype=np.float64), tensor(b, dtype=np.float64)).data
        assert np.abs(got - want).max() < 1e-6

    def test_output_statistics(self):
        rng = np.random.default_rng(6)
        g, b = self._params(32)
        out = layer_norm(tensor(rng.standard_normal((10, 32)).astype(np.float32) * 5), g, b).data
        assert np.abs(out.mean(axis=-1)).max() < 1e-5
        assert np.abs(out.var(axis=-1) - 1.0).max() < 1e-4


class TestGelu:
    def test_zero(self):
        assert gelu(tensor([0.0])).data[0] == 0.0

    def test_asymptote(self):
        assert abs(gelu(tensor([100.0])).data[0] - 100.0) < 1e-6

    def test_known_value(self):
        # 0.5 * (-1) * (1 + erf(-1/sqrt(2))), frozen from a high-precision evaluation
        out = gelu(tensor([-1.0], dtype=np.float64)).data[0]
        assert abs(out - (-0.15865525393145707)) < 1e-12


class TestConv2d:
    def test_identity_1x1(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((4, 5, 3)).astype(np.float32)
        w = np.eye(3, dtype=np.float32).reshape(1, 1, 3, 3)
        out = conv2d(tensor(x), tensor(w))
        assert np.allclose(out.data, x, atol=1e-7)

    def test_overlap_counting(self):
        x = tensor(np.ones((3, 3, 1), dtype=np.float32))
        w = tensor(np.ones((3, 3, 1, 1), dtype=np.float32))
        out = conv2d(x, w, stride=1, pad=1)
        assert out.data[:, :, 0].tolist() == [[4, 6, 4], [6, 9, 6], [4, 6, 4]]

    @pytest.mark.parametrize(
        "shape,cout,stride,pad,groups",
        [
            ((5, 5, 2), 3, 1, 0, 1),
            ((5, 5, 2), 2, 1, 1, 1),
            ((6, 6, 4), 4, 2, 1, 4),  # depthwise
            ((6, 6, 4), 6, 1, 1, 2),  # grouped
            ((7, 5, 3), 2, 2, 2, 1),
        ],
    )
    def test_against_loop_oracle(self, shape, cout, stride, pad, groups):
        rng = np.random.default_rng(8)
        k = 3
        x = rng.standard_normal(shape).astype(np.float32)
        w = rng.standard_normal((k, k, shape[2] // groups, cout)).astype(np.float32)
        b = rng.standard_normal(cout).astype(np.float32)
        got = conv2d(tensor(x), tensor(w), tensor(b), stride=stride, pad=pad, groups=groups).data
        want = conv_oracle(x, w, b, stride, pad, groups)
        assert np.abs(got - want).max() < 1e-5

    def test_kernel_exceeds_input(self):
        with pytest.raises(ShapeError):
            conv2d(tensor(np.ones((2, 2, 1))), tensor(np.ones((5, 5, 1, 1))), stride=1, pad=1)

    def test_repeated_runs_bit_identical(self):
        rng = np.random.default_rng(9)
        x = tensor(rng.standard_normal((8, 8, 4)).astype(np.float32))
        w = tensor(rng.standard_normal((3, 3, 4, 8)).astype(np.float32))
        first = conv2d(x, w, stride=1, pad=1).data
        for _ in range(3):
            assert np.array_equal(conv2d(x, w, stride=1, pad=1).data, first)


class TestBackward:
    def test_sum_gives_ones(self):
        x = tensor(np.arange(6, dtype=np.float64).reshape(2, 3), requires_grad=True)
        with Tape() as tape:
            loss = tsum(x)
        backward(loss, tape)
        assert np.array_equal(x.grad, np.ones((2, 3)))

    def test_square_sum_analytic(self):
        x = tensor([1.0, 2.0, 3.0], requires_grad=True, dtype=np.float64)
        with Tape() as tape:
            loss = tsum(mul(x, x))
        backward(loss, tape)
        assert np.allclose(x.grad, [2.0, 4.0, 6.0])

    def test_shared_tensor_accumulates(self):
        x = tensor([2.0], requires_grad=True, dtype=np.float64)
        with Tape() as tape:
            loss = tsum(mul(x, x) + mul(x, x))
        backward(loss, tape)
        assert np.allclose(x.grad, [8.0])

    def test_non_scalar_loss_rejected(self):
        x = tensor([1.0, 2.0], requires_grad=True)
        with Tape() as tape:
            y = mul(x, x)
        with pytest.raises(ValueError, match="scalar"):
            backward(y, tape)

    def test_detached_loss_rejected(self):
        x = tensor([1.0], requires_grad=True)
        tape = Tape()
        with pytest.raises(ValueError, match="empty tape"):
            backward(tsum(x), tape)
        with tape:
            _ = mul(x, x)
        loss = tsum(x)  # created outside the tape
        with pytest.raises(ValueError, match="detached"):
            backward(loss, tape)

    @pytest.mark.parametrize("seed", range(3))
    def test_op_gradients_match_finite_differences(self, seed):
        rng = np.random.default_rng(100 + seed)

        def t(shape):
            return tensor(rng.standard_normal(shape), requires_grad=True, dtype=np.float64)

        w_sum = tensor(rng.standard_normal((4, 3)), dtype=np.float64)

        a, b = t((4, 5)), t((5, 3))
        assert_grads_match(lambda: tsum(mul(matmul(a, b), w_sum)), [a, b])

        x = t((4, 6))
        w6 = tensor(rng.standard_normal((4, 6)), dtype=np.float64)
        assert_grads_match(lambda: tsum(mul(softmax(x, axis=1), w6)), [x])
        assert_grads_match(lambda: tsum(mul(softmax(x, axis=0), w6)), [x])
        assert_grads_match(lambda: tsum(mul(log_softmax(x, axis=1), w6)), [x])

        xs, g, bb = t((3, 8)), t((8,)), t((8,))
        w38 = tensor(rng.standard_normal((3, 8)), dtype=np.float64)
        assert_grads_match(lambda: tsum(mul(layer_norm(xs, g, bb), w38)), [xs, g, bb])

        xg = t((4, 4))
        w44 = tensor(rng.standard_normal((4, 4)), dtype=np.float64)
        assert_grads_match(lambda: tsum(mul(gelu(xg), w44)), [xg])

        xm = t((6, 2))
        w43 = tensor(rng.standard_normal((4, 3)), dtype=np.float64)
        assert_grads_match(lambda: tsum(mul(tmean(xm, axis=0), tensor([1.0, -2.0], dtype=np.float64))), [xm])
        assert_grads_match(lambda: tsum(mul(transpose(reshape(xm, (3, 4)), (1, 0)), w43)), [xm])

        p1, p2 = t((2, 2)), t((2, 2))
        wst = tensor(rng.standard_normal((2, 2, 2)), dtype=np.float64)
        assert_grads_match(lambda: tsum(mul(stack([p1, p2]), wst)), [p1, p2])

    @pytest.mark.parametrize(
        "stride,pad,groups,cout",
        [(1, 1, 1, 3), (2, 1, 1, 2), (1, 1, 4, 4), (1, 0, 2, 4)],
    )
    def test_conv_gradients_match_finite_differences(self, stride, pad, groups, cout):
        rng = np.random.default_rng(11)
        x = tensor(rng.standard_normal((5, 5, 4)), requires_grad=True, dtype=np.float64)
        w = tensor(rng.standard_normal((3, 3, 4 // groups, cout)), requires_grad=True, dtype=np.float64)
        b = tensor(rng.standard_normal(cout), requires_grad=True, dtype=np.float64)
        oh = (5 + 2 * pad - 3) // stride + 1
        wsum = tensor(rng.standard_normal((oh, oh, cout)), dtype=np.float64)
        assert_grads_match(lambda: tsum(mul(conv2d(x, w, b, stride=stride, pad=pad, groups=groups), wsum)), [x, w, b])


class TestDebugChecks:
    def test_nonfinite_detected(self):
        set_debug_checks(True)
        try:
            with np.errstate(invalid="ignore"), pytest.raises(FloatingPointError):
                mul(tensor([np.inf]), tensor([0.0]))
        finally:
            set_debug_checks(False)

    def test_zero_extent_rejected(self):
        with pytest.raises(ShapeError):
            Tensor(np.ones((2, 0)))

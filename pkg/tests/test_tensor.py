"""Autodiff tensor: forward oracles, gradient checks, tape semantics."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tsrcan import tensor as T
from tsrcan.tensor import DimensionError, Tensor

from gradcheck import OP_CASES, away_from_zero, check_gradients, distinct


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ----------------------------------------------------------------------------
# independent oracles


def conv_oracle(x, w, b, stride, pad):
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.zeros((n, cin, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for i in range(n):
        for o in range(cout):
            for r in range(ho):
                for c in range(wo):
                    acc = 0.0
                    for ci in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[i, ci, r * stride + u, c * stride + v] * w[o, ci, u, v]
                    out[i, o, r, c] = acc + (b[o] if b is not None else 0.0)
    return out


def conv_transpose_oracle(x, w, b, stride, pad):
    n, cin, h, wd = x.shape
    _, cout, kh, kw = w.shape
    full = np.zeros((n, cout, (h - 1) * stride + kh, (wd - 1) * stride + kw))
    for i in range(n):
        for ci in range(cin):
            for r in range(h):
                for c in range(wd):
                    for o in range(cout):
                        full[i, o, r * stride:r * stride + kh, c * stride:c * stride + kw] += x[i, ci, r, c] * w[ci, o]
    ho = (h - 1) * stride - 2 * pad + kh
    wo = (wd - 1) * stride - 2 * pad + kw
    out = full[:, :, pad:pad + ho, pad:pad + wo]
    if b is not None:
        out = out + b[None, :, None, None]
    return out


def maxpool_oracle(x, size, stride, pad):
    n, c, h, w = x.shape
    xp = np.full((n, c, h + 2 * pad, w + 2 * pad), -np.inf)
    xp[:, :, pad:pad + h, pad:pad + w] = x
    ho = (h + 2 * pad - size) // stride + 1
    wo = (w + 2 * pad - size) // stride + 1
    out = np.empty((n, c, ho, wo))
    for r in range(ho):
        for s in range(wo):
            out[:, :, r, s] = xp[:, :, r * stride:r * stride + size, s * stride:s * stride + size].max(axis=(2, 3))
    return out


class TestGradients:
    @pytest.mark.parametrize("name", sorted(OP_CASES))
    def test_op_table(self, rng, name):
        fn, arrays = OP_CASES[name](rng)
        assert check_gradients(fn, arrays, rng) < 1e-4

    def test_add_sub_mul(self, rng):
        a, b = rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
        check_gradients(T.add, [a, b], rng)
        check_gradients(T.sub, [a, b], rng)
        check_gradients(T.mul, [a, b], rng)

    def test_sum_mean_reshape(self, rng):
        a = rng.standard_normal((2, 3, 2))
        check_gradients(T.sum, [a], rng)
        check_gradients(T.mean, [a], rng)
        check_gradients(lambda x: T.reshape(x, (3, 4)), [a], rng)

    def test_relu(self, rng):
        check_gradients(T.relu, [away_from_zero(rng, (2, 3, 3))], rng)

    def test_sigmoid(self, rng):
        check_gradients(T.sigmoid, [3 * rng.standard_normal((2, 5))], rng)

    def test_relu_of_sigmoid(self, rng):
        check_gradients(lambda x: T.relu(T.sigmoid(x)), [rng.standard_normal((3, 4))], rng)

    def test_scale_channels(self, rng):
        check_gradients(T.scale_channels, [rng.standard_normal((2, 3, 2, 2)), rng.standard_normal((2, 3, 1, 1))], rng)

    def test_global_avg_pool(self, rng):
        check_gradients(T.global_avg_pool, [rng.standard_normal((2, 3, 3, 2))], rng)

    def test_concat_and_slice(self, rng):
        check_gradients(T.concat_channels, [rng.standard_normal((1, 2, 2, 3)), rng.standard_normal((1, 3, 2, 3))], rng)
        check_gradients(lambda x: T.slice_channels(x, 1, 3), [rng.standard_normal((2, 4, 2, 2))], rng)

    def test_depth_to_space(self, rng):
        check_gradients(lambda x: T.depth_to_space(x, 2), [rng.standard_normal((1, 8, 2, 3))], rng)

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 3)])
    def test_conv2d(self, rng, stride, pad):
        x = rng.standard_normal((2, 2, 5, 5))
        w = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        check_gradients(lambda x_, w_, b_: T.conv2d(x_, w_, b_, stride=stride, pad=pad), [x, w, b], rng)

    @pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (2, 1, 4), (4, 2, 8)])
    def test_conv_transpose2d(self, rng, stride, pad, k):
        x = rng.standard_normal((1, 2, 3, 3))
        w = rng.standard_normal((2, 2, k, k))
        b = rng.standard_normal(2)
        check_gradients(lambda x_, w_, b_: T.conv_transpose2d(x_, w_, b_, stride=stride, pad=pad), [x, w, b], rng)

    @pytest.mark.parametrize("size,stride,pad", [(2, 2, 0), (3, 2, 1), (3, 1, 0)])
    def test_maxpool2d(self, rng, size, stride, pad):
        check_gradients(lambda x: T.maxpool2d(x, size, stride, pad=pad), [distinct(rng, (1, 2, 5, 5))], rng)

    def test_batchnorm_train(self, rng):
        state = T.BatchNormState(3)
        check_gradients(lambda x, g, b: T.batchnorm2d(x, g, b, state, training=True),
                        [rng.standard_normal((2, 3, 2, 2)), rng.uniform(0.5, 1.5, 3), rng.standard_normal(3)], rng)

    def test_batchnorm_eval(self, rng):
        state = T.BatchNormState(2)
        state.running_mean = rng.standard_normal(2)
        state.running_var = rng.uniform(0.5, 2.0, 2)
        check_gradients(lambda x, g, b: T.batchnorm2d(x, g, b, state, training=False),
                        [rng.standard_normal((2, 2, 2, 2)), rng.uniform(0.5, 1.5, 2), rng.standard_normal(2)], rng)

    def test_smooth_l1_both_branches(self, rng):
        pred = np.array([0.3, -0.2, 2.5, -3.0, 0.9, -1.7])
        target = rng.standard_normal(6) * 0.01
        check_gradients(T.smooth_l1, [pred, target], rng)


# ----------------------------------------------------------------------------
# forward semantics


class TestConv2d:
    def test_ones(self):
        out = T.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)))
        assert out.shape == (1, 1, 1, 1)
        assert out.item() == 9.0

    @pytest.mark.parametrize("k", [1, 3, 5])
    def test_identity_kernel_is_exact(self, rng, k):
        x = rng.standard_normal((2, 3, 6, 7)).astype(np.float32)
        w = np.zeros((3, 3, k, k), np.float32)
        for c in range(3):
            w[c, c, k // 2, k // 2] = 1.0
        out = T.conv2d(Tensor(x), Tensor(w), pad=(k - 1) // 2)
        np.testing.assert_array_equal(out.data, x)

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (3, 2)])
    def test_matches_direct_summation(self, rng, stride, pad):
        x = rng.standard_normal((1, 2, 5, 5))
        w = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        with T.float64_mode():
            out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, pad=pad)
        np.testing.assert_allclose(out.data, conv_oracle(x, w, b, stride, pad), atol=1e-6)

    def test_f32_matches_oracle(self, rng):
        x = rng.standard_normal((1, 2, 5, 5)).astype(np.float32)
        w = rng.standard_normal((3, 2, 3, 3)).astype(np.float32)
        out = T.conv2d(Tensor(x), Tensor(w), pad=1)
        np.testing.assert_allclose(out.data, conv_oracle(x, w, None, 1, 1), atol=1e-5)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            T.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))

    def test_kernel_larger_than_padded_input(self):
        with pytest.raises(DimensionError):
            T.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


class TestConvTranspose2d:
    def test_scatter_case(self):
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
        out = T.conv_transpose2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), stride=2)
        expected = np.array([[1, 0, 2], [0, 0, 0], [3, 0, 4]], np.float32)
        np.testing.assert_array_equal(out.data[0, 0], expected)

    def test_scaling(self, rng):
        x = rng.standard_normal((1, 1, 4, 3)).astype(np.float32)
        out = T.conv_transpose2d(Tensor(x), Tensor(np.full((1, 1, 1, 1), 2.5)))
        np.testing.assert_allclose(out.data, 2.5 * x, rtol=1e-6)

    @pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (2, 1, 3), (4, 2, 8)])
    def test_matches_scatter_oracle(self, rng, stride, pad, k):
        x = rng.standard_normal((2, 3, 3, 4))
        w = rng.standard_normal((3, 2, k, k))
        b = rng.standard_normal(2)
        with T.float64_mode():
            out = T.conv_transpose2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, pad=pad)
        assert np.abs(out.data - conv_transpose_oracle(x, w, b, stride, pad)).max() < 1e-6

    def test_is_adjoint_of_conv2d(self, rng):
        # <conv(x), y> == <x, conv_transpose(y)> for the same kernel
        x = rng.standard_normal((1, 2, 7, 7))
        w = rng.standard_normal((3, 2, 3, 3))
        with T.float64_mode():
            y = rng.standard_normal(T.conv2d(Tensor(x), Tensor(w), stride=2, pad=1).shape)
            lhs = np.sum(T.conv2d(Tensor(x), Tensor(w), stride=2, pad=1).data * y)
            back = T.conv_transpose2d(Tensor(y), Tensor(w), stride=2, pad=1).data
        assert back.shape == x.shape
        assert lhs == pytest.approx(np.sum(x * back), rel=1e-12)

    def test_negative_output(self):
        with pytest.raises(DimensionError):
            T.conv_transpose2d(Tensor(np.zeros((1, 1, 1, 1))), Tensor(np.zeros((1, 1, 1, 1))), pad=1)


class TestMaxPool:
    def test_two_by_two(self):
        out = T.maxpool2d(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])), 2, 2)
        assert out.item() == 4.0

    def test_constant_routes_to_first(self):
        x = Tensor(np.full((1, 1, 2, 2), 7.0), requires_grad=True)
        out = T.maxpool2d(x, 2, 2)
        assert out.item() == 7.0
        T.sum(out).backward()
        np.testing.assert_array_equal(x.grad[0, 0], [[1, 0], [0, 0]])

    @pytest.mark.parametrize("size,stride,pad", [(2, 2, 0), (3, 2, 1), (3, 1, 0), (2, 1, 1)])
    def test_window_scan_oracle(self, rng, size, stride, pad):
        x = rng.standard_normal((2, 3, 7, 6)).astype(np.float32)
        out = T.maxpool2d(Tensor(x), size, stride, pad=pad)
        np.testing.assert_array_equal(out.data, maxpool_oracle(x, size, stride, pad).astype(np.float32))


class TestBatchNorm:
    def test_standardised_input_unchanged(self, rng):
        x = rng.standard_normal((4, 3, 5, 5))
        x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
        out = T.batchnorm2d(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), T.BatchNormState(3))
        assert np.abs(out.data - x).max() < 1e-4

    def test_zero_gamma_gives_beta(self, rng):
        beta = np.array([0.5, -1.0])
        out = T.batchnorm2d(Tensor(rng.standard_normal((2, 2, 3, 3))), Tensor(np.zeros(2)), Tensor(beta),
                            T.BatchNormState(2))
        np.testing.assert_allclose(out.data, np.broadcast_to(beta[None, :, None, None], out.shape))

    def test_running_stats_update(self, rng):
        x = rng.standard_normal((2, 2, 3, 3)) * 2.0 + 1.0
        state = T.BatchNormState(2)
        T.batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), state)
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3), ddof=1)
        np.testing.assert_allclose(state.running_mean, 0.1 * mean, rtol=1e-5)
        np.testing.assert_allclose(state.running_var, 0.9 + 0.1 * var, rtol=1e-5)

    def test_eval_uses_running_stats(self, rng):
        state = T.BatchNormState(1)
        state.running_mean[:] = 2.0
        state.running_var[:] = 4.0
        x = np.full((1, 1, 2, 2), 6.0)
        out = T.batchnorm2d(Tensor(x), Tensor(np.ones(1)), Tensor(np.zeros(1)), state, training=False)
        np.testing.assert_allclose(out.data, 4.0 / np.sqrt(4.0 + 1e-5), rtol=1e-6)


class TestElementwise:
    def test_sigmoid_zero(self):
        assert T.sigmoid(Tensor(np.zeros(3))).data.tolist() == [0.5, 0.5, 0.5]

    def test_sigmoid_extremes_are_finite(self):
        out = T.sigmoid(Tensor(np.array([-1000.0, 1000.0]))).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [0.0, 1.0])

    def test_relu_gradient_mask(self):
        x = Tensor(np.array([-1.0, 0.0, 2.0]), requires_grad=True)
        T.sum(T.relu(x)).backward()
        np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])

    def test_scale_channels_ones_is_identity(self, rng):
        x = rng.standard_normal((2, 3, 4, 4)).astype(np.float32)
        out = T.scale_channels(Tensor(x), Tensor(np.ones((2, 3, 1, 1))))
        np.testing.assert_array_equal(out.data, x)

    def test_scale_channels_rejects_spatial_scale(self):
        with pytest.raises(DimensionError):
            T.scale_channels(Tensor(np.zeros((1, 2, 3, 3))), Tensor(np.zeros((1, 2, 3, 3))))

    def test_add_rejects_broadcasting(self):
        with pytest.raises(DimensionError):
            T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros(3)))

    def test_global_avg_pool_values(self, rng):
        assert T.global_avg_pool(Tensor(np.full((1, 1, 3, 3), 2.5))).item() == 2.5
        assert T.global_avg_pool(Tensor(np.array([[[[1.0, 3.0], [5.0, 7.0]]]]))).item() == 4.0
        x = rng.standard_normal((2, 3, 4, 5))
        with T.float64_mode():
            out = T.global_avg_pool(Tensor(x)).data
        np.testing.assert_allclose(out[:, :, 0, 0], x.sum(axis=(2, 3)) / 20, rtol=1e-12)

    def test_depth_to_space_layout(self):
        x = np.arange(8, dtype=np.float32).reshape(1, 4, 1, 2)
        out = T.depth_to_space(Tensor(x), 2).data[0, 0]
        # channel c = 2*dy + dx lands at (2*y + dy, 2*x + dx)
        np.testing.assert_array_equal(out, [[0, 2, 1, 3], [4, 6, 5, 7]])


class TestConcat:
    def test_full_widths(self, rng):
        out = T.concat_channels(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((1, 256, 4, 4))))
        assert out.shape == (1, 259, 4, 4)

    def test_empty_operand(self, rng):
        x = rng.standard_normal((1, 3, 2, 2)).astype(np.float32)
        out = T.concat_channels(Tensor(x), Tensor(np.zeros((1, 0, 2, 2))))
        np.testing.assert_array_equal(out.data, x)

    def test_spatial_mismatch(self):
        with pytest.raises(DimensionError):
            T.concat_channels(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 2, 3))))

    @settings(max_examples=30, deadline=None)
    @given(ca=st.integers(0, 5), cb=st.integers(0, 5), h=st.integers(1, 4), seed=st.integers(0, 2**16))
    def test_slice_roundtrip_bit_exact(self, ca, cb, h, seed):
        r = np.random.default_rng(seed)
        a = r.standard_normal((2, ca, h, 3)).astype(np.float32)
        b = r.standard_normal((2, cb, h, 3)).astype(np.float32)
        cat = T.concat_channels(Tensor(a), Tensor(b))
        np.testing.assert_array_equal(T.slice_channels(cat, 0, ca).data, a)
        np.testing.assert_array_equal(T.slice_channels(cat, ca, ca + cb).data, b)


class TestSmoothL1:
    def test_equal_is_zero(self, rng):
        x = rng.standard_normal((3, 4))
        assert T.smooth_l1(Tensor(x), Tensor(x)).item() == 0.0

    @pytest.mark.parametrize("dif,expected", [(0.5, 0.125), (2.0, 1.5), (-0.5, 0.125), (-2.0, 1.5)])
    def test_branches(self, dif, expected):
        assert abs(T.smooth_l1(Tensor([dif]), Tensor([0.0])).item() - expected) < 1e-7

    def test_mean_reduction(self):
        out = T.smooth_l1(Tensor([0.5, 2.0]), Tensor([0.0, 0.0]))
        assert out.item() == pytest.approx((0.125 + 1.5) / 2)

    def test_continuous_at_one(self):
        def value_and_slope(d):
            with T.float64_mode():
                p = Tensor([d], requires_grad=True)
                loss = T.smooth_l1(p, Tensor([0.0]))
                loss.backward()
                return loss.item(), float(p.grad[0])

        lo, hi = value_and_slope(1 - 1e-4), value_and_slope(1 + 1e-4)
        assert abs(lo[0] - hi[0]) < 1e-3
        assert abs(lo[1] - hi[1]) < 1e-3

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            T.smooth_l1(Tensor(np.zeros(3)), Tensor(np.zeros(4)))


# ----------------------------------------------------------------------------
# tape and backward semantics


class TestBackward:
    def test_linear_gradient_is_input(self, rng):
        x = rng.standard_normal(5).astype(np.float32)
        w = Tensor(rng.standard_normal(5), requires_grad=True)
        T.sum(T.mul(w, Tensor(x))).backward()
        np.testing.assert_array_equal(w.grad, x)

    def test_disconnected_parameter_stays_zero(self):
        w = Tensor(np.ones(3), requires_grad=True)
        unused = Tensor(np.ones(2), requires_grad=True)
        unused.zero_grad()
        T.sum(w).backward()
        np.testing.assert_array_equal(unused.grad, np.zeros(2))

    def test_unused_branch_input_gets_zero_grad(self):
        # gradient is None through slice for the dropped channels
        x = Tensor(np.ones((1, 3, 2, 2)), requires_grad=True)
        T.sum(T.slice_channels(x, 0, 1)).backward()
        assert x.grad is not None
        assert x.grad[0, 1:].sum() == 0.0

    def test_non_scalar_rejected(self):
        with pytest.raises(ValueError):
            T.backward(Tensor(np.ones(2), requires_grad=True) * Tensor(np.ones(2)))

    def test_accumulates_across_calls(self):
        w = Tensor(np.array([2.0]), requires_grad=True)
        loss = T.sum(T.mul(w, w))
        loss.backward()
        loss.backward()
        assert w.grad[0] == pytest.approx(8.0)

    def test_reused_tensor_gradients_sum(self):
        w = Tensor(np.array([3.0]), requires_grad=True)
        T.sum(T.add(T.mul(w, w), w)).backward()
        assert w.grad[0] == pytest.approx(7.0)

    def test_deterministic_after_reset(self, rng):
        x = Tensor(rng.standard_normal((1, 2, 5, 5)))
        w = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)

        def run():
            w.zero_grad()
            T.mean(T.relu(T.conv2d(x, w, pad=1))).backward()
            return w.grad.copy()

        np.testing.assert_array_equal(run(), run())

    def test_tape_is_topological(self, rng):
        a = Tensor(rng.standard_normal((1, 2, 3, 3)), requires_grad=True)
        b = T.relu(a)
        c = T.add(b, a)
        d = T.sum(T.mul(c, b))
        tape = T.Tape.from_output(d)
        assert [n.op for n in tape.nodes] == ["relu", "add", "mul", "sum"]
        seqs = [n.seq for n in tape.nodes]
        assert seqs == sorted(seqs)

    def test_no_grad_records_nothing(self):
        w = Tensor(np.ones(2), requires_grad=True)
        with T.no_grad():
            out = T.mul(w, w)
        assert out.node is None and not out.requires_grad
        assert T.is_grad_enabled()

    def test_float64_mode_scoped(self):
        with T.float64_mode():
            assert Tensor([1.0]).dtype == np.float64
        assert Tensor([1.0]).dtype == np.float32


def test_numerical_gradient_restores_value():
    t = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    g = T.numerical_gradient(lambda: T.sum(T.mul(t, t)), t, (1,))
    assert g == pytest.approx(-4.0, rel=1e-4)
    np.testing.assert_array_equal(t.data, np.array([1.5, -2.0], np.float32))

"""Autodiff engine: forward semantics, gradients, the stop-gradient
operator, and the finite-difference harness."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from infostack.tensor import (GradGraph, ShapeError, Tensor, add, backward,
                              batched_dot, concat, conv1d, conv2d,
                              conv_out_len, finite_diff_check,
                              gather_cross_entropy, grad_block, log_softmax,
                              matmul, mean_pool, mul, relu, reshape,
                              slice_rows, stack_rows, take_rows, transpose,
                              tsum, zero_grads)


def tensor(vals, rg=False):
    return Tensor(np.asarray(vals, dtype=np.float64), requires_grad=rg)


class TestGradBlock:
    def test_forward_is_identity(self):
        x = tensor([1.5, -2.0], rg=True)
        y = grad_block(x)
        assert np.array_equal(y.data, [1.5, -2.0])
        assert y.data is x.data  # shares storage, no copy

    def test_gradient_is_exactly_zero(self):
        x = tensor([1.5, -2.0], rg=True)
        loss = tsum(grad_block(x))
        grads = backward(loss, params=[x])
        assert np.array_equal(grads[x], np.zeros(2))

    def test_blocked_factor_treated_as_constant(self):
        # d/dx of grad_block(x) * x is x itself
        x = tensor([3.0], rg=True)
        loss = tsum(mul(grad_block(x), x))
        backward(loss, params=[x])
        assert np.array_equal(x.grad, [3.0])

    def test_bitwise_zero_in_composite_loss(self):
        rng = np.random.default_rng(0)
        x = tensor(rng.normal(size=(4, 5)), rg=True)
        y = tensor(rng.normal(size=(5, 3)), rg=True)
        loss = tsum(mul(matmul(grad_block(x), y), matmul(grad_block(x), y)))
        grads = backward(loss, params=[x, y])
        assert np.all(grads[x] == 0.0)
        assert np.any(grads[y] != 0.0)


class TestBackward:
    def test_sum_of_squares(self):
        x = tensor([1.0, 2.0], rg=True)
        backward(tsum(mul(x, x)), params=[x])
        assert np.array_equal(x.grad, [2.0, 4.0])

    def test_non_scalar_loss_rejected(self):
        x = tensor([1.0, 2.0], rg=True)
        with pytest.raises(ShapeError):
            backward(mul(x, x))

    def test_gradients_accumulate_over_multiple_consumers(self):
        x = tensor([2.0], rg=True)
        y = mul(x, x)           # x consumed twice
        z = add(y, mul(x, tensor([3.0])))
        backward(tsum(z), params=[x])
        assert np.allclose(x.grad, [2 * 2.0 + 3.0])

    def test_unreachable_param_gets_zeros(self):
        x = tensor([1.0], rg=True)
        w = tensor([5.0], rg=True)
        grads = backward(tsum(mul(x, x)), params=[x, w])
        assert np.array_equal(grads[w], [0.0])

    def test_traversal_reverse_recording_order_each_node_once(self):
        x = tensor([1.0, 2.0], rg=True)
        a = mul(x, x)
        b = add(a, x)
        loss = tsum(b)
        trace = []
        backward(loss, params=[x], trace=trace)
        seqs = [t._seq for t in trace]
        assert seqs == sorted(seqs, reverse=True)
        assert len(set(map(id, trace))) == len(trace)

    def test_matmul_against_finite_differences(self):
        rng = np.random.default_rng(1)
        W = tensor(rng.normal(size=(3, 2)))
        err = finite_diff_check(lambda t: tsum(matmul(t, W)),
                                tensor(rng.normal(size=(4, 3))))
        assert err < 1e-6


class TestKernels:
    def test_matmul_identity(self):
        out = matmul(tensor([[1.0, 2.0], [3.0, 4.0]]), tensor(np.eye(2)))
        assert np.array_equal(out.data, [[1, 2], [3, 4]])

    def test_relu(self):
        assert np.array_equal(relu(tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])

    def test_conv1d_hand_case(self):
        out = conv1d(tensor(np.ones((1, 1, 5))), tensor(np.ones((1, 1, 3))))
        assert np.array_equal(out.data.ravel(), [3, 3, 3])

    def test_conv1d_matches_direct_convolution(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(2, 3, 9))
        w = rng.normal(size=(4, 3, 3))
        stride, pad = 2, 1
        out = conv1d(tensor(x), tensor(w), stride=stride, pad=pad).data
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
        for b in range(2):
            for o in range(4):
                for l in range(out.shape[2]):
                    ref = (xp[b, :, l * stride:l * stride + 3] * w[o]).sum()
                    assert abs(out[b, o, l] - ref) < 1e-12

    def test_conv2d_matches_direct_convolution(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 2, 6, 5))
        w = rng.normal(size=(3, 2, 3, 2))
        out = conv2d(tensor(x), tensor(w), stride=(2, 1), pad=(1, 0)).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (0, 0)))
        for b in range(2):
            for o in range(3):
                for i in range(out.shape[2]):
                    for j in range(out.shape[3]):
                        ref = (xp[b, :, i * 2:i * 2 + 3, j:j + 2] * w[o]).sum()
                        assert abs(out[b, o, i, j] - ref) < 1e-12

    def test_shape_error_names_op_and_shapes(self):
        with pytest.raises(ShapeError) as e:
            matmul(tensor(np.ones((2, 3))), tensor(np.ones((4, 2))))
        assert "matmul" in str(e.value)
        assert "(2, 3)" in str(e.value) and "(4, 2)" in str(e.value)

    def test_log_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(5, 9))
        lp = log_softmax(tensor(x), axis=1).data
        assert np.all(np.abs(np.exp(lp).sum(axis=1) - 1.0) < 1e-12)

    def test_log_softmax_no_overflow_at_large_magnitude(self):
        lp = log_softmax(tensor([[1e3, -1e3, 0.0]]), axis=1).data
        assert np.all(np.isfinite(lp))
        assert abs(np.exp(lp).sum() - 1.0) < 1e-12

    def test_gather_cross_entropy_values(self):
        lp = log_softmax(tensor([[0.0, 0.0], [0.0, 0.0]]), axis=1)
        loss = gather_cross_entropy(lp, np.array([0, 1]))
        assert abs(float(loss.data) - np.log(2.0)) < 1e-12

    def test_gather_cross_entropy_label_out_of_range(self):
        lp = tensor(np.zeros((2, 3)))
        with pytest.raises(ValueError, match="label out of range"):
            gather_cross_entropy(lp, np.array([0, 3]))

    def test_mean_pool(self):
        x = tensor(np.arange(12.0).reshape(2, 2, 3))
        out = mean_pool(x, axes=(1, 2))
        assert np.allclose(out.data, x.data.mean(axis=(1, 2)))

    def test_take_rows_and_slice_rows_agree(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(6, 4))
        a = take_rows(tensor(x), np.arange(2, 5)).data
        b = slice_rows(tensor(x), 2, 5).data
        assert np.array_equal(a, b)

    def test_batched_dot_matches_einsum(self):
        rng = np.random.default_rng(6)
        a = rng.normal(size=(7, 3, 4))
        b = rng.normal(size=(7, 4))
        out = batched_dot(tensor(a), tensor(b)).data
        assert np.allclose(out, np.einsum("nmd,nd->nm", a, b))

    def test_finite_forward_on_finite_inputs(self):
        rng = np.random.default_rng(7)
        x = tensor(rng.normal(size=(2, 3, 16)) * 100)
        w = tensor(rng.normal(size=(4, 3, 5)))
        out = conv1d(x, w, tensor(np.zeros(4)), 2, 2)
        assert np.all(np.isfinite(out.data))


class TestConvOutLen:
    @pytest.mark.parametrize("args,expected", [
        ((20480, 10, 5, 2), 4095),
        ((4095, 8, 4, 2), 1023),
        ((1023, 4, 2, 2), 512),
        ((512, 4, 2, 2), 257),
        ((5, 1, 1, 0), 5),
    ])
    def test_values(self, args, expected):
        assert conv_out_len(*args) == expected

    def test_kernel_larger_than_padded_input(self):
        with pytest.raises(ValueError):
            conv_out_len(3, 6, 1, 1)

    @given(L=st.integers(1, 200), k=st.integers(1, 12), s=st.integers(1, 5),
           p=st.integers(0, 6))
    def test_against_enumeration(self, L, k, s, p):
        if L + 2 * p < k:
            with pytest.raises(ValueError):
                conv_out_len(L, k, s, p)
            return
        count = len(range(0, L + 2 * p - k + 1, s))
        assert conv_out_len(L, k, s, p) == count


class TestFiniteDiffCheck:
    def test_quadratic(self):
        rng = np.random.default_rng(8)
        err = finite_diff_check(lambda t: tsum(mul(t, t)),
                                tensor(rng.uniform(-1, 1, 8)))
        assert err < 1e-6

    def test_constant_function(self):
        err = finite_diff_check(lambda t: tsum(mul(t, tensor(np.zeros(4)))),
                                tensor(np.ones(4)))
        assert err == 0.0

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError, match="non-finite"):
            finite_diff_check(lambda t: mul(tsum(t), tensor(np.inf)),
                              tensor(np.ones(2)))


class TestGraphMechanics:
    def test_pruned_when_no_grad_needed(self):
        with GradGraph() as g:
            x = tensor(np.ones((3, 3)))
            y = matmul(x, x)
        assert g.nodes == [] and not y.requires_grad

    def test_recording_and_activation_bytes(self):
        with GradGraph() as g:
            x = tensor(np.ones((4, 4)), rg=True)
            y = mul(x, x)
            z = grad_block(y)          # shares storage: not counted
            t = transpose(y)           # view: not counted
            s = tsum(y)
        owned = [n for n in g.nodes if n._owns]
        assert y in owned and s in owned
        assert g.activation_bytes() == y.data.nbytes + s.data.nbytes

    def test_determinism_bitwise(self):
        def run():
            rng = np.random.default_rng(11)
            x = tensor(rng.normal(size=(3, 6, 10)), rg=True)
            w = tensor(rng.normal(size=(4, 6, 3)), rg=True)
            out = conv1d(x, w, None, 2, 1)
            loss = tsum(mul(out, out))
            backward(loss, params=[x, w])
            return out.data.copy(), x.grad.copy(), w.grad.copy()

        a, b, c = run()
        a2, b2, c2 = run()
        assert np.array_equal(a, a2) and np.array_equal(b, b2) and np.array_equal(c, c2)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=12))
def test_log_softmax_normalization_property(vals):
    lp = log_softmax(Tensor(np.asarray([vals])), axis=1).data
    assert abs(np.exp(lp).sum() - 1.0) < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 30), st.integers(0, 100))
def test_relu_forward_property(n, seed):
    x = np.random.default_rng(seed).normal(size=n)
    out = relu(Tensor(x)).data
    assert np.all(out >= 0)
    assert np.array_equal(out, np.maximum(x, 0))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 1000))
def test_stack_and_concat_roundtrip(n, d, seed):
    rng = np.random.default_rng(seed)
    rows = [Tensor(rng.normal(size=d)) for _ in range(n)]
    stacked = stack_rows(rows)
    assert stacked.shape == (n, d)
    again = concat([reshape(r, (1, d)) for r in rows], axis=0)
    assert np.array_equal(stacked.data, again.data)

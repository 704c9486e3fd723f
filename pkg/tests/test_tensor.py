import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from changeseg import tensor as T
from changeseg.tensor import BNState, DimensionError, Rng, TapeError, Tensor
from changeseg.verify import gradcheck, naive_conv2d


def t64(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# --- conv ---------------------------------------------------------------

def test_conv_identity_kernel(rng):
    x = rng.normal((2, 1, 5, 5))
    y = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
    np.testing.assert_array_equal(y.data, x)


def test_conv_shape_rule(rng):
    y = T.conv2d(Tensor(rng.normal((1, 3, 8, 8))), Tensor(rng.normal((5, 3, 3, 3))), Tensor(np.zeros(5)), 1, 1)
    assert y.shape == (1, 5, 8, 8)
    y = T.conv2d(Tensor(rng.normal((1, 3, 9, 8))), Tensor(rng.normal((5, 3, 3, 3))), None, 2, 0)
    assert y.shape == (1, 5, 4, 3)


def test_conv_channel_mismatch(rng):
    with pytest.raises(DimensionError):
        T.conv2d(Tensor(rng.normal((1, 2, 4, 4))), Tensor(rng.normal((1, 3, 1, 1))))


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 2), cin=st.integers(1, 3), cout=st.integers(1, 3), h=st.integers(3, 7),
       k=st.sampled_from([1, 2, 3]), stride=st.integers(1, 2), pad=st.integers(0, 1), seed=st.integers(0, 10 ** 6))
def test_conv_matches_naive(n, cin, cout, h, k, stride, pad, seed):
    r = Rng(seed)
    x, w, b = r.normal((n, cin, h, h + 1)), r.normal((cout, cin, k, k)), r.normal((cout,))
    got = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad).data
    np.testing.assert_allclose(got, naive_conv2d(x, w, b, stride, pad), rtol=0, atol=1e-10)


def test_depthwise_delta_kernel(rng):
    x = rng.normal((2, 4, 6, 6))
    w = np.zeros((4, 1, 3, 3))
    w[:, 0, 1, 1] = 1.0
    y = T.depthwise_conv2d(Tensor(x), Tensor(w), None, 1, 1)
    assert y.shape == (2, 4, 6, 6)
    np.testing.assert_array_equal(y.data, x)


def test_depthwise_matches_grouped_naive(rng):
    x, w = rng.normal((1, 3, 5, 5)), rng.normal((3, 1, 3, 3))
    y = T.depthwise_conv2d(Tensor(x), Tensor(w), None, 2, 1).data
    for c in range(3):
        ref = naive_conv2d(x[:, c:c + 1], w[c:c + 1], None, 2, 1)
        np.testing.assert_allclose(y[:, c:c + 1], ref, atol=1e-12)


# --- batchnorm ----------------------------------------------------------

def test_batchnorm_constant_input_gives_beta():
    x = Tensor(np.full((2, 3, 4, 4), 5.0))
    beta = np.array([0.1, -0.2, 0.3])
    y = T.batchnorm2d(x, Tensor(np.ones(3)), Tensor(beta), BNState(3, dtype=np.float64), True)
    np.testing.assert_allclose(y.data, np.broadcast_to(beta.reshape(1, 3, 1, 1), x.shape), atol=1e-12)


def test_batchnorm_standardised_input_passes_through(rng):
    x = rng.normal((8, 2, 6, 6))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    y = T.batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), BNState(2, dtype=np.float64), True)
    np.testing.assert_allclose(y.data, x / np.sqrt(1 + 1e-5), atol=1e-12)


def test_batchnorm_running_stats_update(rng):
    x = rng.normal((4, 2, 3, 3)) * 2 + 1
    st_ = BNState(2, dtype=np.float64)
    T.batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), st_, True)
    m = x.mean(axis=(0, 2, 3))
    v = x.var(axis=(0, 2, 3), ddof=1)
    np.testing.assert_allclose(st_.running_mean, 0.1 * m, atol=1e-12)
    np.testing.assert_allclose(st_.running_var, 0.9 + 0.1 * v, atol=1e-12)


def test_batchnorm_eval_without_stats_errors(rng):
    with pytest.raises(RuntimeError):
        T.batchnorm2d(Tensor(rng.normal((1, 2, 2, 2))), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                      BNState(2, initialized=False), False)


# --- activations --------------------------------------------------------

def test_gelu_exact_erf():
    xs = np.array([-3.0, -1.0, 0.0, 0.5, 2.0])
    ref = [v * 0.5 * (1 + math.erf(v / math.sqrt(2))) for v in xs]
    np.testing.assert_allclose(T.gelu(Tensor(xs)).data, ref, atol=1e-15)
    assert T.gelu(Tensor(np.zeros(1))).data[0] == 0.0


def test_softmax_uniform_and_normalised(rng):
    np.testing.assert_allclose(T.softmax(Tensor(np.zeros((1, 3))), 1).data, [[1 / 3] * 3], atol=1e-15)
    p = T.softmax(Tensor(rng.normal((2, 5, 3, 3)) * 30), 1).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)


def test_sigmoid_extremes_finite():
    y = T.sigmoid(Tensor(np.array([-1000.0, 0.0, 1000.0]))).data
    np.testing.assert_array_equal(y, [0.0, 0.5, 1.0])


# --- elementwise, broadcasting ------------------------------------------

def test_abs_of_self_difference_is_zero(rng):
    x = Tensor(rng.normal((2, 3)))
    np.testing.assert_array_equal(T.abs(x - x).data, 0.0)


def test_abs_subgradient_zero_at_kink():
    x = t64([0.0, -2.0, 3.0])
    T.backward(T.reduce_sum(T.abs(x)))
    np.testing.assert_array_equal(x.grad, [0.0, -1.0, 1.0])


def test_mul_by_ones(rng):
    a = rng.normal((2, 3, 4, 4))
    np.testing.assert_array_equal((Tensor(a) * Tensor(np.ones_like(a))).data, a)


def test_per_channel_broadcast_gradient(rng):
    a, b = t64(rng.normal((2, 3, 4, 4))), t64(rng.normal((1, 3, 1, 1)))
    T.backward(T.reduce_sum(a * b))
    np.testing.assert_allclose(b.grad, a.data.sum(axis=(0, 2, 3), keepdims=True), atol=1e-12)


def test_incompatible_shapes_error(rng):
    with pytest.raises(DimensionError):
        Tensor(rng.normal((2, 3))) + Tensor(rng.normal((3, 2)))


def test_concat_off_axis_mismatch(rng):
    with pytest.raises(DimensionError):
        T.concat([Tensor(rng.normal((1, 2, 3, 3))), Tensor(rng.normal((1, 2, 4, 3)))], axis=1)


# --- upsample -----------------------------------------------------------

@pytest.mark.parametrize("factor", [1, 2, 4, 8])
def test_upsample_constant(factor):
    y = T.upsample_bilinear(Tensor(np.full((1, 2, 3, 3), 7.25)), factor).data
    assert y.shape == (1, 2, 3 * factor, 3 * factor)
    np.testing.assert_allclose(y, 7.25, atol=1e-12)


def test_upsample_half_pixel_centres():
    x = np.array([0.0, 1.0]).reshape(1, 1, 1, 2)
    y = T.upsample_bilinear(Tensor(x), 2).data[0, 0, 0]
    # source coords (dst + 0.5) / 2 - 0.5 = -0.25, 0.25, 0.75, 1.25, clamped to [0, 1]
    np.testing.assert_allclose(y, [0.0, 0.25, 0.75, 1.0], atol=1e-15)


def test_upsample_rejects_other_factors(rng):
    with pytest.raises(ValueError):
        T.upsample_bilinear(Tensor(rng.normal((1, 1, 2, 2))), 3)


# --- dropout ------------------------------------------------------------

def test_dropout_eval_identity(rng):
    x = rng.normal((2, 3))
    np.testing.assert_array_equal(T.dropout(Tensor(x), 0.1, False, None).data, x)


def test_dropout_train_scales_survivors():
    x = np.ones((200, 200))
    y = T.dropout(Tensor(x), 0.25, True, Rng(3)).data
    kept = y != 0
    np.testing.assert_allclose(y[kept], 1 / 0.75)
    assert abs(kept.mean() - 0.75) < 0.01


# --- tape ---------------------------------------------------------------

def test_backward_of_sum_gives_ones(rng):
    x = t64(rng.normal((3, 4)))
    T.backward(T.reduce_sum(x))
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_backward_non_scalar_errors(rng):
    with pytest.raises(TapeError):
        T.backward(t64(rng.normal((3,))) * 2.0)


def test_backward_twice_errors(rng):
    x = t64(rng.normal((3,)))
    loss = T.reduce_sum(x * x)
    T.backward(loss)
    with pytest.raises(TapeError):
        T.backward(loss)


def test_gradients_accumulate_over_shared_use(rng):
    x = t64(rng.normal((4,)))
    T.backward(T.reduce_sum(x * x + x))
    np.testing.assert_allclose(x.grad, 2 * x.data + 1, atol=1e-14)


def test_tape_reverse_order(rng):
    x = t64(rng.normal((2,)))
    y = T.exp(x)
    z = T.reduce_sum(y * y)
    tape = T.Tape.from_output(z)
    # stored in execution order; backward walks it reversed
    seqs = [n.seq for n in tape.nodes]
    assert len(tape) == 3 and seqs == sorted(seqs)


def test_no_grad_records_nothing(rng):
    x = t64(rng.normal((2,)))
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_forward_is_deterministic(rng):
    x, w = rng.normal((2, 3, 8, 8)), rng.normal((4, 3, 3, 3))
    a = T.gelu(T.conv2d(Tensor(x), Tensor(w), None, 1, 1)).data
    b = T.gelu(T.conv2d(Tensor(x), Tensor(w), None, 1, 1)).data
    assert a.tobytes() == b.tobytes()


# --- rng ----------------------------------------------------------------

def test_rng_reproducible_and_children_distinct():
    a, b = Rng(5), Rng(5)
    np.testing.assert_array_equal(a.normal((10,)), b.normal((10,)))
    c1, c2 = Rng(5).child(1).random((5,)), Rng(5).child(2).random((5,))
    assert not np.array_equal(c1, c2)
    np.testing.assert_array_equal(Rng(5).child(1).random((5,)), c1)


# --- gradcheck smoke (full suite lives in acceptance) --------------------

def test_gradcheck_detects_wrong_gradient(rng):
    def bad(x):
        return T.make_op(x.data ** 2, [x], lambda g: [g * x.data])  # true grad is 2x

    assert gradcheck(bad, [t64(rng.normal((4,)) + 3)]) > 0.1


def test_gradcheck_conv_small(rng):
    x, w, b = t64(rng.normal((1, 2, 4, 4))), t64(rng.normal((3, 2, 3, 3))), t64(rng.normal((3,)))
    assert gradcheck(lambda x, w, b: T.conv2d(x, w, b, 1, 1), [x, w, b]) <= 1e-4

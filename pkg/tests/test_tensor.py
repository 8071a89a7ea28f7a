import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from ssmflow import tensor as T
from ssmflow.optim import AdamW, AdamWState, NonFiniteGradientError, adamw_step
from ssmflow.tensor import Tensor

finite = st.floats(-5, 5, allow_nan=False, width=64)


def small_arrays(shape):
    return arrays(np.float64, shape, elements=finite)


# -- forward oracles -------------------------------------------------------------


def test_matmul_matches_numpy_with_batch_broadcast():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))
    np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, a @ b, rtol=0, atol=1e-13)


def test_softmax_log_ratio_example():
    out = T.softmax(Tensor(np.log([1.0, 2.0, 3.0])), axes=0).data
    np.testing.assert_allclose(out, [1 / 6, 1 / 3, 1 / 2], atol=1e-15)


def test_softmax_large_logits_do_not_overflow():
    out = T.softmax(Tensor([1000.0, 1000.0, -1000.0]), axes=0).data
    np.testing.assert_allclose(out, [0.5, 0.5, 0.0], atol=1e-15)


@pytest.mark.parametrize("v", [-3.0, -0.5, 0.0, 0.7, 4.0])
def test_activations_match_closed_forms(v):
    x = Tensor([v])
    assert T.silu(x).item() == pytest.approx(v / (1 + math.exp(-v)), abs=1e-15)
    assert T.gelu(x).item() == pytest.approx(0.5 * v * (1 + math.erf(v / math.sqrt(2))), abs=1e-15)
    assert T.softplus(x).item() == pytest.approx(math.log1p(math.exp(v)), abs=1e-15)


def test_softplus_is_stable_for_large_inputs():
    out = T.softplus(Tensor([800.0, -800.0])).data
    assert out[0] == 800.0 and 0.0 <= out[1] < 1e-300


def _conv2d_loop(x, w, b, stride, pad):
    kh, kw, _, co = w.shape
    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    Ho = (xp.shape[0] - kh) // stride + 1
    Wo = (xp.shape[1] - kw) // stride + 1
    out = np.zeros((Ho, Wo, co))
    for i in range(Ho):
        for j in range(Wo):
            patch = xp[i * stride:i * stride + kh, j * stride:j * stride + kw]
            out[i, j] = np.einsum("abc,abcd->d", patch, w) + b
    return out


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1)])
def test_conv2d_matches_loop_oracle(stride, pad):
    rng = np.random.default_rng(1)
    x, w, b = rng.normal(size=(7, 6, 3)), rng.normal(size=(3, 3, 3, 4)), rng.normal(size=4)
    got = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad).data
    np.testing.assert_allclose(got, _conv2d_loop(x, w, b, stride, pad), atol=1e-12)


def test_causal_conv_matches_loop_oracle():
    rng = np.random.default_rng(2)
    L, D, k = 9, 3, 4
    x, ker, b = rng.normal(size=(L, D)), rng.normal(size=(D, k)), rng.normal(size=D)
    ref = np.zeros((L, D))
    for t in range(L):
        for j in range(k):
            src = t - (k - 1) + j
            if src >= 0:
                ref[t] += ker[:, j] * x[src]
    ref += b
    got = T.conv1d_depthwise_causal(Tensor(x), Tensor(ker), Tensor(b)).data
    np.testing.assert_allclose(got, ref, atol=1e-13)


def test_resize_bilinear_preserves_constants_and_shape():
    out = T.resize_bilinear(Tensor(np.full((1, 3, 4, 2), 2.5)), (12, 16)).data
    assert out.shape == (1, 12, 16, 2)
    np.testing.assert_allclose(out, 2.5, atol=1e-14)


def test_bilinear_sample_zero_outside_and_exact_on_lattice():
    rng = np.random.default_rng(3)
    maps = rng.normal(size=(1, 1, 3, 4))
    coords = np.array([[[[2.0, 1.0], [-1.5, 0.0], [0.0, 7.0], [3.0, 2.0]]]])
    out = T.bilinear_sample(Tensor(maps), Tensor(coords)).data[0, 0]
    assert out[0] == maps[0, 0, 1, 2] and out[1] == 0.0 and out[2] == 0.0 and out[3] == maps[0, 0, 2, 3]


def test_float32_stays_float32_through_activations():
    with T.precision("float32"):
        x = Tensor([-2.0, -1.0, 0.0, 1.0, 2.0], requires_grad=True)
        y = (T.gelu(x) + T.silu(x) + T.softplus(x)).sum()
        assert y.dtype == np.float32
        assert T.backward(y)[x].dtype == np.float32


def test_no_grad_records_nothing():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with T.no_grad():
        y = (x * x).sum()
    assert not y.requires_grad


def test_zero_extent_rejected():
    with pytest.raises(T.ShapeError):
        Tensor(np.zeros((0, 3)))


# -- properties ------------------------------------------------------------------


@given(small_arrays((3, 4)), st.floats(-50, 50))
def test_softmax_is_a_shift_invariant_distribution(x, c):
    p = T.softmax(Tensor(x), axes=-1).data
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-12)
    assert (p >= 0).all()
    np.testing.assert_allclose(T.softmax(Tensor(x + c), axes=-1).data, p, atol=1e-12)


@given(small_arrays((5, 3)), st.integers(0, 1))
def test_reverse_is_an_involution(x, axis):
    t = Tensor(x)
    assert np.array_equal(T.reverse(T.reverse(t, axis), axis).data, x)


@given(small_arrays((4, 3)), small_arrays((4, 3)))
def test_gradient_of_weighted_sum_is_the_weight(x, w):
    xt = Tensor(x, requires_grad=True)
    g = T.backward((xt * Tensor(w)).sum())[xt]
    np.testing.assert_array_equal(g, w)


@given(small_arrays((5, 5, 2)), small_arrays((5, 5, 2)), st.floats(-3, 3))
def test_conv2d_is_linear_in_its_input(x1, x2, a):
    w = Tensor(np.random.default_rng(0).normal(size=(3, 3, 2, 2)))
    f = lambda x: T.conv2d(Tensor(x), w, padding=1).data  # noqa: E731
    np.testing.assert_allclose(f(x1 + a * x2), f(x1) + a * f(x2), atol=1e-10)


@given(small_arrays((6, 2)), st.integers(0, 5))
def test_causal_conv_ignores_the_future(x, t):
    ker = Tensor(np.random.default_rng(1).normal(size=(2, 3)))
    x2 = x.copy()
    x2[t:] += 1.0
    a = T.conv1d_depthwise_causal(Tensor(x), ker).data
    b = T.conv1d_depthwise_causal(Tensor(x2), ker).data
    np.testing.assert_array_equal(a[:t], b[:t])


# -- AdamW ------------------------------------------------------------------------


def _adamw_reference(p, grads, lr, b1, b2, eps, wd):
    m = v = np.zeros_like(p)
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh, vh = m / (1 - b1**t), v / (1 - b2**t)
        p = p - lr * wd * p - lr * mh / (np.sqrt(vh) + eps)
    return p


def test_adamw_matches_textbook_recursion_over_several_steps():
    rng = np.random.default_rng(4)
    p0 = rng.normal(size=(3, 2))
    grads = [rng.normal(size=(3, 2)) for _ in range(5)]
    p = Tensor(p0.copy())
    st_ = AdamWState()
    for g in grads:
        adamw_step([p], [g], st_, lr=0.01, weight_decay=0.1)
    np.testing.assert_allclose(p.data, _adamw_reference(p0, grads, 0.01, 0.9, 0.999, 1e-8, 0.1), atol=1e-14)


def test_adamw_rejects_non_finite_gradients_without_side_effects():
    p = Tensor(np.ones(3))
    with pytest.raises(NonFiniteGradientError):
        adamw_step([p], [np.array([0.0, np.nan, 1.0])], AdamWState(), lr=0.1)
    np.testing.assert_array_equal(p.data, np.ones(3))


def test_adamw_wrapper_treats_missing_gradients_as_zero():
    a, b = Tensor(np.ones(2)), Tensor(np.ones(2))
    AdamW([a, b], lr=0.1, weight_decay=0.0).step({a: np.ones(2)})
    assert (a.data < 1).all() and (b.data == 1).all()

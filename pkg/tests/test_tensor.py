import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from opseg.tensor import (
    Tensor,
    backward,
    concat_channels,
    conv2d,
    elem_pow,
    grad_check,
    maxpool2d,
    no_grad,
    slice_channels,
    tanh,
    upsample2x,
)


def loop_conv(x, w, b, stride, pad):
    """Nested-loop cross-correlation."""
    n, c, h, wd = x.shape
    k, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, k, ho, wo))
    for i in range(n):
        for o in range(k):
            for y in range(ho):
                for xx in range(wo):
                    acc = 0.0 if b is None else b[o]
                    for ch in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += w[o, ch, u, v] * xp[i, ch, y * stride + u, xx * stride + v]
                    out[i, o, y, xx] = acc
    return out


def test_conv_known_values():
    x = Tensor(np.arange(1, 10, dtype=float).reshape(1, 1, 3, 3))
    w = Tensor(np.array([[[[1.0, 0.0], [0.0, 1.0]]]]))
    np.testing.assert_array_equal(conv2d(x, w).data[0, 0], [[6, 8], [12, 14]])


def test_identity_kernel(rng):
    x = Tensor(rng.standard_normal((2, 1, 5, 4)))
    np.testing.assert_array_equal(conv2d(x, Tensor(np.ones((1, 1, 1, 1)))).data, x.data)


def test_zero_kernel_gives_bias(rng):
    x = Tensor(rng.standard_normal((1, 2, 4, 4)))
    out = conv2d(x, Tensor(np.zeros((3, 2, 3, 3))), Tensor([0.5, -1.0, 2.0]), pad=1)
    for k, b in enumerate([0.5, -1.0, 2.0]):
        assert np.all(out.data[0, k] == b)


@pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 2), (3, 2, 3), (1, 2, 5)])
def test_conv_matches_loop_oracle(rng, stride, pad, k):
    x = rng.standard_normal((2, 3, 7, 6))
    w = rng.standard_normal((4, 3, k, k))
    b = rng.standard_normal(4)
    got = conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad).data
    np.testing.assert_allclose(got, loop_conv(x, w, b, stride, pad), rtol=1e-12, atol=1e-12)


def test_conv_output_extent():
    out = conv2d(Tensor(np.zeros((1, 1, 9, 8))), Tensor(np.zeros((1, 1, 3, 2))), stride=2, pad=1)
    assert out.shape == (1, 1, (9 + 2 - 3) // 2 + 1, (8 + 2 - 2) // 2 + 1)


def test_conv_channel_mismatch_names_dimension():
    with pytest.raises(ValueError, match="channel"):
        conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


def test_conv_kernel_too_tall_names_dimension():
    with pytest.raises(ValueError, match="height"):
        conv2d(Tensor(np.zeros((1, 1, 2, 6))), Tensor(np.zeros((1, 1, 3, 3))))
    with pytest.raises(ValueError, match="width"):
        conv2d(Tensor(np.zeros((1, 1, 6, 2))), Tensor(np.zeros((1, 1, 3, 3))))


@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (1, 0)])
def test_conv_gradients(rng, stride, pad):
    x = Tensor(rng.standard_normal((2, 2, 5, 5)), requires_grad=True)
    w = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal(3), requires_grad=True)
    assert grad_check(lambda *_: conv2d(x, w, b, stride, pad), [x, w, b]) < 1e-6


def test_pointwise_conv_gradient(rng):
    x = Tensor(rng.standard_normal((2, 3, 4, 4)), requires_grad=True)
    w = Tensor(rng.standard_normal((2, 3, 1, 1)), requires_grad=True)
    assert grad_check(lambda *_: conv2d(x, w), [x, w]) < 1e-6


def test_elem_pow_examples():
    assert elem_pow(Tensor([2.0, -3.0]), 2).data.tolist() == [4.0, 9.0]
    x = Tensor([1.5, -2.0])
    np.testing.assert_array_equal(elem_pow(x, 1).data, x.data)
    x = Tensor([1.0, 2.0], requires_grad=True)
    backward(elem_pow(x, 3).sum())
    np.testing.assert_allclose(x.grad, [3.0, 12.0])


def test_elem_pow_rejects_zero():
    with pytest.raises(ValueError):
        elem_pow(Tensor([1.0]), 0)


def test_elem_pow_near_zero_gradcheck(rng):
    x = Tensor(rng.uniform(-1e-2, 1e-2, (6,)), requires_grad=True)
    assert grad_check(lambda *_: elem_pow(x, 5), [x]) < 1e-4


def test_tanh():
    assert tanh(Tensor([0.0])).data[0] == 0.0
    x = Tensor([0.5], requires_grad=True)
    assert grad_check(lambda *_: tanh(x), [x]) < 1e-6


@given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-1e3, 1e3)))
def test_tanh_range(v):
    # bounded inputs keep tanh strictly inside (-1, 1) in double precision
    out = tanh(Tensor(np.clip(v, -18, 18))).data
    assert np.all(np.abs(out) < 1)


def test_maxpool_examples(rng):
    assert maxpool2d(Tensor([[[[1.0, 2.0], [3.0, 4.0]]]]), 2).data.item() == 4.0
    const = maxpool2d(Tensor(np.full((1, 1, 4, 4), 0.3)), 2, 2).data
    assert np.all(const == 0.3)
    x = Tensor(rng.standard_normal((1, 1, 4, 4)), requires_grad=True)
    assert grad_check(lambda *_: maxpool2d(x, 2, 2).sum(), [x]) < 1e-6


def test_maxpool_tie_goes_to_first():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    backward(maxpool2d(x, 2).sum())
    assert x.grad.tolist() == [[[[1.0, 0.0], [0.0, 0.0]]]]


def test_maxpool_window_too_large():
    with pytest.raises(ValueError):
        maxpool2d(Tensor(np.zeros((1, 1, 2, 3))), 3)


def test_upsample():
    assert upsample2x(Tensor([[[[1.0]]]])).data.tolist() == [[[[1.0, 1.0], [1.0, 1.0]]]]


def test_upsample_gradient(rng):
    x = Tensor(rng.standard_normal((1, 2, 3, 3)), requires_grad=True)
    assert grad_check(lambda *_: upsample2x(x), [x]) < 1e-6


@given(arrays(np.float64, (2, 3, 3, 2), elements=st.floats(-1e6, 1e6)))
def test_maxpool_inverts_upsample(v):
    np.testing.assert_array_equal(maxpool2d(upsample2x(Tensor(v)), 2, 2).data, v)


def test_concat():
    a = Tensor(np.ones((1, 2, 4, 4)))
    assert concat_channels(a, Tensor(np.zeros((1, 3, 4, 4)))).shape == (1, 5, 4, 4)
    np.testing.assert_array_equal(concat_channels(a, Tensor(np.zeros((1, 0, 4, 4)))).data, a.data)
    with pytest.raises(ValueError, match="H mismatch"):
        concat_channels(a, Tensor(np.zeros((1, 1, 3, 4))))


@given(st.integers(0, 3), st.integers(0, 3), st.integers(0, 2**32 - 1))
def test_concat_slice_roundtrip(ca, cb, seed):
    r = np.random.default_rng(seed)
    a, b = r.standard_normal((2, ca, 3, 3)), r.standard_normal((2, cb, 3, 3))
    out = concat_channels(Tensor(a), Tensor(b))
    np.testing.assert_array_equal(slice_channels(out, 0, ca).data, a)
    np.testing.assert_array_equal(slice_channels(out, ca, ca + cb).data, b)


def test_concat_gradient(rng):
    a = Tensor(rng.standard_normal((1, 2, 3, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal((1, 1, 3, 3)), requires_grad=True)
    assert grad_check(lambda *_: tanh(concat_channels(a, b)), [a, b]) < 1e-6


def test_backward_basics():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    backward(x.sum())
    assert x.grad.tolist() == [1.0, 1.0, 1.0]
    x = Tensor([1.0, 2.0], requires_grad=True)
    backward((x * x).sum())
    assert x.grad.tolist() == [2.0, 4.0]


def test_backward_rejects_non_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError):
        backward(x * 2.0)


def test_backward_frees_graph():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = tanh(x * x).sum()
    backward(y)
    assert y._parents == () and y._backward is None


def test_shared_subexpression_accumulates():
    x = Tensor([3.0], requires_grad=True)
    y = x * x
    backward((y + y).sum())
    assert x.grad.tolist() == [12.0]


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_composite_conv_tanh_gradcheck(rng):
    x = Tensor(rng.standard_normal((1, 1, 5, 5)), requires_grad=True)
    w = Tensor(rng.standard_normal((1, 1, 3, 3)), requires_grad=True)
    assert grad_check(lambda *_: tanh(conv2d(x, w, pad=1)).sum(), [x, w]) < 1e-4


def test_grad_check_identity(rng):
    x = Tensor(rng.standard_normal(5), requires_grad=True)
    assert grad_check(lambda t: t, [x]) <= 1e-10


def test_grad_check_detects_wrong_gradient(rng):
    from opseg.tensor import Tensor as T

    x = T(rng.uniform(0.5, 1.0, 4), requires_grad=True)

    def bad(t):
        # forward x^2, backward claims 3x
        return T._make(t.data ** 2, (t,), lambda g: (3 * t.data * g,), "bad")

    assert grad_check(bad, [x]) > 0.1


def test_forward_deterministic(rng):
    x = rng.standard_normal((1, 2, 6, 6))
    w = rng.standard_normal((3, 2, 3, 3))
    a = tanh(conv2d(Tensor(x), Tensor(w), pad=1)).data
    b = tanh(conv2d(Tensor(x), Tensor(w), pad=1)).data
    np.testing.assert_array_equal(a, b)


@given(st.integers(0, 2**32 - 1))
def test_outputs_finite_on_finite_inputs(seed):
    r = np.random.default_rng(seed)
    x = Tensor(r.uniform(-5, 5, (1, 2, 5, 5)))
    out = tanh(conv2d(elem_pow(x, 3), Tensor(r.standard_normal((2, 2, 3, 3))), pad=1))
    assert np.isfinite(out.data).all()

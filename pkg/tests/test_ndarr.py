import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rankseg.errors import ConfigError, DimensionError
from rankseg.ndarr import (
    Adam,
    AdamState,
    Tensor,
    adam_step,
    add_gaussian_noise,
    avg_pool2d,
    check_gradients,
    concat,
    conv2d,
    instance_norm,
    no_grad,
    relu,
    shadow64,
    softmax_channels,
    stack,
    upsample_nearest2d,
    where_mask,
)


def loop_conv(x, w, b, stride, padding):
    """Direct nested-loop cross-correlation."""
    B, C, H, W = x.shape
    F, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    out = np.zeros((B, F, Ho, Wo))
    for n in range(B):
        for f in range(F):
            for i in range(Ho):
                for j in range(Wo):
                    patch = xp[n, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[n, f, i, j] = np.sum(patch * w[f]) + (0.0 if b is None else b[f])
    return out


@pytest.mark.parametrize("stride,padding,k", [(1, 0, 3), (1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 2, 5)])
def test_conv_matches_loop_reference(stride, padding, k):
    rng = np.random.default_rng(stride * 10 + padding + k)
    x = rng.standard_normal((2, 3, 7, 9))
    w = rng.standard_normal((4, 3, k, k))
    b = rng.standard_normal(4)
    with shadow64():
        got = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding).data
    np.testing.assert_allclose(got, loop_conv(x, w, b, stride, padding), rtol=1e-12, atol=1e-12)


def test_conv_shape_errors():
    x = Tensor(np.zeros((1, 2, 5, 5)))
    with pytest.raises(DimensionError):
        conv2d(x, Tensor(np.zeros((3, 4, 3, 3))))
    with pytest.raises(DimensionError):
        conv2d(x, Tensor(np.zeros((3, 2, 2, 2))))
    with pytest.raises(DimensionError):
        conv2d(x, Tensor(np.zeros((3, 2, 7, 7))))
    with pytest.raises(DimensionError):
        conv2d(Tensor(np.zeros((1, 2, 6, 6))), Tensor(np.zeros((3, 2, 3, 3))), stride=2)


@pytest.mark.parametrize("stride,padding", [(1, 1), (2, 1), (1, 0), (2, 0)])
def test_conv_gradients(stride, padding):
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 2, 7, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    with shadow64():
        weights = rng.standard_normal(conv2d(Tensor(x), Tensor(w), None, stride, padding).shape)
    errs = check_gradients(lambda x, w, b: (conv2d(x, w, b, stride, padding) * weights).sum(), [x, w, b])
    assert max(errs) < 1e-6


def test_elementwise_gradients_with_broadcasting():
    rng = np.random.default_rng(0)
    arrays = [rng.standard_normal((3, 4)), rng.standard_normal((1, 4)), rng.uniform(0.5, 2.0, (3, 1))]
    fn = lambda a, b, c: (((a + b) * a - b / c) ** 2).mean() + (a - c).sum() + (2.0 - a / 3.0).sum()
    assert max(check_gradients(fn, arrays)) < 1e-6


def test_shape_ops_gradients():
    rng = np.random.default_rng(1)
    w = rng.standard_normal((2, 3, 4))

    def fn(a, b):
        joined = concat([a[:, 1:], b], axis=1)
        s = stack([joined, joined * 2.0], axis=0)
        return (s.reshape(2, -1).sum(axis=0).reshape(2, 3, 4) * w).sum() + a[:, [0, 0, 2]].sum()

    assert max(check_gradients(fn, [rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 1, 4))])) < 1e-6


def test_layer_gradients():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 3, 4, 6))
    # keep relu inputs away from the kink
    x[np.abs(x) < 0.05] += 0.2
    w1 = rng.standard_normal((2, 3, 2, 3))
    w2 = rng.standard_normal((2, 3, 8, 12))
    w3 = rng.standard_normal((2, 3, 4, 6))
    mask = rng.random((2, 3, 4, 6)) < 0.5
    fn = lambda x: ((avg_pool2d(x) * w1).sum() + (upsample_nearest2d(x) * w2).sum()
                    + (softmax_channels(x) * w3).sum() + (relu(x) * w3).sum() + where_mask(x, mask).sum())
    assert max(check_gradients(fn, [x])) < 1e-6


def test_instance_norm():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 3, 4, 5)) * 3.0 + 1.0
    y = instance_norm(Tensor(x)).data
    np.testing.assert_allclose(y.mean(axis=(2, 3)), 0.0, atol=1e-6)
    np.testing.assert_allclose(y.std(axis=(2, 3)), 1.0, rtol=1e-4)
    w = rng.standard_normal(x.shape)
    assert max(check_gradients(lambda x: (instance_norm(x) * w).sum(), [x])) < 1e-6
    # a constant plane maps to zeros instead of dividing by zero
    assert np.all(instance_norm(Tensor(np.ones((1, 1, 3, 3)))).data == 0)
    with pytest.raises(DimensionError):
        instance_norm(Tensor(np.ones((3, 3))))


def test_noise_gradient_is_identity():
    with shadow64():
        x = Tensor(np.ones((1, 2, 2, 2)), requires_grad=True)
    y = add_gaussian_noise(x, 0.5, 0)
    (y * 3.0).sum().backward()
    np.testing.assert_array_equal(x.grad, np.full(x.shape, 3.0))


def test_noise_edge_cases():
    x = Tensor(np.arange(8.0).reshape(1, 2, 2, 2))
    np.testing.assert_array_equal(add_gaussian_noise(x, 0.0, 1).data, x.data)
    with pytest.raises(ConfigError):
        add_gaussian_noise(x, -0.1, 1)
    a = add_gaussian_noise(x, 0.35, 7).data
    b = add_gaussian_noise(x, 0.35, 7).data
    np.testing.assert_array_equal(a, b)


def test_softmax_needs_two_channels():
    with pytest.raises(ConfigError):
        softmax_channels(Tensor(np.zeros((1, 1, 2, 2))))


@settings(max_examples=40, deadline=None)
@given(st.floats(-60, 60), st.integers(2, 5))
def test_softmax_is_a_distribution(shift, c):
    rng = np.random.default_rng(c)
    logits = rng.standard_normal((2, c, 3, 3)) * 20 + shift
    p = softmax_channels(Tensor(logits)).data
    assert np.all(p >= 0) and np.all(np.isfinite(p))
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-5)


def test_backward_requires_scalar_or_grad():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(DimensionError):
        (x * 2.0).backward()
    (x * 2.0).backward(np.ones(3))
    np.testing.assert_array_equal(x.grad, [2.0, 2.0, 2.0])


def test_shared_subexpression_accumulates():
    x = Tensor(np.array([1.5]), requires_grad=True)
    y = x * x
    (y + y * x).sum().backward()
    np.testing.assert_allclose(x.grad, 2 * 1.5 + 3 * 1.5**2, rtol=1e-6)


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad and y._node is None


def test_float32_default_and_shadow64():
    assert Tensor([1.0]).dtype == np.float32
    with shadow64():
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


def reference_adam(p, grads, lr, b1, b2, eps):
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    return p


def test_adam_matches_reference():
    rng = np.random.default_rng(4)
    p0 = rng.standard_normal((3, 2))
    grads = [rng.standard_normal((3, 2)) for _ in range(5)]
    param = Tensor(p0.copy(), dtype=np.float64)
    state = AdamState()
    for g in grads:
        adam_step([param], [g], state, lr=0.01)
    np.testing.assert_allclose(param.data, reference_adam(p0, grads, 0.01, 0.9, 0.999, 1e-8), rtol=1e-12)
    assert state.step == 5


def test_adam_none_gradient_is_zero_and_shape_checked():
    a = Tensor(np.ones(2), dtype=np.float64)
    state = AdamState()
    adam_step([a], [None], state)
    np.testing.assert_array_equal(a.data, [1.0, 1.0])
    with pytest.raises(DimensionError):
        adam_step([a], [np.ones(3)], state)


def test_adam_wrapper_minimises_quadratic():
    x = Tensor(np.array([3.0, -2.0]), requires_grad=True)
    opt = Adam([x], lr=0.1)
    for _ in range(300):
        opt.zero_grad()
        (x * x).sum().backward()
        opt.step()
    assert np.all(np.abs(x.data) < 1e-2)

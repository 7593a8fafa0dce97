import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rankseg.errors import ConfigError, DimensionError, ValidationError
from rankseg.losses import LossConfig, dice_loss, one_hot, squeeze_loss, total_loss
from rankseg.ndarr import Tensor, check_gradients, shadow64, softmax_channels


def random_probs(rng, shape):
    e = np.exp(rng.standard_normal(shape))
    return e / e.sum(axis=1, keepdims=True)


def test_config_defaults_and_validation():
    cfg = LossConfig()
    assert cfg.alpha == 0.5 and cfg.dice_smooth == 1.0 and not cfg.stop_grad_perturbed
    with pytest.raises(ConfigError):
        LossConfig(alpha=-0.1)
    with pytest.raises(ConfigError):
        LossConfig(dice_smooth=0.0)


def test_one_hot():
    oh = one_hot(np.array([[[0, 2], [1, 1]]]), 3)
    assert oh.shape == (1, 3, 2, 2)
    assert oh[0, :, 0, 1].tolist() == [0, 0, 1]
    with pytest.raises(ValidationError):
        one_hot(np.array([[[3]]]), 3)


def test_dice_perfect_overlap():
    labels = np.random.default_rng(0).integers(0, 4, size=(2, 32, 32))
    t = one_hot(labels, 4)
    assert float(dice_loss(Tensor(t), t).data) <= 1e-3
    assert float(dice_loss(Tensor(t), t, include_background=True).data) <= 1e-3


def test_dice_disjoint_class_term_tends_to_one():
    t = np.zeros((1, 2, 4, 4))
    t[0, 0] = 1
    t[0, 0, :2, :2] = 0
    t[0, 1, :2, :2] = 1
    p = np.zeros_like(t)
    p[0, 0, :2, :2] = 1
    p[0, 1] = 1 - p[0, 0]
    loss = float(dice_loss(Tensor(p, dtype=np.float64), t, smooth=1e-9).data)
    assert loss == pytest.approx(1.0, abs=1e-6)


def test_dice_empty_class_term_is_zero():
    t = np.zeros((1, 3, 4, 4))
    t[0, 0] = 1
    t[0, 1, 0, 0], t[0, 0, 0, 0] = 1, 0
    # class 2 absent from both prediction and target
    loss = float(dice_loss(Tensor(t, dtype=np.float64), t).data)
    assert loss == pytest.approx(0.0, abs=1e-12)


def test_dice_validation():
    t = one_hot(np.zeros((1, 2, 2), int), 3)
    with pytest.raises(DimensionError):
        dice_loss(Tensor(np.ones((1, 2, 2, 2))), t)
    with pytest.raises(ValidationError):
        dice_loss(Tensor(t), t * 0.5)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_dice_bounded_and_monotone_in_overlap(seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 3, size=(1, 6, 6))
    t = one_hot(labels, 3, dtype=np.float64)
    loss = float(dice_loss(Tensor(t), t).data)
    assert 0.0 <= loss <= 1e-9 + 1.0
    # move one correctly-labelled foreground pixel to a wrong class: loss must not drop
    fg = np.argwhere(labels[0] > 0)
    if len(fg):
        y, x = fg[rng.integers(len(fg))]
        worse = labels.copy()
        worse[0, y, x] = 0
        l2 = float(dice_loss(Tensor(one_hot(worse, 3, dtype=np.float64)), t).data)
        assert l2 >= loss


def test_squeeze_examples():
    rng = np.random.default_rng(1)
    p = Tensor(random_probs(rng, (2, 3, 4, 4)))
    omega = np.ones((4, 4))
    assert float(squeeze_loss(p, [p, p], omega).data) == 0.0
    q = Tensor(random_probs(rng, (2, 3, 4, 4)))
    assert float(squeeze_loss(p, [q], np.zeros((4, 4))).data) == 0.0

    clean = np.zeros((1, 2, 1, 1))
    clean[0, 0] = 1.0
    pert = np.zeros((1, 2, 1, 1))
    eps = 1e-6
    got = float(squeeze_loss(Tensor(clean, dtype=np.float64), [Tensor(pert, dtype=np.float64)], np.ones((1, 1)), eps).data)
    assert got == pytest.approx(1.0 / (1.0 + eps), rel=1e-12)


def test_squeeze_no_draws_warns(caplog):
    p = Tensor(np.ones((1, 2, 2, 2)) * 0.5)
    with caplog.at_level(logging.WARNING):
        assert float(squeeze_loss(p, [], np.ones((2, 2))).data) == 0.0
    assert "no perturbed" in caplog.text


def test_squeeze_per_sample_normalisation():
    rng = np.random.default_rng(2)
    p = random_probs(rng, (2, 3, 4, 4))
    q = random_probs(rng, (2, 3, 4, 4))
    omega = (rng.random((2, 4, 4)) < 0.5).astype(np.uint8)
    omega[0, 0, 0] = omega[1, 0, 0] = 1
    with shadow64():
        got = float(squeeze_loss(Tensor(p), [Tensor(q)], omega, 1e-6).data)
    want = np.mean([((p[b] - q[b]) ** 2 * omega[b]).sum() / (omega[b].sum() + 1e-6) for b in range(2)])
    assert got == pytest.approx(want, rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_squeeze_ignores_values_outside_omega(seed):
    rng = np.random.default_rng(seed)
    p = random_probs(rng, (1, 3, 5, 5))
    q = random_probs(rng, (1, 3, 5, 5))
    omega = (rng.random((5, 5)) < 0.5).astype(np.uint8)
    with shadow64():
        base = float(squeeze_loss(Tensor(p), [Tensor(q)], omega).data)
        assert base >= 0.0
        outside = np.argwhere(omega == 0)
        if len(outside):
            y, x = outside[0]
            q2 = q.copy()
            q2[0, :, y, x] = rng.random(3)
            assert float(squeeze_loss(Tensor(p), [Tensor(q2)], omega).data) == base


def test_squeeze_shape_checks():
    p = Tensor(np.ones((2, 2, 3, 3)))
    with pytest.raises(DimensionError):
        squeeze_loss(p, [p], np.ones((4, 4)))
    with pytest.raises(DimensionError):
        squeeze_loss(p, [Tensor(np.ones((1, 2, 3, 3)))], np.ones((3, 3)))


def test_squeeze_stop_gradient_flag():
    rng = np.random.default_rng(3)
    p = Tensor(random_probs(rng, (1, 2, 3, 3)), requires_grad=True)
    q = Tensor(random_probs(rng, (1, 2, 3, 3)), requires_grad=True)
    squeeze_loss(p, [q], np.ones((3, 3)), stop_grad_perturbed=True).backward()
    assert p.grad is not None and q.grad is None
    p.grad = None
    squeeze_loss(p, [q], np.ones((3, 3))).backward()
    np.testing.assert_allclose(q.grad, -p.grad, rtol=1e-5)


def test_total_loss_arithmetic():
    assert float(total_loss(Tensor(0.3), Tensor(0.4), 0.5).data) == pytest.approx(0.5)
    d = Tensor(0.7)
    assert float(total_loss(d, Tensor(123.0), 0.0).data) == pytest.approx(0.7)


def test_loss_gradients_finite_difference():
    rng = np.random.default_rng(4)
    logits = rng.standard_normal((2, 3, 4, 4))
    noisy = [rng.standard_normal((2, 3, 4, 4)) for _ in range(2)]
    target = one_hot(rng.integers(0, 3, size=(2, 4, 4)), 3, dtype=np.float64)
    omega = (rng.random((2, 4, 4)) < 0.6).astype(np.uint8)

    def dice_fn(z):
        return dice_loss(softmax_channels(z), target)

    def squeeze_fn(z, a, b):
        return squeeze_loss(softmax_channels(z), [softmax_channels(a), softmax_channels(b)], omega)

    def total_fn(z, a, b):
        return total_loss(dice_fn(z), squeeze_fn(z, a, b), 0.5)

    assert max(check_gradients(dice_fn, [logits])) < 1e-3
    assert max(check_gradients(squeeze_fn, [logits] + noisy)) < 1e-3
    assert max(check_gradients(total_fn, [logits] + noisy)) < 1e-3


def test_total_gradient_is_weighted_sum():
    rng = np.random.default_rng(5)
    target = one_hot(rng.integers(0, 3, size=(1, 4, 4)), 3, dtype=np.float64)
    omega = np.ones((4, 4))
    with shadow64():
        z0 = rng.standard_normal((1, 3, 4, 4))
        a0 = rng.standard_normal((1, 3, 4, 4))

        def grads(which):
            z = Tensor(z0.copy(), requires_grad=True)
            a = Tensor(a0.copy())
            p = softmax_channels(z)
            d = dice_loss(p, target)
            s = squeeze_loss(p, [softmax_channels(a)], omega)
            {"dice": d, "squeeze": s, "total": total_loss(d, s, 0.5)}[which].backward()
            return z.grad

        np.testing.assert_allclose(grads("total"), grads("dice") + 0.5 * grads("squeeze"), rtol=1e-10, atol=1e-14)

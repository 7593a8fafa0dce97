"""Differentiable image operations on ``[B, C, H, W]`` tensors."""

from __future__ import annotations

from typing import Optional, Union

import numpy as np

from rankseg.errors import ConfigError, DimensionError
from rankseg.ndarr.tensor import Tensor, as_tensor, make_result


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return make_result(x.data * mask, "relu", (x,), backward)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation (no kernel flip), computed as an im2col matmul."""
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    B, Cin, H, W = x.shape
    Cout, Cw, kH, kW = weight.shape
    if Cw != Cin:
        raise DimensionError(f"conv2d: input has {Cin} channels but weight expects {Cw}")
    if kH % 2 == 0 or kW % 2 == 0:
        raise DimensionError(f"conv2d: kernel extents must be odd, got {kH}x{kW}")
    if padding < 0 or stride < 1:
        raise DimensionError(f"conv2d: invalid padding={padding} / stride={stride}")
    if bias is not None and bias.shape != (Cout,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} does not match {Cout} output channels")
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if (Hp - kH) % stride or (Wp - kW) % stride or Hp < kH or Wp < kW:
        raise DimensionError(
            f"conv2d: ({H}+2*{padding}-{kH})/{stride}+1 must be a positive integer (same for width {W})"
        )
    Ho, Wo = (Hp - kH) // stride + 1, (Wp - kW) // stride + 1

    cols = _im2col(x.data, kH, kW, padding, stride)
    wmat = weight.data.reshape(Cout, -1)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape(B, Cout, Ho, Wo)

    def backward(g):
        gm = g.reshape(B, Cout, Ho * Wo)
        gw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape) if weight.requires_grad else None
        gb = gm.sum(axis=(0, 2)) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            if stride == 1 and kH == kW and padding <= kH - 1:
                # input gradient of a stride-1 correlation: full correlation of the
                # output gradient with the flipped, channel-transposed kernel
                flipped = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(Cin, -1)
                gx = np.matmul(flipped, _im2col(g, kH, kW, kH - 1 - padding, 1)).reshape(B, Cin, H, W)
            else:
                dcols = np.matmul(wmat.T, gm).reshape(B, Cin, kH, kW, Ho, Wo)
                gxp = np.zeros((B, Cin, Hp, Wp), dtype=g.dtype)
                for i in range(kH):
                    for j in range(kW):
                        gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += dcols[:, :, i, j]
                gx = np.ascontiguousarray(gxp[:, :, padding:padding + H, padding:padding + W])
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, "conv2d", inputs, backward)


def _im2col(x: np.ndarray, kH: int, kW: int, padding: int, stride: int) -> np.ndarray:
    """Receptive fields as ``(B, Cin*kH*kW, Ho*Wo)``, ordered like ``weight.reshape(Cout, -1)``."""
    B, C, H, W = x.shape
    Hp, Wp = H + 2 * padding, W + 2 * padding
    Ho, Wo = (Hp - kH) // stride + 1, (Wp - kW) // stride + 1
    if padding:
        xp = np.zeros((B, C, Hp, Wp), dtype=x.dtype)
        xp[:, :, padding:padding + H, padding:padding + W] = x
    else:
        xp = x
    cols = np.empty((B, C, kH, kW, Ho, Wo), dtype=x.dtype)
    for i in range(kH):
        for j in range(kW):
            cols[:, :, i, j] = xp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride]
    return cols.reshape(B, C * kH * kW, Ho * Wo)


def avg_pool2d(x: Tensor, factor: int = 2) -> Tensor:
    B, C, H, W = x.shape
    if H % factor or W % factor:
        raise DimensionError(f"avg_pool2d: spatial dims {H}x{W} not divisible by {factor}")
    out = x.data.reshape(B, C, H // factor, factor, W // factor, factor).mean(axis=(3, 5))

    def backward(g):
        g = g / (factor * factor)
        return (np.repeat(np.repeat(g, factor, axis=2), factor, axis=3),)

    return make_result(out, "avg_pool2d", (x,), backward)


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each (sample, channel) plane to zero mean and unit variance."""
    if x.ndim != 4:
        raise DimensionError(f"instance_norm expects [B, C, H, W], got {x.shape}")
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    var = x.data.var(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (x.data - mu) * inv

    def backward(g):
        gm = g.mean(axis=(2, 3), keepdims=True)
        gy = (g * y).mean(axis=(2, 3), keepdims=True)
        return (inv * (g - gm - y * gy),)

    return make_result(y.astype(x.data.dtype), "instance_norm", (x,), backward)


def upsample_nearest2d(x: Tensor, factor: int = 2) -> Tensor:
    B, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def backward(g):
        return (g.reshape(B, C, H, factor, W, factor).sum(axis=(3, 5)),)

    return make_result(out, "upsample_nearest2d", (x,), backward)


def softmax_channels(logits: Tensor) -> Tensor:
    """Softmax over axis 1, stabilised by subtracting the per-pixel max."""
    if logits.ndim < 2 or logits.shape[1] < 2:
        raise ConfigError(f"softmax_channels needs at least 2 channels, got shape {logits.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return make_result(y, "softmax_channels", (logits,), backward)


def add_gaussian_noise(t: Tensor, sigma: float, seed: Union[int, np.random.Generator]) -> Tensor:
    """Return ``t + xi`` with ``xi ~ N(0, sigma^2)`` i.i.d.

    The noise is a constant for differentiation: the gradient with respect to
    ``t`` is the identity.
    """
    if sigma < 0:
        raise ConfigError(f"sigma must be non-negative, got {sigma}")
    if sigma == 0:
        out = t.data.copy()
    else:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        noise = rng.standard_normal(t.shape) * sigma
        out = t.data + noise.astype(t.dtype, copy=False)

    def backward(g):
        return (g,)

    return make_result(out, "add_gaussian_noise", (t,), backward)


def where_mask(x: Tensor, mask: np.ndarray) -> Tensor:
    """Multiply by a constant 0/1 mask that broadcasts against ``x``."""
    return x * as_tensor(np.asarray(mask, dtype=x.dtype), like=x)

"""Small encoder-decoder segmentation network with a bottleneck tap.

The encoder consumes the image plus ``2C`` hint planes and downsamples by 8;
the decoder upsamples back to full resolution and emits ``C + 1`` logits
(channel 0 is background). The bottleneck is exposed through :meth:`SegNet.encode`
and :meth:`SegNet.decode` so callers can perturb it between the two halves.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Optional, Union

import numpy as np

from rankseg import binfmt
from rankseg.errors import CorruptionError, DimensionError, ValidationError
from rankseg.hints import HintPair
from rankseg.ndarr import Tensor, avg_pool2d, concat, conv2d, instance_norm, relu, upsample_nearest2d
from rankseg.ndarr.optim import AdamState

CHECKPOINT_MAGIC = b"CRSPCKPT"
CHECKPOINT_VERSION = 1
DOWNSAMPLE = 8


@dataclass(frozen=True)
class SegNetConfig:
    n_classes: int = 3
    widths: tuple = (16, 32, 64)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) != 3:
            raise ValueError("widths must list three encoder stages (downsampling factor 8)")

    @property
    def in_channels(self) -> int:
        return 1 + 2 * self.n_classes

    @property
    def out_channels(self) -> int:
        return self.n_classes + 1

    @property
    def bottleneck(self) -> int:
        return self.widths[-1]


class SegNet:
    """Conv/ReLU/avg-pool encoder and upsample/conv decoder.

    Encoder: three stages of ``block -> block -> avgpool2``.
    Decoder: three stages of ``upsample2 -> block`` followed by a 1x1 head.
    A block is ``conv3x3 -> instance_norm -> relu``; its conv carries no bias
    since the normalisation would cancel it. The normalisation keeps the
    bottleneck on a fixed scale, so the perturbation sigma means the same
    thing for every trained model.
    """

    def __init__(self, config: SegNetConfig = SegNetConfig()):
        self.config = config
        rng = np.random.default_rng(config.seed)
        w1, w2, w3 = config.widths
        enc = [(config.in_channels, w1), (w1, w2), (w2, w3)]
        dec = [(w3, w2), (w2, w1), (w1, w1)]
        self.params: dict[str, Tensor] = {}
        for i, (cin, cout) in enumerate(enc):
            self._add_conv(f"enc{i}", cin, cout, 3, rng, bias=False)
            self._add_conv(f"enc{i}b", cout, cout, 3, rng, bias=False)
        for i, (cin, cout) in enumerate(dec):
            self._add_conv(f"dec{i}", cin, cout, 3, rng, bias=False)
        self._add_conv("head", w1, config.out_channels, 1, rng)

    def _add_conv(self, name: str, cin: int, cout: int, k: int, rng: np.random.Generator,
                  bias: bool = True) -> None:
        fan_in = cin * k * k
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(cout, cin, k, k)).astype(np.float32)
        self.params[f"{name}.weight"] = Tensor(w, requires_grad=True, dtype=np.float32)
        if bias:
            self.params[f"{name}.bias"] = Tensor(np.zeros(cout, np.float32), requires_grad=True, dtype=np.float32)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def copy(self) -> "SegNet":
        other = SegNet.__new__(SegNet)
        other.config = self.config
        other.params = {k: Tensor(v.data.copy(), requires_grad=True, dtype=v.dtype) for k, v in self.params.items()}
        return other

    def _conv(self, x: Tensor, name: str, padding: int = 1) -> Tensor:
        return conv2d(x, self.params[f"{name}.weight"], self.params.get(f"{name}.bias"), padding=padding)

    def _block(self, x: Tensor, name: str) -> Tensor:
        return relu(instance_norm(self._conv(x, name)))

    # -- forward ------------------------------------------------------------
    def encode(self, image, hints: HintPair) -> Tensor:
        """Bottleneck features ``[B, F, H/8, W/8]`` for an image batch and its hints."""
        x = _as_image_batch(image)
        B, _, H, W = x.shape
        if H % DOWNSAMPLE or W % DOWNSAMPLE:
            raise DimensionError(f"spatial dims {H}x{W} must be divisible by {DOWNSAMPLE}")
        x = concat([x, self._hint_planes(hints, B, H, W, x.dtype)], axis=1)
        for i in range(3):
            x = avg_pool2d(self._block(self._block(x, f"enc{i}"), f"enc{i}b"))
        return x

    def decode(self, features: Tensor) -> Tensor:
        """Full-resolution logits ``[B, C+1, H, W]``."""
        if features.ndim != 4 or features.shape[1] != self.config.bottleneck:
            raise DimensionError(
                f"decode expects [B, {self.config.bottleneck}, h, w] features, got {features.shape}"
            )
        x = features
        for i in range(3):
            x = self._block(upsample_nearest2d(x), f"dec{i}")
        return self._conv(x, "head", padding=0)

    def forward(self, image, hints: HintPair) -> Tensor:
        return self.decode(self.encode(image, hints))

    __call__ = forward

    def _hint_planes(self, hints: HintPair, B: int, H: int, W: int, dtype) -> Tensor:
        C = self.config.n_classes
        hints.validate()
        hp, hr = hints.hp, hints.hr
        if hp.ndim == 3:
            hp, hr = hp[None], hr[None]
        if hp.shape[1:] != (C, H, W) or hp.shape[0] not in (1, B):
            raise DimensionError(f"hints shaped {hints.shape} do not match {C} classes at {H}x{W} (batch {B})")
        planes = np.concatenate([hp, hr], axis=1).astype(dtype)
        if planes.shape[0] != B:
            planes = np.broadcast_to(planes, (B,) + planes.shape[1:])
        return Tensor(planes, dtype=dtype)


def _as_image_batch(image) -> Tensor:
    t = image if isinstance(image, Tensor) else Tensor(np.asarray(image))
    if t.ndim == 3:
        t = t.reshape((1,) + t.shape)
    if t.ndim != 4 or t.shape[1] != 1:
        raise DimensionError(f"image must be [B, 1, H, W] or [1, H, W], got {t.shape}")
    return t


# -- checkpoints ----------------------------------------------------------------

def save_checkpoint(net: SegNet, optimizer_state: Optional[AdamState], k: int, path, rng_state: Optional[dict] = None) -> None:
    """Write parameters, optimizer moments and phase index to ``path``."""
    names = list(net.params)
    has_opt = optimizer_state is not None and bool(optimizer_state.m)
    meta = {
        "config": asdict(net.config),
        "k": int(k),
        "rng": rng_state or {"seed": net.config.seed},
        "params": [[n, list(net.params[n].shape)] for n in names],
        "optimizer": {"step": int(optimizer_state.step) if optimizer_state else 0, "moments": has_opt},
    }
    text = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blobs = [net.params[n].data for n in names]
    if has_opt:
        blobs += list(optimizer_state.m) + list(optimizer_state.v)
    body = struct.pack("<I", len(text)) + text + b"".join(_f32le(b) for b in blobs)
    binfmt.write_bytes_atomic(path, binfmt.frame(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, body))


def load_checkpoint(path) -> tuple[SegNet, Optional[AdamState], int, dict]:
    """Inverse of :func:`save_checkpoint`; returns ``(net, optimizer_state, k, rng_state)``."""
    raw = binfmt.read_bytes(path)
    body = binfmt.unframe(raw, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    r = binfmt.Reader(body, base_offset=len(CHECKPOINT_MAGIC) + 4)
    n = r.u32()
    at = r.offset
    try:
        meta = json.loads(r.take(n).decode("utf-8"))
        config = SegNetConfig(**meta["config"])
        shapes = [(name, tuple(shape)) for name, shape in meta["params"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptionError(f"unreadable metadata block: {exc}", offset=at) from exc

    def read_array(shape):
        count = int(np.prod(shape))
        return np.frombuffer(r.take(4 * count), dtype="<f4").astype(np.float32).reshape(shape)

    net = SegNet.__new__(SegNet)
    net.config = config
    net.params = {name: Tensor(read_array(shape), requires_grad=True, dtype=np.float32) for name, shape in shapes}
    state = AdamState(step=int(meta["optimizer"]["step"]))
    if meta["optimizer"]["moments"]:
        state.m = [read_array(s) for _, s in shapes]
        state.v = [read_array(s) for _, s in shapes]
    r.done()
    reference = SegNet(config)
    if {k: v.shape for k, v in reference.params.items()} != {k: v.shape for k, v in net.params.items()}:
        raise CorruptionError("parameter layout does not match the stored architecture", offset=at)
    return net, state, int(meta["k"]), meta["rng"]


def _f32le(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()

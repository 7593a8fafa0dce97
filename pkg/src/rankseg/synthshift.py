"""Synthetic multi-class scenes with parametric intensity shifts.

Scenes contain one disk, one ring and one elongated bar (classes 1..3) over a
smooth textured background. Shifts act on intensities only; labels are made
before, and independently of, the shift.

Severity ``s`` in ``[0, 1]`` maps to shift parameters as follows:

==================  ==========================================
kind                parameter
==================  ==========================================
gamma               ``gamma = 1 + 3 s``; ``x -> x ** gamma``
contrast            ``k = 1 - 0.8 s``; ``x -> m + k (x - m)``, m = image mean
additive-noise      ``sigma = 0.3 s``; ``x -> x + N(0, sigma^2)``
blur                Gaussian blur with ``sigma_px = 3 s``
intensity-offset    ``delta = -0.5 s``; ``x -> x + delta``
==================  ==========================================

Every output is clipped to ``[0, 1]``.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.ndimage import distance_transform_edt, gaussian_filter

from rankseg import binfmt
from rankseg.errors import ConfigError, CorruptionError, GenerationError, ValidationError

DATA_MAGIC = b"CRSPDATA"
DATA_VERSION = 1
DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("u1")}

SHIFT_KINDS = ("gamma", "contrast", "additive-noise", "blur", "intensity-offset")
SHAPE_FAMILIES = ("disk", "ring", "bar")
MANIFEST_FIELDS = ("filename", "split", "kind", "severity", "seed")


@dataclass(frozen=True)
class SceneSpec:
    height: int = 64
    width: int = 64
    n_classes: int = 3
    shapes: tuple = SHAPE_FAMILIES
    class_means: tuple = (0.8, 0.65, 0.5)
    class_std: float = 0.04
    background_mean: float = 0.25
    background_texture: float = 0.08
    texture_scale: float = 4.0
    pixel_noise: float = 0.02
    # probability that each class appears in a scene
    presence: tuple = (1.0, 1.0, 1.0)
    min_pixels: int = 16
    max_retries: int = 300
    seed: int = 0

    def __post_init__(self):
        for name in ("shapes", "class_means", "presence"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.height % 8 or self.width % 8:
            raise ConfigError(f"scene size {self.height}x{self.width} must be divisible by 8")
        if not (len(self.shapes) == len(self.class_means) == len(self.presence) == self.n_classes):
            raise ConfigError("shapes, class_means and presence need one entry per class")
        unknown = set(self.shapes) - set(SHAPE_FAMILIES)
        if unknown:
            raise ConfigError(f"unknown shape families {sorted(unknown)}")


@dataclass(frozen=True)
class ShiftSpec:
    kind: str = "gamma"
    severity: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SHIFT_KINDS:
            raise ConfigError(f"unknown shift kind {self.kind!r}; expected one of {SHIFT_KINDS}")
        if not 0.0 <= self.severity <= 1.0:
            raise ConfigError(f"severity must lie in [0, 1], got {self.severity}")

    def parameter(self) -> float:
        """The kind-specific parameter from the severity mapping table."""
        s = self.severity
        return {
            "gamma": 1.0 + 3.0 * s,
            "contrast": 1.0 - 0.8 * s,
            "additive-noise": 0.3 * s,
            "blur": 3.0 * s,
            "intensity-offset": -0.5 * s,
        }[self.kind]


def _shape_mask(family: str, rng: np.random.Generator, yy: np.ndarray, xx: np.ndarray):
    H, W = yy.shape
    # sizes are tuned for 64x64; the square root keeps small scenes learnable
    z = np.sqrt(min(H, W) / 64.0)
    if family == "disk":
        r = rng.uniform(5.0 * z, 9.0 * z)
        ey = ex = r
    elif family == "ring":
        r = rng.uniform(8.0 * z, 12.0 * z)
        thickness = rng.uniform(2.5 * z, 4.0 * z)
        ey = ex = r
    else:
        a, b = rng.uniform(10.0 * z, 16.0 * z), rng.uniform(2.5 * z, 4.0 * z)
        theta = rng.uniform(0.0, np.pi)
        c, s = np.cos(theta), np.sin(theta)
        ex, ey = np.hypot(a * c, b * s), np.hypot(a * s, b * c)
    cy = rng.uniform(ey + 1, H - ey - 1)
    cx = rng.uniform(ex + 1, W - ex - 1)
    dy, dx = yy - cy, xx - cx
    if family == "disk":
        mask = dy**2 + dx**2 <= r**2
    elif family == "ring":
        d = np.sqrt(dy**2 + dx**2)
        mask = (d <= r) & (d >= r - thickness)
    else:
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = -dx * np.sin(theta) + dy * np.cos(theta)
        mask = (u / a) ** 2 + (v / b) ** 2 <= 1.0
    return mask


def gen_scene(spec: SceneSpec, index: int) -> tuple[np.ndarray, np.ndarray]:
    """Image ``[1, H, W]`` float32 in ``[0, 1]`` and label ``[H, W]`` uint8.

    Deterministic in ``(spec.seed, index)``. Shapes do not overlap and every
    present class covers at least ``min_pixels`` pixels.
    """
    rng = np.random.default_rng([spec.seed, index])
    H, W = spec.height, spec.width
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    present = [c for c in range(spec.n_classes) if rng.random() < spec.presence[c]]
    margin = 2.0 * np.sqrt(min(H, W) / 64.0)

    for _ in range(spec.max_retries):
        label = np.zeros((H, W), dtype=np.uint8)
        ok = True
        for c in present:
            mask = _shape_mask(spec.shapes[c], rng, yy, xx)
            # keep a background gap of `margin` pixels between shapes
            clash = label.any() and distance_transform_edt(label == 0)[mask].min() <= margin
            if clash or mask.sum() < spec.min_pixels:
                ok = False
                break
            label[mask] = c + 1
        if ok:
            break
    else:
        raise GenerationError(f"could not place {len(present)} shapes after {spec.max_retries} attempts (index {index})")

    texture = gaussian_filter(rng.standard_normal((H, W)), spec.texture_scale)
    texture /= max(texture.std(), 1e-12)
    image = spec.background_mean + spec.background_texture * texture
    for c in present:
        mean = spec.class_means[c] + spec.class_std * rng.standard_normal()
        image[label == c + 1] = mean
    image += spec.pixel_noise * rng.standard_normal((H, W))
    return np.clip(image, 0.0, 1.0).astype(np.float32)[None], label


def apply_shift(image: np.ndarray, shift: ShiftSpec, index: int = 0) -> np.ndarray:
    """Label-preserving intensity transform; severity 0 returns the input unchanged."""
    x = np.asarray(image, dtype=np.float64)
    if x.min(initial=0.0) < 0 or x.max(initial=0.0) > 1:
        raise ValidationError("apply_shift expects intensities in [0, 1]")
    if shift.severity == 0:
        return np.array(image, dtype=np.float32, copy=True)
    p = shift.parameter()
    if shift.kind == "gamma":
        out = x**p
    elif shift.kind == "contrast":
        m = x.mean()
        out = m + p * (x - m)
    elif shift.kind == "additive-noise":
        rng = np.random.default_rng([shift.seed, index])
        out = x + p * rng.standard_normal(x.shape)
    elif shift.kind == "blur":
        sig = (0,) * (x.ndim - 2) + (p, p)
        out = gaussian_filter(x, sig)
    else:
        out = x + p
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# -- dataset files ------------------------------------------------------------

def encode_array(arr: np.ndarray) -> bytes:
    """Serialise a ``[C, H, W]``/``[H, W]`` float32 or uint8 array."""
    arr = np.asarray(arr)
    if arr.dtype == np.float32:
        tag = 0
    elif arr.dtype == np.uint8:
        tag = 1
    else:
        raise ValidationError(f"dataset files hold float32 or uint8, got {arr.dtype}")
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValidationError(f"dataset arrays are [C, H, W] or [H, W], got shape {arr.shape}")
    C, H, W = arr.shape
    header = struct.pack("<IIII", H, W, C, tag)
    return binfmt.frame(DATA_MAGIC, DATA_VERSION, header + np.ascontiguousarray(arr, DTYPE_TAGS[tag]).tobytes())


def decode_array(raw: bytes) -> np.ndarray:
    body = binfmt.unframe(raw, DATA_MAGIC, DATA_VERSION)
    r = binfmt.Reader(body, base_offset=len(DATA_MAGIC) + 4)
    H, W, C, tag = (r.u32() for _ in range(4))
    if tag not in DTYPE_TAGS:
        raise CorruptionError(f"unknown dtype tag {tag}", offset=r.offset - 4)
    dt = DTYPE_TAGS[tag]
    arr = np.frombuffer(r.take(H * W * C * dt.itemsize), dtype=dt).reshape(C, H, W)
    r.done()
    arr = arr.astype(np.float32 if tag == 0 else np.uint8)
    return arr


def write_array(path, arr: np.ndarray) -> None:
    binfmt.write_bytes_atomic(path, encode_array(arr))


def read_array(path) -> np.ndarray:
    """Read a dataset file; uint8 label files come back as ``[H, W]``."""
    arr = decode_array(binfmt.read_bytes(path))
    return arr[0] if arr.dtype == np.uint8 and arr.shape[0] == 1 else arr


@dataclass
class ManifestEntry:
    filename: str
    split: str
    kind: str
    severity: float
    seed: int

    @property
    def index(self) -> int:
        return int(Path(self.filename).stem.rsplit("_", 1)[1])


def write_manifest(path, entries) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        for e in entries:
            w.writerow([e.filename, e.split, e.kind, repr(float(e.severity)), e.seed])


def read_manifest(path) -> list[ManifestEntry]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for row in rows:
        missing = set(MANIFEST_FIELDS) - set(row)
        if missing:
            raise ValidationError(f"manifest {path} lacks columns {sorted(missing)}")
        out.append(ManifestEntry(row["filename"], row["split"], row["kind"], float(row["severity"]), int(row["seed"])))
    return out


def gen_benchmark(scene: SceneSpec, shift: ShiftSpec, n_source: int, n_target: int, out_dir) -> list[ManifestEntry]:
    """Write source (unshifted) and target (shifted) images with labels.

    Layout: ``images/<name>``, ``labels/<name>`` and ``manifest.csv``. Source
    scenes use indices ``0..n_source-1``; target scenes continue from
    ``n_source``.
    """
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "labels").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc
    entries = []
    for i in range(n_source + n_target):
        split = "source" if i < n_source else "target"
        name = f"{split}_{i:04d}.bin"
        image, label = gen_scene(scene, i)
        if split == "target":
            image = apply_shift(image, shift, i)
        try:
            write_array(out / "images" / name, image)
            write_array(out / "labels" / name, label)
        except OSError as exc:
            raise OSError(f"cannot write {out / name}: {exc}") from exc
        kind = shift.kind if split == "target" else "none"
        sev = shift.severity if split == "target" else 0.0
        entries.append(ManifestEntry(name, split, kind, sev, scene.seed))
    write_manifest(out / "manifest.csv", entries)
    return entries


def load_split(data_dir, split: Optional[str] = None) -> tuple[list[ManifestEntry], np.ndarray, np.ndarray]:
    """Images ``[n, 1, H, W]`` and labels ``[n, H, W]`` for the manifest entries of ``split``."""
    data_dir = Path(data_dir)
    entries = [e for e in read_manifest(data_dir / "manifest.csv") if split is None or e.split == split]
    images = np.stack([read_array(data_dir / "images" / e.filename) for e in entries]) if entries else np.zeros((0, 1, 0, 0), np.float32)
    labels = np.stack([read_array(data_dir / "labels" / e.filename) for e in entries]) if entries else np.zeros((0, 0, 0), np.uint8)
    return entries, images, labels

"""Grade maps and hint masks from perturbed predictions.

Pipeline for one image: encode once, add ``N`` Gaussian draws to the
bottleneck, decode and softmax each, convert foreground probabilities to
log-odds, discretise each draw into ``L`` grades using that draw's own
min/max, then keep

* ``hp`` -- pixels holding the top grade under every draw;
* ``hr`` -- pixels above grade 0 under at least one draw.

The band ``hr & ~hp`` is the uncertainty region.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from rankseg.errors import ConfigError, DegenerateInstance, ValidationError
from rankseg.hints import HintPair, null_hints
from rankseg.ndarr import Tensor, add_gaussian_noise, concat, no_grad, softmax_channels

logger = logging.getLogger(__name__)

DEGENERATE_RANGE = 1e-9
# caps the number of perturbed samples decoded in one batch (memory bound)
DECODE_CHUNK = 48


@dataclass(frozen=True)
class PerturbConfig:
    n_perturb: int = 10
    sigma: float = 0.35
    n_grades: int = 5
    prob_clamp_eps: float = 1e-6
    # take the log-odds extrema over the background channel too
    include_background: bool = False

    def __post_init__(self):
        if self.n_perturb < 1:
            raise ConfigError(f"n_perturb must be >= 1, got {self.n_perturb}")
        if self.sigma < 0:
            raise ConfigError(f"sigma must be non-negative, got {self.sigma}")
        if self.n_grades < 2:
            raise ConfigError(f"n_grades must be >= 2, got {self.n_grades}")
        if not 0 < self.prob_clamp_eps < 0.5:
            raise ConfigError(f"prob_clamp_eps must lie in (0, 0.5), got {self.prob_clamp_eps}")


@dataclass
class GradeStack:
    """``grades[n, c, y, x]`` in ``{0..L-1}``; ``degenerate[n]`` marks constant draws."""

    grades: np.ndarray
    degenerate: np.ndarray

    @property
    def n(self) -> int:
        return self.grades.shape[0]

    def head(self, n: int) -> "GradeStack":
        return GradeStack(self.grades[:n], self.degenerate[:n])


@dataclass
class UncertaintyRegion:
    per_class: np.ndarray
    global_: np.ndarray
    count: int


def probs_to_logodds(p, eps: float = 1e-6) -> np.ndarray:
    """``ln(p / (1 - p))`` after clamping ``p`` into ``[eps, 1 - eps]``."""
    q = np.clip(np.asarray(p, dtype=np.float64), eps, 1.0 - eps)
    return np.log(q) - np.log1p(-q)


def instance_extrema(s) -> tuple[float, float]:
    s = np.asarray(s)
    if s.size == 0:
        raise ValidationError("instance_extrema needs a non-empty array")
    return float(s.min()), float(s.max())


def grade_map(s, s_min: float, s_max: float, n_grades: int) -> tuple[np.ndarray, bool]:
    """Discretise ``s`` into ``n_grades`` levels between ``s_min`` and ``s_max``.

    Returns ``(grades, degenerate)``. A range below 1e-9 is degenerate and
    yields all-zero grades.
    """
    if n_grades < 2:
        raise ConfigError(f"n_grades must be >= 2, got {n_grades}")
    s = np.asarray(s, dtype=np.float64)
    span = s_max - s_min
    if span < DEGENERATE_RANGE:
        return np.zeros(s.shape, dtype=np.uint8), True
    raw = np.floor((s - s_min) / span * n_grades)
    return np.clip(raw, 0, n_grades - 1).astype(np.uint8), False


def grade_stack(probs: Sequence[np.ndarray], cfg: PerturbConfig) -> GradeStack:
    """Grade each perturbed probability map ``[C+1, H, W]`` (channel 0 background)."""
    grades, degenerate = [], []
    for p in probs:
        s_all = probs_to_logodds(p, cfg.prob_clamp_eps)
        s_fg = s_all[1:]
        lo, hi = instance_extrema(s_all if cfg.include_background else s_fg)
        g, deg = grade_map(s_fg, lo, hi, cfg.n_grades)
        grades.append(g)
        degenerate.append(deg)
    return GradeStack(np.stack(grades), np.array(degenerate, dtype=bool))


def distill_hints(stack: GradeStack, n_grades: int) -> HintPair:
    """Intersect top-grade sets and unite non-zero-grade sets over usable draws.

    Raises :class:`DegenerateInstance` when every draw is degenerate.
    """
    if stack.n == 0:
        raise ValidationError("distill_hints needs at least one grade map")
    usable = stack.grades[~stack.degenerate]
    if usable.shape[0] == 0:
        raise DegenerateInstance("all perturbed grade maps are constant")
    hp = np.all(usable == n_grades - 1, axis=0)
    hr = np.any(usable > 0, axis=0)
    return HintPair(hp=hp.astype(np.uint8), hr=hr.astype(np.uint8))


def uncertainty_region(hints: HintPair) -> UncertaintyRegion:
    """Per-class band ``hr & ~hp`` and its union over classes.

    Works on ``[C, H, W]`` or batched ``[B, C, H, W]`` hints; ``count`` is the
    total number of pixels in the global region.
    """
    per_class = (hints.hr.astype(bool) & ~hints.hp.astype(bool)).astype(np.uint8)
    global_ = per_class.any(axis=-3).astype(np.uint8)
    return UncertaintyRegion(per_class=per_class, global_=global_, count=int(global_.sum()))


# -- running the network ------------------------------------------------------

def perturbed_probabilities(net, image, hints: HintPair, cfg: PerturbConfig, seed) -> tuple[np.ndarray, np.ndarray]:
    """Clean and perturbed softmax maps for a batch.

    Returns ``(clean [B, C+1, H, W], perturbed [N, B, C+1, H, W])``. Draw ``n``
    uses the ``n``-th sample from a generator seeded with ``seed``, so the
    first ``N'`` draws do not depend on ``N``.
    """
    rng = np.random.default_rng(seed)
    with no_grad():
        feats = net.encode(image, hints)
        clean = softmax_channels(net.decode(feats)).data
        noisy = [add_gaussian_noise(feats, cfg.sigma, rng).data for _ in range(cfg.n_perturb)]
        stacked = np.concatenate(noisy, axis=0)
        outs = []
        for lo in range(0, stacked.shape[0], DECODE_CHUNK):
            chunk = Tensor(stacked[lo:lo + DECODE_CHUNK], dtype=stacked.dtype)
            outs.append(softmax_channels(net.decode(chunk)).data)
    B = feats.shape[0]
    perturbed = np.concatenate(outs, axis=0).reshape((cfg.n_perturb, B) + clean.shape[1:])
    return clean, perturbed


def generate_hints(net, image, current_hints: HintPair, cfg: PerturbConfig, seed, return_stack: bool = False):
    """New hint pair(s) for an image or batch from ``N`` bottleneck perturbations.

    ``image`` is ``[1, H, W]`` (hints ``[C, H, W]``) or ``[B, 1, H, W]`` (hints
    ``[B, C, H, W]``); the result has the matching hint shape. Instances whose
    draws are all degenerate fall back to null hints with a warning.
    """
    single = np.ndim(image.data if isinstance(image, Tensor) else image) == 3
    _, perturbed = perturbed_probabilities(net, image, current_hints, cfg, seed)
    pairs, stacks = [], []
    for b in range(perturbed.shape[1]):
        stack = grade_stack(perturbed[:, b], cfg)
        stacks.append(stack)
        try:
            pairs.append(distill_hints(stack, cfg.n_grades))
        except DegenerateInstance:
            C, H, W = stack.grades.shape[1:]
            logger.warning("degenerate perturbation set for instance %d; using null hints", b)
            pairs.append(null_hints(C, H, W))
    if single:
        out = pairs[0]
        stacks_out = stacks[0]
    else:
        out = HintPair(hp=np.stack([p.hp for p in pairs]), hr=np.stack([p.hr for p in pairs]))
        stacks_out = stacks
    return (out, stacks_out) if return_stack else out


def spearman(a, b) -> float:
    """Spearman rank correlation with average ranks for ties.

    Identical inputs give exactly 1.0. Returns ``nan`` when either input is
    constant.
    """
    from scipy.stats import rankdata

    ra = rankdata(np.ravel(a))
    rb = rankdata(np.ravel(b))
    ra -= ra.mean()
    rb -= rb.mean()
    da, db = float(ra @ ra), float(rb @ rb)
    if da == 0 or db == 0:
        return float("nan")
    num = float(ra @ rb)
    if da == db == num:
        return 1.0
    return num / np.sqrt(da * db)


@dataclass
class RankProbe:
    correlations: np.ndarray
    stable_fraction: Optional[float]
    stack: GradeStack


def probe_rank(net, image, hints: HintPair, cfg: PerturbConfig, seed, label: Optional[np.ndarray] = None) -> RankProbe:
    """Rank agreement between the clean pass and each perturbed pass for one image.

    ``correlations[n]`` is the Spearman correlation of foreground log-odds over
    all pixels. ``stable_fraction`` is the share of ground-truth foreground
    pixels (of their own class) whose grade stays at or above ``L - 2`` under
    every draw.
    """
    clean, perturbed = perturbed_probabilities(net, image, hints, cfg, seed)
    s_clean = probs_to_logodds(clean[0, 1:], cfg.prob_clamp_eps)
    corr = np.array([spearman(s_clean, probs_to_logodds(p[0, 1:], cfg.prob_clamp_eps)) for p in perturbed])
    stack = grade_stack(perturbed[:, 0], cfg)
    stable = None
    if label is not None:
        C = s_clean.shape[0]
        onehot = np.stack([label == c + 1 for c in range(C)])
        if onehot.any():
            kept = np.all(stack.grades >= cfg.n_grades - 2, axis=0)
            stable = float(kept[onehot].mean())
    return RankProbe(corr, stable, stack)

"""Multi-phase self-evolution: train, regenerate hints, grow the dataset, repeat.

Phase 1 trains on every source image paired with null hints. Each later phase
asks the previous model for fresh hints on every source image (feeding it the
image's previous hints), appends those ``(image, hints, label)`` tuples to the
dataset, and continues training from the previous weights on the union.
"""

from __future__ import annotations

import csv
import logging
import math
import tempfile
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from rankseg.errors import ConfigError, NumericAbort
from rankseg.hints import HintPair, null_hints
from rankseg.losses import LossConfig, dice_loss, one_hot, squeeze_loss, total_loss
from rankseg.metrics import evaluate
from rankseg.ndarr import Tensor, add_gaussian_noise, concat, no_grad, softmax_channels
from rankseg.ndarr.optim import AdamState, adam_step
from rankseg.rankcore import PerturbConfig, generate_hints, uncertainty_region
from rankseg.segnet import SegNet, SegNetConfig

logger = logging.getLogger(__name__)

HINT_BATCH = 8


@dataclass(frozen=True)
class EvolutionConfig:
    n_phases: int = 3
    iters_per_phase: int = 300
    batch_size: int = 4
    lr: float = 1e-3
    perturb: PerturbConfig = PerturbConfig()
    loss: LossConfig = LossConfig()
    seed: int = 0
    # recursion depth at inference; None means n_phases
    infer_iters: Optional[int] = None
    # "uniform" over all phases' entries, or "newest" phase only
    sampling: str = "uniform"
    widths: tuple = (16, 32, 64)
    dump_dir: Optional[str] = None

    def __post_init__(self):
        if self.n_phases < 1:
            raise ConfigError("n_phases must be >= 1")
        if self.iters_per_phase < 0 or self.batch_size < 1:
            raise ConfigError("iters_per_phase must be >= 0 and batch_size >= 1")
        if self.sampling not in ("uniform", "newest"):
            raise ConfigError(f"unknown sampling mode {self.sampling!r}")
        if self.infer_iters is not None and self.infer_iters < 1:
            raise ConfigError("infer_iters must be >= 1")

    @property
    def inference_iters(self) -> int:
        return self.infer_iters or self.n_phases


@dataclass
class Entry:
    image: np.ndarray
    hints: HintPair
    label: np.ndarray
    phase: int
    source_index: int


@dataclass
class PhaseDataset:
    entries: list
    phase: int
    n_classes: int

    def __len__(self) -> int:
        return len(self.entries)

    def latest(self) -> list:
        return [e for e in self.entries if e.phase == self.phase]


def init_phase1(source_images, labels, n_classes: int = 3) -> PhaseDataset:
    """Every source image with null hints (empty core, full support)."""
    images = np.asarray(source_images, dtype=np.float32)
    if images.shape[0] == 0:
        raise ConfigError("init_phase1 needs at least one source image")
    if images.ndim == 3:
        images = images[:, None]
    H, W = images.shape[-2:]
    entries = [
        Entry(images[i], null_hints(n_classes, H, W), np.asarray(labels[i], dtype=np.uint8), 1, i)
        for i in range(images.shape[0])
    ]
    return PhaseDataset(entries, 1, n_classes)


@dataclass
class TrainResult:
    net: SegNet
    state: AdamState
    log: list = field(default_factory=list)

    @property
    def losses(self) -> np.ndarray:
        return np.array([row[4] for row in self.log])


def _step_rng(cfg: EvolutionConfig, phase: int, it: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, phase, it])


def train_phase(net_init: SegNet, dataset: PhaseDataset, cfg: EvolutionConfig, phase: Optional[int] = None,
                state: Optional[AdamState] = None, start_iter: int = 0, n_iters: Optional[int] = None) -> TrainResult:
    """Optimise ``dice + alpha * squeeze`` on minibatches drawn from ``dataset``.

    ``net_init`` is copied, never modified. Each iteration draws its batch and
    noise from a generator keyed on ``(seed, phase, iteration)``, so a run can
    be resumed from ``start_iter`` with a saved optimizer state and reproduce
    an uninterrupted run exactly.
    """
    if len(dataset) == 0:
        raise ConfigError("train_phase needs a non-empty dataset")
    phase = dataset.phase if phase is None else phase
    n_iters = cfg.iters_per_phase if n_iters is None else n_iters
    net = net_init.copy()
    params = net.parameters()
    state = state if state is not None else AdamState()
    pool = dataset.entries if cfg.sampling == "uniform" else dataset.latest()
    C1 = dataset.n_classes + 1
    lc, pc = cfg.loss, cfg.perturb
    result = TrainResult(net, state)

    for it in range(start_iter, start_iter + n_iters):
        rng = _step_rng(cfg, phase, it)
        idx = rng.choice(len(pool), size=min(cfg.batch_size, len(pool)), replace=False)
        batch = [pool[i] for i in idx]
        images = np.stack([e.image for e in batch])
        hints = HintPair(np.stack([e.hints.hp for e in batch]), np.stack([e.hints.hr for e in batch]))
        target = one_hot(np.stack([e.label for e in batch]), C1)
        noise_seed = int(rng.integers(2**63))

        feats = net.encode(images, hints)
        probs = softmax_channels(net.decode(feats))
        dice = dice_loss(probs, target, lc.dice_smooth, lc.dice_include_background)
        if lc.alpha > 0:
            b = len(batch)
            draws = min(lc.squeeze_draws or pc.n_perturb, pc.n_perturb)
            noisy = add_gaussian_noise(concat([feats] * draws, axis=0), pc.sigma, noise_seed)
            p_noisy = softmax_channels(net.decode(noisy))
            perturbed = [p_noisy[n * b:(n + 1) * b] for n in range(draws)]
            omega = uncertainty_region(hints).global_
            squeeze = squeeze_loss(probs, perturbed, omega, lc.squeeze_eps, lc.stop_grad_perturbed)
            if draws < pc.n_perturb:
                squeeze = squeeze * (pc.n_perturb / draws)
        else:
            squeeze = Tensor(0.0, dtype=dice.dtype)
        loss = total_loss(dice, squeeze, lc.alpha)
        value = float(loss.data)
        if not math.isfinite(value):
            dump = _dump_batch(cfg, phase, it, images, hints, target)
            raise NumericAbort(f"non-finite loss at phase {phase}, iteration {it}; batch dumped to {dump}", dump)

        for p in params:
            p.grad = None
        loss.backward()
        adam_step(params, [p.grad for p in params], state, lr=cfg.lr)
        result.log.append((phase, it, float(dice.data), float(squeeze.data), value))
    return result


def _dump_batch(cfg, phase, it, images, hints, target) -> Path:
    base = Path(cfg.dump_dir or tempfile.gettempdir())
    base.mkdir(parents=True, exist_ok=True)
    path = base / f"nan_batch_phase{phase}_iter{it}.npz"
    np.savez(path, images=images, hp=hints.hp, hr=hints.hr, target=target)
    return path


def refresh_hints(net: SegNet, entries: Sequence[Entry], perturb: PerturbConfig, seed, phase: int) -> list:
    """New hints for each entry, feeding the entry's current hints to ``net``."""
    out = []
    for lo in range(0, len(entries), HINT_BATCH):
        chunk = entries[lo:lo + HINT_BATCH]
        images = np.stack([e.image for e in chunk])
        current = HintPair(np.stack([e.hints.hp for e in chunk]), np.stack([e.hints.hr for e in chunk]))
        new = generate_hints(net, images, current, perturb, seed=[seed, phase, 1, lo])
        out.extend(HintPair(new.hp[i], new.hr[i]) for i in range(len(chunk)))
    return out


def advance_phase(net: SegNet, prev: PhaseDataset, cfg: EvolutionConfig, hints: Optional[list] = None) -> PhaseDataset:
    """Append one ``(image, new hints, label)`` tuple per source image."""
    latest = prev.latest()
    k = prev.phase + 1
    if hints is None:
        hints = refresh_hints(net, latest, cfg.perturb, cfg.seed, k)
    new = [Entry(e.image, h, e.label, k, e.source_index) for e, h in zip(latest, hints)]
    return PhaseDataset(prev.entries + new, k, prev.n_classes)


def predict(net: SegNet, images, hints: HintPair) -> np.ndarray:
    with no_grad():
        return softmax_channels(net.forward(images, hints)).data


def recursive_inference(net: SegNet, image, perturb: PerturbConfig, n_iters: int, seed=0):
    """Iterate prediction with self-generated hints; return final labels and hints used.

    Iteration 1 uses null hints. Iteration ``i > 1`` uses hints generated from
    the perturbed passes of iteration ``i - 1``. Accepts ``[1, H, W]`` or a
    batch ``[B, 1, H, W]``.
    """
    images = np.asarray(image, dtype=np.float32)
    single = images.ndim == 3
    if single:
        images = images[None]
    B, _, H, W = images.shape
    C = net.config.n_classes
    hints = HintPair(np.zeros((B, C, H, W), np.uint8), np.ones((B, C, H, W), np.uint8))
    used = [hints]
    probs = predict(net, images, hints)
    for i in range(2, n_iters + 1):
        hints = generate_hints(net, images, hints, perturb, seed=[int(seed), i])
        used.append(hints)
        probs = predict(net, images, hints)
    labels = probs.argmax(axis=1).astype(np.uint8)
    if single:
        return labels[0], [HintPair(h.hp[0], h.hr[0]) for h in used]
    return labels, used


def infer_batched(net: SegNet, images, perturb: PerturbConfig, n_iters: int, seed=0, batch: int = HINT_BATCH) -> np.ndarray:
    out = []
    for lo in range(0, len(images), batch):
        labels, _ = recursive_inference(net, images[lo:lo + batch], perturb, n_iters, seed=seed + lo)
        out.append(labels)
    return np.concatenate(out)


@dataclass
class PhaseMetrics:
    phase: int
    mean_dice: float
    mean_hd95: float
    mean_omega_px: float
    wall_seconds: float


@dataclass
class EvolutionResult:
    net: SegNet
    metrics: list
    dataset: PhaseDataset
    train_log: list
    nets: list = field(default_factory=list)


def run_evolution(source_images, labels, cfg: EvolutionConfig, val_images=None, val_labels=None,
                  n_classes: int = 3, on_phase: Optional[Callable] = None) -> EvolutionResult:
    """Run all phases; record per-phase validation Dice/HD95 and hint-gap size.

    ``mean_omega_px`` for phase ``k`` is the mean size of the uncertainty region
    of the hints model ``k`` produces for the source images. Validation uses
    ``min(k, inference_iters)`` recursion steps for model ``k``.
    ``on_phase(k, net, state, metrics)`` is called after each phase.
    """
    net = SegNet(SegNetConfig(n_classes=n_classes, widths=cfg.widths, seed=cfg.seed))
    ds = init_phase1(source_images, labels, n_classes)
    metrics, log, nets = [], [], []
    pending = None
    for k in range(1, cfg.n_phases + 1):
        t0 = time.perf_counter()
        if k > 1:
            ds = advance_phase(net, ds, cfg, hints=pending)
        res = train_phase(net, ds, cfg, phase=k)
        net = res.net
        nets.append(net)
        log.extend(res.log)
        pending = refresh_hints(net, ds.latest(), cfg.perturb, cfg.seed, k + 1)
        omega = float(np.mean([uncertainty_region(h).count for h in pending]))
        dice = hd = math.nan
        if val_images is not None and len(val_images):
            preds = infer_batched(net, val_images, cfg.perturb, min(k, cfg.inference_iters), seed=cfg.seed)
            report = evaluate({i: p for i, p in enumerate(preds)}, {i: l for i, l in enumerate(val_labels)}, n_classes)
            dice, hd = report.mean_dice(), report.mean_hd95()
        m = PhaseMetrics(k, dice, hd, omega, time.perf_counter() - t0)
        metrics.append(m)
        logger.info("phase %d: dice %.4f hd95 %.3f omega %.1f px (%.1fs)", k, dice, hd, omega, m.wall_seconds)
        if on_phase is not None:
            on_phase(k, net, res.state, m)
    return EvolutionResult(net, metrics, ds, log, nets)


# -- output files -------------------------------------------------------------

METRIC_FIELDS = ("phase", "mean_dice", "mean_hd95", "mean_omega_px")


def write_metrics_csv(path, metrics: Sequence[PhaseMetrics]) -> None:
    """Per-phase metrics; wall-clock times go to :func:`write_timings_csv`."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for m in metrics:
            w.writerow([m.phase, repr(m.mean_dice), repr(m.mean_hd95), repr(m.mean_omega_px)])


def write_timings_csv(path, metrics: Sequence[PhaseMetrics]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("phase", "wall_seconds"))
        for m in metrics:
            w.writerow([m.phase, f"{m.wall_seconds:.3f}"])


def write_train_log(path, log) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("phase", "iteration", "dice", "squeeze", "total"))
        for phase, it, d, s, t in log:
            w.writerow([phase, it, repr(d), repr(s), repr(t)])

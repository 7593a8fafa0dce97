"""Dice and HD95 for 2-D label maps.

Boundary pixels are mask pixels with at least one 8-neighbour outside the mask
(pixels beyond the image border count as outside). HD95 pools the directed
nearest-boundary distances in both directions and takes the nearest-rank 95th
percentile, i.e. element ``ceil(0.95 n)`` (1-based) of the sorted list.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

import numpy as np
from scipy import ndimage

from rankseg.errors import DimensionError, RanksegError, ValidationError

_EIGHT = np.ones((3, 3), dtype=bool)


class MissingInputs(RanksegError):
    def __init__(self, missing):
        self.missing = list(missing)
        super().__init__("missing inputs:\n  " + "\n  ".join(self.missing))


def _check(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise DimensionError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return pred, gt


def dice_score(pred, gt) -> float:
    pred, gt = _check(pred, gt)
    total = pred.sum() + gt.sum()
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(pred, gt).sum() / total)


def boundary(mask) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    return mask & ~ndimage.binary_erosion(mask, structure=_EIGHT, border_value=0)


def surface_distances(pred, gt) -> np.ndarray:
    """Pooled directed distances pred->gt and gt->pred between boundary pixels."""
    bp, bg = boundary(pred), boundary(gt)
    to_gt = ndimage.distance_transform_edt(~bg)
    to_pred = ndimage.distance_transform_edt(~bp)
    return np.concatenate([to_gt[bp], to_pred[bg]])


def nearest_rank(values: np.ndarray, q: float) -> float:
    v = np.sort(np.asarray(values, dtype=np.float64))
    k = max(1, math.ceil(q / 100.0 * v.size))
    return float(v[k - 1])


def hd95(pred, gt) -> Optional[float]:
    """95th-percentile Hausdorff distance in pixels.

    ``0.0`` when both masks are empty, ``None`` (undefined) when exactly one is.
    """
    pred, gt = _check(pred, gt)
    if not pred.any() and not gt.any():
        return 0.0
    if not pred.any() or not gt.any():
        return None
    return nearest_rank(surface_distances(pred, gt), 95)


def hausdorff(pred, gt) -> Optional[float]:
    pred, gt = _check(pred, gt)
    if not pred.any() and not gt.any():
        return 0.0
    if not pred.any() or not gt.any():
        return None
    return float(surface_distances(pred, gt).max())


# -- reports --------------------------------------------------------------

@dataclass
class EvalRow:
    image_id: str
    cls: int
    dice: float
    hd95: Optional[float]

    @property
    def hd95_defined(self) -> bool:
        return self.hd95 is not None


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    n_classes: int = 0

    def per_image_dice(self) -> np.ndarray:
        """Mean foreground Dice of each image, in row order."""
        ids = list(dict.fromkeys(r.image_id for r in self.rows))
        return np.array([np.mean([r.dice for r in self.rows if r.image_id == i]) for i in ids])

    def aggregates(self) -> dict:
        """Mean and population std of per-image values, per class and overall.

        Undefined HD95 values are excluded and counted.
        """
        out = {}
        for c in range(1, self.n_classes + 1):
            rows = [r for r in self.rows if r.cls == c]
            d = np.array([r.dice for r in rows])
            h = np.array([r.hd95 for r in rows if r.hd95_defined])
            out[c] = {
                "dice_mean": float(d.mean()) if d.size else math.nan,
                "dice_std": float(d.std()) if d.size else math.nan,
                "hd95_mean": float(h.mean()) if h.size else math.nan,
                "hd95_std": float(h.std()) if h.size else math.nan,
                "hd95_undefined": len(rows) - int(h.size),
            }
        dice = np.array([r.dice for r in self.rows])
        hds = np.array([r.hd95 for r in self.rows if r.hd95_defined])
        out["all"] = {
            "dice_mean": float(dice.mean()) if dice.size else math.nan,
            "dice_std": float(dice.std()) if dice.size else math.nan,
            "hd95_mean": float(hds.mean()) if hds.size else math.nan,
            "hd95_std": float(hds.std()) if hds.size else math.nan,
            "hd95_undefined": len(self.rows) - int(hds.size),
        }
        return out

    def mean_dice(self) -> float:
        return self.aggregates()["all"]["dice_mean"]

    def mean_hd95(self) -> float:
        return self.aggregates()["all"]["hd95_mean"]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["image_id", "class", "dice", "hd95", "hd95_defined"])
            for r in self.rows:
                w.writerow([r.image_id, r.cls, repr(r.dice), "" if r.hd95 is None else repr(r.hd95), int(r.hd95_defined)])

    def summary(self) -> str:
        lines = []
        for key, agg in self.aggregates().items():
            name = "all" if key == "all" else f"class {key}"
            lines.append(
                f"{name}: dice {agg['dice_mean']:.4f} +/- {agg['dice_std']:.4f}, "
                f"hd95 {agg['hd95_mean']:.3f} +/- {agg['hd95_std']:.3f} px "
                f"({agg['hd95_undefined']} undefined)"
            )
        return "\n".join(lines)


def evaluate(predictions: Mapping[str, np.ndarray], labels: Mapping[str, np.ndarray], n_classes: int) -> EvalReport:
    """Per-image, per-foreground-class Dice and HD95 for aligned label maps."""
    if not labels:
        raise ValidationError("evaluate needs at least one labelled image")
    missing = [k for k in labels if k not in predictions]
    if missing:
        raise MissingInputs(missing)
    report = EvalReport(n_classes=n_classes)
    for image_id, gt in labels.items():
        pred = predictions[image_id]
        for c in range(1, n_classes + 1):
            report.rows.append(EvalRow(image_id, c, dice_score(pred == c, gt == c), hd95(pred == c, gt == c)))
    return report


def evaluate_dir(pred_dir, data_dir, n_classes: int, split: Optional[str] = None) -> EvalReport:
    """Evaluate prediction files in ``pred_dir`` against a dataset manifest."""
    from rankseg.synthshift import read_array, read_manifest

    data_dir, pred_dir = Path(data_dir), Path(pred_dir)
    entries = [e for e in read_manifest(data_dir / "manifest.csv") if split is None or e.split == split]
    missing = [str(pred_dir / e.filename) for e in entries if not (pred_dir / e.filename).exists()]
    if missing:
        raise MissingInputs(missing)
    labels = {e.filename: read_array(data_dir / "labels" / e.filename) for e in entries}
    preds = {e.filename: read_array(pred_dir / e.filename) for e in entries}
    return evaluate(preds, labels, n_classes)

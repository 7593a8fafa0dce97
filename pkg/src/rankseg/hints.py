"""Spatial hint masks fed to the network alongside the image."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from rankseg.errors import DimensionError, ValidationError


@dataclass(frozen=True)
class HintPair:
    """Per-class binary masks, shaped ``[C, H, W]`` (or ``[B, C, H, W]`` for a batch).

    ``hp`` is the stable high-probability core, ``hr`` the stable
    non-background support.
    """

    hp: np.ndarray
    hr: np.ndarray

    def __post_init__(self):
        if self.hp.shape != self.hr.shape:
            raise DimensionError(f"hint shapes differ: hp {self.hp.shape} vs hr {self.hr.shape}")

    @property
    def shape(self) -> tuple:
        return self.hp.shape

    def validate(self) -> "HintPair":
        for name, m in (("hp", self.hp), ("hr", self.hr)):
            if not np.isin(m, (0, 1)).all():
                raise ValidationError(f"hint mask {name} must be binary")
        return self

    def is_nested(self) -> bool:
        """True when hp is contained in hr everywhere."""
        return bool(np.all(self.hp <= self.hr))

    def __eq__(self, other) -> bool:
        if not isinstance(other, HintPair):
            return NotImplemented
        return np.array_equal(self.hp, other.hp) and np.array_equal(self.hr, other.hr)


def null_hints(n_classes: int, height: int, width: int) -> HintPair:
    """The no-information hint pair: empty core, full support."""
    return HintPair(
        hp=np.zeros((n_classes, height, width), dtype=np.uint8),
        hr=np.ones((n_classes, height, width), dtype=np.uint8),
    )


def stack_hints(pairs) -> HintPair:
    pairs = list(pairs)
    return HintPair(hp=np.stack([p.hp for p in pairs]), hr=np.stack([p.hr for p in pairs]))

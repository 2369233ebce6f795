"""Shared evaluation knobs: diagnostic oracle modes and memory-bank subsets."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from .errors import ValidationError


class OracleMode(Enum):
    """Diagnostic modes that inject groundtruth into inference.

    box       restrict the matcher's search to the groundtruth box
    mask      update memory from the groundtruth mask instead of the
              prediction (the prediction is still produced and scored)
    box_mask  both at once
    """

    NONE = "none"
    BOX = "box"
    MASK = "mask"
    BOX_MASK = "box+mask"

    @property
    def use_box(self) -> bool:
        return self in (OracleMode.BOX, OracleMode.BOX_MASK)

    @property
    def use_mask(self) -> bool:
        return self in (OracleMode.MASK, OracleMode.BOX_MASK)

    @classmethod
    def parse(cls, text: str) -> "OracleMode":
        for m in cls:
            if m.value == text:
                return m
        raise ValidationError(f"unknown oracle mode {text!r}; expected one of "
                              f"{[m.value for m in cls]}")


@dataclass(frozen=True)
class BankCombo:
    """Which of the three memory banks the matcher may attend to."""

    reference: bool = True
    global_: bool = True
    local: bool = True

    def __post_init__(self):
        if not (self.reference or self.global_ or self.local):
            raise ValidationError("at least one memory bank must be enabled")

    @property
    def name(self) -> str:
        return "".join(c for c, on in zip("rgl", (self.reference, self.global_,
                                                  self.local)) if on)

    @classmethod
    def parse(cls, text: str) -> "BankCombo":
        letters = set(text.lower())
        if not letters or letters - set("rgl"):
            raise ValidationError(
                f"bank combo must be a non-empty subset of 'rgl', got {text!r}")
        return cls("r" in letters, "g" in letters, "l" in letters)

    @classmethod
    def all_combos(cls) -> tuple["BankCombo", ...]:
        """The 7 valid combinations, singles first, full combo last."""
        return (cls(True, False, False), cls(False, True, False),
                cls(False, False, True), cls(True, True, False),
                cls(True, False, True), cls(False, True, True),
                cls(True, True, True))


ALL_BANKS = BankCombo(True, True, True)


@dataclass(frozen=True)
class Box:
    """Pixel box, half-open: rows [y0, y1), cols [x0, x1)."""

    y0: int
    x0: int
    y1: int
    x1: int

    def __post_init__(self):
        if self.y1 <= self.y0 or self.x1 <= self.x0:
            raise ValidationError(f"empty or inverted box: {self}")

    @property
    def area(self) -> int:
        return (self.y1 - self.y0) * (self.x1 - self.x0)

    @classmethod
    def from_mask(cls, binary) -> "Box | None":
        import numpy as np
        ys, xs = np.nonzero(np.asarray(binary))
        if ys.size == 0:
            return None
        return cls(int(ys.min()), int(xs.min()),
                   int(ys.max()) + 1, int(xs.max()) + 1)

"""Masked, normalized color-space loss between two semantic images."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import INVALID, SKY, DYNAMIC_IDS, NUM_CLASSES, Palette, SemanticImage
from .errors import DimensionMismatchError, NoValidPixelsError


@dataclass(frozen=True)
class LossTermKind:
    name: str = "l2"
    delta: float = 0.3

    def __post_init__(self):
        if self.name not in ("l2", "huber"):
            raise ValueError(f"unknown loss term {self.name!r}")
        if self.name == "huber" and not self.delta > 0:
            raise ValueError("huber delta must be positive")

    def __str__(self):
        return "l2" if self.name == "l2" else f"huber({self.delta:g})"


L2 = LossTermKind("l2")


def Huber(delta: float = 0.3) -> LossTermKind:
    return LossTermKind("huber", delta)


@dataclass(frozen=True, eq=False)
class ValidityMask:
    bits: np.ndarray

    @property
    def width(self):
        return self.bits.shape[1]

    @property
    def height(self):
        return self.bits.shape[0]


def valid_classes(sky_valid: bool = False) -> np.ndarray:
    """Boolean lookup over class ids: may this class contribute to the loss?"""
    ok = np.ones(NUM_CLASSES, dtype=bool)
    ok[INVALID] = False
    ok[list(DYNAMIC_IDS)] = False
    ok[SKY] = sky_valid
    return ok


def _check_dims(a: SemanticImage, b: SemanticImage):
    if a.shape != b.shape:
        raise DimensionMismatchError(f"image shapes differ: {a.shape} vs {b.shape}")


def validity_mask(a: SemanticImage, b: SemanticImage, sky_valid: bool = False) -> ValidityMask:
    _check_dims(a, b)
    ok = valid_classes(sky_valid)
    return ValidityMask(ok[a.grid] & ok[b.grid])


def beta(V: ValidityMask) -> float:
    count = int(np.count_nonzero(V.bits))
    if count == 0:
        raise NoValidPixelsError("validity mask is empty")
    return V.bits.size / count


def pixel_term(kind: LossTermKind, a, b) -> float:
    diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    sq = float(diff @ diff)
    if kind.name == "l2":
        return sq
    norm = sq ** 0.5
    if norm < kind.delta:
        return 0.5 * sq
    return kind.delta * (norm - kind.delta / 2.0)


class LossTable:
    """Class-pair lookup of the pixel term; the fast path used by the optimizer.

    ``table[a * NUM_CLASSES + b]`` is the term for classes a, b (0 when the pair
    is masked) and ``valid`` flags the pairs that count toward the mask.
    """

    def __init__(self, kind: LossTermKind = L2, palette: Palette = None, sky_valid: bool = False):
        palette = palette or Palette.default()
        ok = valid_classes(sky_valid)
        table = np.zeros((NUM_CLASSES, NUM_CLASSES))
        for i in range(NUM_CLASSES):
            for j in range(NUM_CLASSES):
                if ok[i] and ok[j]:
                    table[i, j] = pixel_term(kind, palette[i], palette[j])
        self.kind = kind
        self.table = table.ravel()
        self.valid = (ok[:, None] & ok[None, :]).ravel()
        self.max_term = float(table.max())

    def __call__(self, rendered: np.ndarray, target: np.ndarray) -> float:
        if rendered.shape != target.shape:
            raise DimensionMismatchError(f"image shapes differ: {rendered.shape} vs {target.shape}")
        pair = rendered.astype(np.intp) * NUM_CLASSES + target
        count = int(np.count_nonzero(self.valid[pair]))
        if count == 0:
            raise NoValidPixelsError("no pixel is valid in both images")
        return (pair.size / count) * float(self.table[pair].sum())


def masked_loss(rendered: SemanticImage, target: SemanticImage, kind: LossTermKind = L2,
                sky_valid: bool = False) -> float:
    """beta * sum over valid pixels of the color-space pixel term."""
    _check_dims(rendered, target)
    return LossTable(kind, rendered.palette, sky_valid)(rendered.grid, target.grid)

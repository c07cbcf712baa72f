"""Binary morphology for curvilinear MRC cleanup.

Everything outside the frame is background. Components and holes use
4-connectivity.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import NumericError

FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


@dataclass(frozen=True)
class StructuringElement:
    radius: int

    @property
    def footprint(self) -> np.ndarray:
        r = self.radius
        yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
        return (xx**2 + yy**2) <= r**2

    @property
    def offsets(self) -> set[tuple[int, int]]:
        r = self.radius
        span = range(-r, r + 1)
        return {(dx, dy) for dx in span for dy in span if dx * dx + dy * dy <= r * r}


def disk(radius: int) -> StructuringElement:
    return StructuringElement(int(radius))


@dataclass(frozen=True)
class MrcConfig:
    open_radius: int = 2
    min_component_area: int = 20
    min_hole_area: int = 20

    def __post_init__(self):
        if min(self.open_radius, self.min_component_area, self.min_hole_area) < 0:
            raise ValueError("MRC parameters must be nonnegative")


def erode(mask: np.ndarray, se: StructuringElement) -> np.ndarray:
    mask = np.asarray(mask).astype(bool)
    if se.radius == 0:
        return mask.astype(np.uint8)
    return ndimage.binary_erosion(mask, structure=se.footprint, border_value=0).astype(np.uint8)


def dilate(mask: np.ndarray, se: StructuringElement) -> np.ndarray:
    mask = np.asarray(mask).astype(bool)
    if se.radius == 0:
        return mask.astype(np.uint8)
    return ndimage.binary_dilation(mask, structure=se.footprint, border_value=0).astype(np.uint8)


def open(mask: np.ndarray, se: StructuringElement) -> np.ndarray:  # noqa: A001 - morphology name
    return dilate(erode(mask, se), se)


def remove_small_components(mask: np.ndarray, min_area: int) -> np.ndarray:
    mask = np.asarray(mask).astype(bool)
    if min_area <= 1 or not mask.any():
        return mask.astype(np.uint8)
    labels, n = ndimage.label(mask, structure=FOUR_CONNECTED)
    sizes = np.bincount(labels.ravel(), minlength=n + 1)
    keep = sizes >= min_area
    keep[0] = False
    return keep[labels].astype(np.uint8)


def fill_small_holes(mask: np.ndarray, min_area: int) -> np.ndarray:
    """Fill background components that do not touch the frame and have area < min_area."""
    mask = np.asarray(mask).astype(bool)
    if min_area <= 1:
        return mask.astype(np.uint8)
    labels, n = ndimage.label(~mask, structure=FOUR_CONNECTED)
    if n == 0:
        return mask.astype(np.uint8)
    sizes = np.bincount(labels.ravel(), minlength=n + 1)
    border = np.unique(np.concatenate([labels[0], labels[-1], labels[:, 0], labels[:, -1]]))
    fill = sizes < min_area
    fill[0] = False
    fill[border] = False
    return (mask | fill[labels]).astype(np.uint8)


MAX_PASSES = 16


def _cleanup_pass(mask: np.ndarray, cfg: MrcConfig, se: StructuringElement) -> np.ndarray:
    clean = remove_small_components(open(mask, se), cfg.min_component_area)
    return fill_small_holes(clean, cfg.min_hole_area)


def mrc_cleanup(mask: np.ndarray, cfg: MrcConfig = MrcConfig()) -> np.ndarray:
    """Opening, speck removal and pinhole filling, repeated until nothing changes.

    Filling a hole can leave pixels a disk of ``open_radius`` cannot reach,
    and opening can pinch off new specks, so a single pass is not always
    stable. The returned mask is a fixed point of this function.
    """
    se = disk(cfg.open_radius)
    cur = _cleanup_pass(mask, cfg, se)
    for _ in range(MAX_PASSES):
        nxt = _cleanup_pass(cur, cfg, se)
        if np.array_equal(nxt, cur):
            return cur
        cur = nxt
    raise NumericError(f"MRC cleanup did not settle within {MAX_PASSES} passes")

"""Printability metrics: EPE at measurement sites, PV band area, image L2."""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .layout import LayoutRaster, PolygonSet, rasterize

DEFAULT_SPACING_NM = 40.0
EVAL_THRESHOLD_NM = 15.0
TRAIN_THRESHOLD_NM = 3.0

# Edge order within a rect; edge_id = 4 * rect_index + side.
_SIDES = ((0, -1), (1, 0), (0, 1), (-1, 0))  # bottom, right, top, left as (nx, ny)


@dataclass(frozen=True)
class EpeSite:
    position: tuple[float, float]  # (x, y) in px, on a pixel boundary along the normal axis
    normal: tuple[int, int]
    edge_id: int

    @property
    def boundary(self) -> int:
        """Pixel-boundary index of the target edge along the normal axis."""
        x, y = self.position
        return int(round(x)) if self.normal[0] else int(round(y))

    @property
    def scan_index(self) -> int:
        """Row (vertical edges) or column (horizontal edges) of the scan line."""
        x, y = self.position
        return int(math.floor(y)) if self.normal[0] else int(math.floor(x))


@dataclass
class EpeReport:
    sites: list[EpeSite]
    displacement: np.ndarray  # signed nm per site
    threshold: float
    violations: int = field(init=False)

    def __post_init__(self):
        self.displacement = np.asarray(self.displacement, dtype=float)
        self.violations = int(np.count_nonzero(np.abs(self.displacement) > self.threshold))


@dataclass
class PvbReport:
    band: np.ndarray
    area: int = field(init=False)

    def __post_init__(self):
        self.area = int(np.count_nonzero(self.band))


def _positions(length: float, spacing: float) -> list[float]:
    if length < spacing:
        return [length / 2]
    out = []
    t = spacing / 2
    while t <= length - spacing / 2 + 1e-9:
        out.append(t)
        t += spacing
    return out


def epe_sites(polys: PolygonSet, spacing: float = DEFAULT_SPACING_NM, pixel_size: float = 1.0) -> list[EpeSite]:
    """Measurement sites every ``spacing`` nm, ``spacing/2`` in from each corner.

    Sites that fall on edges hidden inside the union of rects are dropped.
    """
    if spacing < pixel_size:
        raise ValueError("site spacing must be at least one pixel")
    if not polys.rects:
        return []
    union = rasterize(polys, pixel_size).grid
    ny, nx = union.shape

    def on(r, c):
        return 0 <= r < ny and 0 <= c < nx and union[r, c] == 1

    sites = []
    ps = pixel_size
    for ri, (x, y, w, h) in enumerate(polys.rects):
        left = math.floor(x / ps - 0.5) + 1
        right = math.ceil((x + w) / ps - 0.5)
        bottom = math.floor(y / ps - 0.5) + 1
        top = math.ceil((y + h) / ps - 0.5)
        if right <= left or top <= bottom:
            continue
        for side, normal in enumerate(_SIDES):
            vertical = normal[0] != 0
            length = h if vertical else w
            for t in _positions(length, spacing):
                if vertical:
                    row = min(max(math.floor((y + t) / ps), bottom), top - 1)
                    b = right if normal[0] > 0 else left
                    inside, outside = (row, b - 1), (row, b)
                    if normal[0] < 0:
                        inside, outside = (row, b), (row, b - 1)
                    pos = (float(b), row + 0.5)
                else:
                    col = min(max(math.floor((x + t) / ps), left), right - 1)
                    b = top if normal[1] > 0 else bottom
                    inside, outside = (b - 1, col), (b, col)
                    if normal[1] < 0:
                        inside, outside = (b, col), (b - 1, col)
                    pos = (col + 0.5, float(b))
                if on(*inside) and not on(*outside):
                    sites.append(EpeSite(pos, normal, 4 * ri + side))
    return sites


def horizon_px(threshold: float, pixel_size: float) -> int:
    return max(1, int(round(4 * threshold / pixel_size)))


def _scan_profiles(printed: np.ndarray, sites: list[EpeSite], reach: int) -> np.ndarray:
    """Pixel values q(j), j = -reach-1 .. reach, outward along each site normal.

    q(j) samples the pixel whose center lies at (j + 1/2) px outward of the
    target edge; pixels outside the frame read as 0.
    """
    ny, nx = printed.shape
    pad = reach + 2
    padded = np.pad(printed.astype(np.uint8), pad)
    j = np.arange(-reach - 1, reach + 1)
    rows = np.empty((len(sites), j.size), dtype=int)
    cols = np.empty_like(rows)
    for s, site in enumerate(sites):
        nxs, nys = site.normal
        b = site.boundary
        k = site.scan_index
        along = b + j if (nxs + nys) > 0 else b - 1 - j
        if nxs:
            rows[s], cols[s] = k, along
        else:
            rows[s], cols[s] = along, k
    return padded[rows + pad, cols + pad]


def epe_measure(
    printed: np.ndarray, target: LayoutRaster, sites: list[EpeSite], threshold: float = EVAL_THRESHOLD_NM
) -> EpeReport:
    """Signed distance from each target edge to the nearest printed edge of matching polarity.

    Positive displacement means the print extends outside the target. A site
    with no printed edge within 4x threshold reports +horizon.
    """
    printed = np.asarray(printed)
    if printed.shape != target.shape:
        raise ShapeError(f"printed {printed.shape} and target {target.shape} grids differ")
    ps = target.pixel_size
    reach = horizon_px(threshold, ps)
    if not sites:
        return EpeReport([], np.zeros(0), threshold)
    q = _scan_profiles(printed, sites, reach)
    # crossing at offset d: q(d-1) == 1 and q(d) == 0, d in [-reach, reach]
    crossing = (q[:, :-1] == 1) & (q[:, 1:] == 0)
    d = np.arange(-reach, reach + 1)
    # nearest first, outward wins ties
    rank = 2 * np.abs(d) - (d > 0)
    order = np.where(crossing, rank[None, :], np.iinfo(int).max)
    best = np.argmin(order, axis=1)
    found = crossing[np.arange(len(sites)), best]
    disp = np.where(found, d[best], reach) * ps
    return EpeReport(list(sites), disp, threshold)


def pvb_area(inner: np.ndarray, nominal: np.ndarray, outer: np.ndarray) -> PvbReport:
    inner, nominal, outer = (np.asarray(a).astype(bool) for a in (inner, nominal, outer))
    if not (inner.shape == nominal.shape == outer.shape):
        raise ShapeError("corner prints must share a shape")
    band = (inner | nominal | outer) & ~(inner & nominal & outer)
    return PvbReport(band.astype(np.uint8))


def l2_fidelity(printed_soft: np.ndarray, target) -> float:
    grid = target.grid if isinstance(target, LayoutRaster) else np.asarray(target)
    printed_soft = np.asarray(printed_soft, dtype=float)
    if printed_soft.shape != grid.shape:
        raise ShapeError(f"field {printed_soft.shape} and target {grid.shape} differ")
    return float(np.mean((printed_soft - grid) ** 2))


def report_json(epe: EpeReport, pvb: PvbReport | None = None) -> dict:
    return {
        "sites": [
            {"x": s.position[0], "y": s.position[1], "nx": s.normal[0], "ny": s.normal[1], "disp": float(d)}
            for s, d in zip(epe.sites, epe.displacement)
        ],
        "violations": epe.violations,
        "threshold": epe.threshold,
        "pvb_area": None if pvb is None else pvb.area,
    }


def dumps_report(epe: EpeReport, pvb: PvbReport | None = None) -> str:
    return json.dumps(report_json(epe, pvb), sort_keys=True)

"""Rectilinear layouts: parsing, rasterization, input pyramids and PGM raster I/O.

Layout files are line oriented::

    # comment
    FRAME 256 256
    RECT 8 8 16 32

Coordinates are nm with the origin at the lower-left frame corner; raster row
``i`` covers ``y in [i*pixel, (i+1)*pixel)``.
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BoundsError, ConfigError, DataError, LayoutParseError
from .resample import avg_pool

DEFAULT_PIXEL_NM = 1.0


@dataclass(frozen=True)
class PolygonSet:
    rects: tuple[tuple[float, float, float, float], ...]
    frame: tuple[float, float]

    def __post_init__(self):
        fw, fh = self.frame
        if fw <= 0 or fh <= 0:
            raise BoundsError(f"frame must be positive, got {self.frame}")
        for x, y, w, h in self.rects:
            if w <= 0 or h <= 0:
                raise BoundsError(f"rect ({x}, {y}, {w}, {h}) has non-positive size")
            if x < 0 or y < 0 or x + w > fw or y + h > fh:
                raise BoundsError(f"rect ({x}, {y}, {w}, {h}) lies outside frame {fw}x{fh}")

    def translated(self, dx: float, dy: float, frame=None) -> "PolygonSet":
        rects = tuple((x + dx, y + dy, w, h) for x, y, w, h in self.rects)
        return PolygonSet(rects, frame or self.frame)


@dataclass
class LayoutRaster:
    grid: np.ndarray
    pixel_size: float = DEFAULT_PIXEL_NM
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        grid = np.asarray(self.grid)
        if grid.ndim != 2:
            raise DataError(f"raster grid must be 2-D, got shape {grid.shape}")
        if not np.isin(grid, (0, 1)).all():
            raise DataError("raster grid must be binary")
        self.grid = grid.astype(np.uint8)

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape


@dataclass
class RasterPyramid:
    levels: list[LayoutRaster] = field(default_factory=list)
    head_factor: int = 1

    def arrays(self) -> list[np.ndarray]:
        return [lvl.grid for lvl in self.levels]


def parse_layout(text: str) -> PolygonSet:
    frame = None
    rects = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        keyword, *args = line.split()
        keyword = keyword.upper()
        try:
            values = [float(a) for a in args]
        except ValueError:
            raise LayoutParseError(lineno, f"non-numeric field in {raw.strip()!r}") from None
        if keyword == "FRAME":
            if frame is not None:
                raise LayoutParseError(lineno, "duplicate FRAME statement")
            if rects:
                raise LayoutParseError(lineno, "FRAME must precede RECT statements")
            if len(values) != 2:
                raise LayoutParseError(lineno, "FRAME takes exactly 2 fields")
            frame = (values[0], values[1])
            if frame[0] <= 0 or frame[1] <= 0:
                raise LayoutParseError(lineno, "FRAME dimensions must be positive")
        elif keyword == "RECT":
            if frame is None:
                raise LayoutParseError(lineno, "RECT before FRAME")
            if len(values) != 4:
                raise LayoutParseError(lineno, "RECT takes exactly 4 fields")
            x, y, w, h = values
            if w <= 0 or h <= 0:
                raise LayoutParseError(lineno, "RECT width and height must be positive")
            if x < 0 or y < 0 or x + w > frame[0] or y + h > frame[1]:
                raise BoundsError(f"line {lineno}: rect outside frame {frame[0]:g}x{frame[1]:g}")
            rects.append((x, y, w, h))
        else:
            raise LayoutParseError(lineno, f"unknown statement {keyword!r}")
    if frame is None:
        raise LayoutParseError(0, "missing FRAME statement")
    return PolygonSet(tuple(rects), frame)


def format_layout(polys: PolygonSet) -> str:
    lines = [f"FRAME {polys.frame[0]:g} {polys.frame[1]:g}"]
    lines += [f"RECT {x:g} {y:g} {w:g} {h:g}" for x, y, w, h in polys.rects]
    return "\n".join(lines) + "\n"


def load_layout(path) -> PolygonSet:
    return parse_layout(Path(path).read_text(encoding="utf-8"))


def rasterize(polys: PolygonSet, pixel_size: float = DEFAULT_PIXEL_NM) -> LayoutRaster:
    """Set a pixel iff its center lies inside any rect."""
    if pixel_size <= 0:
        raise ConfigError(f"pixel size must be positive, got {pixel_size}")
    fw, fh = polys.frame
    nx, ny = fw / pixel_size, fh / pixel_size
    if not (float(nx).is_integer() and float(ny).is_integer()):
        raise ConfigError(f"frame {fw:g}x{fh:g} nm is not divisible by pixel size {pixel_size:g}")
    nx, ny = int(nx), int(ny)
    grid = np.zeros((ny, nx), dtype=np.uint8)
    centers_x = (np.arange(nx) + 0.5) * pixel_size
    centers_y = (np.arange(ny) + 0.5) * pixel_size
    for x, y, w, h in polys.rects:
        cols = (centers_x > x) & (centers_x < x + w)
        rows = (centers_y > y) & (centers_y < y + h)
        grid[np.ix_(rows, cols)] = 1
    return LayoutRaster(grid, pixel_size)


def binarize_pooled(x: np.ndarray) -> np.ndarray:
    # Tie at exactly 0.5 keeps the feature.
    return (x >= 0.5).astype(np.uint8)


def build_pyramid(raster: LayoutRaster, levels: int = 3, head_factor: int = 1) -> RasterPyramid:
    if levels < 1 or head_factor < 1:
        raise ConfigError("levels and head_factor must be >= 1")
    need = head_factor * 2 ** (levels - 1)
    h, w = raster.shape
    if h % need or w % need:
        raise ConfigError(f"raster {h}x{w} not divisible by head_factor*2^(levels-1)={need}")
    base = raster.grid if head_factor == 1 else binarize_pooled(avg_pool(raster.grid, head_factor))
    grids = [base.astype(np.uint8)]
    for _ in range(1, levels):
        grids.append(binarize_pooled(avg_pool(grids[-1], 2)))
    pixel = raster.pixel_size * head_factor
    return RasterPyramid(
        [LayoutRaster(g, pixel * 2**lvl, raster.origin) for lvl, g in enumerate(grids)],
        head_factor,
    )


def write_pgm(path, grid: np.ndarray) -> None:
    """Write a binary field as 8-bit P5 (0 background, 255 feature)."""
    grid = np.asarray(grid)
    data = np.where(grid > 0, 255, 0).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def write_pgm_gray(path, field_: np.ndarray, vmax: float | None = None) -> None:
    """Write a real field scaled to 0..255 (for intensity previews)."""
    field_ = np.asarray(field_, dtype=float)
    top = vmax if vmax is not None else max(float(field_.max()), 1e-12)
    data = np.clip(np.round(255 * field_ / top), 0, 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read an 8-bit P5 file as a binary field (pixels >= 128 are features)."""
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while raw[pos : pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise DataError(f"{path}: not a binary PGM (P5) file")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise DataError(f"{path}: only 8-bit PGM is supported")
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w)
    return (data >= 128).astype(np.uint8)

"""Synthetic benchmark suites of random Manhattan clips."""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .layout import PolygonSet, format_layout, load_layout

MIN_WIDTH_NM = 24
MIN_SPACE_NM = 24
GRID_NM = 4


@dataclass
class SuiteCase:
    id: str
    layout_path: Path

    def load(self) -> PolygonSet:
        return load_layout(self.layout_path)


def random_clip(rng: np.random.Generator, frame: int = 256, max_rects: int = 10, margin: int | None = None) -> PolygonSet:
    """Random non-overlapping rects honoring the min width/space rule.

    Candidate rects are rejected when their ``MIN_SPACE_NM`` expansion touches
    an accepted rect, so any two rects are separated by at least that gap
    along one axis.
    """
    if margin is None:
        margin = min(24, frame // 8)
    n_target = int(rng.integers(max(1, max_rects // 2), max_rects + 1))
    max_side = max(MIN_WIDTH_NM, frame - 2 * margin)
    rects: list[tuple[int, int, int, int]] = []
    for _ in range(400):
        if len(rects) >= n_target:
            break
        w = GRID_NM * int(rng.integers(MIN_WIDTH_NM // GRID_NM, max(MIN_WIDTH_NM, min(48, max_side)) // GRID_NM + 1))
        h = GRID_NM * int(rng.integers(MIN_WIDTH_NM // GRID_NM, max(MIN_WIDTH_NM, min(160, max_side)) // GRID_NM + 1))
        if rng.random() < 0.5:
            w, h = h, w
        w, h = min(w, max_side), min(h, max_side)
        hi_x = frame - margin - w
        hi_y = frame - margin - h
        if hi_x < margin or hi_y < margin:
            continue
        x = GRID_NM * int(rng.integers(margin // GRID_NM, hi_x // GRID_NM + 1))
        y = GRID_NM * int(rng.integers(margin // GRID_NM, hi_y // GRID_NM + 1))
        s = MIN_SPACE_NM
        clash = any(
            x - s < ox + ow and ox < x + w + s and y - s < oy + oh and oy < y + h + s for ox, oy, ow, oh in rects
        )
        if not clash:
            rects.append((x, y, w, h))
    if not rects:
        side = min(MIN_WIDTH_NM * 2, frame - 2 * margin)
        c = (frame - side) // 2
        rects.append((c, c, side, side))
    return PolygonSet(tuple(tuple(float(v) for v in r) for r in rects), (float(frame), float(frame)))


def min_rule_violations(polys: PolygonSet) -> list[str]:
    """Width/space rule check used to validate generated suites."""
    problems = []
    for i, (x, y, w, h) in enumerate(polys.rects):
        if w < MIN_WIDTH_NM or h < MIN_WIDTH_NM:
            problems.append(f"rect {i} narrower than {MIN_WIDTH_NM} nm")
        for j in range(i):
            ox, oy, ow, oh = polys.rects[j]
            gap_x = max(ox - (x + w), x - (ox + ow))
            gap_y = max(oy - (y + h), y - (oy + oh))
            if max(gap_x, gap_y) < MIN_SPACE_NM:
                problems.append(f"rects {j} and {i} closer than {MIN_SPACE_NM} nm")
    return problems


def generate_suite(n_cases: int, seed: int, out_dir, frame: int = 256, max_rects: int = 10) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(np.random.Philox(key=seed))
    cases = []
    for i in range(n_cases):
        case_id = f"case{i:03d}"
        polys = random_clip(rng, frame, max_rects)
        name = f"{case_id}.lay"
        (out_dir / name).write_text(format_layout(polys), encoding="utf-8")
        cases.append({"id": case_id, "layout": name})
    manifest = {"seed": seed, "frame_nm": frame, "max_rects": max_rects, "cases": cases}
    path = out_dir / "suite.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_suite(path) -> list[SuiteCase]:
    path = Path(path)
    if path.is_dir():
        path = path / "suite.json"
    if not path.exists():
        raise DataError(f"suite manifest not found: {path}")
    manifest = json.loads(path.read_text(encoding="utf-8"))
    cases = [SuiteCase(c["id"], path.parent / c["layout"]) for c in manifest["cases"]]
    ids = [c.id for c in cases]
    if len(set(ids)) != len(ids):
        raise DataError("suite case ids must be unique")
    return cases

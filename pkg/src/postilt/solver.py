"""Pixel ILT: relaxed mask, soft-print objective, analytic gradient, refinement and selection.

Fields may carry leading batch axes; the objective and its gradient are then
evaluated per item with no coupling between items.
"""

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import optics
from .errors import ConfigError, NumericError, ShapeError
from .layout import LayoutRaster
from .metrics import TRAIN_THRESHOLD_NM, EpeSite, epe_measure, l2_fidelity, pvb_area
from .morpho import MrcConfig, mrc_cleanup
from .optics import ProcessCorners, ResistParams, sigmoid
from .resample import avg_pool, bicubic_resize, box_filter

log = logging.getLogger(__name__)

DEFAULT_MASK_STEEPNESS = 4.0


@dataclass(frozen=True)
class RelaxedMask:
    params: np.ndarray
    mask_steepness: float = DEFAULT_MASK_STEEPNESS
    trace: tuple = ()

    @property
    def mask(self) -> np.ndarray:
        return sigmoid(self.mask_steepness * self.params)


@dataclass(frozen=True)
class IltObjectiveConfig:
    corners: ProcessCorners
    resist: ResistParams = ResistParams()
    w_nominal: float = 1.0
    w_corner: float = 0.25

    def __post_init__(self):
        if self.w_nominal <= 0 or self.w_corner < 0:
            raise ConfigError("objective weights must satisfy w_nominal > 0, w_corner >= 0")

    def downsampled(self, factor: int) -> "IltObjectiveConfig":
        return replace(self, corners=self.corners.downsampled(factor))

    def weighted_corners(self):
        out = [(self.corners.nominal, self.w_nominal)]
        if self.w_corner > 0:
            out += [(self.corners.inner, self.w_corner), (self.corners.outer, self.w_corner)]
        return out


@dataclass(frozen=True)
class IltRunConfig:
    iterations: int = 100
    step_size: float = 0.1
    downsample_factor: int = 8
    binarize_threshold: float = 0.5
    mask_steepness: float = DEFAULT_MASK_STEEPNESS
    smooth_window: int = 3
    mrc: MrcConfig = MrcConfig()

    def __post_init__(self):
        if not 0 < self.binarize_threshold < 1:
            raise ConfigError("binarize_threshold must lie in (0, 1)")
        if self.iterations < 0 or self.step_size <= 0 or self.downsample_factor < 1:
            raise ConfigError("iterations >= 0, step_size > 0 and downsample_factor >= 1 required")

    @classmethod
    def from_dict(cls, d: dict) -> "IltRunConfig":
        d = dict(d)
        if "mrc" in d:
            d["mrc"] = MrcConfig(**d["mrc"])
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def load_run_config(path) -> IltRunConfig:
    return IltRunConfig.from_dict(json.loads(Path(path).read_text()))


def _target_grid(target) -> np.ndarray:
    return np.asarray(target.grid if isinstance(target, LayoutRaster) else target, dtype=float)


def _evaluate(params: np.ndarray, target: np.ndarray, cfg: IltObjectiveConfig, steepness: float, grad: bool):
    if params.shape[-2:] != target.shape:
        raise ShapeError(f"params {params.shape} and target {target.shape} grids differ")
    mask = sigmoid(steepness * params)
    n = target.size
    rp = cfg.resist
    value = np.zeros(params.shape[:-2])
    mask_grad = np.zeros(params.shape) if grad else None
    # Corners sharing a kernel set (nominal/outer) share one forward and one adjoint pass.
    groups: dict[int, list] = {}
    for corner, weight in cfg.weighted_corners():
        groups.setdefault(id(corner.kernels), []).append((corner, weight))
    for members in groups.values():
        kset = members[0][0].kernels
        fields = optics.convolve_fields(mask, kset)
        base = np.einsum("...khw,k->...hw", fields.real**2 + fields.imag**2, kset.alphas)
        dI_total = 0.0
        for corner, weight in members:
            soft = sigmoid(rp.steepness * (corner.dose**2 * base - rp.i_th))
            resid = soft - target
            value = value + weight * np.mean(resid**2, axis=(-2, -1))
            if grad:
                # dF/dI per pixel, chained through I = dose^2 * base
                dI_total = dI_total + corner.dose**2 * weight * (2.0 / n) * resid * rp.steepness * soft * (1.0 - soft)
        if grad:
            # back through |M * h_i|^2
            coupled = kset.alphas[:, None, None] * (dI_total[..., None, :, :] * fields)
            mask_grad += 2.0 * optics.convolve_adjoint(coupled, kset).real
    if not grad:
        return value, None
    return value, mask_grad * steepness * mask * (1.0 - mask)


def objective(P: RelaxedMask, target, cfg: IltObjectiveConfig) -> float:
    value, _ = _evaluate(np.asarray(P.params, dtype=float), _target_grid(target), cfg, P.mask_steepness, False)
    return value if np.ndim(value) else float(value)


def gradient(P: RelaxedMask, target, cfg: IltObjectiveConfig) -> np.ndarray:
    _, g = _evaluate(np.asarray(P.params, dtype=float), _target_grid(target), cfg, P.mask_steepness, True)
    return g


def _descend(params, target, obj_cfg, run_cfg, isolate_failures=False):
    """Fixed-step descent along the max-abs normalized gradient.

    Returns (params, trace, failed) where ``failed`` flags batch items whose
    objective went non-finite; without ``isolate_failures`` that raises.
    """
    params = np.array(params, dtype=float)
    batch = params.shape[:-2]
    failed = np.zeros(batch, dtype=bool)
    trace = []
    for it in range(run_cfg.iterations):
        value, g = _evaluate(params, target, obj_cfg, run_cfg.mask_steepness, True)
        gmax = np.max(np.abs(g), axis=(-2, -1))
        bad = ~(np.isfinite(value) & np.isfinite(gmax))
        if bad.any():
            if not isolate_failures:
                raise NumericError(f"non-finite objective at iteration {it} (F={value})")
            failed |= bad
        trace.append((it, value.copy(), gmax.copy()))
        scale = np.where(failed | (gmax == 0), 0.0, run_cfg.step_size / np.where(gmax > 0, gmax, 1.0))
        g = np.where(failed[..., None, None], 0.0, g)
        params -= scale[..., None, None] * g
    value, g = _evaluate(params, target, obj_cfg, run_cfg.mask_steepness, True)
    gmax = np.max(np.abs(g), axis=(-2, -1))
    trace.append((run_cfg.iterations, value, gmax))
    bad = ~(np.isfinite(value) & np.isfinite(gmax))
    if bad.any() and not isolate_failures:
        raise NumericError(f"non-finite objective after {run_cfg.iterations} iterations")
    return params, trace, failed | bad


def run_ilt(P0: RelaxedMask, target, obj_cfg: IltObjectiveConfig, run_cfg: IltRunConfig) -> RelaxedMask:
    """Run ``run_cfg.iterations`` descent steps. The trace holds (iteration, F, max|grad|)."""
    params, trace, _ = _descend(P0.params, _target_grid(target), obj_cfg, run_cfg)
    return RelaxedMask(params, P0.mask_steepness, tuple(trace))


def write_trace_csv(path, trace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "F", "grad_maxabs"])
        for it, value, gmax in trace:
            w.writerow([it, repr(float(np.ravel(value)[0])), repr(float(np.ravel(gmax)[0]))])


def init_params(mask: np.ndarray, steepness: float = DEFAULT_MASK_STEEPNESS) -> np.ndarray:
    """Logit of a [0, 1] mask scaled by 1/steepness, clipped to +-4/steepness."""
    m = np.clip(np.asarray(mask, dtype=float), 1e-6, 1 - 1e-6)
    return np.clip(np.log(m / (1 - m)) / steepness, -4.0 / steepness, 4.0 / steepness)


def finish_mask(mask: np.ndarray, shape, run_cfg: IltRunConfig) -> np.ndarray:
    """Low-res continuous mask -> smoothed, upsampled, binarized, MRC-clean mask."""
    if run_cfg.downsample_factor > 1:
        mask = box_filter(mask, run_cfg.smooth_window)
        mask = bicubic_resize(mask, shape)
    binary = (mask > run_cfg.binarize_threshold).astype(np.uint8)
    if binary.ndim == 2:
        return mrc_cleanup(binary, run_cfg.mrc)
    return np.stack([mrc_cleanup(b, run_cfg.mrc) for b in binary.reshape(-1, *shape)]).reshape(binary.shape)


def _refine(M0: np.ndarray, target, obj_cfg, run_cfg, isolate_failures):
    tgrid = _target_grid(target)
    M0 = np.asarray(M0, dtype=float)
    if M0.shape[-2:] != tgrid.shape:
        raise ShapeError(f"mask {M0.shape[-2:]} and target {tgrid.shape} grids differ")
    f = run_cfg.downsample_factor
    m_low = avg_pool(M0, f)
    t_low = avg_pool(tgrid, f)
    params0 = init_params(m_low, run_cfg.mask_steepness)
    params, trace, failed = _descend(params0, t_low, obj_cfg.downsampled(f), run_cfg, isolate_failures)
    soft = sigmoid(run_cfg.mask_steepness * params)
    return finish_mask(soft, tgrid.shape, run_cfg), trace, failed


def refine_lowres(M0: np.ndarray, target, obj_cfg: IltObjectiveConfig, run_cfg: IltRunConfig) -> np.ndarray:
    """Few-step ILT on the pooled grid, then back to a full-resolution binary mask."""
    mask, _, _ = _refine(M0, target, obj_cfg, run_cfg, False)
    return mask


@dataclass
class BatchResult:
    masks: np.ndarray  # (K, H, W) uint8
    failed: np.ndarray  # (K,) bool


def batched_refine(cands, target, obj_cfg: IltObjectiveConfig, run_cfg: IltRunConfig, workers: int = 1) -> BatchResult:
    """``refine_lowres`` over a stack of candidates; failures are flagged, not raised.

    With ``workers > 1`` candidates run on a thread pool; each candidate's
    computation is independent so results do not depend on scheduling.
    """
    cands = np.asarray(cands)
    if cands.ndim != 3:
        raise ShapeError("candidates must be a (K, H, W) stack")
    k = cands.shape[0]
    if workers <= 1 or k == 1:
        masks, _, failed = _refine(cands, target, obj_cfg, run_cfg, True)
        return BatchResult(masks, np.asarray(failed, dtype=bool))
    chunks = np.array_split(np.arange(k), min(workers, k))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(lambda idx: _refine(cands[idx], target, obj_cfg, run_cfg, True), chunks))
    masks = np.concatenate([p[0] for p in parts])
    failed = np.concatenate([np.asarray(p[2], dtype=bool) for p in parts])
    return BatchResult(masks, failed)


@dataclass(frozen=True)
class SelectionCriteria:
    keys: tuple[str, ...] = ("epe_violations", "pvb_area", "l2_fidelity")
    epe_threshold: float = TRAIN_THRESHOLD_NM

    def sort_key(self, index: int, row: dict | None):
        if row is None or row.get("failed"):
            return (1,) + (float("inf"),) * len(self.keys) + (index,)
        return (0,) + tuple(row[k] for k in self.keys) + (index,)


def score_mask(mask, target: LayoutRaster, sites: list[EpeSite], corners: ProcessCorners, resist: ResistParams, threshold: float) -> dict:
    """Printability metrics of one binary mask."""
    inner, nominal, outer = optics.print_corners(mask, corners, resist)
    soft = optics.resist_soft(optics.aerial_image(mask, corners.nominal.kernels, corners.nominal.dose), resist)
    epe = epe_measure(nominal, target, sites, threshold)
    return {
        "epe_violations": epe.violations,
        "pvb_area": pvb_area(inner, nominal, outer).area,
        "l2_fidelity": l2_fidelity(soft, target),
    }


def select_best(
    refined,
    target: LayoutRaster,
    corners: ProcessCorners,
    criteria: SelectionCriteria = SelectionCriteria(),
    *,
    sites: list[EpeSite],
    resist: ResistParams = ResistParams(),
    failed=None,
    table: list | None = None,
):
    """Score each candidate and return (winner index, metrics table).

    A precomputed ``table`` (one dict or None per candidate) skips scoring.
    """
    k = len(refined) if table is None else len(table)
    if k < 1:
        raise ValueError("need at least one candidate")
    if table is None:
        failed = np.zeros(k, dtype=bool) if failed is None else np.asarray(failed)
        table = [
            None if failed[i] else score_mask(refined[i], target, sites, corners, resist, criteria.epe_threshold)
            for i in range(k)
        ]
    best = min(range(k), key=lambda i: criteria.sort_key(i, table[i]))
    return best, table

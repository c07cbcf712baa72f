"""Run settings and the end-to-end solve / evaluate / baseline stages."""

import json
from dataclasses import asdict, dataclass, field, fields, replace
from functools import cached_property
from pathlib import Path

import numpy as np

from . import optics
from .errors import ConfigError, DataError
from .layout import rasterize
from .metrics import EVAL_THRESHOLD_NM, TRAIN_THRESHOLD_NM, epe_measure, epe_sites, l2_fidelity, pvb_area
from .morpho import MrcConfig
from .optics import Corner, ProcessCorners, ResistParams
from .sampler import Architecture, GeneratorParams, LatentSpec, sample_candidates
from .solver import (
    IltObjectiveConfig,
    IltRunConfig,
    RelaxedMask,
    SelectionCriteria,
    batched_refine,
    finish_mask,
    init_params,
    run_ilt,
    select_best,
)
from .suite import load_suite
from .train import Design, FinetuneConfig, PretrainConfig, RewardConfig

METRIC_KEYS = ("epe_violations", "pvb_area", "l2_fidelity")


def _build(cls, d, section: str):
    if d is None:
        return cls()
    if not isinstance(d, dict):
        raise ConfigError(f"config section {section!r} must be an object")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {unknown}")
    try:
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section!r} section: {exc}") from None


@dataclass(frozen=True)
class OpticsSettings:
    pixel_size: float = 1.0
    side_nm: int = optics.DEFAULT_SIDE
    count: int = optics.DEFAULT_COUNT
    cutoff: float = optics.DEFAULT_CUTOFF
    doses: tuple[float, float, float] = optics.DEFAULT_DOSES
    inner_defocus: float = optics.DEFAULT_INNER_DEFOCUS
    i_th: float = optics.DEFAULT_I_TH
    steepness: float = optics.DEFAULT_STEEPNESS
    kernel_files: tuple[tuple[str, str], ...] = ()  # (corner, path) pairs; nominal required when given

    def paths(self) -> dict[str, Path]:
        return {name: Path(p) for name, p in self.kernel_files}

    def check_files(self) -> None:
        paths = self.paths()
        if paths and "nominal" not in paths:
            raise ConfigError("kernel_files must name a 'nominal' kernel set")
        extra = set(paths) - {"nominal", "inner", "outer"}
        if extra:
            raise ConfigError(f"unknown kernel corners {sorted(extra)}")
        for p in paths.values():
            for suffix in (".json", ".bin"):
                if not p.with_suffix(suffix).exists():
                    raise DataError(f"kernel file not found: {p.with_suffix(suffix)}")

    def corners(self) -> ProcessCorners:
        paths = self.paths()
        if not paths:
            return optics.make_corners(
                self.side_nm, self.count, self.cutoff, tuple(self.doses), self.inner_defocus, self.pixel_size
            )
        self.check_files()
        nominal = optics.load_kernels(paths["nominal"])
        inner = optics.load_kernels(paths["inner"]) if "inner" in paths else nominal
        outer = optics.load_kernels(paths["outer"]) if "outer" in paths else nominal
        d_in, d_nom, d_out = self.doses
        return ProcessCorners(Corner(nominal, d_nom), Corner(inner, d_in), Corner(outer, d_out))

    @property
    def resist(self) -> ResistParams:
        return ResistParams(self.i_th, self.steepness)


@dataclass(frozen=True)
class ObjectiveSettings:
    w_nominal: float = 1.0
    w_corner: float = 0.25


@dataclass(frozen=True)
class SolveSettings:
    k: int = 16
    latent_scale: float = 1.0
    selection_keys: tuple[str, ...] = METRIC_KEYS
    epe_threshold: float = TRAIN_THRESHOLD_NM
    eval_threshold: float = EVAL_THRESHOLD_NM
    polish_iterations: int = 0  # optional full-resolution stage after selection
    polish_step: float = 0.1
    write_prints: bool = False

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("solve.k must be >= 1")
        bad = set(self.selection_keys) - set(METRIC_KEYS)
        if bad or not self.selection_keys:
            raise ConfigError(f"selection_keys must be drawn from {METRIC_KEYS}")
        if self.polish_iterations < 0:
            raise ConfigError("polish_iterations must be >= 0")

    @property
    def criteria(self) -> SelectionCriteria:
        return SelectionCriteria(tuple(self.selection_keys), self.epe_threshold)


@dataclass(frozen=True)
class SuiteSettings:
    n_cases: int = 20
    frame: int = 256
    max_rects: int = 10


@dataclass(frozen=True)
class BenchSettings:
    baseline_iterations: int = 200
    baseline_step: float = 0.1
    compare_threshold: float = TRAIN_THRESHOLD_NM


@dataclass(frozen=True)
class Settings:
    optics: OpticsSettings = field(default_factory=OpticsSettings)
    objective: ObjectiveSettings = field(default_factory=ObjectiveSettings)
    ilt: IltRunConfig = field(default_factory=IltRunConfig)
    arch: Architecture = field(default_factory=Architecture)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    solve: SolveSettings = field(default_factory=SolveSettings)
    suite: SuiteSettings = field(default_factory=SuiteSettings)
    bench: BenchSettings = field(default_factory=BenchSettings)

    @classmethod
    def from_dict(cls, d: dict | None) -> "Settings":
        d = dict(d or {})
        unknown = sorted(set(d) - {f.name for f in fields(cls)})
        if unknown:
            raise ConfigError(f"unknown config sections: {unknown}")
        opt = dict(d.get("optics") or {})
        if "kernel_files" in opt:
            if not isinstance(opt["kernel_files"], dict):
                raise ConfigError("optics.kernel_files must map corner names to paths")
            opt["kernel_files"] = tuple(sorted((str(k), str(v)) for k, v in opt["kernel_files"].items()))
        ilt = dict(d.get("ilt") or {})
        try:
            ilt_cfg = IltRunConfig(**{**ilt, "mrc": MrcConfig(**ilt["mrc"])} if "mrc" in ilt else ilt)
        except TypeError as exc:
            raise ConfigError(f"invalid 'ilt' section: {exc}") from None
        arch_d = d.get("arch") or {}
        unknown = sorted(set(arch_d) - {f.name for f in fields(Architecture)})
        if unknown:
            raise ConfigError(f"unknown keys in 'arch': {unknown}")
        return cls(
            optics=_build(OpticsSettings, opt, "optics"),
            objective=_build(ObjectiveSettings, d.get("objective"), "objective"),
            ilt=ilt_cfg,
            arch=Architecture.from_dict(arch_d),
            pretrain=_build(PretrainConfig, d.get("pretrain"), "pretrain"),
            finetune=_build(FinetuneConfig, d.get("finetune"), "finetune"),
            reward=_build(RewardConfig, d.get("reward"), "reward"),
            solve=_build(SolveSettings, d.get("solve"), "solve"),
            suite=_build(SuiteSettings, d.get("suite"), "suite"),
            bench=_build(BenchSettings, d.get("bench"), "bench"),
        )

    def to_dict(self) -> dict:
        out = {f.name: asdict(getattr(self, f.name)) for f in fields(self)}
        out["optics"]["kernel_files"] = dict(self.optics.kernel_files)
        return out


def load_settings(path=None) -> Settings:
    if path is None:
        return Settings()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        d = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return Settings.from_dict(d)


class Physics:
    """Optics, resist and objective resolved from settings (kernels built once)."""

    def __init__(self, settings: Settings):
        self.settings = settings

    @cached_property
    def corners(self) -> ProcessCorners:
        return self.settings.optics.corners()

    @property
    def resist(self) -> ResistParams:
        return self.settings.optics.resist

    @cached_property
    def objective(self) -> IltObjectiveConfig:
        o = self.settings.objective
        return IltObjectiveConfig(self.corners, self.resist, o.w_nominal, o.w_corner)

    @property
    def pixel_size(self) -> float:
        return self.settings.optics.pixel_size


def load_designs(suite_path, pixel_size: float) -> list[Design]:
    return [Design.from_polys(c.id, c.load(), pixel_size) for c in load_suite(suite_path)]


def design_from_layout(case_id: str, polys, pixel_size: float) -> Design:
    return Design(case_id, rasterize(polys, pixel_size), epe_sites(polys, pixel_size=pixel_size))


def evaluate_mask(mask: np.ndarray, design: Design, phys: Physics, thresholds=(EVAL_THRESHOLD_NM, TRAIN_THRESHOLD_NM)) -> dict:
    """EPE violations at each threshold, PV band area and L2 of the nominal soft print."""
    corners, rp = phys.corners, phys.resist
    inner, nominal, outer = optics.print_corners(mask, corners, rp)
    soft = optics.resist_soft(optics.aerial_image(mask, corners.nominal.kernels, corners.nominal.dose), rp)
    row = {f"epe_{t:g}": epe_measure(nominal, design.raster, design.sites, t).violations for t in thresholds}
    row["pvb_area"] = pvb_area(inner, nominal, outer).area
    row["l2_fidelity"] = l2_fidelity(soft, design.raster)
    return row


@dataclass
class SolveResult:
    candidates: np.ndarray  # thresholded generator masks (K, H, W)
    refined: np.ndarray  # (K, H, W) after refinement (and polish, if any)
    failed: np.ndarray
    table: list
    winner: int
    warnings: list[str] = field(default_factory=list)

    @property
    def selected(self) -> np.ndarray:
        return self.refined[self.winner]


def polish(mask: np.ndarray, design: Design, phys: Physics, iterations: int, step: float) -> np.ndarray:
    """Full-resolution descent from a binary mask, then binarize and MRC."""
    run = replace(phys.settings.ilt, iterations=iterations, step_size=step, downsample_factor=1)
    p = run_ilt(RelaxedMask(init_params(mask, run.mask_steepness), run.mask_steepness), design.raster, phys.objective, run)
    return finish_mask(p.mask, design.raster.shape, run)


def solve_design(design: Design, phys: Physics, params: GeneratorParams | None, seed: int, workers: int = 1) -> SolveResult:
    """Sample, refine, score and select. Without a generator the design itself is the only candidate."""
    s = phys.settings.solve
    warnings = []
    if params is None:
        cands = design.raster.grid[None].copy()
        warnings.append("no generator checkpoint: using the deterministic design-seeded candidate only")
    else:
        spec = LatentSpec(params.arch.latent_dim, s.latent_scale)
        cands = sample_candidates(design.raster, s.k, spec, params, seed).masks
    res = batched_refine(cands, design.raster, phys.objective, phys.settings.ilt, workers)
    refined = res.masks
    if s.polish_iterations > 0:
        refined = np.stack(
            [m if f else polish(m, design, phys, s.polish_iterations, s.polish_step) for m, f in zip(refined, res.failed)]
        )
    table = []
    for i, m in enumerate(refined):
        if res.failed[i]:
            table.append({"failed": True})
            continue
        row = evaluate_mask(m, design, phys, (s.epe_threshold, s.eval_threshold))
        table.append(
            {
                "epe_violations": row[f"epe_{s.epe_threshold:g}"],
                "epe_violations_eval": row[f"epe_{s.eval_threshold:g}"],
                "pvb_area": row["pvb_area"],
                "l2_fidelity": row["l2_fidelity"],
                "failed": False,
            }
        )
    winner, _ = select_best(refined, design.raster, phys.corners, s.criteria, sites=design.sites, resist=phys.resist, table=table)
    return SolveResult(cands, refined, res.failed, table, winner, warnings)


def full_res_baseline(design: Design, phys: Physics) -> np.ndarray:
    """Full-resolution ILT from the design for the bench comparison."""
    b = phys.settings.bench
    return polish(design.raster.grid, design, phys, b.baseline_iterations, b.baseline_step)

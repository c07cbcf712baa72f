"""Generator training: reconstruction pretraining, then teacher-relative policy fine-tuning."""

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import optics
from .errors import ConfigError, DataError, NumericError
from .layout import LayoutRaster, PolygonSet, build_pyramid, rasterize
from .metrics import TRAIN_THRESHOLD_NM, EpeSite, epe_measure, epe_sites
from .optics import sigmoid
from .resample import box_filter
from .sampler import (
    GeneratorParams,
    LatentSpec,
    generator_backward,
    generator_forward,
    load_checkpoint,
    sample_candidates,
    save_checkpoint,
)
from .solver import IltObjectiveConfig, IltRunConfig, batched_refine

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "step", "mean_R", "mean_R_T", "mean_A", "L_pg", "L_imit", "lr")
MAX_SKIPS = 3


def _from_dict(cls, d: dict):
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {unknown}")
    return cls(**d)


@dataclass(frozen=True)
class RewardConfig:
    epe_threshold_nm: float = TRAIN_THRESHOLD_NM
    lowres_factor: int = 8
    ilt_iterations: int = 100
    step_size: float = 0.1
    refine: bool = True  # False scores the thresholded generator masks directly

    def __post_init__(self):
        if not self.epe_threshold_nm > 0:
            raise ConfigError("epe_threshold_nm must be positive")
        if self.lowres_factor < 1 or self.ilt_iterations < 0:
            raise ConfigError("lowres_factor >= 1 and ilt_iterations >= 0 required")

    def run_config(self, base: IltRunConfig | None = None) -> IltRunConfig:
        base = base or IltRunConfig()
        return IltRunConfig.from_dict(
            {
                **base.to_dict(),
                "iterations": self.ilt_iterations,
                "downsample_factor": self.lowres_factor,
                "step_size": self.step_size,
            }
        )

    @classmethod
    def from_dict(cls, d: dict) -> "RewardConfig":
        return _from_dict(cls, d)


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 20
    group_size: int = 16
    latent_dim: int = 256
    latent_scale: float = 1.0
    lambda_pg: float = 500.0
    lambda_imit: float = 1.0
    smooth_window: int = 25
    imitation_space: str = "prob"  # "prob": sigma(Y) vs S(M); "logit": raw Y vs S(M)
    base_lr: float = 1e-4
    min_lr: float = 1e-7
    optimizer: str = "adam"
    clip: float = 1.0
    group_mean_baseline: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.group_size < 2:
            raise ConfigError("group_size K must be >= 2")
        if self.lambda_pg < 0 or self.lambda_imit < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.epochs < 1 or self.smooth_window < 1 or self.smooth_window % 2 == 0:
            raise ConfigError("epochs >= 1 and an odd smoothing window are required")
        if not 0 < self.min_lr <= self.base_lr:
            raise ConfigError("need 0 < min_lr <= base_lr")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.imitation_space not in ("prob", "logit"):
            raise ConfigError(f"imitation_space must be 'prob' or 'logit', got {self.imitation_space!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "FinetuneConfig":
        return _from_dict(cls, d)


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 50
    lambda_rec: float = 1.0
    batch_size: int = 4
    latent_scale: float = 1.0
    base_lr: float = 1e-3
    min_lr: float = 1e-5
    optimizer: str = "adam"
    clip: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not self.lambda_rec > 0:
            raise ConfigError("lambda_rec must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if not 0 < self.min_lr <= self.base_lr:
            raise ConfigError("need 0 < min_lr <= base_lr")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "PretrainConfig":
        return _from_dict(cls, d)


@dataclass
class Design:
    """A training/evaluation design with its EPE sites."""

    id: str
    raster: LayoutRaster
    sites: list[EpeSite]

    @classmethod
    def from_polys(cls, case_id: str, polys: PolygonSet, pixel_size: float = 1.0) -> "Design":
        return cls(case_id, rasterize(polys, pixel_size), epe_sites(polys, pixel_size=pixel_size))


# ---------------------------------------------------------------- schedule / optimizers


def cosine_lr(step: int, total_steps: int, base: float, floor: float) -> float:
    """base at step 0, floor at step total_steps - 1."""
    if total_steps <= 1:
        return base
    t = min(max(step, 0), total_steps - 1) / (total_steps - 1)
    return floor + 0.5 * (base - floor) * (1 + math.cos(math.pi * t))


class Sgd:
    name = "sgd"

    def step(self, params: GeneratorParams, grads: dict, lr: float) -> None:
        params.add_({k: -lr * g for k, g in grads.items()})

    def state_dict(self) -> dict:
        return {}

    def load_state_dict(self, state: dict) -> None:
        pass


class Adam:
    """Adam with bias correction; moments kept in float64."""

    name = "adam"

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: GeneratorParams, grads: dict, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        deltas = {}
        for k, g in grads.items():
            g = g.astype(np.float64)
            m = self.m.get(k, 0.0) * b1 + (1 - b1) * g
            v = self.v.get(k, 0.0) * b2 + (1 - b2) * g * g
            self.m[k], self.v[k] = m, v
            mh = m / (1 - b1**self.t)
            vh = v / (1 - b2**self.t)
            deltas[k] = -lr * mh / (np.sqrt(vh) + self.eps)
        params.add_(deltas)

    def state_dict(self) -> dict:
        out = {"t": np.array(self.t)}
        out.update({f"m/{k}": v for k, v in self.m.items()})
        out.update({f"v/{k}": v for k, v in self.v.items()})
        return out

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        self.m = {k[2:]: np.asarray(v) for k, v in state.items() if k.startswith("m/")}
        self.v = {k[2:]: np.asarray(v) for k, v in state.items() if k.startswith("v/")}


def make_optimizer(name: str):
    return Adam() if name == "adam" else Sgd()


def clip_grads(grads: dict, limit: float) -> dict:
    return {k: np.clip(g, -limit, limit) for k, g in grads.items()}


def _step_seed(seed: int, *path: int) -> int:
    return int(np.random.SeedSequence([int(seed), *map(int, path)]).generate_state(1, np.uint64)[0])


# ---------------------------------------------------------------- losses


def recon_loss(logits: np.ndarray, ref: np.ndarray, lam: float = 1.0) -> tuple[float, np.ndarray]:
    """lam * mean((sigmoid(Y) - M)^2) and its gradient w.r.t. Y."""
    y = np.asarray(logits, dtype=np.float64)
    s = sigmoid(y)
    r = s - np.broadcast_to(np.asarray(ref, dtype=np.float64), y.shape)
    n = y.size
    return lam * float(np.mean(r * r)), lam * 2.0 * r * s * (1 - s) / n


def bce_with_logits(y: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Elementwise -[m log s(y) + (1 - m) log(1 - s(y))], stable for large |y|."""
    return np.maximum(y, 0) - m * y + np.log1p(np.exp(-np.abs(y)))


def policy_loss(advantages: np.ndarray, logits: np.ndarray, actions: np.ndarray) -> tuple[float, np.ndarray]:
    """L_pg = -mean_k[A_k * (-BCE_k)] with the actions held constant."""
    y = np.asarray(logits, dtype=np.float64)
    m = np.asarray(actions, dtype=np.float64)
    a = np.asarray(advantages, dtype=np.float64)
    k = y.shape[0]
    npix = y[0].size
    bce = bce_with_logits(y, m).reshape(k, -1).mean(axis=1)
    loss = float(np.mean(a * bce))
    grad = a[:, None, None] * (sigmoid(y) - m) / (npix * k)
    return loss, grad


def imitation_loss(logits: np.ndarray, refined: np.ndarray, window: int = 25) -> tuple[float, np.ndarray]:
    """mean((Y - S(M))^2) with S a zero-padded stride-1 box mean."""
    y = np.asarray(logits, dtype=np.float64)
    s = box_filter(np.asarray(refined, dtype=np.float64), window)
    d = y - s
    return float(np.mean(d * d)), 2.0 * d / d.size


# ---------------------------------------------------------------- pretraining


@dataclass
class PretrainResult:
    params: GeneratorParams
    epoch_loss: list[float]


def reference_masks(designs: list[Design], obj: IltObjectiveConfig, run_cfg: IltRunConfig) -> list[np.ndarray]:
    """Numerical-ILT references: each design refined from itself."""
    return [batched_refine(d.raster.grid[None], d.raster, obj, run_cfg).masks[0] for d in designs]


def pretrain(
    dataset: list[tuple[LayoutRaster, np.ndarray]],
    cfg: PretrainConfig,
    params: GeneratorParams,
    log_path=None,
) -> PretrainResult:
    """Fit sigmoid(G(Z, z)) to M_ref with fresh latents every step. ``params`` is not modified."""
    if not dataset:
        raise DataError("pretraining dataset is empty")
    for i, (design, ref) in enumerate(dataset):
        ref = np.asarray(ref)
        if ref.shape != design.shape:
            raise DataError(f"pair {i}: reference {ref.shape} and design {design.shape} grids differ")
        if not np.isin(ref, (0, 1)).all():
            raise DataError(f"pair {i}: reference mask must be binary")
    params = params.copy()
    arch = params.arch
    pyramids = [build_pyramid(d, arch.levels, arch.head_factor) for d, _ in dataset]
    opt = make_optimizer(cfg.optimizer)
    total = cfg.epochs * len(dataset)
    rng = np.random.default_rng(np.random.Philox(key=cfg.seed))
    epoch_loss = []
    rows = []
    step = 0
    for epoch in range(cfg.epochs):
        losses = []
        for i in rng.permutation(len(dataset)):
            z = cfg.latent_scale * rng.standard_normal((cfg.batch_size, arch.latent_dim))
            y, tape = generator_forward(pyramids[i], z, params)
            loss, dy = recon_loss(y, dataset[i][1], cfg.lambda_rec)
            lr = cosine_lr(step, total, cfg.base_lr, cfg.min_lr)
            step += 1
            if not math.isfinite(loss):
                raise NumericError(f"non-finite reconstruction loss at epoch {epoch}")
            grads = clip_grads(generator_backward(tape, dy), cfg.clip)
            opt.step(params, grads, lr)
            losses.append(loss)
            rows.append({"epoch": epoch, "step": step - 1, "loss": loss, "lr": lr})
        epoch_loss.append(float(np.mean(losses)))
        log.info("pretrain epoch %d loss %.5f", epoch, epoch_loss[-1])
    if log_path is not None:
        _write_csv(log_path, ("epoch", "step", "loss", "lr"), rows)
    return PretrainResult(params, epoch_loss)


# ---------------------------------------------------------------- rollouts


@dataclass
class RolloutGroup:
    design_id: str
    latents: np.ndarray
    logits: np.ndarray  # student
    actions: np.ndarray  # M_k = 1[Y_k > 0.5]
    refined: np.ndarray  # M_k^ILT of the student
    rewards: np.ndarray  # int
    teacher_rewards: np.ndarray
    advantages: np.ndarray
    failed: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))
    tape: object = None


def score_rewards(masks: np.ndarray, failed: np.ndarray, design: Design, obj: IltObjectiveConfig, threshold: float) -> np.ndarray:
    """R_k = -(EPE violations of the nominal print); failed candidates get -(#sites)."""
    nominal = obj.corners.nominal
    prints = optics.resist_hard(optics.aerial_image(masks.astype(float), nominal.kernels, nominal.dose), obj.resist)
    out = np.empty(len(masks), dtype=np.int64)
    worst = -len(design.sites)
    for k in range(len(masks)):
        out[k] = worst if failed[k] else -epe_measure(prints[k], design.raster, design.sites, threshold).violations
    return out


def _refine_and_score(masks, design, obj, reward_cfg, run_cfg, workers):
    if reward_cfg.refine:
        res = batched_refine(masks, design.raster, obj, run_cfg, workers)
        refined, failed = res.masks, res.failed
    else:
        refined, failed = masks.copy(), np.zeros(len(masks), dtype=bool)
    return refined, failed, score_rewards(refined, failed, design, obj, reward_cfg.epe_threshold_nm)


def rollout(
    design: Design,
    student: GeneratorParams,
    teacher: GeneratorParams,
    k: int,
    reward_cfg: RewardConfig,
    seed: int,
    obj: IltObjectiveConfig,
    *,
    latent_scale: float = 1.0,
    run_cfg: IltRunConfig | None = None,
    group_mean: bool = False,
    record: bool = True,
    workers: int = 1,
) -> RolloutGroup:
    """Sample K student candidates, refine and score them, then do the same for the teacher on the same latents."""
    run_cfg = reward_cfg.run_config(run_cfg)
    spec = LatentSpec(student.arch.latent_dim, latent_scale)
    batch = sample_candidates(design.raster, k, spec, student, seed, record=record)
    refined, failed, rewards = _refine_and_score(batch.masks, design, obj, reward_cfg, run_cfg, workers)
    t_batch = sample_candidates(design.raster, k, spec, teacher, seed)
    _, t_failed, t_rewards = _refine_and_score(t_batch.masks, design, obj, reward_cfg, run_cfg, workers)
    if group_mean:
        adv = rewards - rewards.mean()
    else:
        adv = rewards - t_rewards
    return RolloutGroup(
        design.id, batch.latents, batch.logits, batch.masks, refined, rewards, t_rewards, adv, failed | t_failed, batch.tape
    )


# ---------------------------------------------------------------- fine-tuning


@dataclass
class StepOutcome:
    row: dict
    skipped: bool
    group: RolloutGroup


def _imitation_term(logits: np.ndarray, refined: np.ndarray, cfg: FinetuneConfig) -> tuple[float, np.ndarray]:
    """Imitation loss and its gradient w.r.t. the logits.

    In "prob" space the smoothed target, which lies in [0, 1], is compared with
    the probability map sigma(Y) and the gradient is chained through sigma.
    """
    if cfg.imitation_space == "logit":
        return imitation_loss(logits, refined, cfg.smooth_window)
    p = sigmoid(np.asarray(logits, dtype=np.float64))
    loss, g = imitation_loss(p, refined, cfg.smooth_window)
    return loss, g * p * (1.0 - p)


def finetune_step(
    student: GeneratorParams,
    teacher: GeneratorParams,
    design: Design,
    cfg: FinetuneConfig,
    reward_cfg: RewardConfig,
    obj: IltObjectiveConfig,
    optimizer,
    lr: float,
    seed: int,
    *,
    run_cfg: IltRunConfig | None = None,
    workers: int = 1,
) -> StepOutcome:
    """One rollout group and one parameter update of ``student`` (in place)."""
    group = rollout(
        design,
        student,
        teacher,
        cfg.group_size,
        reward_cfg,
        seed,
        obj,
        latent_scale=cfg.latent_scale,
        run_cfg=run_cfg,
        group_mean=cfg.group_mean_baseline,
        workers=workers,
    )
    l_pg, g_pg = policy_loss(group.advantages, group.logits, group.actions)
    l_im, g_im = _imitation_term(group.logits, group.refined, cfg)
    total = cfg.lambda_pg * l_pg + cfg.lambda_imit * l_im
    row = {
        "mean_R": float(group.rewards.mean()),
        "mean_R_T": float(group.teacher_rewards.mean()),
        "mean_A": float(np.mean(group.advantages)),
        "L_pg": l_pg,
        "L_imit": l_im,
        "lr": lr,
    }
    if not math.isfinite(total):
        return StepOutcome(row, True, group)
    dy = cfg.lambda_pg * g_pg + cfg.lambda_imit * g_im
    grads = clip_grads(generator_backward(group.tape, dy), cfg.clip)
    optimizer.step(student, grads, lr)
    return StepOutcome(row, False, group)


@dataclass
class FinetuneResult:
    params: GeneratorParams
    epoch_reward: list[float]
    rows: list[dict]
    checkpoints: list[Path] = field(default_factory=list)


def _write_csv(path, header, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(header), extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def _save_state(out_dir: Path, epoch: int, step: int, params, optimizer, epoch_reward) -> Path:
    stem = out_dir / f"ckpt_epoch{epoch:03d}"
    path = save_checkpoint(stem, params, {"epoch": epoch, "step": step, "epoch_reward": epoch_reward, "optimizer": optimizer.name})
    np.savez(stem.with_suffix(".opt.npz"), **optimizer.state_dict())
    return path


def finetune(
    designs: list[Design],
    cfg: FinetuneConfig,
    reward_cfg: RewardConfig,
    pretrained: GeneratorParams,
    obj: IltObjectiveConfig,
    *,
    run_cfg: IltRunConfig | None = None,
    out_dir=None,
    resume=None,
    workers: int = 1,
    max_steps: int | None = None,
) -> FinetuneResult:
    """Teacher-relative policy fine-tuning, one design per step.

    The teacher is a frozen copy of ``pretrained``. With ``out_dir`` a CSV
    log and per-epoch checkpoints are written there; ``resume`` names a
    checkpoint written by an earlier run and continues after its epoch.
    ``max_steps`` stops early (the schedule still spans all epochs).
    """
    if not designs:
        raise DataError("fine-tuning needs at least one design")
    if cfg.latent_dim != pretrained.arch.latent_dim:
        raise ConfigError(f"latent_dim {cfg.latent_dim} does not match the generator ({pretrained.arch.latent_dim})")
    teacher = pretrained.copy()
    student = pretrained.copy()
    optimizer = make_optimizer(cfg.optimizer)
    total = cfg.epochs * len(designs)
    start_epoch, step = 0, 0
    epoch_reward: list[float] = []
    rows: list[dict] = []
    out_dir = Path(out_dir) if out_dir is not None else None
    if resume is not None:
        student, extra = load_checkpoint(resume)
        start_epoch, step = int(extra["epoch"]) + 1, int(extra["step"])
        epoch_reward = list(extra.get("epoch_reward", []))
        opt_path = Path(resume).with_suffix("").with_suffix(".opt.npz")
        if opt_path.exists() and extra.get("optimizer") == optimizer.name:
            with np.load(opt_path) as st:
                optimizer.load_state_dict(dict(st))
        if out_dir is not None and (out_dir / "finetune_log.csv").exists():
            with (out_dir / "finetune_log.csv").open(encoding="utf-8") as fh:
                rows = [r for r in csv.DictReader(fh) if int(r["epoch"]) < start_epoch]
    checkpoints = []
    skips = 0
    done = False
    for epoch in range(start_epoch, cfg.epochs):
        rewards = []
        order = np.random.default_rng(np.random.Philox(key=_step_seed(cfg.seed, epoch))).permutation(len(designs))
        for i in order:
            if max_steps is not None and step >= max_steps:
                done = True
                break
            lr = cosine_lr(step, total, cfg.base_lr, cfg.min_lr)
            out = finetune_step(
                student, teacher, designs[i], cfg, reward_cfg, obj, optimizer, lr,
                _step_seed(cfg.seed, epoch, step), run_cfg=run_cfg, workers=workers,
            )  # fmt: skip
            out.row.update(epoch=epoch, step=step)
            rows.append(out.row)
            step += 1
            if out.skipped:
                skips += 1
                log.warning("step %d: non-finite loss, update skipped", step - 1)
                if skips >= MAX_SKIPS:
                    raise NumericError(f"{MAX_SKIPS} consecutive non-finite losses, aborting at step {step - 1}")
                continue
            skips = 0
            rewards.append(out.row["mean_R"])
        if rewards:
            epoch_reward.append(float(np.mean(rewards)))
            log.info("finetune epoch %d mean reward %.3f", epoch, epoch_reward[-1])
        if out_dir is not None:
            _write_csv(out_dir / "finetune_log.csv", LOG_FIELDS, rows)
            if not done:
                checkpoints.append(_save_state(out_dir, epoch, step, student, optimizer, epoch_reward))
        if done:
            break
    return FinetuneResult(student, epoch_reward, rows, checkpoints)


def config_dict(cfg) -> dict:
    return asdict(cfg)

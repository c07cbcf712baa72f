"""postilt command line: gen-suite, pretrain, finetune, solve, eval, bench."""

import argparse
import csv
import json
import logging
import os
import subprocess
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, optics
from .errors import ConfigError, DataError, PostIltError
from .layout import load_layout, read_pgm, write_pgm, write_pgm_gray
from .pipeline import Physics, Settings, design_from_layout, evaluate_mask, full_res_baseline, load_designs, load_settings, solve_design
from .sampler import init_params, load_checkpoint, save_checkpoint
from .suite import generate_suite
from .train import finetune, pretrain, reference_masks

log = logging.getLogger("postilt")


def _version() -> str:
    """git-describe string of the source tree when available, else the package version."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _dump_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_manifest(args, out: Path, started: str, extra: dict | None = None) -> None:
    manifest = {
        "command": args.command,
        "config": None if args.config is None else str(args.config),
        "seed": args.seed,
        "version": _version(),
        "started": started,
        "finished": _now(),
        "out_dir": str(out),
        "threads": args.threads,
    }
    manifest.update(extra or {})
    _dump_json(out / "manifest.json", manifest)


def _load_params(path):
    if path is None:
        return None
    params, _ = load_checkpoint(path)
    return params


# ---------------------------------------------------------------- commands


def cmd_gen_suite(args, settings: Settings, out: Path) -> dict:
    n = settings.suite.n_cases if args.n is None else args.n
    frame = settings.suite.frame if args.frame is None else args.frame
    if n < 0:
        raise ConfigError("--n must be >= 0")
    if args.dry_run:
        return {}
    path = generate_suite(n, args.seed, out, frame, settings.suite.max_rects)
    return {"suite": path.name, "n_cases": n}


def cmd_pretrain(args, settings: Settings, out: Path) -> dict:
    phys = Physics(settings)
    designs = load_designs(args.suite, phys.pixel_size)
    if not designs:
        raise DataError(f"suite {args.suite} has no cases")
    init = _load_params(args.init) if args.init else init_params(settings.arch, args.seed)
    settings.optics.check_files()
    if args.dry_run:
        return {}
    refs = reference_masks(designs, phys.objective, settings.ilt)
    cfg = settings.pretrain
    res = pretrain([(d.raster, r) for d, r in zip(designs, refs)], cfg, init, log_path=out / "pretrain_log.csv")
    ckpt = save_checkpoint(out / "pretrained", res.params, {"epoch_loss": res.epoch_loss})
    _dump_json(out / "pretrain_trace.json", {"epoch_loss": res.epoch_loss})
    return {"checkpoint": ckpt.name}


def cmd_finetune(args, settings: Settings, out: Path) -> dict:
    phys = Physics(settings)
    designs = load_designs(args.suite, phys.pixel_size)
    if not designs:
        raise DataError(f"suite {args.suite} has no cases")
    pretrained, _ = load_checkpoint(args.checkpoint)
    if args.resume:
        load_checkpoint(args.resume)
    settings.optics.check_files()
    if args.dry_run:
        return {}
    res = finetune(
        designs,
        settings.finetune,
        settings.reward,
        pretrained,
        phys.objective,
        run_cfg=settings.ilt,
        out_dir=out,
        resume=args.resume,
        workers=args.threads,
    )
    _dump_json(out / "rewards.json", {"epoch_reward": res.epoch_reward})
    return {"checkpoints": [p.name for p in res.checkpoints]}


def _solve_one(design, phys, params, seed, out: Path, workers: int, warnings: list[str]) -> dict:
    res = solve_design(design, phys, params, seed, workers)
    cand_dir = out / "candidates"
    cand_dir.mkdir(parents=True, exist_ok=True)
    for i, m in enumerate(res.refined):
        write_pgm(cand_dir / f"cand_{i:02d}.pgm", m)
    write_pgm(out / "selected.pgm", res.selected)
    if phys.settings.solve.write_prints:
        inner, nominal, outer = optics.print_corners(res.selected, phys.corners, phys.resist)
        for name, img in (("inner", inner), ("nominal", nominal), ("outer", outer)):
            write_pgm(out / f"print_{name}.pgm", img)
        aerial = optics.aerial_image(res.selected, phys.corners.nominal.kernels, phys.corners.nominal.dose)
        write_pgm_gray(out / "aerial_nominal.pgm", aerial)
    s = phys.settings.solve
    report = {
        "case": design.id,
        "k": int(len(res.refined)),
        "seed": seed,
        "winner": int(res.winner),
        "selection_keys": list(s.selection_keys),
        "epe_threshold": s.epe_threshold,
        "eval_threshold": s.eval_threshold,
        "polish_iterations": s.polish_iterations,
        "candidates": [{"index": i, **row} for i, row in enumerate(res.table)],
        "warnings": warnings + res.warnings,
    }
    _dump_json(out / "report.json", report)
    return report


def _solver_inputs(args, settings: Settings):
    warnings = []
    params = None
    if args.checkpoint:
        try:
            params = _load_params(args.checkpoint)
        except DataError as exc:
            if not Path(args.checkpoint).with_suffix(".json").exists():
                warnings.append(f"checkpoint not found ({args.checkpoint}); falling back to deterministic sampling")
                log.warning(warnings[-1])
            else:
                raise exc
    else:
        warnings.append("no checkpoint given; falling back to deterministic sampling")
    return params, warnings


def cmd_solve(args, settings: Settings, out: Path) -> dict:
    if (args.layout is None) == (args.suite is None):
        raise ConfigError("solve needs exactly one of --layout or --suite")
    phys = Physics(settings)
    ps = phys.pixel_size
    if args.layout is not None:
        designs = [design_from_layout(Path(args.layout).stem, load_layout(args.layout), ps)]
    else:
        designs = load_designs(args.suite, ps)
    params, warnings = _solver_inputs(args, settings)
    settings.optics.check_files()
    if args.dry_run:
        return {}
    if args.layout is not None:
        rep = _solve_one(designs[0], phys, params, args.seed, out, args.threads, warnings)
        return {"winner": rep["winner"]}
    winners = {}
    for d in designs:
        winners[d.id] = _solve_one(d, phys, params, args.seed, out / d.id, args.threads, list(warnings))["winner"]
    _dump_json(out / "solve_summary.json", {"winners": winners})
    return {"cases": len(designs)}


def _find_mask(masks_dir: Path, case_id: str) -> Path | None:
    for p in (masks_dir / f"{case_id}.pgm", masks_dir / case_id / "selected.pgm"):
        if p.exists():
            return p
    return None


def _averages(rows: list[dict], keys) -> dict:
    present = [r for r in rows if not r.get("absent")]
    if not present:
        return {k: None for k in keys}
    return {k: float(np.mean([r[k] for r in present])) for k in keys}


def _write_table(path: Path, rows: list[dict], keys) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for r in rows:
            w.writerow(["" if r.get(k) is None else (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in keys])


def cmd_eval(args, settings: Settings, out: Path) -> dict:
    phys = Physics(settings)
    designs = load_designs(args.suite, phys.pixel_size)
    masks_dir = Path(args.masks)
    if not masks_dir.is_dir():
        raise DataError(f"mask directory not found: {masks_dir}")
    settings.optics.check_files()
    if args.dry_run:
        return {}
    s = settings.solve
    t_eval, t_strict = s.eval_threshold, s.epe_threshold
    keys = [f"epe_{t_eval:g}", f"epe_{t_strict:g}", "pvb_area", "l2_fidelity"]
    rows = []
    for d in designs:
        path = _find_mask(masks_dir, d.id)
        if path is None:
            rows.append({"id": d.id, "absent": True})
            continue
        mask = read_pgm(path)
        if mask.shape != d.raster.shape:
            raise DataError(f"{path}: mask {mask.shape} does not match design grid {d.raster.shape}")
        rows.append({"id": d.id, "absent": False, **evaluate_mask(mask, d, phys, (t_eval, t_strict))})
    avg = _averages(rows, keys)
    excluded = sum(bool(r["absent"]) for r in rows)
    out.mkdir(parents=True, exist_ok=True)
    _write_table(out / "eval.csv", rows, ["id", "absent"] + keys)
    _dump_json(out / "eval.json", {"rows": rows, "average": avg, "excluded": excluded, "metrics": keys})
    return {"excluded": excluded}


def cmd_bench(args, settings: Settings, out: Path) -> dict:
    phys = Physics(settings)
    designs = load_designs(args.suite, phys.pixel_size)
    params, warnings = _solver_inputs(args, settings)
    settings.optics.check_files()
    if args.dry_run:
        return {}
    s, b = settings.solve, settings.bench
    thresholds = (s.eval_threshold, b.compare_threshold)
    rows = []
    for d in designs:
        t0 = time.perf_counter()
        res = solve_design(d, phys, params, args.seed, args.threads)
        t_ours = time.perf_counter() - t0
        t0 = time.perf_counter()
        base = full_res_baseline(d, phys)
        t_base = time.perf_counter() - t0
        for sub, mask in (("ours", res.selected), ("baseline", base)):
            (out / sub).mkdir(parents=True, exist_ok=True)
            write_pgm(out / sub / f"{d.id}.pgm", mask)
        ours = evaluate_mask(res.selected, d, phys, thresholds)
        theirs = evaluate_mask(base, d, phys, thresholds)
        rows.append(
            {
                "id": d.id,
                "winner": int(res.winner),
                **{f"ours_{k}": v for k, v in ours.items()},
                **{f"baseline_{k}": v for k, v in theirs.items()},
                "ours_ms": round(1000 * t_ours, 1),
                "baseline_ms": round(1000 * t_base, 1),
            }
        )
    key = f"epe_{b.compare_threshold:g}"
    wins = sum(r[f"ours_{key}"] <= r[f"baseline_{key}"] for r in rows)
    summary = {
        "rows": rows,
        "compare_metric": key,
        "ours_not_worse": wins,
        "cases": len(rows),
        "baseline_iterations": b.baseline_iterations,
        "lowres_iterations": settings.ilt.iterations,
        "warnings": warnings,
    }
    _dump_json(out / "bench.json", summary)
    if rows:
        _write_table(out / "bench.csv", rows, list(rows[0]))
    return {"ours_not_worse": wins, "cases": len(rows)}


COMMANDS = {
    "gen-suite": cmd_gen_suite,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "solve": cmd_solve,
    "eval": cmd_eval,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="postilt", description="Sampling-based batched ILT.")
    parser.add_argument("--config", type=Path, help="JSON run configuration")
    parser.add_argument("--seed", type=int, default=0, help="u64 seed for every random stream")
    parser.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    parser.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="worker cap for batched stages")
    parser.add_argument("--dry-run", action="store_true", help="validate inputs and exit without writing")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-suite", help="write a synthetic layout suite")
    p.add_argument("--n", type=int, help="number of cases (config suite.n_cases)")
    p.add_argument("--frame", type=int, help="frame side in nm (config suite.frame)")

    p = sub.add_parser("pretrain", help="reconstruction pretraining toward ILT references")
    p.add_argument("--suite", required=True, type=Path)
    p.add_argument("--init", type=Path, help="start from this checkpoint instead of a fresh init")

    p = sub.add_parser("finetune", help="teacher-relative policy fine-tuning")
    p.add_argument("--suite", required=True, type=Path)
    p.add_argument("--checkpoint", required=True, type=Path, help="pretrained generator (also the frozen teacher)")
    p.add_argument("--resume", type=Path, help="continue from a fine-tuning checkpoint")

    for name, text in (("solve", "sample, refine and select masks"), ("bench", "compare against full-resolution ILT")):
        p = sub.add_parser(name, help=text)
        if name == "solve":
            p.add_argument("--layout", type=Path)
            p.add_argument("--suite", type=Path)
        else:
            p.add_argument("--suite", required=True, type=Path)
        p.add_argument("--checkpoint", type=Path)

    p = sub.add_parser("eval", help="score a directory of masks against a suite")
    p.add_argument("--suite", required=True, type=Path)
    p.add_argument("--masks", required=True, type=Path)
    return parser


def _validate_seed(seed: int) -> None:
    if not 0 <= seed < 2**64:
        raise ConfigError(f"--seed must be an unsigned 64-bit integer, got {seed}")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    started = _now()
    try:
        _validate_seed(args.seed)
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        settings = load_settings(args.config)
        optics.set_fft_workers(args.threads)
        out = args.out
        extra = COMMANDS[args.command](args, settings, out)
        if args.dry_run:
            print(f"{args.command}: configuration valid (dry run, nothing written)")
            return 0
        _write_manifest(args, out, started, {"result": extra, "settings": settings.to_dict()})
    except PostIltError as exc:
        print(f"postilt: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"postilt: I/O error: {exc}", file=sys.stderr)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())

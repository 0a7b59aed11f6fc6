"""
Command-line entry point: `revode <subcommand> [--config FILE] [--out DIR] [--seed N] [--engine NAME]`.

Every subcommand writes its results into a run directory (the next free
`output/run_XXXX` unless `--out` is given) next to a manifest and a log.
Exit codes: 0 success, 1 numerical failure, 2 usage or configuration error.
"""

import argparse
import asyncio
import json
import logging
import subprocess
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field as dataclass_field
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Type

import numpy as np
from pydantic import BaseModel, ValidationError
from rich.logging import RichHandler

from .analysis import (
    BenchConfig,
    ConvergenceConfig,
    GradcheckConfig,
    StabilityConfig,
    calculate_deviations,
    convergence_study,
    format_deviation_summary,
    gradient_check,
    run_bench_cell,
    stability_study,
)
from .errors import CheckFailure, ConfigurationError, RevodeError
from .experiments.training import TrainConfig, load_dataset, predict, train_repeats
from .exports import (
    append_jsonl,
    create_run_directory,
    write_counters,
    write_csv,
    write_json,
    write_snapshots,
    write_step_record,
    write_text,
)
from .rk_solvers import TABLEAU_NAMES, make_tableau, tableau_json
from .settings import Settings, load_settings

logger = logging.getLogger(__name__)

SUBCOMMANDS = ("convergence", "stability", "gradcheck", "bench", "train", "tableaux")
CONFIG_MODELS: Dict[str, Type[BaseModel]] = {
    "convergence": ConvergenceConfig,
    "stability": StabilityConfig,
    "gradcheck": GradcheckConfig,
    "bench": BenchConfig,
    "train": TrainConfig,
}

_installed_handlers: List[logging.Handler] = []


def setup_logging(log_dir: Path, verbose: bool = False, level: str = "INFO") -> None:
    """Configure logging with both file and console handlers."""
    log_dir.mkdir(parents=True, exist_ok=True)
    log_file = log_dir / "revode.log"

    root_logger = logging.getLogger()
    for handler in _installed_handlers:
        root_logger.removeHandler(handler)
        handler.close()
    _installed_handlers.clear()

    console_level = logging.DEBUG if verbose else getattr(logging, level, logging.INFO)
    root_logger.setLevel(min(console_level, logging.INFO))

    file_handler = logging.FileHandler(log_file)
    file_handler.setLevel(logging.DEBUG if verbose else logging.INFO)
    file_handler.setFormatter(logging.Formatter("%(asctime)s - %(name)s - %(levelname)s - %(message)s"))
    root_logger.addHandler(file_handler)

    console_handler = RichHandler(rich_tracebacks=True, show_time=False, show_path=False)
    console_handler.setLevel(console_level)
    root_logger.addHandler(console_handler)
    _installed_handlers.extend([file_handler, console_handler])


def git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() if out.returncode == 0 and out.stdout.strip() else "unknown"


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    """
    Provenance of one run.

    Written with status "running" before any computation and rewritten
    atomically with the final status and end time.
    """

    subcommand: str
    config: dict
    seed: Optional[int]
    build: str
    outputs: List[str] = dataclass_field(default_factory=list)
    started_at: str = dataclass_field(default_factory=_now)
    finished_at: Optional[str] = None
    status: str = "running"

    def write(self, run_dir: Path) -> Path:
        return write_json(run_dir / "manifest.json", asdict(self))

    def complete(self, run_dir: Path, status: str = "completed") -> Path:
        self.status = status
        self.finished_at = _now()
        return self.write(run_dir)


def load_config(path: Optional[str], model: Type[BaseModel], overrides: Optional[dict] = None) -> BaseModel:
    """
    Parse a JSON config into `model`, applying CLI overrides first.

    Raises:
        ConfigurationError: Missing file, malformed JSON, unknown keys or
        invalid values
    """
    data = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigurationError(f"config file not found: {p}")
        try:
            with open(p, "r", encoding="utf-8") as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"{p}: invalid JSON ({e})") from e
        if not isinstance(data, dict):
            raise ConfigurationError(f"{p}: the top level must be a JSON object")
    data.update(overrides or {})
    try:
        return model.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(x) for x in first["loc"]) or "<root>"
        raise ConfigurationError(f"invalid config at {where}: {first['msg']}") from e


def _overrides(args: argparse.Namespace, raw: dict) -> dict:
    """Map --seed and --engine onto the subcommand's config fields."""
    out = {}
    if args.command == "bench":
        if args.seed is not None or args.engine is not None:
            cells = [dict(c) for c in raw.get("cells", [])]
            kept = 0
            for c in cells:
                if args.seed is not None:
                    c["seed"] = args.seed
                if args.engine is None:
                    continue
                # simulated cells only count; the reversible engine cannot run the plain scheme
                if c.get("engine") == "simulate" or (args.engine == "reversible" and c.get("scheme") == "plain"):
                    kept += 1
                else:
                    c["engine"] = args.engine
            if kept:
                logger.warning("--engine %s left %d incompatible cell(s) unchanged", args.engine, kept)
            out["cells"] = cells
        return out
    if args.seed is not None:
        if args.command in ("gradcheck", "train"):
            out["seed"] = args.seed
        else:
            logger.warning("--seed has no effect on %s", args.command)
    if args.engine is not None:
        if args.command == "train":
            out["engine"] = args.engine
        else:
            logger.warning("--engine has no effect on %s", args.command)
    return out


def _raw_config(path: Optional[str]) -> dict:
    if path is None or not Path(path).is_file():
        return {}
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError:
        return {}
    return data if isinstance(data, dict) else {}


# ---------------------------------------------------------------- subcommands


def cmd_convergence(cfg: ConvergenceConfig, run_dir: Path) -> List[Path]:
    print(f"📊 Measuring global error on the {cfg.field} test problem...")
    rows, slopes = convergence_study(cfg)
    for name, s in slopes.items():
        print(f"    {name}: base slope {s['base']:.3f}, reversible slope {s['reversible']:.3f} (order {s['order']})")
    return [
        write_csv(run_dir / "convergence.csv", rows, ["solver", "reversible", "h", "n_steps", "error"]),
        write_json(run_dir / "slopes.json", slopes),
    ]


def cmd_stability(cfg: StabilityConfig, run_dir: Path) -> List[Path]:
    print(f"📊 Scanning stability regions on a {cfg.n_grid}-point hα grid...")
    regions, grid = stability_study(cfg)
    paths = [write_csv(run_dir / "region.csv", regions, ["tableau", "lambda", "boundary_h_alpha", "boundary_root", "marginal"])]
    if grid:
        paths.append(write_csv(run_dir / "verdict_grid.csv", grid))
    return paths


def cmd_gradcheck(cfg: GradcheckConfig, run_dir: Path) -> List[Path]:
    print(f"🔍 Cross-checking gradients over {cfg.n_seeds} seeds...")
    report = gradient_check(cfg)
    path = write_json(run_dir / "gradcheck.json", report)
    for name, value in report["max_deviation"].items():
        mark = "✅" if value <= report["tolerances"][name] else "❌"
        print(f"    {mark} {name}: {value:.3e} (tolerance {report['tolerances'][name]:.0e})")
    if not report["passed"]:
        raise CheckFailure(f"gradient check failed: {', '.join(report['failed_checks'])}")
    return [path]


async def run_bench(cfg: BenchConfig, threads: int) -> List[dict]:
    """
    Run every cell `repeats` times.

    Untimed cells share a worker pool capped at `threads`; timed cells run
    one at a time afterwards so their wall times are not contended.
    """
    jobs = [(i, r, cell) for r in range(cfg.repeats) for i, cell in enumerate(cfg.cells)]
    loop = asyncio.get_running_loop()
    semaphore = asyncio.Semaphore(threads)
    results: Dict[tuple, dict] = {}

    async def run_one(index, repeat, cell, executor):
        async with semaphore:
            row = await loop.run_in_executor(executor, run_bench_cell, cell)
        print(f"    ✅ {cell.label} (repeat {repeat})")
        results[(repeat, index)] = {"index": index, "repeat": repeat, **row}

    with ThreadPoolExecutor(max_workers=threads) as executor:
        await asyncio.gather(*(run_one(i, r, c, executor) for i, r, c in jobs if not c.timed))
        for i, r, c in jobs:
            if c.timed:
                await run_one(i, r, c, executor)
    return [results[k] for k in sorted(results)]


def cmd_bench(cfg: BenchConfig, run_dir: Path, settings: Settings) -> List[Path]:
    print(f"📊 Benchmarking {len(cfg.cells)} cells x {cfg.repeats} repeats on {settings.threads} workers...")
    rows = asyncio.run(run_bench(cfg, settings.threads))
    paths = [append_jsonl(run_dir / "bench.jsonl", rows)]
    if cfg.repeats > 1:
        deviations = calculate_deviations(rows, "cell", ["wall_ms", "backward_ms", "loss"])
        detailed, console = format_deviation_summary(deviations)
        print(console)
        paths.append(write_text(run_dir / "bench_summary.txt", detailed))
        paths.append(write_json(run_dir / "bench_deviations.json", deviations))
    return paths


def cmd_train(cfg: TrainConfig, run_dir: Path) -> List[Path]:
    data = load_dataset(cfg.dataset)
    print(f"🔍 Training on {data.label or cfg.dataset.kind}: {data.n_points} samples, {cfg.repeats} run(s)")
    results = train_repeats(cfg, data)
    paths = []
    summary_runs = []
    for k, result in enumerate(results):
        target = run_dir if cfg.repeats == 1 else run_dir / f"seed_{result.seed}"
        paths.extend(result.params.save(target / "params"))
        paths.append(append_jsonl(target / "training_log.jsonl", result.log))
        fit = predict(cfg, data, result)
        paths.append(write_step_record(target / "steps.csv", fit.record))
        paths.append(write_counters(target / "counters.json", fit.counters, loss=fit.loss))
        times, states = zip(*fit.snapshots)
        paths.append(write_snapshots(target / "snapshots.csv", times, states))
        summary_runs.append(
            {
                "seed": result.seed,
                "final_loss": result.final_loss,
                "skipped_iterations": sum(1 for r in result.log if r.get("skipped")),
                "wall_ms": sum(r["wall_ms"] for r in result.log),
            }
        )
        print(f"    ✅ seed {result.seed}: final loss {result.final_loss:.6e}")

    finals = np.array([r["final_loss"] for r in summary_runs])
    summary = {
        "dataset": data.label,
        "solver": cfg.solver,
        "engine": cfg.engine,
        "iterations": cfg.iterations,
        "runs": summary_runs,
        "final_loss_mean": float(np.mean(finals)),
        "final_loss_std": float(np.std(finals)),
    }
    paths.append(write_json(run_dir / "summary.json", summary))
    print(f"📊 Final loss {summary['final_loss_mean']:.6e} ± {summary['final_loss_std']:.2e}")
    return paths


def cmd_tableaux(run_dir: Optional[Path]) -> List[Path]:
    tables = [tableau_json(make_tableau(name)) for name in TABLEAU_NAMES]
    print(json.dumps(tables, indent=2))
    if run_dir is None:
        return []
    return [write_json(run_dir / "tableaux.json", tables)]


# ----------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="revode", description="Reversible Runge-Kutta Neural-ODE experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file; defaults apply when omitted")
        p.add_argument("--out", help="Run directory (default: next output/run_XXXX)")
        p.add_argument("--seed", type=int, help="Override the config seed")
        p.add_argument("--engine", choices=("reversible", "full_tape", "checkpointed"), help="Override the gradient engine")
        p.add_argument("--verbose", "-v", action="store_true", help="Debug logging")
        p.add_argument("--env-file", help="Explicit .env file")
    return parser


def run(args: argparse.Namespace) -> int:
    settings = load_settings(args.env_file)

    if args.command == "tableaux":
        run_dir = Path(args.out) if args.out else None
        if run_dir is not None:
            run_dir.mkdir(parents=True, exist_ok=True)
        cmd_tableaux(run_dir)
        return 0

    config = load_config(args.config, CONFIG_MODELS[args.command], _overrides(args, _raw_config(args.config)))
    run_dir = Path(args.out) if args.out else create_run_directory(settings.output_root)
    run_dir.mkdir(parents=True, exist_ok=True)
    setup_logging(run_dir, args.verbose, settings.log_level)

    manifest = RunManifest(
        subcommand=args.command,
        config=config.model_dump(mode="json"),
        seed=getattr(config, "seed", None),
        build=git_describe(),
    )
    manifest.write(run_dir)
    print(f"\n🔍 revode {args.command} -> {run_dir}\n")
    start = time.perf_counter()
    try:
        if args.command == "convergence":
            paths = cmd_convergence(config, run_dir)
        elif args.command == "stability":
            paths = cmd_stability(config, run_dir)
        elif args.command == "gradcheck":
            paths = cmd_gradcheck(config, run_dir)
        elif args.command == "bench":
            paths = cmd_bench(config, run_dir, settings)
        else:
            paths = cmd_train(config, run_dir)
    except RevodeError:
        manifest.complete(run_dir, status="failed")
        raise
    manifest.outputs = [str(Path(p)) for p in paths]
    manifest.complete(run_dir)
    print(f"\n✅ Done in {time.perf_counter() - start:.1f}s, results in {run_dir}")
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    """Entry point; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code else 0
    try:
        return run(args)
    except RevodeError as e:
        print(f"\n❌ {type(e).__name__}: {e}")
        return e.exit_code
    except KeyboardInterrupt:
        print("\n\n⚠️ Process interrupted by user (CTRL+C)")
        return 1


if __name__ == "__main__":
    sys.exit(main())

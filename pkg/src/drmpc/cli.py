"""Command-line entry point: ``drmpc plan``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .config import RunConfig, config_from_dict, dump_config, parse_config
from .errors import ConfigurationError, DrmpcError, InputError
from .experiment import CLI_VARIANTS, build_problem, run_iterations
from .report import emit_outputs

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_SOLVE = 4

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}

log = logging.getLogger("drmpc")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="drmpc", description="Iterative MPC with distributionally robust obstacle avoidance.")
    sub = parser.add_subparsers(dest="command", required=True)
    plan = sub.add_parser("plan", help="run the iterative experiment and write CSV, JSON and SVG outputs")
    plan.add_argument("--config", type=Path, help="JSON config; omitted fields take their defaults")
    plan.add_argument("--variant", choices=[*CLI_VARIANTS, "all"], help="safety set variant (default: from config)")
    plan.add_argument("--seed", type=int, help="seed for sampling and clustering (default: from config)")
    plan.add_argument("--out", type=Path, help="output directory (default: from config)")
    plan.add_argument("--iterations", type=int, help="number of iterations (default: from config)")
    plan.add_argument("--checkpoint", type=Path,
                      help="checkpoint file; one file per variant is derived from it and resumed if present")
    return parser


def _setup_logging() -> None:
    level_name = os.environ.get("DRMPC_LOG", "error").strip().lower()
    if level_name not in LOG_LEVELS:
        raise ConfigurationError(f"DRMPC_LOG must be one of {sorted(LOG_LEVELS)}, got {level_name!r}")
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    log.handlers[:] = [handler]
    log.setLevel(LOG_LEVELS[level_name])
    log.propagate = False


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Load the config file and apply command-line overrides."""
    cfg = parse_config(args.config) if args.config else RunConfig()
    overrides = {
        "variant": args.variant,
        "seed": args.seed,
        "output_dir": None if args.out is None else str(args.out),
        "iterations": args.iterations,
    }
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if not overrides:
        return cfg
    return config_from_dict({**cfg.model_dump(mode="json"), **overrides})


def _checkpoint_for(base: Path | None, name: str, n_variants: int) -> Path | None:
    if base is None or n_variants == 1:
        return base
    return base.with_name(f"{base.stem}.{name}{base.suffix or '.json'}")


def run_plan(cfg: RunConfig, problem, checkpoint: Path | None = None) -> dict:
    """Run every requested variant in sequence and write the outputs."""
    names = list(CLI_VARIANTS) if cfg.variant == "all" else [cfg.variant]
    results = {}
    for name in names:
        log.info("running variant %s for %d iterations (seed %d)", name, cfg.iterations, cfg.seed)
        results[name] = run_iterations(
            problem, CLI_VARIANTS[name], cfg.seed, checkpoint=_checkpoint_for(checkpoint, name, len(names))
        )
    emit_outputs(results, cfg.output_dir, problem, config=cfg.model_dump(mode="json"))
    return results


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _setup_logging()
        cfg = resolve_config(args)
        problem = build_problem(cfg)
    except (ConfigurationError, InputError) as exc:
        print(f"drmpc: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    log.debug("config:\n%s", dump_config(cfg))
    try:
        results = run_plan(cfg, problem, args.checkpoint)
    except ConfigurationError as exc:
        print(f"drmpc: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"drmpc: cannot write outputs: {exc}", file=sys.stderr)
        return EXIT_IO
    except DrmpcError as exc:
        print(f"drmpc: {exc}", file=sys.stderr)
        return EXIT_SOLVE
    for name, res in results.items():
        last = res.records[-1]
        print(f"{name}: {len(res.records)} iterations, robust cost {res.robust.cost:.4f}, "
              f"final cost {last.cost:.4f}, final steps {last.trajectory.steps}")
    print(f"outputs written to {cfg.output_dir}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

#!/usr/bin/env python3
"""
HVAC load disaggregation from 15-minute smart-meter data.

    python hvac_disagg.py synth        --config run.json --out corpus/
    python hvac_disagg.py disaggregate --config run.json --out runs/r1
    python hvac_disagg.py evaluate     --config run.json --out runs/r1
    python hvac_disagg.py report       --config run.json --out runs/r1

Exit codes: 0 success, 2 config error, 3 data error, 4 infeasible
fine-tune results present.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from disagg_config import WORKERS_ENV, PipelineConfig, dump_config, load_config, resolve_config
from disagg_errors import EXIT_INFEASIBLE, EXIT_OK, DisaggError
from disagg_pipeline import disaggregate, evaluate, write_report
from household_synth import generate_corpus

LOG_LEVEL_ENV = "HVAC_DISAGG_LOG_LEVEL"
LOG_NAME = "hvac_disagg.log"
LOG_FORMAT = "%(asctime)s - %(levelname)s - %(message)s"


def setup_logging(run_dir: Optional[Path], level: Optional[str]) -> None:
    name = (level or os.getenv(LOG_LEVEL_ENV) or "INFO").upper()
    handlers: list[logging.Handler] = [logging.StreamHandler()]
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        handlers.insert(0, logging.FileHandler(run_dir / LOG_NAME, encoding="utf-8"))
    logging.basicConfig(level=getattr(logging, name, logging.INFO), format=LOG_FORMAT, handlers=handlers, force=True)


def cmd_synth(cfg: PipelineConfig, out_dir: Path) -> int:
    cfg = replace(cfg, data=replace(cfg.data, corpus_dir=str(out_dir)))
    dump_config(cfg, out_dir)
    generate_corpus(cfg.synth, out_dir, seed=cfg.seed, workers=cfg.workers)
    return EXIT_OK


def cmd_disaggregate(cfg: PipelineConfig, out_dir: Path) -> int:
    dump_config(cfg, out_dir)
    summary = disaggregate(cfg, out_dir)
    if not summary.all_feasible:
        logging.warning("⚠️ %d infeasible result(s) over %d hot day(s)", len(summary.infeasible), summary.hot_days)
        return EXIT_INFEASIBLE
    logging.info("✅ %d customer(s), %d hot day(s) disaggregated", summary.customers, summary.hot_days)
    return EXIT_OK


def cmd_evaluate(cfg: PipelineConfig, out_dir: Path) -> int:
    evaluate(cfg, out_dir)
    return EXIT_OK


def cmd_report(cfg: PipelineConfig, out_dir: Path) -> int:
    path = write_report(cfg, out_dir)
    logging.info("✅ report written to %s", path)
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "disaggregate": cmd_disaggregate,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="HVAC load disaggregation from smart-meter data")
    parser.add_argument("command", choices=sorted(COMMANDS), help="pipeline step to run")
    parser.add_argument("--config", type=Path, default=None, help="JSON config file (defaults if omitted)")
    parser.add_argument("--out", default=None, help="corpus directory for synth, run directory otherwise")
    parser.add_argument("--workers", type=int, default=None, help=f"parallel customers (env {WORKERS_ENV})")
    parser.add_argument("--seed", type=int, default=None, help="global seed")
    parser.add_argument("--log-level", default=None, help=f"DEBUG, INFO, WARNING (env {LOG_LEVEL_ENV})")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(load_config(args.config), out=args.out, seed=args.seed, workers=args.workers)
        out_dir = Path(args.out) if args.out else Path(cfg.data.corpus_dir if args.command == "synth" else cfg.output_dir)
        setup_logging(out_dir, args.log_level)
        logging.info("🚀 %s -> %s (seed %d)", args.command, out_dir, cfg.seed)
        return COMMANDS[args.command](cfg, out_dir)
    except DisaggError as exc:
        if not logging.getLogger().handlers:
            setup_logging(None, args.log_level)
        logging.error("❌ %s", exc)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())

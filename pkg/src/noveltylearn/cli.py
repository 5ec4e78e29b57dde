"""Command-line entry point: ``noveltylearn <stage> [--config FILE] [--section-key VALUE ...]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from typing import Any, Sequence

from . import __version__
from .config import PipelineConfig, flag_specs
from .errors import NoveltyError
from .pipeline import STAGES, run_all, run_stage

COMMANDS = [
    ("synth", "generate a synthetic log with planted tastes and policies"),
    ("ingest", "parse the TSV log, prune rare tracks, write the event cache"),
    ("sessionize", "split each user's events into listening sessions"),
    ("train-lda", "fit the taste model by collapsed Gibbs sampling"),
    ("select-model", "grid-search K and sweep count by held-out perplexity"),
    ("assign", "assign each session its most probable taste"),
    ("train-policy", "learn one novel/familiar policy per user"),
    ("evaluate", "score policies on held-out transitions"),
    ("vop", "cross-user policy matrix and value of personalization"),
    ("churn-report", "taste similarity of quitting vs continuing users"),
    ("run-all", "run every stage in order"),
]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="FILE", help="INI file; NOVELTY_<SECTION>_<KEY> env vars and flags override it")
    common.add_argument("--force", action="store_true", default=None, help="accept missing manifest entries and stale inputs")
    common.add_argument("--threads", type=int, default=None, help="worker threads for per-user and per-K work")
    common.add_argument("--json", action="store_true", help="print the summary as JSON instead of a table")
    common.add_argument("-v", "--verbose", action="store_true")
    overrides = common.add_argument_group("config overrides")
    for flag, section, key in flag_specs(PipelineConfig()):
        overrides.add_argument(flag, dest=f"cfg:{section}:{key}", metavar="VALUE", default=None, help=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(
        prog="noveltylearn",
        description="Taste discovery and per-user novelty-seeking policies for music listening logs.",
        epilog="Every config key is also a flag, e.g. --lda-K 5 or --agent-gamma 0.8.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, help_ in COMMANDS:
        sub.add_parser(name, parents=[common], help=help_, description=help_)
    return parser


def load_config(args: argparse.Namespace) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config)
    for dest, raw in vars(args).items():
        if dest.startswith("cfg:") and raw is not None:
            _, section, key = dest.split(":")
            cfg.set(section, key, raw)
    if args.force is not None:
        cfg.run.force = True
    if args.threads is not None:
        cfg.run.threads = args.threads
    cfg.validate()
    return cfg


def _flatten(d: Any, prefix: str = "") -> list[tuple[str, str]]:
    rows = []
    if isinstance(d, dict):
        for k, v in d.items():
            rows.extend(_flatten(v, f"{prefix}.{k}" if prefix else str(k)))
    elif isinstance(d, list) and d and isinstance(d[0], (dict, list)):
        rows.append((prefix, f"[{len(d)} entries]"))
    else:
        if isinstance(d, float):
            d = f"{d:.6g}"
        elif isinstance(d, list):
            d = ", ".join(f"{x:.4g}" if isinstance(x, float) else str(x) for x in d)
            if len(d) > 100:
                d = d[:97] + "..."
        rows.append((prefix, str(d)))
    return rows


def format_table(summary: dict) -> str:
    rows = _flatten(summary)
    width = max((len(k) for k, _ in rows), default=0)
    return "\n".join(f"{k.ljust(width)}  {v}" for k, v in rows)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args)
        if args.command == "run-all":
            summary: dict = run_all(cfg)
        else:
            summary = run_stage(args.command, cfg)
    except NoveltyError as exc:
        print(f"error [{exc.category}]: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error [io]: {exc}", file=sys.stderr)
        return 1
    if args.json:
        print(json.dumps(summary, sort_keys=True, indent=1))
    else:
        print(format_table(summary))
    return 0


assert set(STAGES) | {"run-all"} == {c for c, _ in COMMANDS}

if __name__ == "__main__":
    sys.exit(main())

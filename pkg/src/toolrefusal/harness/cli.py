"""Command-line entry point: one subcommand per pipeline stage."""

from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .config import CONDITIONS, ConfigError, load_config


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="toolrefusal", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="stage", required=True)

    def add(name: str, help: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", required=True, help="experiment config (YAML or JSON)")
        p.add_argument("--force", action="store_true", help="re-run even if outputs are current")
        return p

    add("generate", "build the base corpus (queries from the generation backend)")
    add("extend", "propose extension parameters and build the higher-degree corpora")
    add("counterfactual", "write semantic and structural counterfactual sets")
    add("split", "template-disjoint train/val/test splits")
    p = add("eval-tir", "tool invocation rate for one corpus and condition")
    p.add_argument("--corpus", required=True, help="D<k>, random, or D<k>/<counterfactual set>")
    p.add_argument("--condition", default="base", choices=CONDITIONS)
    p.add_argument("--split", default=None, choices=pipeline.SPLITS)
    p = add("attribute", "contrastive importance tables for both pathway kinds")
    p.add_argument("--from-persisted", action="store_true", help="recompute groups from stored per-sample tables")
    add("pathways", "top-k pathways and sweep candidates")
    add("sweep", "group patching and coefficient sweeps")
    add("grid-search", "select rebalancing coefficients on the validation split")
    add("rebalance-eval", "TIR with the selected rebalancing on the configured corpora")
    add("report", "figures and tables from persisted outputs")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    run = pipeline.Run(cfg, force=args.force)
    stage = args.stage
    try:
        if stage == "eval-tir":
            pipeline.eval_tir(run, args.corpus, args.condition, args.split)
        elif stage == "attribute":
            pipeline.attribute(run, from_persisted=args.from_persisted)
        elif stage == "rebalance-eval":
            pipeline.rebalance_eval(run)
        else:
            getattr(pipeline, stage.replace("-", "_"))(run)
    except pipeline.StageError as exc:
        print(f"{stage} failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

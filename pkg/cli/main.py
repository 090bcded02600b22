"""
Phenotyper CLI.

Subcommands:
- synth      (synthetic cohort with planted phenotypes)
- match      (propensity matching + chi-square on the matched cohort)
- embed      (skip-gram embeddings + similarity matrix)
- tensorize  (transition tensor + mean transition matrix)
- fit        (coupled factorization)
- evaluate   (metrics, significance, stratification)
- export     (phenotype graphs as DOT / JSON)
- run        (whole pipeline, cached per stage)
- report     (summary of a run directory)
- sweep      (hyper-parameter grid, mean (sd) over trials)

Every subcommand reads the same TOML config (--config); flags override file values.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Any, Sequence

try:
    from dotenv import load_dotenv
    load_dotenv()
except Exception:
    pass

from phenotyper.config import ENV_LOG_LEVEL, PipelineConfig, derive_seed, load_pipeline_config
from phenotyper.errors import PhenotyperError
from phenotyper.pipeline import (
    report,
    run_cohort_stage,
    run_embed_stage,
    run_evaluate_stage,
    run_export_stage,
    run_fit_stage,
    run_match_stage,
    run_pipeline,
    run_sweep_stage,
    run_tensorize_stage,
)

logger = logging.getLogger("phenotyper.cli")

# flag dest -> dotted config key
OVERRIDES = {
    "seed": "seed",
    "out": "out_dir",
    "cohort": "cohort_path",
    "cohort_format": "cohort_format",
    "min_prevalence": "ingest.min_prevalence",
    "patients": "synth.n_patients",
    "entities": "synth.n_entities",
    "true_rank": "synth.rank",
    "noise": "synth.noise_rate",
    "cases": "matching.cases_path",
    "controls": "matching.controls_path",
    "caliper": "matching.caliper",
    "bias_budget": "matching.bias_budget",
    "dim": "embedding.d",
    "negatives": "embedding.negatives",
    "epochs": "embedding.epochs",
    "mode": "tensor.mode",
    "self_loops": "tensor.include_self_loops",
    "rank": "factorization.rank",
    "mu": "factorization.mu",
    "lam": "factorization.lambda",
    "gamma": "factorization.gamma",
    "max_iters": "factorization.max_iters",
    "learning_rate": "factorization.learning_rate",
    "test_fraction": "evaluation.test_fraction",
    "graph_format": "export.format",
    "top_k": "export.top_k",
    "epsilon": "export.epsilon",
    "p_threshold": "export.p_threshold",
}


def _common() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, metavar="TOML", help="Pipeline config file")
    common.add_argument("--out", metavar="DIR", help="Output directory (default: config out_dir / PHENOTYPER_OUT)")
    common.add_argument("--seed", type=int, help="Global seed; stage seeds derive from it")
    common.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING (default: PHENOTYPER_LOG_LEVEL or INFO)")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="phenotyper", description="Temporal phenotyping pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="Generate a synthetic cohort")
    p.add_argument("--patients", type=int)
    p.add_argument("--entities", type=int)
    p.add_argument("--true-rank", type=int, help="Number of planted phenotypes")
    p.add_argument("--noise", type=float)

    p = sub.add_parser("match", parents=[common], help="Propensity-score matching")
    p.add_argument("--cases", metavar="JSONL")
    p.add_argument("--controls", metavar="JSONL")
    p.add_argument("--caliper", type=float, help="Absolute caliper in logit units")
    p.add_argument("--bias-budget", type=float)

    p = sub.add_parser("embed", parents=[common], help="Skip-gram embeddings and similarity matrix")
    p.add_argument("--cohort", required=True, metavar="JSONL")
    p.add_argument("--dim", type=int)
    p.add_argument("--negatives", type=int)
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("tensorize", parents=[common], help="Transition tensor")
    p.add_argument("--cohort", required=True, metavar="JSONL")
    p.add_argument("--mode", choices=["patient_normalized", "counts"])
    p.add_argument("--no-self-loops", dest="self_loops", action="store_const", const=False, default=None)

    p = sub.add_parser("fit", parents=[common], help="Coupled factorization")
    p.add_argument("--cohort", required=True, metavar="JSONL")
    p.add_argument("--tensor", required=True, type=Path, metavar="CSV")
    p.add_argument("--similarity", required=True, type=Path, metavar="NPY")
    _factor_flags(p)

    p = sub.add_parser("evaluate", parents=[common], help="Metrics and phenotype significance")
    p.add_argument("--cohort", required=True, metavar="JSONL")
    p.add_argument("--tensor", required=True, type=Path, metavar="CSV")
    p.add_argument("--similarity", required=True, type=Path, metavar="NPY")
    p.add_argument("--model", required=True, type=Path, metavar="DIR")
    p.add_argument("--test-fraction", type=float)

    p = sub.add_parser("export", parents=[common], help="Phenotype transition graphs")
    p.add_argument("--model", required=True, type=Path, metavar="DIR")
    p.add_argument("--significance", required=True, type=Path, metavar="CSV")
    p.add_argument("--tensor", required=True, type=Path, metavar="CSV")
    p.add_argument("--format", dest="graph_format", choices=["dot", "json"])
    p.add_argument("--top-k", type=int)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--p-threshold", type=float)

    p = sub.add_parser("run", parents=[common], help="Run the whole pipeline")
    p.add_argument("--cohort", metavar="PATH", help="Cohort file (default: synthetic)")
    p.add_argument("--cohort-format", choices=["jsonl", "csv"])
    p.add_argument("--min-prevalence", type=float)
    _factor_flags(p)

    p = sub.add_parser("report", parents=[common], help="Summarise a run directory")
    p.add_argument("artifact_dir", type=Path)

    p = sub.add_parser("sweep", parents=[common], help="Hyper-parameter grid over (mu, lambda, gamma)")
    p.add_argument("--cohort", metavar="PATH", help="Cohort file (default: synthetic)")
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--test-fraction", type=float)
    p.add_argument("--rank", type=int)
    p.add_argument("--max-iters", type=int)
    return parser


def _factor_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--rank", type=int)
    p.add_argument("--mu", type=float)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--max-iters", type=int)
    p.add_argument("--learning-rate", type=float)


def _configure_logging(level: str | None) -> None:
    name = (level or os.getenv(ENV_LOG_LEVEL) or "INFO").upper()
    logging.basicConfig(
        level=getattr(logging, name, logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def _load_config(args: argparse.Namespace) -> PipelineConfig:
    values: dict[str, Any] = {}
    for dest, key in OVERRIDES.items():
        if dest in vars(args):
            values[key] = getattr(args, dest)
    return load_pipeline_config(args.config, values)


def _print_files(files: dict[str, Path]) -> None:
    for name, path in sorted(files.items()):
        print(f"Wrote {name}: {path}")


def _stage_dir(config: PipelineConfig, stage: str) -> Path:
    out = Path(config.out_dir) / stage
    out.mkdir(parents=True, exist_ok=True)
    return out


def dispatch(args: argparse.Namespace) -> int:
    if args.command == "report":
        print(report(args.artifact_dir), end="")
        return 0

    config = _load_config(args)
    seed = lambda stage: derive_seed(config.seed, stage)  # noqa: E731

    if args.command == "run":
        result = run_pipeline(config)
        print(f"Artifacts: {result.artifact_dir}")
        for record in result.manifest["stages"]:
            print(f"  {record['name']:<10} {record['status']}")
        return result.exit_status
    if args.command == "synth":
        files = run_cohort_stage(config.model_copy(update={"cohort_path": None}), seed("cohort"), _stage_dir(config, "synth"))
    elif args.command == "match":
        files = run_match_stage(config.matching, config.pools, seed("match"), _stage_dir(config, "match"))
    elif args.command == "embed":
        files = run_embed_stage(Path(args.cohort), config.embedding, seed("embed"), _stage_dir(config, "embed"))
    elif args.command == "tensorize":
        files = run_tensorize_stage(Path(args.cohort), config.tensor, _stage_dir(config, "tensorize"))
    elif args.command == "fit":
        hyper = config.factorization.model_copy(update={"seed": seed("fit")})
        files = run_fit_stage(Path(args.cohort), args.tensor, args.similarity, hyper, _stage_dir(config, "fit"))
    elif args.command == "evaluate":
        files = run_evaluate_stage(
            Path(args.cohort), args.tensor, args.similarity, args.model,
            config.evaluation, seed("evaluate"), _stage_dir(config, "evaluate"),
            truth_dir=Path(args.cohort).parent,
        )
    elif args.command == "export":
        files = run_export_stage(
            args.model, args.significance, args.tensor, config.export, seed("export"), _stage_dir(config, "export")
        )
    elif args.command == "sweep":
        files = run_sweep_stage(config, args.trials, _stage_dir(config, "sweep"))
    else:
        raise ValueError(f"unknown command {args.command}")
    _print_files(files)
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _configure_logging(args.log_level)
    try:
        return dispatch(args)
    except (PhenotyperError, ValueError, OSError) as e:
        logger.debug("command failed", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

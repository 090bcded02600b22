"""
End-to-end pipeline: cohort → match → embed → tensorize → fit → evaluate → export.

- One artifact directory per configuration: <out_dir>/<config hash[:12]>/<stage>/
- Each stage is keyed by a content hash of its settings, seed, upstream keys and input files;
  a stage whose key matches the marker left by a previous run is skipped as cached
- manifest.json records the config hash, stage seeds, per-stage status/timings and the failure point
- Stage runners are plain functions over files, reused by the single-stage CLI subcommands
"""

from __future__ import annotations

import hashlib
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np
import pandas as pd
from scipy.special import logit

from .analysis import (
    edge_scores,
    evaluate_model,
    export_graph,
    factor_recovery,
    logit_significance,
    membership_stratification,
)
from .cohort import Cohort, EntityId, PlantedTruth, cohort_summary, eligibility_filter, infer_kind, load_cohort, save_cohort
from .config import (
    STAGE_NAMES,
    EvaluationConfig,
    ExportConfig,
    HyperParams,
    MatchConfig,
    PipelineConfig,
    PoolConfig,
    SgdConfig,
    TensorConfig,
    canonical_json,
    config_hash,
    derive_seed,
)
from .embedding import build_pairs, pair_indices, similarity_matrix, train_skipgram
from .errors import ConfigError, PipelineError, ReportError, SeparationError
from .experiments import holdout_evaluation, run_sweep
from .factorization import fit
from .matching import (
    MatchCandidate,
    chi_square_yates,
    covariate_biases,
    fit_propensity,
    match_cohort,
    outcome_table,
)
from .storage import (
    file_hash,
    load_model,
    load_similarity,
    load_tensor,
    read_frame,
    read_json,
    save_embeddings,
    save_model,
    save_similarity,
    save_tensor,
    save_trace,
    write_frame,
    write_json,
)
from .synthetic import generate_matching_pools, generate_synthetic
from .tensor import build_transition_tensor, mean_transition_matrix

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
STAGE_MARKER = ".stage.json"
SCORE_CLIP = 1e-12
HISTOGRAM_BINS = 10

StageFiles = dict[str, Path]


# --- stage runners ----------------------------------------------------------------------------


def run_cohort_stage(config: PipelineConfig, seed: int, out: Path) -> StageFiles:
    """Ingest `cohort_path` or generate the synthetic cohort; writes the cohort and its summary."""
    if config.cohort_path:
        cohort = load_cohort(config.cohort_path, config.cohort_format, config.ingest.min_prevalence)
    else:
        cohort = generate_synthetic(config.synth.model_copy(update={"seed": seed}))
    files = {
        "cohort": save_cohort(cohort, out / "cohort.jsonl"),
        "summary": write_frame(out / "summary.csv", cohort_summary(cohort)),
    }
    truth = cohort.provenance.planted_truth
    if truth is not None:
        for name, X in (("true_B", truth.true_B), ("true_C", truth.true_C)):
            frame = pd.DataFrame(X, columns=[f"r{r}" for r in range(X.shape[1])])
            frame.insert(0, "code", cohort.codes)
            files[name] = write_frame(out / f"{name}.csv", frame)
    return files


def _score_histogram(scores: np.ndarray) -> list[int]:
    counts, _ = np.histogram(scores, bins=HISTOGRAM_BINS, range=(0.0, 1.0))
    return [int(c) for c in counts]


def run_match_stage(cfg: MatchConfig, pools: PoolConfig, seed: int, out: Path) -> StageFiles:
    """Propensity matching of cases to controls and the outcome chi-square on the matched set."""
    if cfg.cases_path and cfg.controls_path:
        cases = load_cohort(cfg.cases_path, min_prevalence=0.0)
        controls = load_cohort(cfg.controls_path, min_prevalence=0.0)
    else:
        cases, controls = generate_matching_pools(pools.model_copy(update={"seed": seed}))

    flow: dict[str, dict[str, int]] = {
        "cases": {"original": cases.n_patients},
        "controls": {"original": controls.n_patients},
    }
    if cfg.apply_eligibility:
        cases, _ = eligibility_filter(cases, cfg.min_age, cfg.min_window)
        controls, _ = eligibility_filter(controls, cfg.min_age, cfg.min_window)
    flow["cases"]["eligible"] = cases.n_patients
    flow["controls"]["eligible"] = controls.n_patients

    exposure = [1] * cases.n_patients + [0] * controls.n_patients
    propensity = fit_propensity(cases.covariates() + controls.covariates(), exposure, l2=cfg.l2)
    case_scores = np.clip(propensity.scores(cases.covariates()), SCORE_CLIP, 1.0 - SCORE_CLIP)
    control_scores = np.clip(propensity.scores(controls.covariates()), SCORE_CLIP, 1.0 - SCORE_CLIP)
    all_logits = logit(np.concatenate([case_scores, control_scores]))
    caliper = cfg.caliper if cfg.caliper is not None else cfg.caliper_sd * float(np.std(all_logits))

    result = match_cohort(
        [MatchCandidate(p.external_id, float(s), p.covariates) for p, s in zip(cases.patients, case_scores)],
        [MatchCandidate(p.external_id, float(s), p.covariates) for p, s in zip(controls.patients, control_scores)],
        caliper=caliper,
        bias_budget=cfg.bias_budget,
        max_rounds=cfg.max_rounds,
        shrink=cfg.shrink,
    )
    flow["cases"]["matched"] = len(result.pairs)
    flow["controls"]["matched"] = len(result.pairs)

    before = covariate_biases(cases.covariates(), controls.covariates())
    case_index = {p.external_id: i for i, p in enumerate(cases.patients)}
    control_index = {p.external_id: i for i, p in enumerate(controls.patients)}
    matched_case_scores = np.array([case_scores[case_index[a]] for a, _ in result.pairs])
    matched_control_scores = np.array([control_scores[control_index[c]] for _, c in result.pairs])

    chi_square: dict[str, Any] | None = None
    note = None
    if result.pairs:
        table = outcome_table(
            result.pairs,
            {p.external_id: p.label for p in cases.patients},
            {p.external_id: p.label for p in controls.patients},
        )
        try:
            chi = chi_square_yates(table)
            chi_square = {"table": table.counts, "chi2": chi.chi2, "p": chi.p, "log10_p": chi.log10_p, "df": chi.df}
        except ValueError as e:
            note = str(e)
    else:
        note = result.diagnostic

    payload = {
        "pairs": result.pairs,
        "dropped_cases": result.dropped_cases,
        "caliper": caliper,
        "caliper_used": result.caliper_used,
        "rounds": result.rounds,
        "diagnostic": result.diagnostic,
        "degenerate_covariates": result.degenerate_covariates(),
        "propensity": {
            "features": propensity.feature_names,
            "weights": propensity.weights,
            "intercept": propensity.intercept,
            "accuracy": propensity.accuracy,
        },
        "bias_before": before,
        "bias_after": result.standardized_bias,
        "flow": flow,
        "score_histograms": {
            "bins": HISTOGRAM_BINS,
            "before": {"cases": _score_histogram(case_scores), "controls": _score_histogram(control_scores)},
            "after": {"cases": _score_histogram(matched_case_scores), "controls": _score_histogram(matched_control_scores)},
        },
        "chi_square": chi_square,
        "chi_square_note": note,
    }
    bias_table = pd.DataFrame(
        {
            "covariate": list(before),
            "before": [before[k] for k in before],
            "after": [result.standardized_bias.get(k, math.nan) for k in before],
        }
    )
    return {
        "result": write_json(out / "result.json", payload),
        "bias_table": write_frame(out / "bias_table.csv", bias_table),
    }


def _load_stage_cohort(path: Path) -> Cohort:
    return load_cohort(path, "jsonl", min_prevalence=0.0)


def _vocabulary(codes: list[str]) -> list[EntityId]:
    return [EntityId(j, infer_kind(code), code) for j, code in enumerate(codes)]


def run_embed_stage(cohort_file: Path, cfg: SgdConfig, seed: int, out: Path) -> StageFiles:
    cohort = _load_stage_cohort(cohort_file)
    pairs = pair_indices(build_pairs(cohort))
    if len(pairs) == 0:
        raise PipelineError("cohort has no visit with two or more entities; nothing to embed", stage="embed")
    table = train_skipgram(pairs, cohort.vocabulary, cfg.model_copy(update={"seed": seed}))
    similarity = similarity_matrix(table, cfg.similarity_source)
    return {
        "embeddings": save_embeddings(table, cohort.codes, out / "embeddings.csv"),
        "similarity": save_similarity(similarity, out / "similarity.npy"),
    }


def run_tensorize_stage(cohort_file: Path, cfg: TensorConfig, out: Path) -> StageFiles:
    cohort = _load_stage_cohort(cohort_file)
    tensor = build_transition_tensor(cohort, cfg.mode, cfg.include_self_loops)
    files = {"tensor": save_tensor(tensor, cohort.codes, out / "tensor.csv")}
    files["tensor_meta"] = out / "tensor.json"
    if tensor.nnz:
        M = mean_transition_matrix(tensor)
        np.save(out / "mean_transition.npy", M)
        files["mean_transition"] = out / "mean_transition.npy"
    return files


def run_fit_stage(
    cohort_file: Path,
    tensor_file: Path,
    similarity_file: Path,
    hyper: HyperParams,
    out: Path,
) -> StageFiles:
    cohort = _load_stage_cohort(cohort_file)
    tensor, codes = load_tensor(tensor_file)
    similarity = load_similarity(similarity_file)
    result = fit(tensor, similarity, cohort.labels(), hyper)
    last = result.trace.records[-1]
    return {
        "model": save_model(result.model, out / "model", codes),
        "trace": save_trace(result.trace, out / "trace.csv"),
        "summary": write_json(
            out / "fit.json",
            {"iterations": result.iterations, "converged": result.converged, "final": last.as_dict()},
        ),
    }


def _aligned_truth(truth_file: Path, codes: list[str]) -> np.ndarray:
    frame = read_frame(truth_file, dtype={"code": str}).set_index("code")
    return frame.reindex(codes).fillna(0.0).to_numpy(dtype=float)


def run_evaluate_stage(
    cohort_file: Path,
    tensor_file: Path,
    similarity_file: Path,
    model_dir: Path,
    cfg: EvaluationConfig,
    seed: int,
    out: Path,
    truth_dir: Path | None = None,
) -> StageFiles:
    """In-sample and held-out metrics, per-phenotype significance and membership stratification."""
    cohort = _load_stage_cohort(cohort_file)
    tensor, codes = load_tensor(tensor_file)
    similarity = load_similarity(similarity_file)
    model, _ = load_model(model_dir)
    y = cohort.labels()

    in_sample = evaluate_model(model, tensor, y)
    holdout = holdout_evaluation(tensor, similarity, y, model.hyper, cfg.test_fraction, seed)
    penalized = cfg.penalized
    try:
        significance = logit_significance(model.A, y, cfg.standardize, penalized, cfg.penalty)
    except SeparationError as e:
        logger.warning("evaluate: %s; refitting with an L2 penalty of %g", e, cfg.penalty)
        penalized = True
        significance = logit_significance(model.A, y, cfg.standardize, True, cfg.penalty)

    recovery = None
    if truth_dir is not None and (truth_dir / "true_B.csv").exists():
        recovery = factor_recovery(
            model.B, model.C,
            _aligned_truth(truth_dir / "true_B.csv", codes),
            _aligned_truth(truth_dir / "true_C.csv", codes),
        )
    payload = {
        "in_sample": in_sample.as_dict(),
        "holdout": holdout.metrics.as_dict(),
        "holdout_sizes": {"train": len(holdout.train), "test": len(holdout.test)},
        "recovery": recovery,
        "significant": significance.significant(),
        "penalized": penalized,
        "intercept": {
            "coeff": significance.intercept,
            "std_err": significance.intercept_std_error,
            "p": significance.intercept_p,
        },
    }
    return {
        "metrics": write_json(out / "metrics.json", payload),
        "significance": write_frame(out / "significance.csv", significance.to_frame()),
        "stratification": write_frame(
            out / "stratification.csv", membership_stratification(model.A, y, cfg.bins)
        ),
    }


def run_export_stage(
    model_dir: Path,
    significance_file: Path,
    tensor_file: Path,
    cfg: ExportConfig,
    seed: int,
    out: Path,
) -> StageFiles:
    """One graph file per phenotype with p below the threshold, plus an index."""
    model, codes = load_model(model_dir)
    tensor, _ = load_tensor(tensor_file)
    significance = read_frame(significance_file)
    vocabulary = _vocabulary(codes)
    M = mean_transition_matrix(tensor)

    files: StageFiles = {}
    index = []
    for r, coeff, p in zip(significance["phenotype"], significance["coeff"], significance["P>|z|"]):
        r, p = int(r), float(p)
        if not (math.isfinite(p) and p < cfg.p_threshold):
            continue
        graph = edge_scores(
            r, model.B, model.C, M, vocabulary,
            epsilon=cfg.epsilon,
            top_k=cfg.top_k,
            coefficient=float(coeff),
            sample_from_top=cfg.sample_from_top,
            seed=seed,
        )
        path = export_graph([graph], out / f"phenotype_{r:02d}.{cfg.format}", cfg.format)
        files[f"phenotype_{r:02d}"] = path
        index.append(
            {
                "phenotype": r,
                "file": path.name,
                "p": p,
                "direction": graph.direction.value if graph.direction else None,
                "edges": len(graph.edges),
                "dropped_negative": graph.dropped_negative,
            }
        )
    files["index"] = write_json(out / "index.json", {"graphs": index, "format": cfg.format})
    return files


def run_sweep_stage(config: PipelineConfig, trials: int, out: Path) -> StageFiles:
    """Hyper-parameter grid over the configured cohort; one table row per (mu, lambda, gamma)."""
    cohort_dir = out / "cohort"
    run_cohort_stage(config, derive_seed(config.seed, "cohort"), cohort_dir)
    cohort = _load_stage_cohort(cohort_dir / "cohort.jsonl")
    table = train_skipgram(
        pair_indices(build_pairs(cohort)),
        cohort.vocabulary,
        config.embedding.model_copy(update={"seed": derive_seed(config.seed, "embed")}),
    )
    similarity = similarity_matrix(table, config.embedding.similarity_source)
    tensor = build_transition_tensor(cohort, config.tensor.mode, config.tensor.include_self_loops)
    truth = None
    if (cohort_dir / "true_B.csv").exists():
        truth = PlantedTruth(
            rank=config.synth.rank,
            true_B=_aligned_truth(cohort_dir / "true_B.csv", cohort.codes),
            true_C=_aligned_truth(cohort_dir / "true_C.csv", cohort.codes),
            true_memberships=np.zeros((0, config.synth.rank)),
            label_logits=np.zeros(0),
        )
    frame = run_sweep(
        tensor, similarity, cohort.labels(), config.factorization,
        trials=trials,
        test_fraction=config.evaluation.test_fraction,
        seed=derive_seed(config.seed, "sweep"),
        truth=truth,
    )
    return {"sweep": write_frame(out / "sweep.csv", frame)}


# --- orchestration ----------------------------------------------------------------------------


@dataclass(frozen=True)
class StageSpec:
    name: str
    upstream: tuple[str, ...]
    settings: Callable[[PipelineConfig], Any]
    inputs: Callable[[PipelineConfig], list[str]]
    run: Callable[[PipelineConfig, int, Path, Path], StageFiles]


def _no_inputs(_: PipelineConfig) -> list[str]:
    return []


def _dump(model: Any) -> Any:
    return model.model_dump(mode="json", by_alias=True)


STAGES: tuple[StageSpec, ...] = (
    StageSpec(
        "cohort",
        (),
        lambda c: {"cohort_path": c.cohort_path, "cohort_format": c.cohort_format,
                   "ingest": _dump(c.ingest), "synth": None if c.cohort_path else _dump(c.synth)},
        lambda c: [c.cohort_path] if c.cohort_path else [],
        lambda c, seed, root, out: run_cohort_stage(c, seed, out),
    ),
    StageSpec(
        "match",
        (),
        lambda c: {"matching": _dump(c.matching), "pools": _dump(c.pools)},
        lambda c: [p for p in (c.matching.cases_path, c.matching.controls_path) if p],
        lambda c, seed, root, out: run_match_stage(c.matching, c.pools, seed, out),
    ),
    StageSpec(
        "embed",
        ("cohort",),
        lambda c: _dump(c.embedding),
        _no_inputs,
        lambda c, seed, root, out: run_embed_stage(root / "cohort" / "cohort.jsonl", c.embedding, seed, out),
    ),
    StageSpec(
        "tensorize",
        ("cohort",),
        lambda c: _dump(c.tensor),
        _no_inputs,
        lambda c, seed, root, out: run_tensorize_stage(root / "cohort" / "cohort.jsonl", c.tensor, out),
    ),
    StageSpec(
        "fit",
        ("cohort", "embed", "tensorize"),
        lambda c: _dump(c.factorization),
        _no_inputs,
        lambda c, seed, root, out: run_fit_stage(
            root / "cohort" / "cohort.jsonl",
            root / "tensorize" / "tensor.csv",
            root / "embed" / "similarity.npy",
            c.factorization.model_copy(update={"seed": seed}),
            out,
        ),
    ),
    StageSpec(
        "evaluate",
        ("cohort", "embed", "tensorize", "fit"),
        lambda c: _dump(c.evaluation),
        _no_inputs,
        lambda c, seed, root, out: run_evaluate_stage(
            root / "cohort" / "cohort.jsonl",
            root / "tensorize" / "tensor.csv",
            root / "embed" / "similarity.npy",
            root / "fit" / "model",
            c.evaluation,
            seed,
            out,
            truth_dir=root / "cohort",
        ),
    ),
    StageSpec(
        "export",
        ("tensorize", "fit", "evaluate"),
        lambda c: _dump(c.export),
        _no_inputs,
        lambda c, seed, root, out: run_export_stage(
            root / "fit" / "model",
            root / "evaluate" / "significance.csv",
            root / "tensorize" / "tensor.csv",
            c.export,
            seed,
            out,
        ),
    ),
)


@dataclass(frozen=True)
class RunResult:
    exit_status: int
    artifact_dir: Path
    manifest: dict[str, Any]


def validate_inputs(config: PipelineConfig) -> None:
    """Every referenced input file must exist before any stage runs."""
    missing = [
        (name, path)
        for name, path in (
            ("cohort_path", config.cohort_path),
            ("matching.cases_path", config.matching.cases_path),
            ("matching.controls_path", config.matching.controls_path),
        )
        if path and not Path(path).exists()
    ]
    if missing:
        raise ConfigError("missing input files: " + ", ".join(f"{n}={p}" for n, p in missing))
    if bool(config.matching.cases_path) != bool(config.matching.controls_path):
        raise ConfigError("matching.cases_path and matching.controls_path must be given together")


def run_directory(config: PipelineConfig) -> Path:
    return Path(config.out_dir) / config_hash(config)[:12]


def _stage_key(spec: StageSpec, config: PipelineConfig, seed: int, upstream_keys: dict[str, str]) -> str:
    payload = {
        "stage": spec.name,
        "settings": spec.settings(config),
        "seed": seed,
        "upstream": upstream_keys,
        "inputs": {path: file_hash(Path(path)) for path in spec.inputs(config)},
    }
    return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()


def _read_marker(stage_dir: Path) -> dict[str, Any] | None:
    marker = stage_dir / STAGE_MARKER
    if not marker.exists():
        return None
    try:
        data = read_json(marker)
    except ValueError:
        return None
    outputs = [stage_dir / rel for rel in data.get("outputs", {}).values()]
    if not all(p.exists() for p in outputs):
        return None
    return data


def run_pipeline(config: PipelineConfig) -> RunResult:
    """
    Run the enabled stages in order, skipping those whose key matches a completed earlier run.

    A failing stage stops the run with exit status 1; its partial files stay on disk and the
    manifest records which stage failed.
    """
    validate_inputs(config)
    root = run_directory(config)
    root.mkdir(parents=True, exist_ok=True)
    digest = config_hash(config)
    seeds = {name: derive_seed(config.seed, name) for name in STAGE_NAMES}
    manifest: dict[str, Any] = {
        "config_hash": digest,
        "config": config.model_dump(mode="json", by_alias=True, exclude={"out_dir"}),
        "seeds": seeds,
        "stages": [],
        "status": "ok",
        "failed_stage": None,
    }
    logger.info("run_pipeline: artifact_dir=%s seed=%d", root, config.seed)

    keys: dict[str, str] = {}
    exit_status = 0
    for spec in STAGES:
        stage_dir = root / spec.name
        record: dict[str, Any] = {"name": spec.name, "seed": seeds[spec.name], "seconds": 0.0}
        if not getattr(config.stages, spec.name):
            marker = _read_marker(stage_dir)
            if marker is not None:
                keys[spec.name] = marker["key"]
            record["status"] = "disabled"
            manifest["stages"].append(record)
            continue
        missing = [u for u in spec.upstream if u not in keys]
        started = time.perf_counter()
        try:
            if missing:
                raise PipelineError(f"requires completed stage(s): {', '.join(missing)}", stage=spec.name)
            key = _stage_key(spec, config, seeds[spec.name], {u: keys[u] for u in spec.upstream})
            record["key"] = key
            marker = _read_marker(stage_dir)
            if marker is not None and marker.get("key") == key:
                record["status"] = "cached"
                record["outputs"] = marker["outputs"]
                logger.info("stage %s: cached", spec.name)
            else:
                logger.info("stage %s: running", spec.name)
                stage_dir.mkdir(parents=True, exist_ok=True)
                (stage_dir / STAGE_MARKER).unlink(missing_ok=True)
                files = spec.run(config, seeds[spec.name], root, stage_dir)
                outputs = {name: path.relative_to(stage_dir).as_posix() for name, path in sorted(files.items())}
                write_json(stage_dir / STAGE_MARKER, {"key": key, "outputs": outputs})
                record["status"] = "ran"
                record["outputs"] = outputs
            keys[spec.name] = key
        except Exception as e:  # noqa: BLE001 - any stage failure ends the run and is recorded
            logger.error("stage %s failed: %s", spec.name, e)
            record["status"] = "failed"
            record["error"] = f"{type(e).__name__}: {e}"
            manifest["status"] = "failed"
            manifest["failed_stage"] = spec.name
            exit_status = 1
        record["seconds"] = round(time.perf_counter() - started, 6)
        manifest["stages"].append(record)
        if exit_status:
            break

    write_json(root / MANIFEST, manifest)
    logger.info("run_pipeline: status=%s artifact_dir=%s", manifest["status"], root)
    return RunResult(exit_status, root, manifest)


# --- report -----------------------------------------------------------------------------------


def _stage_record(manifest: dict[str, Any], name: str) -> dict[str, Any]:
    for record in manifest.get("stages", []):
        if record.get("name") == name:
            return record
    return {"name": name, "status": "absent"}


def _completed(record: dict[str, Any]) -> bool:
    return record.get("status") in ("ran", "cached")


def _fmt(value: Any) -> str:
    if value is None:
        return "n/a"
    if isinstance(value, str):
        return value
    return f"{value:.4g}"


def report(artifact_dir: Path | str) -> str:
    """Human-readable summary of a run directory."""
    root = Path(artifact_dir)
    manifest_path = root / MANIFEST
    if not manifest_path.exists():
        raise ReportError(f"no manifest in {root}", path=manifest_path)
    try:
        manifest = read_json(manifest_path)
        if not isinstance(manifest, dict) or "stages" not in manifest:
            raise ValueError("missing 'stages'")
    except ValueError as e:
        raise ReportError(f"corrupted manifest {manifest_path}: {e}", path=manifest_path) from e

    lines = [f"Run {manifest.get('config_hash', '?')[:12]}  status={manifest.get('status')}"]
    if manifest.get("failed_stage"):
        lines.append(f"  failed at stage: {manifest['failed_stage']}")

    match = _stage_record(manifest, "match")
    lines.append("")
    lines.append("== Chi-square (matched cohort) ==")
    if _completed(match):
        result = read_json(root / "match" / "result.json")
        chi = result.get("chi_square")
        if chi:
            lines.append(f"  table {chi['table']}  chi2={chi['chi2']:.2f}  p={chi['p']:.3g}  log10(p)={chi['log10_p']:.2f}")
        else:
            lines.append(f"  not available ({result.get('chi_square_note')})")
        lines.append("")
        lines.append("== Matched-cohort standardized bias (%) ==")
        bias = read_frame(root / "match" / "bias_table.csv")
        for row in bias.itertuples(index=False):
            lines.append(f"  {row.covariate:<20} before={_fmt(row.before):>8}  after={_fmt(row.after):>8}")
        flow = result.get("flow", {})
        lines.append(f"  pairs={len(result.get('pairs', []))}  dropped_cases={result.get('dropped_cases')}  flow={flow}")
    else:
        lines.append(f"  matching stage {match.get('status')}; no chi-square result")
        lines.append("")
        lines.append("== Matched-cohort standardized bias (%) ==")
        lines.append(f"  note: matching stage {match.get('status')}; bias table omitted")

    evaluate = _stage_record(manifest, "evaluate")
    lines.append("")
    lines.append("== Metrics ==")
    significant: list[int] = []
    if _completed(evaluate):
        metrics = read_json(root / "evaluate" / "metrics.json")
        for split in ("in_sample", "holdout"):
            m = metrics[split]
            lines.append(
                f"  {split:<10} auc={_fmt(m['auc'])} sparsity={_fmt(m['sparsity'])} "
                f"overlap={_fmt(m['overlap'])} mse={_fmt(m['mse'])}"
            )
        if metrics.get("recovery") is not None:
            lines.append(f"  planted factor recovery={metrics['recovery']:.3f}")
        significant = metrics.get("significant", [])
    else:
        lines.append(f"  evaluate stage {evaluate.get('status')}")

    lines.append("")
    lines.append("== Significant phenotypes ==")
    if _completed(evaluate):
        lines.append(f"  count={len(significant)}  phenotypes={significant}")
    else:
        lines.append("  n/a")

    export = _stage_record(manifest, "export")
    lines.append("")
    lines.append("== Exported graphs ==")
    if _completed(export):
        index = read_json(root / "export" / "index.json")
        if not index["graphs"]:
            lines.append("  none (no phenotype below the p threshold)")
        for entry in index["graphs"]:
            lines.append(f"  {(root / 'export' / entry['file']).as_posix()}  edges={entry['edges']}  {entry['direction']}")
    else:
        lines.append(f"  export stage {export.get('status')}")

    lines.append("")
    lines.append("== Stages ==")
    for record in manifest["stages"]:
        lines.append(f"  {record['name']:<10} {record['status']:<9} {record.get('seconds', 0.0):.3f}s")
    return "\n".join(lines) + "\n"

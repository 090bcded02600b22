"""
Cohort-construction statistics.

- Propensity model: L2-penalised logistic regression on encoded covariates
- Standardized bias per covariate (categoricals: max over level indicators)
- Greedy nearest-neighbour matching on logit(score), without replacement, with caliper
  tightening until every covariate meets the bias budget
- 2x2 chi-square test with Yates continuity correction, p-value kept in log space
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.special import log_ndtr, logit

from .cohort import BOOLEAN_COVARIATES, CATEGORICAL_COVARIATES, NUMERIC_COVARIATES, Covariates
from .logistic import fit_logistic_irls

logger = logging.getLogger(__name__)

DEFAULT_BIAS_BUDGET = 5.0
DEFAULT_MAX_ROUNDS = 20
DEFAULT_SHRINK = 0.8

NO_MATCH_DIAGNOSTIC = "no admissible matches within caliper"
BUDGET_DIAGNOSTIC = "bias budget not met after max rounds"


@dataclass(frozen=True)
class CovariateEncoder:
    """
    Fixed covariate encoding, in this order:
    standardized numerics, booleans as 0/1, then one-hot categoricals with the first sorted level dropped.
    """

    means: tuple[float, ...]
    scales: tuple[float, ...]
    levels: tuple[tuple[str, ...], ...]

    @classmethod
    def fit(cls, covariates: Sequence[Covariates]) -> "CovariateEncoder":
        numeric = np.array([[getattr(c, n) for n in NUMERIC_COVARIATES] for c in covariates], dtype=float)
        scales = numeric.std(axis=0)
        scales[scales == 0] = 1.0
        levels = tuple(
            tuple(sorted({getattr(c, n) for c in covariates})) for n in CATEGORICAL_COVARIATES
        )
        return cls(tuple(numeric.mean(axis=0)), tuple(scales), levels)

    @property
    def feature_names(self) -> list[str]:
        names = list(NUMERIC_COVARIATES) + list(BOOLEAN_COVARIATES)
        for name, levels in zip(CATEGORICAL_COVARIATES, self.levels):
            names.extend(f"{name}={level}" for level in levels[1:])
        return names

    def encode(self, covariates: Sequence[Covariates]) -> np.ndarray:
        if not covariates:
            return np.zeros((0, len(self.feature_names)))
        numeric = np.array([[getattr(c, n) for n in NUMERIC_COVARIATES] for c in covariates], dtype=float)
        columns = [(numeric - np.array(self.means)) / np.array(self.scales)]
        columns.append(np.array([[float(getattr(c, n)) for n in BOOLEAN_COVARIATES] for c in covariates]))
        for name, levels in zip(CATEGORICAL_COVARIATES, self.levels):
            values = [getattr(c, name) for c in covariates]
            columns.append(np.array([[float(v == level) for level in levels[1:]] for v in values]).reshape(len(values), -1))
        return np.hstack(columns)


@dataclass(frozen=True, eq=False)
class PropensityModel:
    weights: np.ndarray
    intercept: float
    encoder: CovariateEncoder
    accuracy: float

    @property
    def feature_names(self) -> list[str]:
        return self.encoder.feature_names

    def linear_predictor(self, covariates: Sequence[Covariates]) -> np.ndarray:
        return self.encoder.encode(covariates) @ self.weights + self.intercept

    def scores(self, covariates: Sequence[Covariates]) -> np.ndarray:
        """Propensity P(exposure = 1 | covariates)."""
        eta = self.linear_predictor(covariates)
        return 1.0 / (1.0 + np.exp(-eta))


def fit_propensity(
    covariates: Sequence[Covariates],
    exposure: Sequence[int],
    l2: float = 1.0,
    init: np.ndarray | None = None,
) -> PropensityModel:
    """Penalised logistic regression of exposure (0/1) on encoded covariates."""
    y = np.asarray(exposure, dtype=float)
    if len(covariates) != len(y):
        raise ValueError("one exposure value per covariate record")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("exposure must be 0 or 1")
    if y.size == 0 or y.min() == y.max():
        raise ValueError("fit_propensity needs at least one sample per exposure class")
    encoder = CovariateEncoder.fit(covariates)
    X = encoder.encode(covariates)
    result = fit_logistic_irls(X, y, l2=l2, init=init)
    eta = X @ result.weights + result.intercept
    accuracy = float(np.mean((eta > 0) == (y == 1)))
    logger.info(
        "fit_propensity: n=%d features=%d l2=%.3g accuracy=%.3f iterations=%d",
        len(y), X.shape[1], l2, accuracy, result.iterations,
    )
    return PropensityModel(result.weights, result.intercept, encoder, accuracy)


def standardized_bias(values_case: Sequence[float], values_control: Sequence[float]) -> float:
    """
    100 * |mean_case - mean_control| / sqrt((var_case + var_control) / 2), population variances.

    Returns 0 when both variances vanish and the means agree, +inf (degenerate) when they differ.
    """
    a = np.asarray(values_case, dtype=float)
    b = np.asarray(values_control, dtype=float)
    if a.size == 0 or b.size == 0:
        raise ValueError("standardized_bias needs two non-empty samples")
    diff = abs(a.mean() - b.mean())
    pooled = math.sqrt((a.var() + b.var()) / 2.0)
    if pooled == 0.0:
        if diff <= 1e-12 * max(1.0, abs(a.mean())):
            return 0.0
        logger.warning("standardized_bias: degenerate zero-variance samples with different means")
        return math.inf
    return 100.0 * diff / pooled


def is_degenerate(bias: float) -> bool:
    return math.isinf(bias)


def covariate_biases(cases: Sequence[Covariates], controls: Sequence[Covariates]) -> dict[str, float]:
    """Standardized bias for every covariate; categoricals report the worst level."""
    biases: dict[str, float] = {}
    for name in NUMERIC_COVARIATES:
        biases[name] = standardized_bias([getattr(c, name) for c in cases], [getattr(c, name) for c in controls])
    for name in BOOLEAN_COVARIATES:
        biases[name] = standardized_bias(
            [float(getattr(c, name)) for c in cases], [float(getattr(c, name)) for c in controls]
        )
    for name in CATEGORICAL_COVARIATES:
        levels = sorted({getattr(c, name) for c in (*cases, *controls)})
        biases[name] = max(
            (
                standardized_bias(
                    [float(getattr(c, name) == level) for c in cases],
                    [float(getattr(c, name) == level) for c in controls],
                )
                for level in levels
            ),
            default=0.0,
        )
    return biases


@dataclass(frozen=True)
class MatchCandidate:
    id: int
    score: float
    covariates: Covariates | None = None


@dataclass(frozen=True)
class MatchResult:
    pairs: tuple[tuple[int, int], ...]
    standardized_bias: dict[str, float]
    dropped_cases: int
    caliper_used: float
    rounds: int
    diagnostic: str | None = None

    @property
    def max_bias(self) -> float:
        return max(self.standardized_bias.values(), default=0.0)

    def degenerate_covariates(self) -> list[str]:
        return sorted(k for k, v in self.standardized_bias.items() if is_degenerate(v))


def _covariate_space(covariates: Sequence[Covariates]) -> np.ndarray:
    """Encoded covariates with every column scaled to unit variance (constant columns left as is)."""
    X = CovariateEncoder.fit(covariates).encode(covariates)
    scale = X.std(axis=0)
    scale[scale == 0] = 1.0
    return X / scale


def _greedy_pairs(
    case_logits: np.ndarray,
    control_logits: np.ndarray,
    caliper: float,
    case_features: np.ndarray | None = None,
    control_features: np.ndarray | None = None,
) -> list[tuple[int, int]]:
    """
    Positions (case, control); cases must already be in processing order, controls in id order.

    Without features each case takes the closest unused control on the logit. With features it takes,
    among unused controls inside the caliper, the one nearest in covariate space, then nearest on the logit.
    np.lexsort is stable, so remaining ties go to the lower control position.
    """
    available = np.ones(len(control_logits), dtype=bool)
    pairs: list[tuple[int, int]] = []
    for ci, value in enumerate(case_logits):
        if not available.any():
            break
        distance = np.where(available, np.abs(control_logits - value), np.inf)
        if case_features is None:
            j = int(np.argmin(distance))
            if distance[j] <= caliper:
                pairs.append((ci, j))
                available[j] = False
            continue
        inside = np.flatnonzero(distance <= caliper)
        if inside.size == 0:
            continue
        spread = ((control_features[inside] - case_features[ci]) ** 2).sum(axis=1)
        j = int(inside[np.lexsort((distance[inside], spread))[0]])
        pairs.append((ci, j))
        available[j] = False
    return pairs


def match_cohort(
    cases: Sequence[MatchCandidate],
    controls: Sequence[MatchCandidate],
    caliper: float,
    bias_budget: float = DEFAULT_BIAS_BUDGET,
    max_rounds: int = DEFAULT_MAX_ROUNDS,
    shrink: float = DEFAULT_SHRINK,
) -> MatchResult:
    """
    Greedy 1:1 matching without replacement on logit(score).

    Cases go in descending score order (ties by id). Without covariates each case takes the closest
    unused control within the caliper, ties going to the lower control id. When every candidate
    carries covariates, the control is the one nearest in standardized covariate space among those
    within the caliper. While any covariate's standardized bias on the matched sets reaches
    `bias_budget`, the caliper shrinks by `shrink` and matching restarts, for at most `max_rounds`
    rounds. A tightened round that matches nobody ends the loop and the previous round is kept.
    """
    if caliper < 0:
        raise ValueError("caliper must be >= 0")
    for c in (*cases, *controls):
        if not 0.0 < c.score < 1.0:
            raise ValueError(f"propensity score of candidate {c.id} must be in (0, 1)")

    ordered_cases = sorted(cases, key=lambda c: (-c.score, c.id))
    ordered_controls = sorted(controls, key=lambda c: c.id)
    case_logits = logit(np.array([c.score for c in ordered_cases], dtype=float))
    control_logits = logit(np.array([c.score for c in ordered_controls], dtype=float))
    with_covariates = bool(cases) and bool(controls) and all(c.covariates is not None for c in (*cases, *controls))
    case_features = control_features = None
    if with_covariates:
        space = _covariate_space([c.covariates for c in (*ordered_cases, *ordered_controls)])
        case_features, control_features = space[: len(ordered_cases)], space[len(ordered_cases):]

    current = float(caliper)
    kept_caliper = current
    pairs: list[tuple[int, int]] = []
    biases: dict[str, float] = {}
    diagnostic: str | None = None
    rounds = 0
    for rounds in range(1, max_rounds + 1):
        positions = _greedy_pairs(case_logits, control_logits, current, case_features, control_features)
        if not positions:
            if pairs:
                diagnostic = BUDGET_DIAGNOSTIC
                logger.warning(
                    "match_cohort: caliper %.4g matched nobody, keeping round %d (max bias %.2f%%)",
                    current, rounds - 1, max(biases.values()),
                )
            else:
                diagnostic = NO_MATCH_DIAGNOSTIC
                logger.warning("match_cohort: %s (caliper=%.4g)", diagnostic, current)
            break
        pairs = [(ordered_cases[a].id, ordered_controls[b].id) for a, b in positions]
        kept_caliper = current
        if not with_covariates:
            biases = {}
            break
        biases = covariate_biases(
            [ordered_cases[a].covariates for a, _ in positions],
            [ordered_controls[b].covariates for _, b in positions],
        )
        worst = max(biases.values())
        logger.debug("match_cohort: round=%d caliper=%.4g pairs=%d max_bias=%.2f", rounds, current, len(pairs), worst)
        if worst < bias_budget:
            break
        if rounds < max_rounds:
            current *= shrink
    else:
        diagnostic = BUDGET_DIAGNOSTIC
        logger.warning("match_cohort: %s (max bias %.2f%% >= %.2f%%)", diagnostic, max(biases.values()), bias_budget)

    logger.info(
        "match_cohort: cases=%d controls=%d pairs=%d dropped=%d rounds=%d caliper=%.4g",
        len(cases), len(controls), len(pairs), len(cases) - len(pairs), rounds, kept_caliper,
    )
    return MatchResult(
        pairs=tuple(pairs),
        standardized_bias=biases,
        dropped_cases=len(cases) - len(pairs),
        caliper_used=kept_caliper,
        rounds=rounds,
        diagnostic=diagnostic,
    )


@dataclass(frozen=True)
class ContingencyTable2x2:
    """Rows = exposure (absent, present); columns = outcome (absent, present)."""

    counts: tuple[tuple[int, int], tuple[int, int]]

    def __post_init__(self) -> None:
        flat = [c for row in self.counts for c in row]
        if len(self.counts) != 2 or any(len(row) != 2 for row in self.counts):
            raise ValueError("contingency table must be 2x2")
        if any(int(c) != c or c < 0 for c in flat):
            raise ValueError("contingency counts must be non-negative integers")
        if sum(flat) == 0:
            raise ValueError("contingency table is empty")

    def as_array(self) -> np.ndarray:
        return np.array(self.counts, dtype=float)

    def expected(self) -> np.ndarray:
        observed = self.as_array()
        return np.outer(observed.sum(axis=1), observed.sum(axis=0)) / observed.sum()


@dataclass(frozen=True)
class ChiSquareResult:
    chi2: float
    log_p: float
    df: int = 1
    expected: tuple[tuple[float, float], tuple[float, float]] = field(default=((0.0, 0.0), (0.0, 0.0)))

    @property
    def p(self) -> float:
        return math.exp(self.log_p)

    @property
    def log10_p(self) -> float:
        return self.log_p / math.log(10.0)


def chi_square_yates(table: ContingencyTable2x2) -> ChiSquareResult:
    """
    Yates-corrected chi-square on a 2x2 table, df = 1.

    The upper tail Q(1/2, chi2/2) equals 2 * Phi(-sqrt(chi2)), evaluated as
    log 2 + log_ndtr(-sqrt(chi2)) so tiny p-values keep full relative precision.
    """
    observed = table.as_array()
    expected = table.expected()
    if np.any(expected == 0):
        raise ValueError("chi-square test undefined: an expected count is zero")
    corrected = np.maximum(np.abs(observed - expected) - 0.5, 0.0)
    chi2 = float(np.sum(corrected**2 / expected))
    log_p = float(math.log(2.0) + log_ndtr(-math.sqrt(chi2)))
    return ChiSquareResult(chi2=chi2, log_p=min(log_p, 0.0), expected=tuple(map(tuple, expected.tolist())))


def outcome_table(
    pairs: Sequence[tuple[int, int]],
    case_labels: Mapping[int, int],
    control_labels: Mapping[int, int],
) -> ContingencyTable2x2:
    """Matched-set counts; rows = (control, case), columns = (outcome absent, outcome present)."""
    control_pos = sum(control_labels[c] == 1 for _, c in pairs)
    case_pos = sum(case_labels[a] == 1 for a, _ in pairs)
    n = len(pairs)
    return ContingencyTable2x2(((n - control_pos, control_pos), (n - case_pos, case_pos)))

"""
Seeded synthetic cohorts.

- generate_synthetic: patients whose consecutive-visit transitions come from planted
  from-block / to-block patterns, labels from a logistic link on the planted memberships
- generate_matching_pools: visit-less case / control pools with shifted covariates
"""

from __future__ import annotations

import logging

import numpy as np
from scipy.special import expit

from .cohort import (
    Cohort,
    Covariates,
    EntityId,
    Patient,
    PlantedTruth,
    Provenance,
    Visit,
    infer_kind,
    validate_cohort,
)
from .config import PoolConfig, SynthConfig
from .errors import ConfigError

logger = logging.getLogger(__name__)

GENDERS = ("F", "M")
RACES = ("asian", "black", "other", "white")
ETHNICITIES = ("hispanic", "non_hispanic")

# control-arm prevalences; cases get these shifted
GENDER_P = (0.5, 0.5)
RACE_P = (0.05, 0.15, 0.05, 0.75)
ETHNICITY_P = (0.1, 0.9)
RISK_P = {"brain_injury": 0.03, "brain_tumor": 0.02, "stroke": 0.06}

AGE_MEAN, AGE_SD = 65.0, 8.0
WINDOW_MEAN, WINDOW_SD = 4.0, 1.5


def synthetic_codes(n_entities: int) -> list[str]:
    """Diagnoses take the low half of the index range, so sorted codes follow index order."""
    n_dx = n_entities // 2
    return [f"d:{j:04d}" if j < n_dx else f"m:{j:04d}" for j in range(n_entities)]


def planted_blocks(n_entities: int, rank: int) -> list[np.ndarray]:
    """Interleaved supports S_r = {j : j mod R == r}; each holds both kinds once J >= 2R."""
    return [np.arange(r, n_entities, rank) for r in range(rank)]


def planted_groups(rank: int) -> list[tuple[int, ...]]:
    """
    Patterns paired as (0, 1), (2, 3), ...; an odd rank leaves the last pattern on its own.
    Rank 2 stays unpaired so that groups of both label signs exist.
    """
    if rank == 2:
        return [(0,), (1,)]
    return [tuple(range(r, min(r + 2, rank))) for r in range(0, rank, 2)]


def planted_partner(r: int, rank: int) -> int:
    """Block that pattern r transitions to: the other member of its group, or its own block."""
    for group in planted_groups(rank):
        if r in group:
            return group[(group.index(r) + 1) % len(group)]
    raise ValueError(f"pattern {r} outside rank {rank}")


def _draw_covariates(rng: np.random.Generator) -> Covariates:
    return Covariates(
        age_at_start=round(float(rng.uniform(45.0, 90.0)), 2),
        observation_window=round(float(rng.uniform(0.5, 10.0)), 2),
        gender=str(rng.choice(GENDERS)),
        race=str(rng.choice(RACES, p=RACE_P)),
        ethnicity=str(rng.choice(ETHNICITIES, p=ETHNICITY_P)),
        brain_injury=bool(rng.random() < RISK_P["brain_injury"]),
        brain_tumor=bool(rng.random() < RISK_P["brain_tumor"]),
        stroke=bool(rng.random() < RISK_P["stroke"]),
    )


def generate_synthetic(cfg: SynthConfig) -> Cohort:
    """
    Build a cohort with planted phenotypes.

    Block S_r carries visit weights q_r (Dirichlet). Pattern r transitions from block r to block
    partner(r), so true_B[:, r] = q_r and true_C[:, r] = q_partner(r). Each patient belongs to one
    group of patterns and its visits alternate between the group's blocks from a random start:
    every visit draws 1..entities_per_visit_max distinct entities from the current block's weights,
    and every noiseless transition (j, k) has true_B[j, r] * true_C[k, r] > 0 for the pattern r
    leaving the earlier visit's block. With probability noise_rate an entity is replaced by a
    uniformly random one. Memberships are the share of a patient's visit pairs leaving each block.
    Labels follow y ~ Bernoulli(sigmoid(T * m_i . w)) with w = +1 on even groups and -1 on odd ones.
    """
    J, R = cfg.n_entities, cfg.rank
    if J < R:
        raise ConfigError(f"n_entities ({J}) must be >= rank ({R})")
    rng = np.random.default_rng(cfg.seed)

    blocks = planted_blocks(J, R)
    Q = np.zeros((J, R))
    for r, block in enumerate(blocks):
        Q[block, r] = rng.dirichlet(np.full(len(block), cfg.concentration))
    partners = [planted_partner(r, R) for r in range(R)]

    groups = planted_groups(R)
    weights = np.zeros(R)
    for g, group in enumerate(groups):
        weights[list(group)] = 1.0 if g % 2 == 0 else -1.0
    assignment = rng.integers(0, len(groups), size=cfg.n_patients)
    memberships = np.zeros((cfg.n_patients, R))

    patients: list[Patient] = []
    for i in range(cfg.n_patients):
        group = groups[assignment[i]]
        start = int(rng.integers(0, len(group)))
        n_visits = int(rng.integers(cfg.visits_min, cfg.visits_max + 1))
        path = [group[(start + t) % len(group)] for t in range(n_visits)]
        visits: list[Visit] = []
        for t, r in enumerate(path):
            q = Q[:, r]
            size = int(rng.integers(1, min(cfg.entities_per_visit_max, len(blocks[r])) + 1))
            drawn = rng.choice(J, size=size, replace=False, p=q)
            noisy = rng.random(size) < cfg.noise_rate
            drawn[noisy] = rng.integers(0, J, size=int(noisy.sum()))
            visits.append(Visit(t, tuple(sorted({int(j) for j in drawn}))))
        leaving = path[:-1] or path
        memberships[i] = np.bincount(leaving, minlength=R) / len(leaving)
        label = 1 if rng.random() < expit(cfg.label_temperature * memberships[i] @ weights) else -1
        patients.append(Patient(i, tuple(visits), label, _draw_covariates(rng)))

    logits = cfg.label_temperature * memberships @ weights
    codes = synthetic_codes(J)
    vocabulary = tuple(EntityId(j, infer_kind(code), code) for j, code in enumerate(codes))
    truth = PlantedTruth(
        rank=R, true_B=Q.copy(), true_C=Q[:, partners].copy(), true_memberships=memberships, label_logits=logits
    )
    cohort = validate_cohort(Cohort(vocabulary, tuple(patients), Provenance("synthetic", cfg.seed, truth)))
    logger.info(
        "generate_synthetic: patients=%d entities=%d rank=%d groups=%d positives=%d seed=%d",
        cfg.n_patients, J, R, len(groups), sum(p.label == 1 for p in patients), cfg.seed,
    )
    return cohort


def _shifted(p: tuple[float, ...], factor: float) -> np.ndarray:
    """Scale the first level's probability by `factor` and renormalise."""
    out = np.array(p, dtype=float)
    out[0] *= factor
    return out / out.sum()


def _pool(
    rng: np.random.Generator,
    n: int,
    shift: float,
    outcome_rate: float,
) -> Cohort:
    factor = 1.0 + shift
    age = np.maximum(45.0, rng.normal(AGE_MEAN + shift * AGE_SD, AGE_SD, size=n))
    window = np.maximum(0.5, rng.normal(WINDOW_MEAN + shift * WINDOW_SD, WINDOW_SD, size=n))
    gender = rng.choice(GENDERS, size=n, p=_shifted(GENDER_P, factor))
    race = rng.choice(RACES, size=n, p=_shifted(RACE_P, factor))
    ethnicity = rng.choice(ETHNICITIES, size=n, p=_shifted(ETHNICITY_P, factor))
    risks = {name: rng.random(n) < min(p * factor, 1.0) for name, p in RISK_P.items()}
    outcome = rng.random(n) < outcome_rate

    patients = tuple(
        Patient(
            id=i,
            visits=(),
            label=1 if outcome[i] else -1,
            covariates=Covariates(
                age_at_start=round(float(age[i]), 2),
                observation_window=round(float(window[i]), 2),
                gender=str(gender[i]),
                race=str(race[i]),
                ethnicity=str(ethnicity[i]),
                brain_injury=bool(risks["brain_injury"][i]),
                brain_tumor=bool(risks["brain_tumor"][i]),
                stroke=bool(risks["stroke"][i]),
            ),
        )
        for i in range(n)
    )
    return Cohort((), patients, Provenance("synthetic"))


def generate_matching_pools(cfg: PoolConfig) -> tuple[Cohort, Cohort]:
    """
    Case and control pools for propensity matching.

    Case numerics are shifted by `shift_sd` standard deviations; case categorical and risk-factor
    prevalences are scaled by (1 + shift_sd). Labels encode the outcome (+1 = outcome observed).
    """
    rng = np.random.default_rng(cfg.seed)
    cases = _pool(rng, cfg.n_cases, cfg.shift_sd, cfg.case_outcome_rate)
    controls = _pool(rng, cfg.n_controls, 0.0, cfg.control_outcome_rate)
    logger.info(
        "generate_matching_pools: cases=%d controls=%d shift_sd=%.2f seed=%d",
        cfg.n_cases, cfg.n_controls, cfg.shift_sd, cfg.seed,
    )
    return cases, controls

#!/usr/bin/env python3
"""
Phenotyper – Regenerate the demo cohort in data/ for reproducible examples and tests.

Supports two modes:
  1. --sample (default): a small hand-written cohort of 8 patients over codes d1..d4 / m1..m4.
     Patient 1 is the d1,m1 → d2,m1 → d2,m2 trajectory used throughout the docs.
  2. --synthetic: a planted-phenotype cohort from the generator (see [synth] in data/pipeline.toml).

Output: data/sample_cohort.jsonl, plus data/sample_cohort.csv with --csv.

Usage:
  python scripts/build_sample_data.py                 # hand-written demo cohort
  python scripts/build_sample_data.py --csv           # also write the long-format CSV
  python scripts/build_sample_data.py --synthetic --seed 7
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

# Project root (parent of scripts/)
PROJECT_ROOT = Path(__file__).resolve().parent.parent
if str(PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(PROJECT_ROOT))

from phenotyper.cohort import Cohort, Covariates, EntityId, Patient, Provenance, Visit, infer_kind, save_cohort, validate_cohort
from phenotyper.config import SynthConfig
from phenotyper.synthetic import generate_synthetic

DATA_DIR = PROJECT_ROOT / "data"
OUTPUT_PATH = DATA_DIR / "sample_cohort.jsonl"

# (id, label, (age, window, gender, race, ethnicity, brain_injury, brain_tumor, stroke), visits)
SAMPLE_PATIENTS = [
    (1, 1, (71.0, 6.5, "F", "white", "non_hispanic", False, False, False), [["d1", "m1"], ["d2", "m1"], ["d2", "m2"]]),
    (2, 1, (68.0, 4.0, "M", "white", "non_hispanic", False, False, True), [["d1"], ["d2", "m1"], ["m2"]]),
    (3, 1, (75.0, 8.0, "F", "black", "non_hispanic", False, False, False), [["d1", "m1"], ["d2"], ["d2", "m2", "m3"]]),
    (4, -1, (59.0, 3.5, "M", "asian", "non_hispanic", False, False, False), [["d3"], ["d3", "m3"], ["d4", "m4"]]),
    (5, -1, (62.0, 5.0, "F", "white", "hispanic", True, False, False), [["d3", "m3"], ["m4"]]),
    (6, -1, (55.0, 2.0, "M", "white", "non_hispanic", False, False, False), [["d4"], ["d3", "m4"], ["d4", "m3"]]),
    (7, 1, (80.0, 7.0, "M", "other", "non_hispanic", False, True, False), [["d1", "d3"], ["m1"], ["d2", "m2"]]),
    (8, -1, (49.0, 1.5, "F", "white", "non_hispanic", False, False, False), [["d4", "m3"], ["d3"], ["m4"], ["d1"]]),
]


def build_sample() -> Cohort:
    codes = sorted({c for *_, visits in SAMPLE_PATIENTS for visit in visits for c in visit})
    index = {c: j for j, c in enumerate(codes)}
    vocabulary = tuple(EntityId(j, infer_kind(c), c) for j, c in enumerate(codes))
    patients = []
    for new_id, (pid, label, covs, visits) in enumerate(SAMPLE_PATIENTS):
        patients.append(
            Patient(
                id=new_id,
                visits=tuple(Visit(t, tuple(sorted(index[c] for c in v))) for t, v in enumerate(visits)),
                label=label,
                covariates=Covariates(*covs),
                source_id=pid,
            )
        )
    return validate_cohort(Cohort(vocabulary, tuple(patients), Provenance("ingested")))


def main() -> int:
    parser = argparse.ArgumentParser(description="Regenerate data/sample_cohort.jsonl")
    parser.add_argument("--sample", action="store_true", help="Hand-written demo cohort (default)")
    parser.add_argument("--synthetic", action="store_true", help="Planted-phenotype cohort from the generator")
    parser.add_argument("--seed", type=int, default=0, help="Generator seed (--synthetic only)")
    parser.add_argument("--csv", action="store_true", help="Also write data/sample_cohort.csv")
    args = parser.parse_args()

    if args.synthetic:
        cohort = generate_synthetic(SynthConfig(seed=args.seed))
        source = f"synthetic (seed={args.seed})"
    else:
        cohort = build_sample()
        source = "sample"

    written = [save_cohort(cohort, OUTPUT_PATH)]
    if args.csv:
        written.append(save_cohort(cohort, OUTPUT_PATH.with_suffix(".csv")))
    for path in written:
        print(f"Wrote {path} (patients={cohort.n_patients}, codes={cohort.n_entities}) from {source}")
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""
Longitudinal cohort data model and ingestion.

- Entities (medications, diagnoses) indexed densely over a sorted vocabulary
- Patients = ordered visits (sets of entity indices) + label + covariates
- JSONL / CSV ingestion with line-numbered errors and a prevalence filter
- Serialization that round-trips through load_cohort
"""

from __future__ import annotations

import csv
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Literal

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator

from .errors import CohortValidationError, IngestionError

logger = logging.getLogger(__name__)

DEFAULT_MIN_PREVALENCE = 0.05

MEDICATION_PREFIXES = ("m", "med", "rx")
DIAGNOSIS_PREFIXES = ("d", "dx", "icd")

NUMERIC_COVARIATES = ("age_at_start", "observation_window")
CATEGORICAL_COVARIATES = ("gender", "race", "ethnicity")
BOOLEAN_COVARIATES = ("brain_injury", "brain_tumor", "stroke")

CSV_COLUMNS = (
    "patient_id",
    "label",
    *NUMERIC_COVARIATES,
    *CATEGORICAL_COVARIATES,
    *BOOLEAN_COVARIATES,
    "visit",
    "code",
)

CohortFormat = Literal["jsonl", "csv"]


class EntityKind(str, Enum):
    MEDICATION = "medication"
    DIAGNOSIS = "diagnosis"


def infer_kind(code: str) -> EntityKind:
    """Kind from the code prefix ("m:..." / "d:..."); bare codes starting with m are medications."""
    head, sep, _ = code.partition(":")
    if sep:
        prefix = head.strip().lower()
        if prefix in MEDICATION_PREFIXES:
            return EntityKind.MEDICATION
        if prefix in DIAGNOSIS_PREFIXES:
            return EntityKind.DIAGNOSIS
    return EntityKind.MEDICATION if code[:1] in ("m", "M") else EntityKind.DIAGNOSIS


@dataclass(frozen=True)
class EntityId:
    index: int
    kind: EntityKind
    code: str


@dataclass(frozen=True)
class Visit:
    ordinal: int
    # sorted, duplicate-free entity indices
    entities: tuple[int, ...]


@dataclass(frozen=True)
class Covariates:
    age_at_start: float
    observation_window: float
    gender: str
    race: str
    ethnicity: str
    brain_injury: bool
    brain_tumor: bool
    stroke: bool

    def as_dict(self) -> dict[str, Any]:
        return {
            "age_at_start": self.age_at_start,
            "observation_window": self.observation_window,
            "gender": self.gender,
            "race": self.race,
            "ethnicity": self.ethnicity,
            "brain_injury": self.brain_injury,
            "brain_tumor": self.brain_tumor,
            "stroke": self.stroke,
        }


@dataclass(frozen=True)
class Patient:
    id: int
    visits: tuple[Visit, ...]
    label: int
    covariates: Covariates
    # id as written in the source file (ids are re-densified on ingestion)
    source_id: int | None = None

    @property
    def external_id(self) -> int:
        return self.id if self.source_id is None else self.source_id


@dataclass(frozen=True, eq=False)
class PlantedTruth:
    """Ground truth of a synthetic cohort."""

    rank: int
    true_B: np.ndarray
    true_C: np.ndarray
    true_memberships: np.ndarray
    label_logits: np.ndarray


@dataclass(frozen=True)
class Provenance:
    kind: Literal["ingested", "synthetic"] = "ingested"
    seed: int | None = None
    planted_truth: PlantedTruth | None = field(default=None, compare=False)


@dataclass(frozen=True)
class Cohort:
    vocabulary: tuple[EntityId, ...]
    patients: tuple[Patient, ...]
    provenance: Provenance = Provenance()

    @property
    def n_patients(self) -> int:
        return len(self.patients)

    @property
    def n_entities(self) -> int:
        return len(self.vocabulary)

    @property
    def codes(self) -> list[str]:
        return [e.code for e in self.vocabulary]

    @property
    def kinds(self) -> list[EntityKind]:
        return [e.kind for e in self.vocabulary]

    def labels(self) -> np.ndarray:
        return np.array([p.label for p in self.patients], dtype=float)

    def covariates(self) -> list[Covariates]:
        return [p.covariates for p in self.patients]

    def subset(self, patient_ids: Iterable[int]) -> "Cohort":
        """Patients in the given order with ids re-densified; vocabulary unchanged."""
        chosen = [self.patients[i] for i in patient_ids]
        patients = tuple(
            Patient(new_id, p.visits, p.label, p.covariates, p.external_id)
            for new_id, p in enumerate(chosen)
        )
        return Cohort(self.vocabulary, patients, Provenance(self.provenance.kind, self.provenance.seed))


def validate_cohort(cohort: Cohort) -> Cohort:
    """Check every invariant of the data model; return the cohort unchanged."""
    J = cohort.n_entities
    for j, entity in enumerate(cohort.vocabulary):
        if entity.index != j:
            raise CohortValidationError(f"vocabulary index {entity.index} at position {j}")
    codes = cohort.codes
    if len(set(codes)) != len(codes):
        raise CohortValidationError("duplicate code in vocabulary")
    for i, patient in enumerate(cohort.patients):
        if patient.id != i:
            raise CohortValidationError(f"patient ids must be dense 0..I-1 (got {patient.id} at {i})")
        if patient.label not in (1, -1):
            raise CohortValidationError(f"patient {patient.external_id}: label must be +1 or -1")
        previous = -1
        for visit in patient.visits:
            if not visit.entities:
                raise CohortValidationError(f"patient {patient.external_id}: empty visit {visit.ordinal}")
            if visit.ordinal <= previous:
                raise CohortValidationError(f"patient {patient.external_id}: ordinals not increasing")
            previous = visit.ordinal
            if list(visit.entities) != sorted(set(visit.entities)):
                raise CohortValidationError(f"patient {patient.external_id}: unsorted or duplicate entities")
            if visit.entities[0] < 0 or visit.entities[-1] >= J:
                raise CohortValidationError(f"patient {patient.external_id}: entity outside vocabulary")
    return cohort


class _CovariatesRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    age_at_start: float
    observation_window: float
    gender: str
    race: str
    ethnicity: str
    brain_injury: bool
    brain_tumor: bool
    stroke: bool

    @field_validator("age_at_start", "observation_window")
    @classmethod
    def _non_negative(cls, value: float) -> float:
        if not np.isfinite(value) or value < 0:
            raise ValueError("must be a finite non-negative number of years")
        return value


class _PatientRecord(BaseModel):
    """One JSONL line."""

    model_config = ConfigDict(extra="forbid")

    id: int
    label: int
    covariates: _CovariatesRecord
    visits: list[list[str]]

    @field_validator("label")
    @classmethod
    def _signed(cls, value: int) -> int:
        if value not in (1, -1):
            raise ValueError("label must be +1 or -1")
        return value


def _read_jsonl(path: Path) -> list[tuple[int, _PatientRecord]]:
    records: list[tuple[int, _PatientRecord]] = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                payload = json.loads(line)
            except json.JSONDecodeError as e:
                raise IngestionError(f"invalid JSON ({e.msg})", line=line_no) from e
            try:
                record = _PatientRecord.model_validate(payload)
            except ValidationError as e:
                raise IngestionError(f"invalid patient record: {e.errors()[0]['msg']}", line=line_no) from e
            for t, visit in enumerate(record.visits):
                if not [c for c in visit if c.strip()]:
                    raise CohortValidationError(f"line {line_no}: patient {record.id} has empty visit {t}")
            records.append((line_no, record))
    return records


def _read_csv(path: Path) -> list[tuple[int, _PatientRecord]]:
    rows_by_patient: dict[int, dict[str, Any]] = {}
    order: list[int] = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        missing = [c for c in CSV_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise IngestionError(f"missing CSV columns: {', '.join(missing)}", line=1)
        for row in reader:
            line_no = reader.line_num
            try:
                pid = int(row["patient_id"])
                covariates = {
                    "age_at_start": float(row["age_at_start"]),
                    "observation_window": float(row["observation_window"]),
                    "gender": row["gender"],
                    "race": row["race"],
                    "ethnicity": row["ethnicity"],
                    **{name: _parse_bool(row[name]) for name in BOOLEAN_COVARIATES},
                }
                label = int(row["label"])
            except (TypeError, ValueError) as e:
                raise IngestionError(f"cannot parse row ({e})", line=line_no) from e
            entry = rows_by_patient.get(pid)
            if entry is None:
                entry = {"line": line_no, "label": label, "covariates": covariates, "visits": {}}
                rows_by_patient[pid] = entry
                order.append(pid)
            elif entry["label"] != label or entry["covariates"] != covariates:
                raise CohortValidationError(f"line {line_no}: patient {pid} has inconsistent label/covariates")
            visit_raw, code = (row["visit"] or "").strip(), (row["code"] or "").strip()
            if not visit_raw and not code:
                continue
            if not visit_raw:
                raise IngestionError("code without visit ordinal", line=line_no)
            if not code:
                raise CohortValidationError(f"line {line_no}: patient {pid} has empty visit {visit_raw}")
            try:
                ordinal = int(visit_raw)
            except ValueError as e:
                raise IngestionError(f"visit must be an integer, got {visit_raw!r}", line=line_no) from e
            entry["visits"].setdefault(ordinal, []).append(code)

    records: list[tuple[int, _PatientRecord]] = []
    for pid in order:
        entry = rows_by_patient[pid]
        visits = [entry["visits"][k] for k in sorted(entry["visits"])]
        try:
            record = _PatientRecord.model_validate(
                {"id": pid, "label": entry["label"], "covariates": entry["covariates"], "visits": visits}
            )
        except ValidationError as e:
            raise IngestionError(f"invalid patient record: {e.errors()[0]['msg']}", line=entry["line"]) from e
        records.append((entry["line"], record))
    return records


def _parse_bool(raw: str | None) -> bool:
    value = (raw or "").strip().lower()
    if value in ("1", "true", "yes", "y", "t"):
        return True
    if value in ("0", "false", "no", "n", "f", ""):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _detect_format(path: Path) -> CohortFormat:
    suffix = path.suffix.lower()
    if suffix in (".jsonl", ".json", ".ndjson"):
        return "jsonl"
    if suffix == ".csv":
        return "csv"
    raise IngestionError(f"cannot infer cohort format from {path.name}; pass format explicitly")


def load_cohort(
    path: Path | str,
    format: CohortFormat | None = None,
    min_prevalence: float = DEFAULT_MIN_PREVALENCE,
) -> Cohort:
    """
    Read a cohort file into a validated Cohort.

    Codes present in no more than `min_prevalence` of patients are dropped (0 keeps every code);
    visits emptied by the filter are removed and ordinals renumbered 0..T-1.
    """
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"cohort file not found: {path}")
    if not 0.0 <= min_prevalence < 1.0:
        raise ValueError("min_prevalence must be in [0, 1)")
    fmt = format or _detect_format(path)
    records = _read_jsonl(path) if fmt == "jsonl" else _read_csv(path)

    seen: dict[int, int] = {}
    for line_no, record in records:
        if record.id in seen:
            raise CohortValidationError(
                f"line {line_no}: duplicate patient id {record.id} (first at line {seen[record.id]})"
            )
        seen[record.id] = line_no
    records.sort(key=lambda item: item[1].id)

    n = len(records)
    prevalence: Counter[str] = Counter()
    for _, record in records:
        prevalence.update({c.strip() for visit in record.visits for c in visit if c.strip()})
    kept = sorted(c for c, count in prevalence.items() if n and count / n > min_prevalence)
    dropped = len(prevalence) - len(kept)
    vocabulary = tuple(EntityId(j, infer_kind(code), code) for j, code in enumerate(kept))
    index = {e.code: e.index for e in vocabulary}

    patients: list[Patient] = []
    for new_id, (_, record) in enumerate(records):
        visits: list[Visit] = []
        for raw_visit in record.visits:
            entities = sorted({index[c.strip()] for c in raw_visit if c.strip() in index})
            if entities:
                visits.append(Visit(len(visits), tuple(entities)))
        c = record.covariates
        patients.append(
            Patient(
                id=new_id,
                visits=tuple(visits),
                label=record.label,
                covariates=Covariates(
                    c.age_at_start, c.observation_window, c.gender, c.race, c.ethnicity,
                    c.brain_injury, c.brain_tumor, c.stroke,
                ),
                source_id=record.id,
            )
        )

    cohort = validate_cohort(Cohort(vocabulary, tuple(patients), Provenance("ingested")))
    logger.info(
        "load_cohort: path=%s patients=%d entities=%d dropped_codes=%d (min_prevalence=%.3f)",
        path, cohort.n_patients, cohort.n_entities, dropped, min_prevalence,
    )
    return cohort


def save_cohort(cohort: Cohort, path: Path | str, format: CohortFormat | None = None) -> Path:
    """Write a cohort so that load_cohort(path, min_prevalence=0) reproduces it."""
    path = Path(path)
    fmt = format or _detect_format(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    codes = cohort.codes
    if fmt == "jsonl":
        with open(path, "w", encoding="utf-8") as f:
            for p in cohort.patients:
                line = {
                    "id": p.external_id,
                    "label": p.label,
                    "covariates": p.covariates.as_dict(),
                    "visits": [[codes[j] for j in v.entities] for v in p.visits],
                }
                f.write(json.dumps(line, sort_keys=True) + "\n")
        return path

    rows: list[dict[str, Any]] = []
    for p in cohort.patients:
        base = {"patient_id": p.external_id, "label": p.label, **p.covariates.as_dict()}
        for name in BOOLEAN_COVARIATES:
            base[name] = int(base[name])
        if not p.visits:
            rows.append({**base, "visit": "", "code": ""})
        for v in p.visits:
            rows.extend({**base, "visit": v.ordinal, "code": codes[j]} for j in v.entities)
    pd.DataFrame(rows, columns=list(CSV_COLUMNS)).to_csv(
        path, index=False, float_format="%.17g", lineterminator="\n"
    )
    return path


def eligibility_filter(
    cohort: Cohort,
    min_age: float = 45.0,
    min_window: float = 0.5,
) -> tuple[Cohort, int]:
    """Keep patients old enough at observation start with a long enough observation window."""
    keep = [
        p.id
        for p in cohort.patients
        if p.covariates.age_at_start >= min_age and p.covariates.observation_window >= min_window
    ]
    dropped = cohort.n_patients - len(keep)
    if dropped:
        logger.info("eligibility_filter: dropped %d of %d patients", dropped, cohort.n_patients)
    return cohort.subset(keep), dropped


def cohort_summary(cohort: Cohort) -> pd.DataFrame:
    """Per-label statistics: counts, mean±sd of numerics, level and risk-factor percentages."""
    columns: dict[str, dict[str, str]] = {}
    groups = {"label=+1": [p for p in cohort.patients if p.label == 1],
              "label=-1": [p for p in cohort.patients if p.label == -1]}
    levels = {
        name: sorted({getattr(p.covariates, name) for p in cohort.patients})
        for name in CATEGORICAL_COVARIATES
    }
    for group_name, members in groups.items():
        col: dict[str, str] = {"patients": str(len(members))}
        for name in NUMERIC_COVARIATES:
            values = np.array([getattr(p.covariates, name) for p in members], dtype=float)
            col[name] = f"{values.mean():.2f}±{values.std():.2f}" if len(values) else "n/a"
        for name in CATEGORICAL_COVARIATES:
            for level in levels[name]:
                share = np.mean([getattr(p.covariates, name) == level for p in members]) if members else 0.0
                col[f"{name}={level}"] = f"{100 * share:.1f}%"
        for name in BOOLEAN_COVARIATES:
            share = np.mean([getattr(p.covariates, name) for p in members]) if members else 0.0
            col[name] = f"{100 * share:.1f}%"
        columns[group_name] = col
    table = pd.DataFrame(columns)
    table.index.name = "feature"
    return table.reset_index()

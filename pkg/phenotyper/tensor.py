"""
Sparse patient x from-entity x to-entity transition tensor.

Coordinate storage: `subs` (nnz, 3) sorted lexicographically, `vals` (nnz,) strictly positive.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from .cohort import Cohort

logger = logging.getLogger(__name__)


class TensorMode(str, Enum):
    COUNTS = "counts"
    PATIENT_NORMALIZED = "patient_normalized"


@dataclass(frozen=True, eq=False)
class TransitionTensor:
    shape: tuple[int, int, int]
    subs: np.ndarray
    vals: np.ndarray
    mode: TensorMode = TensorMode.PATIENT_NORMALIZED

    def __post_init__(self) -> None:
        if self.subs.shape != (len(self.vals), 3):
            raise ValueError("subs must be (nnz, 3) with one value per row")
        if len(self.vals) and (np.any(self.vals <= 0) or np.any(self.subs < 0)
                               or np.any(self.subs >= np.array(self.shape))):
            raise ValueError("tensor entries must be positive and inside the shape")

    @property
    def nnz(self) -> int:
        return len(self.vals)

    @property
    def n_patients(self) -> int:
        return self.shape[0]

    def norm_sq(self) -> float:
        return float(np.sum(self.vals**2))

    def patient_totals(self) -> np.ndarray:
        return np.bincount(self.subs[:, 0], weights=self.vals, minlength=self.shape[0])

    def active_patients(self) -> np.ndarray:
        """Boolean mask of patients with at least one transition."""
        return np.bincount(self.subs[:, 0], minlength=self.shape[0]) > 0

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        out[self.subs[:, 0], self.subs[:, 1], self.subs[:, 2]] = self.vals
        return out

    def normalized(self) -> "TransitionTensor":
        """Each non-empty patient slice divided by its total."""
        if self.mode == TensorMode.PATIENT_NORMALIZED:
            return self
        totals = self.patient_totals()
        return TransitionTensor(self.shape, self.subs, self.vals / totals[self.subs[:, 0]], TensorMode.PATIENT_NORMALIZED)

    def subset(self, patients: Sequence[int]) -> "TransitionTensor":
        """Slices of the given patients, re-indexed 0..len(patients)-1 in the given order."""
        patients = np.asarray(patients, dtype=np.int64)
        new_index = np.full(self.shape[0], -1, dtype=np.int64)
        new_index[patients] = np.arange(len(patients))
        keep = new_index[self.subs[:, 0]] >= 0
        subs = self.subs[keep].copy()
        subs[:, 0] = new_index[subs[:, 0]]
        vals = self.vals[keep]
        order = np.lexsort((subs[:, 2], subs[:, 1], subs[:, 0]))
        return TransitionTensor((len(patients), self.shape[1], self.shape[2]), subs[order], vals[order], self.mode)

    def mttkrp(self, factors: Sequence[np.ndarray], mode: int) -> np.ndarray:
        """Matricized tensor times Khatri-Rao product of the other two factors."""
        R = factors[(mode + 1) % 3].shape[1]
        out = np.zeros((self.shape[mode], R))
        others = [m for m in range(3) if m != mode]
        rows = self.vals[:, None] * factors[others[0]][self.subs[:, others[0]]] * factors[others[1]][self.subs[:, others[1]]]
        np.add.at(out, self.subs[:, mode], rows)
        return out


def build_transition_tensor(
    cohort: Cohort,
    mode: TensorMode | str = TensorMode.PATIENT_NORMALIZED,
    include_self_loops: bool = True,
) -> TransitionTensor:
    """
    Count every ordered pair (from in visit t, to in visit t+1) per patient.

    Patients with fewer than two visits get empty slices.
    """
    mode = TensorMode(mode)
    I, J = cohort.n_patients, cohort.n_entities
    subs: list[tuple[int, int, int]] = []
    vals: list[float] = []
    for patient in cohort.patients:
        counts: Counter[tuple[int, int]] = Counter()
        for prev, nxt in zip(patient.visits, patient.visits[1:]):
            counts.update(
                (j, k) for j in prev.entities for k in nxt.entities if include_self_loops or j != k
            )
        if not counts:
            continue
        total = float(sum(counts.values()))
        for (j, k) in sorted(counts):
            subs.append((patient.id, j, k))
            vals.append(counts[(j, k)] / total if mode == TensorMode.PATIENT_NORMALIZED else float(counts[(j, k)]))

    tensor = TransitionTensor(
        (I, J, J),
        np.array(subs, dtype=np.int64).reshape(-1, 3),
        np.array(vals, dtype=float),
        mode,
    )
    logger.info(
        "build_transition_tensor: shape=%s nnz=%d mode=%s self_loops=%s active_patients=%d",
        tensor.shape, tensor.nnz, mode.value, include_self_loops, int(tensor.active_patients().sum()),
    )
    return tensor


def mean_transition_matrix(tensor: TransitionTensor) -> np.ndarray:
    """Mean of the normalized slices over patients with at least one transition."""
    active = int(tensor.active_patients().sum())
    if active == 0:
        raise ValueError("tensor has no transitions")
    normalized = tensor.normalized()
    J = tensor.shape[1]
    M = np.zeros((J, J))
    np.add.at(M, (normalized.subs[:, 1], normalized.subs[:, 2]), normalized.vals)
    return M / active

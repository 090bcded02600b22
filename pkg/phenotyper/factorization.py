"""
Supervised, similarity-coupled, non-negative CP factorization.

Minimises
    ||O - [[A, B, C]]||^2 + gamma (||S - B B^T||^2 + ||S - C C^T||^2)
    + lambda (|A|_1 + |B|_1 + |C|_1) + mu * sum_i log(1 + exp(-y_i (w . A_i + b)))
with ADAM steps followed by projection of A, B, C onto the non-negative orthant.
Dropout (inverted, training only) acts on the logistic weights w.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import pandas as pd
from scipy.special import expit

from .adam import Adam, nonnegative
from .config import HyperParams
from .embedding import SimilarityMatrix
from .errors import TrainingError
from .tensor import TransitionTensor

logger = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e12
PROJECTION_TOL = 1e-6
PROJECTION_MAX_ITER = 50_000

TERM_NAMES = ("tensor_term", "supervision_term", "l1_term", "similarity_term")


@dataclass(frozen=True, eq=False)
class FactorModel:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    # R logistic weights followed by the intercept
    theta: np.ndarray
    hyper: HyperParams

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    @property
    def weights(self) -> np.ndarray:
        return self.theta[:-1]

    @property
    def intercept(self) -> float:
        return float(self.theta[-1])


@dataclass(frozen=True)
class ObjectiveTerms:
    total: float
    tensor_term: float
    supervision_term: float
    l1_term: float
    similarity_term: float

    def as_dict(self) -> dict[str, float]:
        return {
            "total": self.total,
            "tensor_term": self.tensor_term,
            "supervision_term": self.supervision_term,
            "l1_term": self.l1_term,
            "similarity_term": self.similarity_term,
        }


@dataclass
class TrainTrace:
    records: list[ObjectiveTerms] = field(default_factory=list)

    def append(self, terms: ObjectiveTerms) -> None:
        self.records.append(terms)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def total(self) -> list[float]:
        return [r.total for r in self.records]

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame([r.as_dict() for r in self.records], columns=["total", *TERM_NAMES])
        frame.insert(0, "iteration", np.arange(len(frame)))
        return frame


@dataclass(frozen=True, eq=False)
class FitResult:
    model: FactorModel
    trace: TrainTrace
    iterations: int
    converged: bool


def _check_factors(A: np.ndarray, B: np.ndarray, C: np.ndarray) -> None:
    if not (A.ndim == B.ndim == C.ndim == 2) or not (A.shape[1] == B.shape[1] == C.shape[1]):
        raise ValueError(f"factor ranks disagree: A{A.shape} B{B.shape} C{C.shape}")


def cp_reconstruct(
    A: np.ndarray,
    B: np.ndarray,
    C: np.ndarray,
    subs: np.ndarray | None = None,
) -> np.ndarray:
    """sum_r A[i,r] B[j,r] C[k,r]; at the (n, 3) index set `subs` when given, else the dense tensor."""
    _check_factors(A, B, C)
    if subs is None:
        return np.einsum("ir,jr,kr->ijk", A, B, C)
    subs = np.asarray(subs, dtype=np.int64).reshape(-1, 3)
    return np.sum(A[subs[:, 0]] * B[subs[:, 1]] * C[subs[:, 2]], axis=1)


def _check_inputs(O: TransitionTensor, S: SimilarityMatrix, y: np.ndarray) -> np.ndarray:
    I, J, K = O.shape
    if J != K or S.S.shape != (J, J):
        raise ValueError(f"tensor shape {O.shape} and similarity shape {S.S.shape} disagree")
    y = np.asarray(y, dtype=float)
    if y.shape != (I,):
        raise ValueError(f"need one label per patient ({I}), got {y.shape}")
    if not np.isin(y, (1.0, -1.0)).all():
        raise ValueError("labels must be +1 or -1")
    return y


def _supervision(A: np.ndarray, theta: np.ndarray, y: np.ndarray, mu: float, keep: np.ndarray | None):
    w = theta[:-1] if keep is None else theta[:-1] * keep
    z = A @ w + theta[-1]
    value = mu * float(np.sum(np.logaddexp(0.0, -y * z)))
    g = -y * expit(-y * z)
    return value, w, g


def _evaluate(
    A: np.ndarray,
    B: np.ndarray,
    C: np.ndarray,
    theta: np.ndarray,
    O: TransitionTensor,
    S: np.ndarray,
    y: np.ndarray,
    hyper: HyperParams,
    keep: np.ndarray | None = None,
    with_grad: bool = True,
) -> tuple[ObjectiveTerms, dict[str, np.ndarray] | None]:
    AtA, BtB, CtC = A.T @ A, B.T @ B, C.T @ C
    fitted = cp_reconstruct(A, B, C, O.subs)
    tensor_term = O.norm_sq() - 2.0 * float(O.vals @ fitted) + float(np.sum(AtA * BtB * CtC))
    EB, EC = S - B @ B.T, S - C @ C.T
    similarity_term = hyper.gamma * float(np.sum(EB**2) + np.sum(EC**2))
    l1_term = hyper.lam * float(np.abs(A).sum() + np.abs(B).sum() + np.abs(C).sum())
    supervision_term, w, g = _supervision(A, theta, y, hyper.mu, keep)
    terms = ObjectiveTerms(
        total=tensor_term + supervision_term + l1_term + similarity_term,
        tensor_term=tensor_term,
        supervision_term=supervision_term,
        l1_term=l1_term,
        similarity_term=similarity_term,
    )
    if not with_grad:
        return terms, None

    factors = [A, B, C]
    gA = 2.0 * (A @ (BtB * CtC) - O.mttkrp(factors, 0)) + hyper.lam * np.sign(A) + hyper.mu * np.outer(g, w)
    gB = 2.0 * (B @ (AtA * CtC) - O.mttkrp(factors, 1)) - 2.0 * hyper.gamma * (EB + EB.T) @ B + hyper.lam * np.sign(B)
    gC = 2.0 * (C @ (AtA * BtB) - O.mttkrp(factors, 2)) - 2.0 * hyper.gamma * (EC + EC.T) @ C + hyper.lam * np.sign(C)
    g_w = hyper.mu * (A.T @ g)
    if keep is not None:
        g_w = g_w * keep
    g_theta = np.concatenate([g_w, [hyper.mu * float(g.sum())]])
    return terms, {"A": gA, "B": gB, "C": gC, "theta": g_theta}


def objective(model: FactorModel, O: TransitionTensor, S: SimilarityMatrix, y: np.ndarray) -> ObjectiveTerms:
    """All four loss components at the model's parameters (evaluation mode, no dropout)."""
    y = _check_inputs(O, S, y)
    terms, _ = _evaluate(model.A, model.B, model.C, model.theta, O, S.S, y, model.hyper, with_grad=False)
    for name, value in terms.as_dict().items():
        if not math.isfinite(value):
            raise TrainingError(f"non-finite {name} in objective")
    return terms


def objective_gradient(
    model: FactorModel,
    O: TransitionTensor,
    S: SimilarityMatrix,
    y: np.ndarray,
) -> dict[str, np.ndarray]:
    """Analytic gradient of the total objective w.r.t. A, B, C and theta."""
    y = _check_inputs(O, S, y)
    _, grads = _evaluate(model.A, model.B, model.C, model.theta, O, S.S, y, model.hyper)
    return grads


def initial_model(shape: tuple[int, int, int], hyper: HyperParams) -> FactorModel:
    """A, B, C ~ uniform(0, 1) / sqrt(R) from the hyper-parameter seed; theta = 0."""
    I, J, _ = shape
    R = hyper.rank
    rng = np.random.default_rng(hyper.seed)
    scale = 1.0 / math.sqrt(R)
    A = rng.uniform(0.0, 1.0, (I, R)) * scale
    B = rng.uniform(0.0, 1.0, (J, R)) * scale
    C = rng.uniform(0.0, 1.0, (J, R)) * scale
    return FactorModel(A, B, C, np.zeros(R + 1), hyper)


def fit(
    O: TransitionTensor,
    S: SimilarityMatrix,
    y: np.ndarray,
    hyper: HyperParams,
) -> FitResult:
    """
    ADAM on the coupled objective with A, B, C projected to >= 0 after every step.

    Stops after `max_iters` steps or once the relative change of the (evaluation-mode) total
    stays below `tol` for `patience` consecutive steps. The trace holds one record per evaluated
    iterate, the last one being the returned model.
    """
    y = _check_inputs(O, S, y)
    model = initial_model(O.shape, hyper)
    params: dict[str, Any] = {"A": model.A, "B": model.B, "C": model.C, "theta": model.theta}
    dropout_rng = np.random.default_rng([hyper.seed, 1])
    optimizer = Adam(hyper.learning_rate)
    projections = {"A": nonnegative, "B": nonnegative, "C": nonnegative}
    trace = TrainTrace()

    R = hyper.rank
    previous: float | None = None
    quiet = 0
    converged = False
    iteration = 0
    for iteration in range(hyper.max_iters + 1):
        keep = None
        if hyper.dropout_rate > 0:
            keep = (dropout_rng.random(R) >= hyper.dropout_rate) / (1.0 - hyper.dropout_rate)
        terms, grads = _evaluate(params["A"], params["B"], params["C"], params["theta"], O, S.S, y, hyper, keep)
        if keep is not None:
            supervision, _, _ = _supervision(params["A"], params["theta"], y, hyper.mu, None)
            terms = ObjectiveTerms(
                total=terms.total - terms.supervision_term + supervision,
                tensor_term=terms.tensor_term,
                supervision_term=supervision,
                l1_term=terms.l1_term,
                similarity_term=terms.similarity_term,
            )
        trace.append(terms)

        if not math.isfinite(terms.total) or terms.total > DIVERGENCE_LIMIT:
            raise TrainingError(
                f"factorization diverged at iteration {iteration} (loss={terms.total:.4g}); "
                f"lower learning_rate (currently {hyper.learning_rate})",
                trace=trace,
            )
        if previous is not None:
            change = abs(previous - terms.total) / max(abs(previous), 1e-300)
            quiet = quiet + 1 if change < hyper.tol else 0
            if quiet >= hyper.patience:
                converged = True
                break
        previous = terms.total
        if iteration == hyper.max_iters:
            break
        if iteration % 100 == 0:
            logger.debug("fit: iteration=%d total=%.6g", iteration, terms.total)
        params = optimizer.step(params, grads, projections)

    final = FactorModel(params["A"], params["B"], params["C"], params["theta"], hyper)
    logger.info(
        "fit: rank=%d iterations=%d converged=%s total=%.6g (tensor=%.4g supervision=%.4g l1=%.4g similarity=%.4g)",
        R, iteration, converged, trace.records[-1].total, trace.records[-1].tensor_term,
        trace.records[-1].supervision_term, trace.records[-1].l1_term, trace.records[-1].similarity_term,
    )
    return FitResult(final, trace, iteration, converged)


def predict(A: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """sigma(w . A_i + b) per membership row."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    theta = np.asarray(theta, dtype=float)
    if A.shape[1] != theta.shape[0] - 1:
        raise ValueError("theta must hold one weight per phenotype plus an intercept")
    return expit(A @ theta[:-1] + theta[-1])


def project_new_patients(
    O_new: TransitionTensor,
    B: np.ndarray,
    C: np.ndarray,
    tol: float = PROJECTION_TOL,
    max_iter: int = PROJECTION_MAX_ITER,
) -> np.ndarray:
    """
    Non-negative least squares per patient slice against fixed B, C:
    min_a>=0 ||O_i - sum_r a_r b_r c_r^T||^2, by projected gradient with step 1 / (2 L),
    L the largest eigenvalue of (B^T B) * (C^T C). Stops when the projected gradient is below `tol`.
    """
    I = O_new.shape[0]
    R = B.shape[1]
    if O_new.shape[1] != B.shape[0] or O_new.shape[2] != C.shape[0] or C.shape[1] != R:
        raise ValueError("new slices and factor matrices disagree in shape")
    G = (B.T @ B) * (C.T @ C)
    H = O_new.mttkrp([np.zeros((I, R)), B, C], 0)
    top = float(np.linalg.eigvalsh(G)[-1]) if R else 0.0
    A = np.zeros((I, R))
    if top <= 0.0:
        return A
    step = 1.0 / (2.0 * top)
    for it in range(max_iter):
        grad = 2.0 * (A @ G - H)
        projected = np.where(A > 0, grad, np.minimum(grad, 0.0))
        if np.max(np.abs(projected), initial=0.0) < tol:
            logger.debug("project_new_patients: converged after %d iterations", it)
            break
        A = np.maximum(A - step * grad, 0.0)
    else:
        logger.warning("project_new_patients: projected gradient above %.1e after %d iterations", tol, max_iter)
    return A

"""
Newton / IRLS logistic regression shared by propensity scoring and phenotype significance.

The intercept is column 0 of the design and is never penalised.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.special import expit, log_expit

from .errors import ConvergenceError, SeparationError

logger = logging.getLogger(__name__)

GRAD_TOL = 1e-8
MAX_ITER = 100


@dataclass(frozen=True, eq=False)
class LogisticFit:
    intercept: float
    weights: np.ndarray
    # inverse of the (penalised) observed information at the optimum, intercept first
    covariance: np.ndarray
    iterations: int
    log_likelihood: float
    gradient_norm: float

    @property
    def coefficients(self) -> np.ndarray:
        return np.concatenate([[self.intercept], self.weights])


def _penalised_nll(beta: np.ndarray, Xd: np.ndarray, y: np.ndarray, penalty: np.ndarray) -> float:
    eta = Xd @ beta
    ll = np.sum(y * log_expit(eta) + (1.0 - y) * log_expit(-eta))
    return float(-ll + 0.5 * np.sum(penalty * beta * beta))


def fit_logistic_irls(
    X: np.ndarray,
    y: np.ndarray,
    l2: float = 0.0,
    init: np.ndarray | None = None,
    tol: float = GRAD_TOL,
    max_iter: int = MAX_ITER,
) -> LogisticFit:
    """
    Minimise -loglik + l2/2 * ||w||^2 over (intercept, w) by damped Newton steps.

    X is (n, p) without an intercept column; y holds 0/1 outcomes. Converged when the gradient
    2-norm falls below `tol`. Complete separation with l2 = 0 raises SeparationError.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValueError("X must be (n, p) with one outcome per row")
    if l2 < 0:
        raise ValueError("l2 must be >= 0")
    if y.size == 0 or np.all(y == y[0]):
        raise ValueError("logistic fit needs both outcome classes")

    n, p = X.shape
    Xd = np.column_stack([np.ones(n), X])
    penalty = np.full(p + 1, l2)
    penalty[0] = 0.0
    beta = np.zeros(p + 1) if init is None else np.asarray(init, dtype=float).copy()
    signs = 2.0 * y - 1.0

    objective = _penalised_nll(beta, Xd, y, penalty)
    grad_norm = np.inf
    iteration = 0
    for iteration in range(1, max_iter + 1):
        mu = expit(Xd @ beta)
        grad = Xd.T @ (mu - y) + penalty * beta
        grad_norm = float(np.linalg.norm(grad))
        if grad_norm < tol:
            break
        w = mu * (1.0 - mu)
        hessian = (Xd.T * w) @ Xd + np.diag(penalty)
        try:
            step = scipy.linalg.solve(hessian, grad, assume_a="pos")
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
            step = np.linalg.lstsq(hessian, grad, rcond=None)[0]

        t = 1.0
        for _ in range(50):
            candidate = beta - t * step
            value = _penalised_nll(candidate, Xd, y, penalty)
            if value <= objective + 1e-4 * t * float(grad @ -step) or value <= objective:
                break
            t *= 0.5
        beta, objective = candidate, value

        if l2 == 0 and np.all(signs * (Xd @ beta) > 0) and np.max(np.abs(beta)) > 30:
            raise SeparationError("complete separation: the unpenalised MLE does not exist; refit with l2 > 0")
    else:
        mu = expit(Xd @ beta)
        grad_norm = float(np.linalg.norm(Xd.T @ (mu - y) + penalty * beta))
        if grad_norm >= tol:
            if l2 == 0 and np.all(signs * (Xd @ beta) > 0):
                raise SeparationError("complete separation: the unpenalised MLE does not exist; refit with l2 > 0")
            raise ConvergenceError(
                f"logistic IRLS did not converge in {max_iter} iterations (|grad|={grad_norm:.3e})"
            )

    if l2 == 0 and np.all(signs * (Xd @ beta) > 0):
        raise SeparationError("complete separation: the unpenalised MLE does not exist; refit with l2 > 0")

    mu = expit(Xd @ beta)
    hessian = (Xd.T * (mu * (1.0 - mu))) @ Xd + np.diag(penalty)
    covariance = np.linalg.pinv(hessian)
    logger.debug("fit_logistic_irls: n=%d p=%d iterations=%d |grad|=%.2e", n, p, iteration, grad_norm)
    return LogisticFit(
        intercept=float(beta[0]),
        weights=beta[1:].copy(),
        covariance=covariance,
        iterations=iteration,
        log_likelihood=-_penalised_nll(beta, Xd, y, np.zeros(p + 1)),
        gradient_norm=grad_norm,
    )

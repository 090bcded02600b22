"""ADAM optimizer state for named parameter blocks, with an optional projection after each step."""

from __future__ import annotations

from typing import Callable

import numpy as np

Projection = Callable[[np.ndarray], np.ndarray]


def nonnegative(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


class Adam:
    """
    Bias-corrected ADAM.

    m_t = b1 m + (1 - b1) g,  v_t = b2 v + (1 - b2) g^2,
    x <- proj(x - lr * m_hat / (sqrt(v_hat) + eps)).
    """

    def __init__(
        self,
        learning_rate: float,
        momentum_1: float = 0.9,
        momentum_2: float = 0.999,
        epsilon: float = 1e-8,
    ):
        self.learning_rate = learning_rate
        self.momentum_1 = momentum_1
        self.momentum_2 = momentum_2
        self.epsilon = epsilon
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(
        self,
        params: dict[str, np.ndarray],
        grads: dict[str, np.ndarray],
        projections: dict[str, Projection] | None = None,
    ) -> dict[str, np.ndarray]:
        """Return updated copies of `params`; one call advances the step counter once."""
        projections = projections or {}
        self.t += 1
        out: dict[str, np.ndarray] = {}
        for name, x in params.items():
            g = grads[name]
            m = self.momentum_1 * self._m.get(name, 0.0) + (1.0 - self.momentum_1) * g
            v = self.momentum_2 * self._v.get(name, 0.0) + (1.0 - self.momentum_2) * g * g
            self._m[name], self._v[name] = m, v
            m_hat = m / (1.0 - self.momentum_1**self.t)
            v_hat = v / (1.0 - self.momentum_2**self.t)
            updated = x - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.epsilon)
            project = projections.get(name)
            out[name] = project(updated) if project is not None else updated
        return out

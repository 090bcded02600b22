"""
Within-visit co-occurrence embeddings.

- build_pairs: every ordered (center, context) pair of entities sharing a visit
- train_skipgram: SGD on the negative-sampling objective, negatives drawn from the
  context's own entity kind with unigram^0.75 weights
- softmax_prob: exact kind-restricted softmax p(target | center)
- similarity_matrix: clamped cosine similarity, symmetric with unit diagonal
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Iterator, Literal, Sequence

import numpy as np
from scipy.special import expit, log_expit, logsumexp

from .cohort import Cohort, EntityId, EntityKind
from .config import SgdConfig
from .errors import TrainingError

logger = logging.getLogger(__name__)

MAX_RESAMPLE = 10


@dataclass(frozen=True, eq=False)
class EmbeddingTable:
    input_vectors: np.ndarray
    output_vectors: np.ndarray

    def __post_init__(self) -> None:
        if self.input_vectors.shape != self.output_vectors.shape:
            raise ValueError("input and output tables must have the same shape")
        if not (np.isfinite(self.input_vectors).all() and np.isfinite(self.output_vectors).all()):
            raise ValueError("embedding table has non-finite entries")

    @property
    def d(self) -> int:
        return self.input_vectors.shape[1]

    @property
    def n_entities(self) -> int:
        return self.input_vectors.shape[0]


@dataclass(frozen=True, eq=False)
class SimilarityMatrix:
    S: np.ndarray

    @property
    def n_entities(self) -> int:
        return self.S.shape[0]


def build_pairs(cohort: Cohort) -> Iterator[tuple[EntityId, EntityId]]:
    """Ordered pairs per visit, in (patient, visit, center, context) order; n entities give n(n-1) pairs."""
    vocabulary = cohort.vocabulary
    for patient in cohort.patients:
        for visit in patient.visits:
            for center in visit.entities:
                for context in visit.entities:
                    if context != center:
                        yield vocabulary[center], vocabulary[context]


def pair_indices(pairs: Iterable[tuple[EntityId, EntityId]] | np.ndarray) -> np.ndarray:
    """(n, 2) int array of (center, context) indices."""
    if isinstance(pairs, np.ndarray):
        return pairs.astype(np.int64).reshape(-1, 2)
    return np.array([(c.index, x.index) for c, x in pairs], dtype=np.int64).reshape(-1, 2)


def negative_sampling_loss(v: np.ndarray, u_pos: np.ndarray, u_neg: np.ndarray) -> float:
    """-log sigma(u_pos . v) - sum_l log sigma(-u_l . v) for one center vector v."""
    return float(-log_expit(u_pos @ v) - np.sum(log_expit(-(u_neg @ v))))


def negative_sampling_grad(
    v: np.ndarray,
    u_pos: np.ndarray,
    u_neg: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of negative_sampling_loss w.r.t. (v, u_pos, u_neg)."""
    g_pos = expit(u_pos @ v) - 1.0
    g_neg = expit(u_neg @ v)
    grad_v = g_pos * u_pos + g_neg @ u_neg
    return grad_v, g_pos * v, np.outer(g_neg, v)


class _NoiseTable:
    """Per-kind unigram^exponent sampling tables (the word2vec cum_table idea, one per kind)."""

    def __init__(self, counts: np.ndarray, kinds: Sequence[EntityKind], exponent: float):
        self.members: dict[EntityKind, np.ndarray] = {}
        self.probs: dict[EntityKind, np.ndarray] = {}
        kind_arr = np.array([k.value for k in kinds])
        for kind in EntityKind:
            idx = np.flatnonzero(kind_arr == kind.value)
            weights = counts[idx].astype(float) ** exponent
            if idx.size and weights.sum() > 0:
                self.members[kind] = idx
                self.probs[kind] = weights / weights.sum()

    def draw(self, rng: np.random.Generator, kind: EntityKind, exclude: np.ndarray, n: int) -> np.ndarray:
        """(len(exclude), n) negatives; -1 where no admissible negative exists."""
        if kind not in self.members:
            return np.full((len(exclude), n), -1, dtype=np.int64)
        members, probs = self.members[kind], self.probs[kind]
        out = rng.choice(members, size=(len(exclude), n), p=probs)
        for _ in range(MAX_RESAMPLE):
            clash = out == exclude[:, None]
            if not clash.any():
                break
            out[clash] = rng.choice(members, size=int(clash.sum()), p=probs)
        out[out == exclude[:, None]] = -1
        return out


def train_skipgram(
    pairs: Iterable[tuple[EntityId, EntityId]] | np.ndarray,
    vocabulary: Sequence[EntityId],
    cfg: SgdConfig,
) -> EmbeddingTable:
    """
    Skip-gram with negative sampling.

    Input vectors start at uniform(-0.5, 0.5) / d and output vectors at zero. Each epoch visits
    the pairs in a seeded shuffled order with a linearly decaying learning rate. Negatives for a
    context are drawn from the context's kind, never equal to the context itself.
    """
    index_pairs = pair_indices(pairs)
    J = len(vocabulary)
    if J < 2:
        raise ValueError("train_skipgram needs a vocabulary of at least 2 entities")
    if cfg.epochs > 0 and len(index_pairs) == 0:
        raise ValueError("train_skipgram needs at least one pair")
    kinds = [e.kind for e in vocabulary]

    rng = np.random.default_rng(cfg.seed)
    w_in = (rng.random((J, cfg.d)) - 0.5) / cfg.d
    w_out = np.zeros((J, cfg.d))
    if cfg.epochs == 0:
        return EmbeddingTable(w_in, w_out)

    counts = np.bincount(index_pairs[:, 1], minlength=J)
    noise = _NoiseTable(counts, kinds, cfg.noise_exponent)
    context_kinds = np.array([kinds[j].value for j in index_pairs[:, 1]])

    n_pairs = len(index_pairs)
    total_steps = cfg.epochs * n_pairs
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n_pairs)
        negatives = np.full((n_pairs, cfg.negatives), -1, dtype=np.int64)
        for kind in EntityKind:
            rows = np.flatnonzero(context_kinds == kind.value)
            if rows.size:
                negatives[rows] = noise.draw(rng, kind, index_pairs[rows, 1], cfg.negatives)

        epoch_loss = 0.0
        for p in order:
            alpha = cfg.learning_rate - (cfg.learning_rate - cfg.min_learning_rate) * step / total_steps
            step += 1
            center, context = index_pairs[p]
            neg = negatives[p][negatives[p] >= 0]
            v, u_pos, u_neg = w_in[center], w_out[context], w_out[neg]
            epoch_loss += negative_sampling_loss(v, u_pos, u_neg)
            grad_v, grad_pos, grad_neg = negative_sampling_grad(v, u_pos, u_neg)
            w_out[context] -= alpha * grad_pos
            np.add.at(w_out, neg, -alpha * grad_neg)
            w_in[center] -= alpha * grad_v

        mean_loss = epoch_loss / n_pairs
        if not np.isfinite(mean_loss) or not np.isfinite(w_in).all():
            raise TrainingError(
                f"skip-gram loss became non-finite in epoch {epoch} (learning_rate={cfg.learning_rate}); "
                "lower the learning rate"
            )
        logger.info("train_skipgram: epoch=%d pairs=%d mean_loss=%.5f", epoch, n_pairs, mean_loss)

    return EmbeddingTable(w_in, w_out)


def softmax_distribution(
    center: EntityId,
    table: EmbeddingTable,
    vocabulary: Sequence[EntityId],
    restrict: EntityKind,
) -> tuple[np.ndarray, np.ndarray]:
    """(indices, probabilities) of p(x | center) over entities of kind `restrict`."""
    members = np.array([e.index for e in vocabulary if e.kind == restrict], dtype=np.int64)
    if members.size == 0:
        raise ValueError(f"no {restrict.value} entities to normalise over")
    scores = table.output_vectors[members] @ table.input_vectors[center.index]
    return members, np.exp(scores - logsumexp(scores))


def softmax_prob(
    center: EntityId,
    target: EntityId,
    table: EmbeddingTable,
    vocabulary: Sequence[EntityId],
    restrict: EntityKind | None = None,
) -> float:
    """Full softmax over the restricted vocabulary (defaults to the target's kind)."""
    kind = restrict or target.kind
    members, probs = softmax_distribution(center, table, vocabulary, kind)
    hit = np.flatnonzero(members == target.index)
    if hit.size == 0:
        raise ValueError(f"target {target.code} is not a {kind.value}")
    return float(probs[hit[0]])


def similarity_matrix(
    table: EmbeddingTable,
    source: Literal["input", "average"] = "input",
) -> SimilarityMatrix:
    """S[i, j] = max(0, cos(v_i, v_j)); zero-norm rows are 0 off the diagonal; diagonal is 1."""
    if source == "input":
        V = table.input_vectors
    elif source == "average":
        V = (table.input_vectors + table.output_vectors) / 2.0
    else:
        raise ValueError(f"unknown similarity source {source!r}")
    norms = np.linalg.norm(V, axis=1)
    nonzero = norms > 0
    unit = np.zeros_like(V)
    unit[nonzero] = V[nonzero] / norms[nonzero, None]
    S = np.clip(unit @ unit.T, 0.0, 1.0)
    S = (S + S.T) / 2.0
    np.fill_diagonal(S, 1.0)
    return SimilarityMatrix(S)

"""
Co-occurrence pairs, skip-gram training, softmax and similarity tests.
Run: pytest tests/test_embedding.py -v
"""

import sys
from pathlib import Path

import numpy as np
import pytest

PROJECT_ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(PROJECT_ROOT))

from phenotyper.cohort import Cohort, Covariates, EntityId, EntityKind, Patient, Visit, infer_kind
from phenotyper.config import SgdConfig
from phenotyper.embedding import (
    EmbeddingTable,
    build_pairs,
    negative_sampling_grad,
    negative_sampling_loss,
    pair_indices,
    similarity_matrix,
    softmax_prob,
    train_skipgram,
)
from phenotyper.errors import TrainingError

COVS = Covariates(70.0, 5.0, "F", "white", "non_hispanic", False, False, False)


def make_cohort(codes, patients):
    """patients: list of visit lists, each visit a list of codes."""
    vocabulary = tuple(EntityId(j, infer_kind(c), c) for j, c in enumerate(codes))
    index = {c: j for j, c in enumerate(codes)}
    built = tuple(
        Patient(i, tuple(Visit(t, tuple(sorted(index[c] for c in v))) for t, v in enumerate(visits)), 1, COVS)
        for i, visits in enumerate(patients)
    )
    return Cohort(vocabulary, built)


def code_pairs(cohort):
    return [(a.code, b.code) for a, b in build_pairs(cohort)]


def test_pairs_of_two_entity_visit():
    cohort = make_cohort(["d1", "m1"], [[["m1", "d1"]]])
    assert sorted(code_pairs(cohort)) == [("d1", "m1"), ("m1", "d1")]


def test_pairs_of_three_entity_visit():
    cohort = make_cohort(["d1", "m1", "m2"], [[["m1", "m2", "d1"]]])
    pairs = code_pairs(cohort)
    assert len(pairs) == 6
    assert len(set(pairs)) == 6
    assert all(a != b for a, b in pairs)


def test_single_entity_visit_has_no_pairs():
    cohort = make_cohort(["m1"], [[["m1"]]])
    assert code_pairs(cohort) == []
    assert pair_indices(build_pairs(cohort)).shape == (0, 2)


def vocab3():
    return [EntityId(0, EntityKind.MEDICATION, "m1"), EntityId(1, EntityKind.MEDICATION, "m2"),
            EntityId(2, EntityKind.MEDICATION, "m3")]


def test_softmax_uniform_when_vectors_identical():
    vocab = vocab3()
    table = EmbeddingTable(np.ones((3, 4)), np.ones((3, 4)))
    for target in vocab:
        assert softmax_prob(vocab[0], target, table, vocab) == pytest.approx(1.0 / 3.0)


def test_softmax_matches_direct_evaluation():
    vocab = vocab3()
    w_in = np.array([[0.3, -0.2], [0.1, 0.5], [-0.4, 0.2]])
    w_out = np.array([[0.2, 0.1], [-0.3, 0.4], [0.6, -0.1]])
    table = EmbeddingTable(w_in, w_out)
    scores = np.array([w_out[k] @ w_in[1] for k in range(3)])
    expected = np.exp(scores) / np.exp(scores).sum()
    for k in range(3):
        assert softmax_prob(vocab[1], vocab[k], table, vocab) == pytest.approx(expected[k], rel=1e-12)


def test_softmax_sums_to_one_over_each_kind():
    rng = np.random.default_rng(12)
    for _ in range(10):
        J, d = int(rng.integers(3, 15)), int(rng.integers(2, 9))
        vocab = [EntityId(j, EntityKind.MEDICATION if j % 3 else EntityKind.DIAGNOSIS, f"e{j}") for j in range(J)]
        table = EmbeddingTable(rng.normal(scale=2.0, size=(J, d)), rng.normal(scale=2.0, size=(J, d)))
        for center in vocab:
            for kind in (EntityKind.MEDICATION, EntityKind.DIAGNOSIS):
                total = sum(softmax_prob(center, t, table, vocab) for t in vocab if t.kind == kind)
                assert abs(total - 1.0) <= 1e-12


def test_softmax_empty_restriction():
    vocab = vocab3()
    table = EmbeddingTable(np.ones((3, 2)), np.ones((3, 2)))
    with pytest.raises(ValueError):
        softmax_prob(vocab[0], vocab[1], table, vocab, restrict=EntityKind.DIAGNOSIS)


def test_negative_sampling_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    v, u_pos, u_neg = rng.normal(size=4), rng.normal(size=4), rng.normal(size=(3, 4))
    grad_v, grad_pos, grad_neg = negative_sampling_grad(v, u_pos, u_neg)
    h = 1e-5

    def numeric(f, x):
        g = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            up, down = x.copy(), x.copy()
            up[idx] += h
            down[idx] -= h
            g[idx] = (f(up) - f(down)) / (2 * h)
        return g

    np.testing.assert_allclose(grad_v, numeric(lambda x: negative_sampling_loss(x, u_pos, u_neg), v), rtol=1e-4, atol=1e-8)
    np.testing.assert_allclose(grad_pos, numeric(lambda x: negative_sampling_loss(v, x, u_neg), u_pos), rtol=1e-4, atol=1e-8)
    np.testing.assert_allclose(grad_neg, numeric(lambda x: negative_sampling_loss(v, u_pos, x), u_neg), rtol=1e-4, atol=1e-8)


def cooccurrence_cohort():
    visits = [["m:a", "m:b", "d:e"], ["m:a", "m:b", "d:f"], ["m:c", "d:d"]]
    return make_cohort(["d:d", "d:e", "d:f", "m:a", "m:b", "m:c"], [visits] * 20)


def test_zero_epochs_returns_initialisation():
    cohort = cooccurrence_cohort()
    table = train_skipgram(build_pairs(cohort), cohort.vocabulary, SgdConfig(d=8, epochs=0, seed=5))
    rng = np.random.default_rng(5)
    np.testing.assert_array_equal(table.input_vectors, (rng.random((6, 8)) - 0.5) / 8)
    assert not table.output_vectors.any()


def test_cooccurring_entities_end_up_closer():
    """A and B always share visits, C never meets A: cos(A, B) > cos(A, C) in at least 4 of 5 seeds."""
    cohort = cooccurrence_cohort()
    pairs = pair_indices(build_pairs(cohort))
    a, b, c = 3, 4, 5
    wins = 0
    for seed in range(5):
        table = train_skipgram(pairs, cohort.vocabulary, SgdConfig(d=16, epochs=30, learning_rate=0.05, seed=seed))
        S = similarity_matrix(table).S
        V = table.input_vectors
        cos = lambda x, y: V[x] @ V[y] / (np.linalg.norm(V[x]) * np.linalg.norm(V[y]))  # noqa: E731
        wins += cos(a, b) > cos(a, c)
        assert S[a, b] == pytest.approx(max(cos(a, b), 0.0))
    assert wins >= 4


def test_training_is_deterministic():
    cohort = cooccurrence_cohort()
    cfg = SgdConfig(d=8, epochs=3, seed=11)
    t1 = train_skipgram(build_pairs(cohort), cohort.vocabulary, cfg)
    t2 = train_skipgram(build_pairs(cohort), cohort.vocabulary, cfg)
    np.testing.assert_array_equal(t1.input_vectors, t2.input_vectors)
    np.testing.assert_array_equal(t1.output_vectors, t2.output_vectors)


def test_exploding_learning_rate_is_training_error():
    cohort = cooccurrence_cohort()
    with pytest.raises(TrainingError, match="learning"):
        with np.errstate(all="ignore"):
            train_skipgram(build_pairs(cohort), cohort.vocabulary, SgdConfig(d=4, epochs=1, learning_rate=1e200))


def test_similarity_matrix_rules():
    V = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 2.0], [-1.0, 0.0], [0.0, 0.0]])
    S = similarity_matrix(EmbeddingTable(V, np.zeros_like(V))).S
    assert S[0, 1] == pytest.approx(1.0)
    assert S[0, 2] == 0.0
    assert S[0, 3] == 0.0
    assert S[0, 4] == 0.0
    np.testing.assert_array_equal(np.diag(S), np.ones(5))
    np.testing.assert_array_equal(S, S.T)
    assert S.min() >= 0.0 and S.max() <= 1.0


def test_similarity_average_source():
    w_in = np.array([[1.0, 0.0], [0.0, 1.0]])
    w_out = np.array([[0.0, 1.0], [1.0, 0.0]])
    S = similarity_matrix(EmbeddingTable(w_in, w_out), source="average").S
    assert S[0, 1] == pytest.approx(1.0)


if __name__ == "__main__":
    pytest.main([__file__, "-v"])

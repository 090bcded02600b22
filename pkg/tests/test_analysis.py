"""
Analysis tests: metrics, significance, edge scoring, graph export, stratification.
Run: pytest tests/test_analysis.py -v
"""

import json
import math
import sys
from pathlib import Path

import numpy as np
import pytest
from scipy.special import expit
from scipy.stats import norm

PROJECT_ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(PROJECT_ROOT))

from phenotyper.analysis import (
    DIRECTION_COLORS,
    DirectionLabel,
    auc,
    edge_scores,
    evaluate_model,
    export_graph,
    factor_recovery,
    gini_index,
    gini_sparsity,
    graph_data,
    logit_significance,
    membership_stratification,
    mse,
    overlap,
    render_dot,
)
from phenotyper.cohort import EntityId, EntityKind
from phenotyper.config import HyperParams
from phenotyper.factorization import FactorModel
from phenotyper.tensor import TransitionTensor


def model_of(A, B, C, theta=None):
    R = B.shape[1]
    theta = np.zeros(R + 1) if theta is None else theta
    return FactorModel(np.asarray(A, float), np.asarray(B, float), np.asarray(C, float), theta, HyperParams(rank=R))


def vocab(n):
    return [EntityId(j, EntityKind.MEDICATION if j % 2 else EntityKind.DIAGNOSIS, f"e{j}") for j in range(n)]


# --- AUC ---


def test_auc_example():
    assert auc([0.1, 0.4, 0.35, 0.8], [-1, -1, 1, 1]) == pytest.approx(0.75)


def test_auc_all_ties_is_half():
    assert auc([0.3] * 6, [1, -1, 1, -1, 1, -1]) == pytest.approx(0.5)


def test_auc_perfect_and_reversed():
    assert auc([0.9, 0.8, 0.1], [1, 1, -1]) == 1.0
    assert auc([0.1, 0.2, 0.9], [1, 1, -1]) == 0.0


def test_auc_single_class_rejected():
    with pytest.raises(ValueError):
        auc([0.1, 0.2], [1, 1])


def test_auc_matches_pair_count():
    """Every (positive, negative) pair counted once; coarse scores force ties."""
    rng = np.random.default_rng(20)
    for _ in range(12):
        n = int(rng.integers(4, 40))
        y = np.where(rng.random(n) < 0.4, 1, -1)
        y[:2] = [1, -1]
        scores = rng.integers(0, 5, size=n) / 4.0
        pos, neg = scores[y == 1], scores[y == -1]
        wins = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p in pos for q in neg)
        assert auc(scores, y) == pytest.approx(wins / (len(pos) * len(neg)), abs=1e-10)


# --- Gini sparsity ---


def test_gini_uniform_is_zero():
    assert gini_index(np.full(7, 0.3)) == pytest.approx(0.0, abs=1e-12)


def test_gini_one_hot():
    v = np.zeros(10)
    v[4] = 2.0
    assert gini_index(v) == pytest.approx(1 - 1 / 10)


def test_gini_zero_vector():
    assert gini_index(np.zeros(5)) == 0.0


def test_gini_sparsity_of_one_hot_patterns():
    J = 8
    B = np.eye(J)[:, [0, 3]]
    C = np.eye(J)[:, [5, 1]]
    assert gini_sparsity(model_of(np.ones((2, 2)), B, C)) == pytest.approx(1 - 1 / J)


def test_gini_matches_mean_absolute_difference():
    """sum_ij |c_i - c_j| / (2 N sum c) is the same index written without sorting."""
    rng = np.random.default_rng(21)
    for _ in range(10):
        J, R = int(rng.integers(2, 12)), int(rng.integers(1, 4))
        B = rng.random((J, R)) * (rng.random((J, R)) < 0.6)
        C = rng.random((J, R)) * (rng.random((J, R)) < 0.6)
        values = []
        for col in [*B.T, *C.T]:
            total = col.sum()
            values.append(0.0 if total == 0 else np.abs(col[:, None] - col[None, :]).sum() / (2 * J * total))
        assert gini_sparsity(model_of(np.ones((1, R)), B, C)) == pytest.approx(float(np.mean(values)), abs=1e-10)


# --- overlap / mse / recovery ---


def test_overlap_disjoint_and_identical():
    B_disjoint = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
    C_disjoint = np.array([[1.0, 0.0], [0.0, 0.0], [0.0, 1.0]])
    assert overlap(model_of(np.ones((1, 2)), B_disjoint, C_disjoint)) == pytest.approx(0.0)
    col = np.array([[0.2], [0.5], [0.1]])
    assert overlap(model_of(np.ones((1, 2)), np.hstack([col, col]), np.hstack([2 * col, 2 * col]))) == pytest.approx(1.0)


def test_overlap_needs_two_phenotypes():
    with pytest.raises(ValueError):
        overlap(model_of(np.ones((1, 1)), np.ones((3, 1)), np.ones((3, 1))))


def test_mse_single_entry():
    O = TransitionTensor((2, 3, 3), np.array([[1, 2, 0]]), np.array([0.6]))
    model = model_of(np.zeros((2, 2)), np.zeros((3, 2)), np.zeros((3, 2)))
    assert mse(model, O) == pytest.approx(0.36 / 18)


def test_overlap_matches_pairwise_cosines():
    rng = np.random.default_rng(22)
    for _ in range(10):
        J, R = int(rng.integers(2, 10)), int(rng.integers(2, 6))
        B, C = rng.random((J, R)), rng.random((J, R))
        cosines = []
        for r in range(R):
            for s in range(r + 1, R):
                u = np.concatenate([B[:, r], C[:, r]])
                v = np.concatenate([B[:, s], C[:, s]])
                cosines.append(u @ v / math.sqrt((u @ u) * (v @ v)))
        assert overlap(model_of(np.ones((1, R)), B, C)) == pytest.approx(float(np.mean(cosines)), abs=1e-10)


def test_mse_matches_dense_reconstruction():
    rng = np.random.default_rng(23)
    for _ in range(10):
        I, J, R = int(rng.integers(1, 6)), int(rng.integers(2, 7)), int(rng.integers(1, 4))
        dense = rng.random((I, J, J)) * (rng.random((I, J, J)) < 0.3)
        O = TransitionTensor((I, J, J), np.argwhere(dense > 0), dense[dense > 0])
        A, B, C = rng.random((I, R)), rng.random((J, R)), rng.random((J, R))
        fitted = np.einsum("ir,jr,kr->ijk", A, B, C)
        assert mse(model_of(A, B, C), O) == pytest.approx(float(np.mean((dense - fitted) ** 2)), abs=1e-10)


def test_evaluate_model_single_phenotype_has_nan_overlap():
    O = TransitionTensor((2, 3, 3), np.array([[0, 0, 1]]), np.array([1.0]))
    report = evaluate_model(model_of(np.array([[1.0], [0.0]]), np.ones((3, 1)), np.ones((3, 1)), np.array([2.0, -1.0])), O, [1, -1])
    assert report.auc == 1.0
    assert math.isnan(report.overlap)
    assert set(report.as_dict()) == {"auc", "sparsity", "overlap", "mse"}


def test_factor_recovery_is_permutation_invariant():
    rng = np.random.default_rng(0)
    B, C = rng.random((6, 3)), rng.random((6, 3))
    perm = [2, 0, 1]
    assert factor_recovery(B[:, perm], 3 * C[:, perm], B, 3 * C) == pytest.approx(1.0)


# --- significance ---


def test_uninformative_membership_is_not_significant():
    A = np.array([[1.0], [2.0], [3.0], [4.0], [1.0], [2.0], [3.0], [4.0]])
    y = [1, 1, 1, 1, -1, -1, -1, -1]
    result = logit_significance(A, y)
    assert result.intercept == pytest.approx(0.0, abs=1e-8)
    assert result.coefficients[0] == pytest.approx(0.0, abs=1e-8)
    assert result.p[0] == pytest.approx(1.0, abs=1e-6)


def test_informative_membership_is_significant():
    rng = np.random.default_rng(1)
    y = np.where(rng.random(2000) < 0.5, 1, -1)
    A = np.column_stack([rng.random(2000) + 0.5 * (y == 1), rng.random(2000)])
    result = logit_significance(A, y)
    assert result.p[0] < 0.05
    assert result.directions()[0] is DirectionLabel.AD_LIKELY
    assert 0 in result.significant()


def test_constant_column_reported_as_nan():
    rng = np.random.default_rng(2)
    y = np.where(rng.random(200) < 0.5, 1, -1)
    A = np.column_stack([rng.random(200), np.zeros(200)])
    result = logit_significance(A, y)
    assert math.isnan(result.coefficients[1])
    frame = result.to_frame()
    assert list(frame.columns) == ["phenotype", "coeff", "std_err", "z", "P>|z|", "direction", "penalized"]
    assert frame.loc[1, "direction"] == ""


def test_significance_single_class_rejected():
    with pytest.raises(ValueError):
        logit_significance(np.ones((4, 1)), [1, 1, 1, 1])


def wald_oracle(A, y):
    """Plain Newton on the z-scored design, standard errors from the inverse Hessian."""
    X = (A - A.mean(axis=0)) / A.std(axis=0)
    Xd = np.column_stack([np.ones(len(y)), X])
    t = (np.asarray(y) == 1).astype(float)
    beta = np.zeros(Xd.shape[1])
    for _ in range(100):
        p = expit(Xd @ beta)
        H = (Xd.T * (p * (1 - p))) @ Xd
        beta = beta - np.linalg.solve(H, Xd.T @ (p - t))
    p = expit(Xd @ beta)
    se = np.sqrt(np.diag(np.linalg.inv((Xd.T * (p * (1 - p))) @ Xd)))
    return beta, se, 2 * norm.sf(np.abs(beta / se))


def test_significance_matches_newton_oracle():
    rng = np.random.default_rng(24)
    for _ in range(10):
        n, R = int(rng.integers(80, 200)), int(rng.integers(1, 4))
        A = rng.random((n, R))
        y = np.where(rng.random(n) < expit(2.0 * (A[:, 0] - 0.5)), 1, -1)
        beta, se, p = wald_oracle(A, y)
        result = logit_significance(A, y)
        np.testing.assert_allclose(result.coefficients, beta[1:], rtol=1e-4, atol=1e-8)
        np.testing.assert_allclose(result.std_errors, se[1:], rtol=1e-4, atol=1e-8)
        np.testing.assert_allclose(result.p, p[1:], rtol=1e-4, atol=1e-6)
        assert result.intercept == pytest.approx(beta[0], rel=1e-4, abs=1e-8)


# --- edge scores and graphs ---


def single_edge_graph(**kw):
    B = np.array([[0.5], [0.0]])
    C = np.array([[0.0], [0.4]])
    M = np.array([[0.0, 0.25], [0.0, 0.0]])
    return edge_scores(0, B, C, M, vocab(2), **kw)


def test_edge_score_example():
    g = single_edge_graph(epsilon=10.0)
    assert len(g.edges) == 1
    assert g.edges[0].score == pytest.approx(1.6)
    assert g.edges[0].source == "from:e0" and g.edges[0].target == "to:e1"


def test_top_k_zero_is_empty():
    g = single_edge_graph(epsilon=10.0, top_k=0)
    assert g.edges == () and g.nodes == ()


def test_zero_pattern_has_no_edges():
    M = np.full((3, 3), 0.5)
    g = edge_scores(0, np.zeros((3, 1)), np.ones((3, 1)), M, vocab(3))
    assert g.edges == ()


def test_negative_log_terms_dropped():
    g = single_edge_graph(epsilon=1.0)
    assert g.edges == ()
    assert g.dropped_negative == 1


def test_edges_sorted_with_index_tiebreak():
    M = np.full((3, 3), 0.5)
    g = edge_scores(0, np.ones((3, 1)), np.ones((3, 1)), M, vocab(3), top_k=4)
    pairs = [(e.source, e.target) for e in g.edges]
    assert pairs == [("from:e0", "to:e0"), ("from:e0", "to:e1"), ("from:e0", "to:e2"), ("from:e1", "to:e0")]


def test_dot_rendering():
    g = single_edge_graph(epsilon=10.0, coefficient=-0.3)
    text = render_dot([g])
    assert text.count("->") == 1
    assert "ADUnlikely" in text
    assert "shape=oval" in text and "shape=box" in text
    assert render_dot([g]) == text
    assert render_dot([]) == "digraph phenotypes {\n  rankdir=LR;\n}\n"


def test_json_export(tmp_path):
    g = single_edge_graph(epsilon=10.0, coefficient=0.8)
    data = graph_data([g])
    assert data["graphs"][0]["direction"] == "ADLikely"
    assert data["graphs"][0]["edges"][0]["color"] == DIRECTION_COLORS["ADLikely"]
    path = export_graph([g], tmp_path / "graphs.json", format="json")
    assert json.loads(path.read_text()) == json.loads(json.dumps(data))
    with pytest.raises(ValueError):
        export_graph([g], tmp_path / "graphs.svg", format="svg")


# --- stratification ---


def test_stratification_fixture():
    A = np.array([[0.0], [0.1], [0.5], [0.9]])
    frame = membership_stratification(A, [1, -1, 1, -1], [0.05, 0.5])
    assert list(frame["bin"]) == ["<=0.05", "(0.05,0.5]", ">0.5"]
    assert list(frame["positives"]) == [1, 1, 0]
    assert list(frame["negatives"]) == [0, 1, 1]


def test_zero_memberships_in_lowest_bin():
    frame = membership_stratification(np.zeros((5, 2)), [1, 1, -1, -1, 1], [0.0, 0.2])
    lowest = frame[frame["bin"] == "<=0"]
    assert list(lowest["positives"]) == [3, 3]
    assert list(lowest["negatives"]) == [2, 2]


def test_stratification_counts_cover_every_patient():
    rng = np.random.default_rng(3)
    A = rng.random((40, 3))
    y = np.where(rng.random(40) < 0.5, 1, -1)
    frame = membership_stratification(A, y, [0.1, 0.3, 0.6])
    per_phenotype = frame.groupby("phenotype")[["positives", "negatives"]].sum().sum(axis=1)
    assert list(per_phenotype) == [40, 40, 40]


def test_stratification_rejects_unsorted_bins():
    with pytest.raises(ValueError):
        membership_stratification(np.zeros((2, 1)), [1, -1], [0.5, 0.1])


if __name__ == "__main__":
    pytest.main([__file__, "-v"])

"""
Phenotype analysis.

- Metrics: AUC (Mann-Whitney), Gini sparsity of pattern columns, pattern overlap, reconstruction MSE
- Per-phenotype logistic significance (Wald z, two-sided p)
- Edge-scored transition graphs per phenotype, exported as DOT or JSON
- Membership stratification of positives / negatives
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from itertools import combinations
from pathlib import Path
from typing import Any, Literal, Sequence

import numpy as np
import pandas as pd
from scipy.stats import norm, rankdata

from .cohort import EntityId, EntityKind
from .errors import SeparationError
from .factorization import FactorModel, cp_reconstruct, predict
from .logistic import fit_logistic_irls
from .tensor import TransitionTensor

logger = logging.getLogger(__name__)

DEFAULT_EPSILON = 16.0
DEFAULT_TOP_K = 15

NODE_SHAPES = {EntityKind.MEDICATION: "box", EntityKind.DIAGNOSIS: "oval"}


class DirectionLabel(str, Enum):
    AD_LIKELY = "ADLikely"
    AD_UNLIKELY = "ADUnlikely"


# Edge colours per direction (JSON export)
DIRECTION_COLORS = {
    DirectionLabel.AD_LIKELY.value: "#ef4444",
    DirectionLabel.AD_UNLIKELY.value: "#22c55e",
    None: "#6b7280",
}


@dataclass(frozen=True)
class MetricsReport:
    auc: float
    sparsity: float
    overlap: float
    mse: float

    def as_dict(self) -> dict[str, float]:
        return {"auc": self.auc, "sparsity": self.sparsity, "overlap": self.overlap, "mse": self.mse}


def _signed_labels(labels: Sequence[int]) -> np.ndarray:
    y = np.asarray(labels, dtype=float)
    if not np.isin(y, (1.0, -1.0)).all():
        raise ValueError("labels must be +1 or -1")
    return y


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """P(random positive outscores random negative), ties counted one half."""
    s = np.asarray(scores, dtype=float)
    y = _signed_labels(labels)
    if s.shape != y.shape:
        raise ValueError("one score per label")
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == -1))
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auc needs both classes")
    ranks = rankdata(s)
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def gini_index(vector: np.ndarray) -> float:
    """1 - 2 sum_k (c_(k) / |c|_1) (N - k + 1/2) / N over ascending c; 0 for an all-zero vector."""
    c = np.sort(np.abs(np.asarray(vector, dtype=float)))
    total = c.sum()
    if total == 0:
        return 0.0
    N = c.size
    k = np.arange(1, N + 1)
    return float(1.0 - 2.0 * np.sum((c / total) * ((N - k + 0.5) / N)))


def gini_sparsity(model: FactorModel) -> float:
    """Mean Gini index over the 2R pattern vectors (columns of B and of C)."""
    columns = [model.B[:, r] for r in range(model.rank)] + [model.C[:, r] for r in range(model.rank)]
    return float(np.mean([gini_index(col) for col in columns]))


def overlap(model: FactorModel) -> float:
    """Mean cosine over unordered phenotype pairs of the concatenated columns [b_r; c_r]."""
    R = model.rank
    if R < 2:
        raise ValueError("overlap needs at least two phenotypes")
    patterns = np.vstack([model.B, model.C])
    norms = np.linalg.norm(patterns, axis=0)
    values = []
    for r, s in combinations(range(R), 2):
        if norms[r] == 0 or norms[s] == 0:
            values.append(0.0)
        else:
            values.append(float(patterns[:, r] @ patterns[:, s] / (norms[r] * norms[s])))
    return float(np.mean(values))


def mse(model: FactorModel, O: TransitionTensor) -> float:
    """Full-grid mean squared reconstruction error, via factor Gram matrices."""
    A, B, C = model.A, model.B, model.C
    if (A.shape[0], B.shape[0], C.shape[0]) != O.shape:
        raise ValueError(f"model shape does not match tensor {O.shape}")
    fitted = cp_reconstruct(A, B, C, O.subs)
    sq = O.norm_sq() - 2.0 * float(O.vals @ fitted) + float(np.sum((A.T @ A) * (B.T @ B) * (C.T @ C)))
    return max(sq, 0.0) / float(np.prod(O.shape))


def evaluate_model(model: FactorModel, O: TransitionTensor, labels: Sequence[int]) -> MetricsReport:
    """In-sample metrics; overlap is NaN for a single phenotype."""
    scores = predict(model.A, model.theta)
    return MetricsReport(
        auc=auc(scores, labels),
        sparsity=gini_sparsity(model),
        overlap=overlap(model) if model.rank >= 2 else math.nan,
        mse=mse(model, O),
    )


def factor_recovery(B: np.ndarray, C: np.ndarray, true_B: np.ndarray, true_C: np.ndarray) -> float:
    """Mean cosine between fitted and planted [b; c] columns after greedy one-to-one alignment."""
    fitted = np.vstack([B, C])
    truth = np.vstack([true_B, true_C])

    def unit(x: np.ndarray) -> np.ndarray:
        n = np.linalg.norm(x, axis=0)
        return np.divide(x, n, out=np.zeros_like(x), where=n > 0)

    cos = unit(fitted).T @ unit(truth)
    matched: list[float] = []
    cos = cos.copy()
    for _ in range(min(cos.shape)):
        r, s = np.unravel_index(int(np.argmax(cos)), cos.shape)
        matched.append(float(cos[r, s]))
        cos[r, :] = -np.inf
        cos[:, s] = -np.inf
    return float(np.mean(matched))


@dataclass(frozen=True, eq=False)
class PhenotypeSignificance:
    coefficients: np.ndarray
    std_errors: np.ndarray
    z: np.ndarray
    p: np.ndarray
    intercept: float
    intercept_std_error: float
    intercept_p: float
    penalized: bool = False

    def directions(self) -> list[DirectionLabel | None]:
        return [direction_label(c) for c in self.coefficients]

    def significant(self, threshold: float = 0.05) -> list[int]:
        return [r for r, p in enumerate(self.p) if np.isfinite(p) and p < threshold]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "phenotype": np.arange(len(self.coefficients)),
                "coeff": self.coefficients,
                "std_err": self.std_errors,
                "z": self.z,
                "P>|z|": self.p,
                "direction": [d.value if d else "" for d in self.directions()],
                "penalized": self.penalized,
            }
        )


def direction_label(coefficient: float) -> DirectionLabel | None:
    if not np.isfinite(coefficient):
        return None
    return DirectionLabel.AD_LIKELY if coefficient >= 0 else DirectionLabel.AD_UNLIKELY


def logit_significance(
    A: np.ndarray,
    labels: Sequence[int],
    standardize: bool = True,
    penalized: bool = False,
    penalty: float = 1.0,
) -> PhenotypeSignificance:
    """
    Logistic regression of the label on phenotype memberships with Wald statistics.

    Columns are z-scored first when `standardize` is set; constant columns are left out and
    reported as NaN. Standard errors come from the inverse observed information.
    """
    A = np.asarray(A, dtype=float)
    y = _signed_labels(labels)
    if A.shape[0] != y.shape[0]:
        raise ValueError("one label per membership row")
    if np.all(y == 1) or np.all(y == -1):
        raise ValueError("logit_significance needs both classes")
    R = A.shape[1]
    sd = A.std(axis=0)
    varying = sd > 0
    X = A[:, varying]
    if standardize:
        X = (X - X.mean(axis=0)) / sd[varying]
    try:
        result = fit_logistic_irls(X, (y == 1).astype(float), l2=penalty if penalized else 0.0)
    except SeparationError as e:
        raise SeparationError(f"{e}; rerun with penalized=True") from e
    se = np.sqrt(np.clip(np.diag(result.covariance), 0.0, None))

    coefficients = np.full(R, np.nan)
    std_errors = np.full(R, np.nan)
    coefficients[varying] = result.weights
    std_errors[varying] = se[1:]
    with np.errstate(divide="ignore", invalid="ignore"):
        z = coefficients / std_errors
    p = 2.0 * norm.sf(np.abs(z))
    intercept_z = result.intercept / se[0] if se[0] > 0 else 0.0
    logger.info(
        "logit_significance: phenotypes=%d significant(p<0.05)=%d penalized=%s",
        R, int(np.sum(p < 0.05)), penalized,
    )
    return PhenotypeSignificance(
        coefficients=coefficients,
        std_errors=std_errors,
        z=z,
        p=p,
        intercept=result.intercept,
        intercept_std_error=float(se[0]),
        intercept_p=float(2.0 * norm.sf(abs(intercept_z))),
        penalized=penalized,
    )


@dataclass(frozen=True)
class GraphNode:
    id: str
    code: str
    kind: EntityKind
    role: Literal["from", "to"]

    @property
    def shape(self) -> str:
        return NODE_SHAPES[self.kind]


@dataclass(frozen=True)
class GraphEdge:
    source: str
    target: str
    score: float


@dataclass(frozen=True)
class PhenotypeGraph:
    phenotype: int
    nodes: tuple[GraphNode, ...]
    edges: tuple[GraphEdge, ...]
    direction: DirectionLabel | None = None
    coefficient: float | None = None
    dropped_negative: int = field(default=0, compare=False)


def edge_scores(
    r: int,
    B: np.ndarray,
    C: np.ndarray,
    M: np.ndarray,
    vocabulary: Sequence[EntityId],
    epsilon: float = DEFAULT_EPSILON,
    top_k: int = DEFAULT_TOP_K,
    coefficient: float | None = None,
    sample_from_top: int | None = None,
    seed: int = 0,
) -> PhenotypeGraph:
    """
    score(j -> k) = B[j, r] C[k, r] (log2 M[j, k] + epsilon) over M[j, k] > 0, B[j, r] > 0, C[k, r] > 0.

    Edges whose log term is negative are dropped with a warning. The best `top_k` are kept,
    ties broken by (j, k); with `sample_from_top`, top_k edges are drawn at random from the best
    `sample_from_top` instead.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    if top_k < 0:
        raise ValueError("top_k must be >= 0")
    b, c = B[:, r], C[:, r]
    candidate = (M > 0) & (b > 0)[:, None] & (c > 0)[None, :]
    with np.errstate(divide="ignore"):
        log_term = np.log2(np.where(M > 0, M, 1.0)) + epsilon
    negative = candidate & (log_term < 0)
    dropped = int(negative.sum())
    if dropped:
        logger.warning(
            "edge_scores: phenotype %d dropped %d edges with log2(p) + %.3g < 0", r, dropped, epsilon
        )
    scores = np.outer(b, c) * log_term
    keep = candidate & ~negative & (scores > 0)
    j_idx, k_idx = np.nonzero(keep)
    values = scores[j_idx, k_idx]
    order = np.lexsort((k_idx, j_idx, -values))
    if sample_from_top is not None and sample_from_top > top_k:
        pool = order[:sample_from_top]
        picked = np.random.default_rng(seed).choice(len(pool), size=min(top_k, len(pool)), replace=False)
        order = pool[np.sort(picked)]
    else:
        order = order[:top_k]

    edges: list[GraphEdge] = []
    nodes: dict[str, GraphNode] = {}
    for idx in order:
        src, dst = vocabulary[j_idx[idx]], vocabulary[k_idx[idx]]
        source = GraphNode(f"from:{src.code}", src.code, src.kind, "from")
        target = GraphNode(f"to:{dst.code}", dst.code, dst.kind, "to")
        nodes.setdefault(source.id, source)
        nodes.setdefault(target.id, target)
        edges.append(GraphEdge(source.id, target.id, float(values[idx])))
    ordered_nodes = tuple(sorted(nodes.values(), key=lambda n: (n.role != "from", n.code)))
    return PhenotypeGraph(
        phenotype=r,
        nodes=ordered_nodes,
        edges=tuple(edges),
        direction=direction_label(coefficient) if coefficient is not None else None,
        coefficient=coefficient,
        dropped_negative=dropped,
    )


def _quote(text: str) -> str:
    return '"' + text.replace("\\", "\\\\").replace('"', '\\"') + '"'


def render_dot(graphs: Sequence[PhenotypeGraph]) -> str:
    lines = ["digraph phenotypes {", "  rankdir=LR;"]
    for g in graphs:
        title = f"phenotype {g.phenotype}" + (f" ({g.direction.value})" if g.direction else "")
        lines.append(f"  subgraph cluster_{g.phenotype} {{")
        lines.append(f"    label={_quote(title)};")
        for node in g.nodes:
            lines.append(
                f"    {_quote(f'p{g.phenotype}:{node.id}')} [label={_quote(node.code)}, shape={node.shape}];"
            )
        for edge in g.edges:
            lines.append(
                f"    {_quote(f'p{g.phenotype}:{edge.source}')} -> {_quote(f'p{g.phenotype}:{edge.target}')}"
                f" [label={_quote(f'{edge.score:.6g}')}];"
            )
        lines.append("  }")
    lines.append("}")
    return "\n".join(lines) + "\n"


def graph_data(graphs: Sequence[PhenotypeGraph]) -> dict[str, Any]:
    """JSON-ready structure: per phenotype, nodes and edges with display attributes."""
    out = []
    for g in graphs:
        direction = g.direction.value if g.direction else None
        out.append(
            {
                "phenotype": g.phenotype,
                "direction": direction,
                "coefficient": g.coefficient,
                "nodes": [
                    {"id": n.id, "label": n.code, "kind": n.kind.value, "role": n.role, "shape": n.shape}
                    for n in g.nodes
                ],
                "edges": [
                    {"source": e.source, "target": e.target, "score": e.score, "color": DIRECTION_COLORS[direction]}
                    for e in g.edges
                ],
            }
        )
    return {"graphs": out}


def export_graph(
    graphs: Sequence[PhenotypeGraph],
    path: Path | str,
    format: Literal["dot", "json"] = "dot",
) -> Path:
    """Write the graphs to one DOT or JSON file; output is byte-deterministic."""
    path = Path(path)
    if format == "dot":
        text = render_dot(graphs)
    elif format == "json":
        text = json.dumps(graph_data(graphs), indent=2, sort_keys=True) + "\n"
    else:
        raise ValueError(f"unknown graph format {format!r}")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path


def _bin_labels(bins: Sequence[float]) -> list[str]:
    labels = [f"<={bins[0]:g}"]
    labels += [f"({a:g},{b:g}]" for a, b in zip(bins, bins[1:])]
    labels.append(f">{bins[-1]:g}")
    return labels


def membership_stratification(
    A: np.ndarray,
    labels: Sequence[int],
    bins: Sequence[float],
) -> pd.DataFrame:
    """
    Counts of +1 / -1 patients per phenotype and membership bin.

    Bins are right-closed: (-inf, t0], (t0, t1], ..., (t_last, inf).
    """
    A = np.asarray(A, dtype=float)
    y = _signed_labels(labels)
    bins = [float(b) for b in bins]
    if not bins:
        raise ValueError("need at least one bin threshold")
    if any(b <= a for a, b in zip(bins, bins[1:])):
        raise ValueError("bin thresholds must be strictly ascending")
    names = _bin_labels(bins)
    rows = []
    for r in range(A.shape[1]):
        which = np.digitize(A[:, r], bins, right=True)
        for b, name in enumerate(names):
            in_bin = which == b
            pos = int(np.sum(in_bin & (y == 1)))
            neg = int(np.sum(in_bin & (y == -1)))
            rows.append(
                {
                    "phenotype": r,
                    "bin": name,
                    "positives": pos,
                    "negatives": neg,
                    "positive_ratio": pos / (pos + neg) if pos + neg else math.nan,
                }
            )
    return pd.DataFrame(rows, columns=["phenotype", "bin", "positives", "negatives", "positive_ratio"])

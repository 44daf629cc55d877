"""Evaluation: aggregation scores, accuracies, centroid quality, empirical distances."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment, linprog
from scipy.stats import norm

from .errors import ContractViolation
from .localclust import kmeans

log = logging.getLogger(__name__)

W1_MAX_SIZE = 500


@dataclass
class MetricsReport:
    e1: Optional[float] = None
    e2: Optional[float] = None
    e3_cosine: Optional[float] = None
    e3_relative: Optional[float] = None
    e4: Optional[float] = None
    e5: Optional[float] = None
    baseline_accuracy: Optional[float] = None

    def to_record(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


def _contingency(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1), dtype=np.int64)
    np.add.at(table, (ai, bi), 1)
    return table


def matched_fraction(pred, truth) -> float:
    """Share of items on the diagonal after the best one-to-one label matching."""
    pred = np.asarray(pred).ravel()
    truth = np.asarray(truth).ravel()
    if pred.shape != truth.shape:
        raise ContractViolation("prediction and truth lengths differ")
    if pred.size == 0:
        raise ContractViolation("nothing to score")
    table = _contingency(pred, truth)
    r, c = linear_sum_assignment(table, maximize=True)
    return float(table[r, c].sum() / pred.size)


def majority_labels(scenario, local_solutions) -> dict:
    """``(participant, local_index) -> most frequent true label`` (ties: smallest)."""
    out = {}
    for i, sol in enumerate(local_solutions):
        truth = scenario.local_truth(i)
        for a in range(sol.k):
            lab = truth[sol.labels == a]
            out[(i, a)] = int(np.bincount(lab).argmax()) if lab.size else -1
    return out


def _grouping_labels(membership: Sequence[Sequence[tuple]]) -> dict:
    return {key: g for g, grp in enumerate(membership) for key in grp}


def e1_aggregation(membership: Sequence[Sequence[tuple]], truth: dict) -> float:
    """Fraction of local clusters whose group maps to their true cluster."""
    group = _grouping_labels(membership)
    keys = sorted(group)
    if set(keys) != set(truth):
        raise ContractViolation("grouping and truth cover different local clusters")
    return matched_fraction([group[k] for k in keys], [truth[k] for k in keys])


e4_aggregation = e1_aggregation


def nearest_centroid(X: np.ndarray, vectors: np.ndarray) -> np.ndarray:
    V = np.asarray(vectors, dtype=float)
    X = np.asarray(X, dtype=float)
    if np.isnan(V).any():
        log.warning("global centroids have absent coordinates; assigning on observed ones")
        obs = ~np.isnan(V)
        D = np.stack([np.sum((X[:, obs[a]] - V[a, obs[a]]) ** 2, axis=1) for a in range(len(V))], axis=1)
    else:
        D = (X ** 2).sum(1)[:, None] - 2 * X @ V.T + (V ** 2).sum(1)[None, :]
    return np.argmin(D, axis=1)


def e2_accuracy(g, central: np.ndarray, labels: np.ndarray) -> float:
    """Percentage accuracy of nearest-global-centroid labels after optimal matching."""
    vectors = getattr(g, "vectors", g)
    return 100.0 * matched_fraction(nearest_centroid(central, vectors), labels)


@dataclass
class CentroidQuality:
    cosine: float
    relative: float
    zero_norm: bool = False


def e3_centroid_quality(g, optimal: Sequence) -> CentroidQuality:
    """Match estimated to reference centroids by Euclidean cost, then average both scores.

    Coordinates absent in either vector of a pair are left out. A zero-norm
    reference contributes its absolute distance and sets ``zero_norm``.
    """
    G = np.asarray(getattr(g, "vectors", g), dtype=float)
    O = np.asarray([np.asarray(o[0] if isinstance(o, tuple) else o, dtype=float) for o in optimal])
    if G.shape != O.shape:
        raise ContractViolation(f"shape mismatch {G.shape} vs {O.shape}")
    both = ~np.isnan(G)[:, None, :] & ~np.isnan(O)[None, :, :]
    diff = np.where(both, np.nan_to_num(G)[:, None, :] - np.nan_to_num(O)[None, :, :], 0.0)
    cost = np.sqrt((diff ** 2).sum(-1))
    r, c = linear_sum_assignment(cost)
    cos, rel, flag = [], [], False
    for a, b in zip(r, c):
        obs = both[a, b]
        u, v = G[a, obs], O[b, obs]
        nu, nv = np.linalg.norm(u), np.linalg.norm(v)
        cos.append(float(u @ v / (nu * nv)) if nu > 0 and nv > 0 else 0.0)
        dist = float(np.linalg.norm(u - v))
        if nv > 0:
            rel.append(dist / nv)
        else:
            flag = True
            rel.append(dist)
    return CentroidQuality(float(np.mean(cos)), float(np.mean(rel)), flag)


def e5_accuracy(grouping: Sequence[Sequence[tuple]], scenario, local_solutions) -> float:
    """Percentage accuracy when each distributed point takes its local cluster's group."""
    group = _grouping_labels(grouping)
    pred, truth = [], []
    for i, sol in enumerate(local_solutions):
        pred.append([group[(i, int(a))] for a in sol.labels])
        truth.append(scenario.local_truth(i))
    return 100.0 * matched_fraction(np.concatenate(pred), np.concatenate(truth))


def centralized_baseline(central: np.ndarray, labels: np.ndarray, k: int, restarts: int = 10,
                         rng_seed: int = 0) -> float:
    sol = kmeans(central, k, n_init=restarts, rng_seed=rng_seed)
    return 100.0 * matched_fraction(sol.labels, labels)


# ---------------------------------------------------------------------------
# empirical distances between point sets
# ---------------------------------------------------------------------------

def empirical_w1(a, b, max_size: int = W1_MAX_SIZE) -> float:
    """Exact 1-Wasserstein distance between two uniform empirical measures.

    Equal sizes reduce to an assignment problem; otherwise the transport
    linear program is solved directly.
    """
    A = np.atleast_2d(np.asarray(a, dtype=float))
    B = np.atleast_2d(np.asarray(b, dtype=float))
    if A.shape[0] == 0 or B.shape[0] == 0:
        raise ContractViolation("point sets must be nonempty")
    if A.shape[1] != B.shape[1]:
        raise ContractViolation("point sets have different dimensions")
    n, m = A.shape[0], B.shape[0]
    if max(n, m) > max_size:
        raise ContractViolation(
            f"sizes {n} x {m} exceed {max_size}; subsample both sets before calling")
    C = np.sqrt(np.maximum(((A[:, None, :] - B[None, :, :]) ** 2).sum(-1), 0.0))
    if n == m:
        r, c = linear_sum_assignment(C)
        return float(C[r, c].sum() / n)
    return transport_cost(C, np.full(n, 1.0 / n), np.full(m, 1.0 / m))


def transport_cost(C: np.ndarray, p: np.ndarray, q: np.ndarray) -> float:
    """Minimum of <C, T> over couplings T with marginals p and q."""
    n, m = C.shape
    rows = np.zeros((n, n * m))
    for i in range(n):
        rows[i, i * m:(i + 1) * m] = 1.0
    cols = np.zeros((m, n * m))
    for j in range(m):
        cols[j, j::m] = 1.0
    res = linprog(C.ravel(), A_eq=np.vstack([rows, cols]), b_eq=np.concatenate([p, q]),
                  bounds=(0, None), method="highs")
    if not res.success:
        raise ContractViolation(f"transport program failed: {res.message}")
    return float(res.fun)


def empirical_tv(a, b, bins) -> float:
    """Half the L1 distance between histograms on a shared grid.

    ``bins`` is a list of per-coordinate edge arrays, or an int for that many
    equal-width bins spanning both samples. Overflow bins catch any point
    outside the edges.
    """
    A = np.asarray(a, dtype=float)
    B = np.asarray(b, dtype=float)
    if A.ndim == 1:
        A, B = A[:, None], B[:, None]
    if A.shape[1] != B.shape[1]:
        raise ContractViolation("point sets have different dimensions")
    d = A.shape[1]
    if np.isscalar(bins):
        both = np.vstack([A, B])
        edges = [np.linspace(both[:, c].min(), both[:, c].max(), int(bins) + 1) for c in range(d)]
    else:
        edges = [np.asarray(e, dtype=float) for e in bins]
        if len(edges) != d:
            raise ContractViolation("need one edge array per coordinate")
    edges = [np.concatenate([[-np.inf], e, [np.inf]]) for e in edges]
    p, _ = np.histogramdd(A, bins=edges)
    q, _ = np.histogramdd(B, bins=edges)
    return float(0.5 * np.abs(p / A.shape[0] - q / B.shape[0]).sum())


def gaussian_tv(mu0: float, mu1: float, sigma: float = 1.0) -> float:
    """Total variation between two equal-variance 1-D Gaussians."""
    return float(2 * norm.cdf(abs(mu1 - mu0) / (2 * sigma)) - 1)

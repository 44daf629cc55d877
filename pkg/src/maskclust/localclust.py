"""Participant-side computation: K-means, model-order selection, Gaussian proxies.

Everything here runs on the dense block of a participant's observed
coordinates. Results are lifted back to full-width vectors (absent markers
outside the mask) only when they are handed to the server.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from .core import ABSENT, FeatureMask, LabeledCentroid, MaskedDataset, MaskedPoint
from .errors import ContractViolation

PHASE_LOCAL = 0
PHASE_FEDERATED = 1
PHASE_PROXY = 2


def derive_seed(*keys: int) -> int:
    """Independent 32-bit seed for the stream named by ``keys``.

    Used as ``derive_seed(global_seed, participant, phase[, round])``.
    """
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


@dataclass(eq=False)
class LocalSolution:
    labels: np.ndarray
    centroids: list
    k: int
    inertia: float = 0.0
    n_iter: int = 0
    inertia_history: list = field(default_factory=list)

    def dense_centroids(self) -> np.ndarray:
        if not self.centroids:
            return np.empty((0, 0))
        idx = self.centroids[0].mask.indices
        return np.vstack([c.vector[idx] for c in self.centroids])


def _dense(x) -> tuple[np.ndarray, FeatureMask, int]:
    if isinstance(x, MaskedDataset):
        return x.observed(), x.mask, x.owner
    arr = np.atleast_2d(np.asarray(x, dtype=float))
    return arr, FeatureMask.full(arr.shape[1]), 0


def _sqdist(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    out = np.empty((A.shape[0], B.shape[0]))
    step = max(1, 2_000_000 // max(1, B.size))
    for s in range(0, A.shape[0], step):
        diff = A[s:s + step, None, :] - B[None, :, :]
        out[s:s + step] = np.einsum("ijk,ijk->ij", diff, diff)
    return out


def _lift(dense: np.ndarray, mask: FeatureMask) -> np.ndarray:
    out = np.full(mask.dim, ABSENT)
    out[mask.indices] = dense
    return out


# ---------------------------------------------------------------------------
# K-means
# ---------------------------------------------------------------------------

def _kmeanspp_indices(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Greedy D² seeding: each step keeps the best of ``2 + ln k`` sampled candidates."""
    N = X.shape[0]
    trials = 2 + int(np.log(k))
    chosen = [int(rng.integers(N))]
    d2 = _sqdist(X, X[chosen])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            raise ContractViolation("k-means++ ran out of distinct points")
        cand = rng.choice(N, size=trials, p=d2 / total)
        pots = np.minimum(d2[:, None], _sqdist(X, X[cand]))
        best = int(np.argmin(pots.sum(axis=0)))
        chosen.append(int(cand[best]))
        d2 = pots[:, best]
    return np.array(chosen)


def kmeanspp_init(x, k: int, rng_seed: int = 0) -> np.ndarray:
    """D²-sampled seeds, as rows of the participant's observed coordinates."""
    X, _, _ = _dense(x)
    if k <= 0 or k > X.shape[0]:
        raise ContractViolation(f"k must be in [1, {X.shape[0]}], got {k}")
    if k > np.unique(X, axis=0).shape[0]:
        raise ContractViolation(f"k={k} exceeds the number of distinct points")
    return X[_kmeanspp_indices(X, k, np.random.default_rng(rng_seed))].copy()


def _means(X, labels, k, C_prev):
    C = C_prev.copy()
    counts = np.bincount(labels, minlength=k)
    sums = np.zeros((k, X.shape[1]))
    np.add.at(sums, labels, X)
    nz = counts > 0
    C[nz] = sums[nz] / counts[nz, None]
    return C


def _repair_empty(X, labels, D, k):
    """Move the point farthest from its centroid into each empty cluster."""
    counts = np.bincount(labels, minlength=k)
    for j in np.flatnonzero(counts == 0):
        own = D[np.arange(X.shape[0]), labels]
        donors = counts[labels] > 1
        own = np.where(donors, own, -np.inf)
        p = int(np.argmax(own))
        counts[labels[p]] -= 1
        labels[p] = j
        counts[j] = 1
        D[p, :] = np.inf
        D[p, j] = 0.0
    return labels


def _lloyd(X, C0, max_iter, tol):
    k = C0.shape[0]
    spread = np.sqrt(np.mean(np.sum((X - X.mean(axis=0)) ** 2, axis=1)))
    threshold = tol * (spread if spread > 0 else 1.0)
    C = C0.astype(float).copy()
    labels = None
    history = []
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        D = _sqdist(X, C)
        new = np.argmin(D, axis=1)
        new = _repair_empty(X, new, D, k)
        C_new = _means(X, new, k, C)
        history.append(float(np.sum((X - C_new[new]) ** 2)))
        moved = float(np.max(np.sqrt(np.sum((C_new - C) ** 2, axis=1))))
        C = C_new
        stable = labels is not None and np.array_equal(new, labels)
        labels = new
        if stable or moved <= threshold:
            break
    return labels, C, n_iter, history


def kmeans(x, k: int, init: Union[str, np.ndarray] = "k-means++", max_iter: int = 300,
           tol: float = 1e-6, rng_seed: int = 0, n_init: int = 1) -> LocalSolution:
    """Lloyd's algorithm on the participant's observed coordinates.

    ``init`` is ``"k-means++"``, ``"random"`` (k distinct data points) or an
    explicit (k, |mask|) or (k, dim) array of seeds. With a string init,
    ``n_init`` restarts are run and the lowest inertia wins. Convergence is a
    stable assignment or a maximum centroid movement below ``tol`` times the
    data's RMS spread. Empty clusters take the point farthest from its
    centroid.
    """
    X, mask, owner = _dense(x)
    N = X.shape[0]
    if k <= 0:
        raise ContractViolation(f"k must be positive, got {k}")
    if k > N:
        raise ContractViolation(f"k={k} exceeds the number of points {N}")
    rng = np.random.default_rng(rng_seed)
    if isinstance(init, str):
        if init not in ("k-means++", "random"):
            raise ContractViolation(f"unknown init strategy {init!r}")
        seeds = []
        for _ in range(max(1, n_init)):
            if init == "k-means++":
                seeds.append(X[_kmeanspp_indices(X, k, rng)])
            else:
                seeds.append(X[rng.choice(N, size=k, replace=False)])
    else:
        C0 = np.atleast_2d(np.asarray(init, dtype=float))
        if C0.shape[1] == mask.dim and mask.dim != len(mask):
            C0 = C0[:, mask.indices]
        if C0.shape != (k, X.shape[1]):
            raise ContractViolation(f"init must have shape ({k}, {X.shape[1]}), got {C0.shape}")
        if np.isnan(C0).any():
            raise ContractViolation("init centroids have absent coordinates on the owner mask")
        seeds = [C0]
    best = None
    for C0 in seeds:
        labels, C, n_iter, hist = _lloyd(X, C0, max_iter, tol)
        if best is None or hist[-1] < best[3][-1]:
            best = (labels, C, n_iter, hist)
    labels, C, n_iter, hist = best
    counts = np.bincount(labels, minlength=k)
    centroids = [LabeledCentroid(_lift(C[a], mask), mask, int(counts[a]), owner, a) for a in range(k)]
    return LocalSolution(labels, centroids, k, hist[-1], n_iter, hist)


# ---------------------------------------------------------------------------
# silhouette and model order
# ---------------------------------------------------------------------------

def silhouette_samples(X: np.ndarray, labels: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    labels = np.asarray(labels)
    uniq, lab = np.unique(labels, return_inverse=True)
    if uniq.size < 2:
        raise ContractViolation("silhouette needs at least two clusters")
    D = np.sqrt(_sqdist(X, X))
    k = uniq.size
    onehot = np.zeros((X.shape[0], k))
    onehot[np.arange(X.shape[0]), lab] = 1.0
    sums = D @ onehot
    sizes = onehot.sum(axis=0)
    rows = np.arange(X.shape[0])
    own = sizes[lab]
    a = np.where(own > 1, sums[rows, lab] / np.maximum(own - 1, 1), 0.0)
    others = sums / sizes[None, :]
    others[rows, lab] = np.inf
    b = others.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where(denom > 0, (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    return np.where(own > 1, s, 0.0)


def silhouette_score(X: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(silhouette_samples(X, labels)))


def _scan_k(x, k_min, k_max, rng_seed, n_init):
    X, _, _ = _dense(x)
    if not 2 <= k_min <= k_max <= X.shape[0] - 1:
        raise ContractViolation(
            f"need 2 <= k_min <= k_max <= N-1, got k_min={k_min}, k_max={k_max}, N={X.shape[0]}")
    best_k, best_sol, best_score = None, None, -np.inf
    scores = {}
    for k in range(k_min, k_max + 1):
        sol = kmeans(x, k, init="k-means++", rng_seed=derive_seed(rng_seed, k), n_init=n_init)
        if np.unique(sol.labels).size < 2:
            scores[k] = -1.0
            continue
        scores[k] = silhouette_score(X, sol.labels)
        if scores[k] > best_score:
            best_k, best_sol, best_score = k, sol, scores[k]
    return best_k, best_sol, scores


def select_k_silhouette(x, k_min: int, k_max: int, rng_seed: int = 0, n_init: int = 5) -> int:
    """Number of clusters in ``[k_min, k_max]`` with the highest mean silhouette.

    Ties go to the smallest k.
    """
    return _scan_k(x, k_min, k_max, rng_seed, n_init)[0]


@dataclass
class KMeansClusterer:
    """Default local clusterer: K-means++ with silhouette model-order selection.

    A fixed ``k`` skips selection. Any callable with the signature
    ``(MaskedDataset, rng_seed) -> LocalSolution`` can stand in for it.
    """

    k: Optional[int] = None
    k_min: int = 2
    k_max: int = 8
    n_init: int = 5
    max_iter: int = 300
    tol: float = 1e-6

    def __call__(self, x: MaskedDataset, rng_seed: int = 0) -> LocalSolution:
        N = len(x)
        if self.k is not None:
            return kmeans(x, min(self.k, N), init="k-means++", max_iter=self.max_iter,
                          tol=self.tol, rng_seed=rng_seed, n_init=self.n_init)
        hi = min(self.k_max, N - 1)
        lo = min(self.k_min, hi)
        if hi < 2:
            return kmeans(x, 1, rng_seed=rng_seed)
        _, sol, _ = _scan_k(x, lo, hi, rng_seed, self.n_init)
        return sol


LocalClusterer = Callable[[MaskedDataset, int], LocalSolution]


# ---------------------------------------------------------------------------
# Gaussian fitting and proxy sampling
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class GaussianModel:
    mean: np.ndarray
    covariance: np.ndarray
    count: int
    mask: FeatureMask
    owner: int = 0
    local_index: int = 0


@dataclass(eq=False)
class ProxyCluster:
    points: np.ndarray
    mask: FeatureMask
    owner: int = 0
    local_index: int = 0
    bounding_box: Optional[tuple] = None

    def __len__(self) -> int:
        return self.points.shape[0]

    def observed(self) -> np.ndarray:
        return self.points[:, self.mask.indices]

    def __getitem__(self, i) -> MaskedPoint:
        return MaskedPoint(self.points[i], self.mask)


def fit_gaussian(points, ridge: Optional[float] = None, owner: Optional[int] = None,
                 local_index: int = 0) -> GaussianModel:
    """Maximum-likelihood mean and covariance, plus ``ridge * I``.

    The default ridge is ``1e-6 * trace / |mask|`` floored at 1e-12.
    """
    X, mask, ds_owner = _dense(points)
    owner = ds_owner if owner is None else owner
    if X.shape[0] < 1:
        raise ContractViolation("fit_gaussian needs at least one point")
    mu = X.mean(axis=0)
    diff = X - mu
    cov = diff.T @ diff / X.shape[0]
    if ridge is None:
        ridge = max(1e-6 * float(np.trace(cov)) / max(1, X.shape[1]), 1e-12)
    if ridge <= 0:
        raise ContractViolation("ridge must be positive")
    cov = 0.5 * (cov + cov.T) + ridge * np.eye(X.shape[1])
    return GaussianModel(_lift(mu, mask), cov, X.shape[0], mask, owner, local_index)


def bounding_box(points) -> tuple[np.ndarray, np.ndarray]:
    X, _, _ = _dense(points)
    return X.min(axis=0), X.max(axis=0)


def sample_proxy(model: GaussianModel, m: int, bounding_box: Optional[tuple] = None,
                 rng_seed: int = 0) -> ProxyCluster:
    """Draw ``m`` synthetic points from ``model``; optionally clamp into a box.

    The box is a (low, high) pair over the model's observed coordinates.
    """
    if m < 1:
        raise ContractViolation("m must be >= 1")
    rng = np.random.default_rng(rng_seed)
    evals, evecs = np.linalg.eigh(model.covariance)
    factor = evecs * np.sqrt(np.clip(evals, 0.0, None))
    idx = model.mask.indices
    z = rng.standard_normal((m, idx.size))
    dense = model.mean[idx] + z @ factor.T
    if bounding_box is not None:
        lo, hi = (np.asarray(b, dtype=float) for b in bounding_box)
        dense = np.clip(dense, lo, hi)
    pts = np.full((m, model.mask.dim), ABSENT)
    pts[:, idx] = dense
    return ProxyCluster(pts, model.mask, model.owner, model.local_index, bounding_box)

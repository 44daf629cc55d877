"""Feature masks, masked points and the cross-subspace distance algebra.

Masked coordinates are stored as NaN so that arrays keep a fixed width ``dim``,
but no function here ever feeds a masked entry to arithmetic: every
computation first selects the observed coordinates through the mask.
Distances between points whose masks do not intersect are reported as
``None``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .errors import ContractViolation, DegenerateRescaleError

log = logging.getLogger(__name__)

ABSENT = np.nan
METRICS = ("euclidean", "cosine")


def _check_metric(metric: str) -> None:
    if metric not in METRICS:
        raise ContractViolation(f"unknown metric {metric!r}; expected one of {METRICS}")


@dataclass(frozen=True)
class FeatureMask:
    """Set of observed feature indices out of ``dim`` total features."""

    observed: frozenset
    dim: int

    def __post_init__(self):
        obs = frozenset(int(i) for i in self.observed)
        if self.dim < 0:
            raise ContractViolation(f"mask dim must be >= 0, got {self.dim}")
        bad = [i for i in obs if i < 0 or i >= self.dim]
        if bad:
            raise ContractViolation(f"mask indices {sorted(bad)} out of range [0, {self.dim})")
        object.__setattr__(self, "observed", obs)

    @classmethod
    def full(cls, dim: int) -> "FeatureMask":
        return cls(frozenset(range(dim)), dim)

    @classmethod
    def from_bool(cls, flags) -> "FeatureMask":
        flags = np.asarray(flags, dtype=bool)
        return cls(frozenset(np.flatnonzero(flags).tolist()), flags.size)

    @cached_property
    def indices(self) -> np.ndarray:
        return np.array(sorted(self.observed), dtype=np.intp)

    @cached_property
    def flags(self) -> np.ndarray:
        out = np.zeros(self.dim, dtype=bool)
        out[self.indices] = True
        return out

    def _same_dim(self, other: "FeatureMask") -> None:
        if self.dim != other.dim:
            raise ContractViolation(f"mask dims differ: {self.dim} vs {other.dim}")

    def __and__(self, other: "FeatureMask") -> "FeatureMask":
        self._same_dim(other)
        return FeatureMask(self.observed & other.observed, self.dim)

    def __or__(self, other: "FeatureMask") -> "FeatureMask":
        self._same_dim(other)
        return FeatureMask(self.observed | other.observed, self.dim)

    def __len__(self) -> int:
        return len(self.observed)

    def __contains__(self, item) -> bool:
        return item in self.observed

    def isdisjoint(self, other: "FeatureMask") -> bool:
        return self.observed.isdisjoint(other.observed)

    def __repr__(self) -> str:
        return f"FeatureMask({sorted(self.observed)}, dim={self.dim})"


def union_mask(masks: Iterable[FeatureMask], dim: int) -> FeatureMask:
    out = FeatureMask(frozenset(), dim)
    for m in masks:
        out = out | m
    return out


def apply_mask(coords, mask: FeatureMask) -> np.ndarray:
    """Copy ``coords`` with every coordinate outside ``mask`` replaced by the absent marker."""
    arr = np.array(coords, dtype=float)
    if arr.shape[-1] != mask.dim:
        raise ContractViolation(f"coordinate length {arr.shape[-1]} != mask dim {mask.dim}")
    arr[..., ~mask.flags] = ABSENT
    return arr


@dataclass(frozen=True, eq=False)
class MaskedPoint:
    coords: np.ndarray
    mask: FeatureMask

    def __post_init__(self):
        object.__setattr__(self, "coords", apply_mask(self.coords, self.mask))

    @property
    def dim(self) -> int:
        return self.mask.dim

    def observed(self) -> np.ndarray:
        return self.coords[self.mask.indices]


@dataclass(eq=False)
class MaskedDataset:
    """One participant's points, all sharing the participant's mask.

    ``points`` is an (N, dim) array with absent markers outside the mask;
    ``source_index`` optionally maps each row back to the central dataset.
    """

    points: np.ndarray
    mask: FeatureMask
    owner: int = 0
    source_index: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        self.points = apply_mask(pts, self.mask)
        if self.source_index is not None:
            self.source_index = np.asarray(self.source_index, dtype=np.intp)
            if self.source_index.shape != (len(self.points),):
                raise ContractViolation("source_index length must match the number of points")

    def __len__(self) -> int:
        return self.points.shape[0]

    def __getitem__(self, i) -> MaskedPoint:
        return MaskedPoint(self.points[i], self.mask)

    @property
    def dim(self) -> int:
        return self.mask.dim

    def observed(self) -> np.ndarray:
        """Dense (N, |mask|) block of observed coordinates."""
        return self.points[:, self.mask.indices]

    def subset(self, rows) -> "MaskedDataset":
        rows = np.asarray(rows)
        src = None if self.source_index is None else self.source_index[rows]
        return MaskedDataset(self.points[rows], self.mask, self.owner, src)


@dataclass(eq=False)
class LabeledCentroid:
    vector: np.ndarray
    mask: FeatureMask
    count: int
    owner: int = 0
    local_index: int = 0

    def __post_init__(self):
        if self.count < 1:
            raise ContractViolation(f"centroid count must be >= 1, got {self.count}")
        self.vector = apply_mask(self.vector, self.mask)


# ---------------------------------------------------------------------------
# distance primitives
# ---------------------------------------------------------------------------

def _phi(u: np.ndarray, v: np.ndarray, metric: str) -> float:
    if metric == "euclidean":
        return float(np.sqrt(np.sum((u - v) ** 2)))
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 and nv == 0.0:
        return 0.0
    if nu == 0.0 or nv == 0.0:
        return 1.0
    return float(max(0.0, 1.0 - np.dot(u, v) / (nu * nv)))


def pairwise_phi(A: np.ndarray, B: np.ndarray, metric: str = "euclidean") -> np.ndarray:
    """Dense distance matrix between the rows of two blocks of equal width."""
    _check_metric(metric)
    A = np.atleast_2d(A)
    B = np.atleast_2d(B)
    if metric == "euclidean":
        # direct differences; the Gram expansion loses digits on close pairs
        return cdist(A, B)
    na = np.linalg.norm(A, axis=1)[:, None]
    nb = np.linalg.norm(B, axis=1)[None, :]
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = (A @ B.T) / (na * nb)
    out = np.maximum(0.0, 1.0 - cos)
    zero_a = (na == 0.0)
    zero_b = (nb == 0.0)
    out = np.where(zero_a | zero_b, 1.0, out)
    return np.where(zero_a & zero_b, 0.0, out)


def pairwise_euclidean_exact(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Euclidean distances via explicit differences (no cancellation error)."""
    diff = np.atleast_2d(A)[:, None, :] - np.atleast_2d(B)[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def subspace_distance(u, v, idx: np.ndarray, metric: str = "euclidean") -> float:
    """φ between two full-width vectors restricted to coordinates ``idx``."""
    return _phi(np.asarray(u)[idx], np.asarray(v)[idx], metric)


def masked_distance(x: MaskedPoint, y: MaskedPoint, metric: str = "euclidean") -> Optional[float]:
    """Distance on the intersection of the two masks, ``None`` when it is empty."""
    _check_metric(metric)
    if x.dim != y.dim:
        raise ContractViolation(f"dimension mismatch: {x.dim} vs {y.dim}")
    inter = x.mask & y.mask
    if not len(inter):
        return None
    return subspace_distance(x.coords, y.coords, inter.indices, metric)


def _as_array(S) -> np.ndarray:
    if isinstance(S, np.ndarray):
        return np.atleast_2d(S.astype(float))
    if isinstance(S, MaskedDataset):
        return S.points
    rows = []
    for p in S:
        if isinstance(p, MaskedPoint):
            rows.append(p.coords)
        elif isinstance(p, LabeledCentroid):
            rows.append(p.vector)
        else:
            rows.append(np.asarray(p, dtype=float))
    if not rows:
        raise ContractViolation("reference set is empty")
    return np.vstack(rows)


def entrywise_extrema(S) -> tuple[np.ndarray, np.ndarray]:
    """Coordinate-wise max and min over observed entries (NaN where nothing is observed)."""
    arr = _as_array(S)
    seen = ~np.isnan(arr)
    hi = np.where(seen, arr, -np.inf).max(axis=0)
    lo = np.where(seen, arr, np.inf).min(axis=0)
    unseen = ~seen.any(axis=0)
    hi[unseen] = np.nan
    lo[unseen] = np.nan
    return hi, lo


def max_observed_distance(S, mask_i: FeatureMask, mask_j: FeatureMask,
                          metric: str = "euclidean") -> float:
    """φ(ewmax S, ewmin S) on the intersection of two masks."""
    _check_metric(metric)
    inter = mask_i & mask_j
    if not len(inter):
        raise ContractViolation("masks do not intersect")
    hi, lo = entrywise_extrema(S)
    return _dmax_from_extrema(hi, lo, inter.indices, metric)


def _dmax_from_extrema(hi, lo, idx, metric) -> float:
    h, l = hi[idx], lo[idx]
    if np.isnan(h).any():
        missing = idx[np.isnan(h)].tolist()
        raise ContractViolation(f"no reference point observes coordinates {missing}")
    value = _phi(h, l, metric)
    if value <= 0.0:
        raise DegenerateRescaleError(
            f"maximum observed distance is zero on coordinates {idx.tolist()}")
    return value


@dataclass(eq=False)
class RescaleContext:
    """Maximum observed distances over a fixed reference set.

    The entry-wise extrema of the reference set are computed once; the
    per-subspace maxima are derived from them and memoised by intersection.
    """

    hi: np.ndarray
    lo: np.ndarray
    metric: str = "euclidean"
    _cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_points(cls, S, metric: str = "euclidean") -> "RescaleContext":
        _check_metric(metric)
        hi, lo = entrywise_extrema(S)
        return cls(hi, lo, metric)

    @property
    def dim(self) -> int:
        return self.hi.size

    def d_max(self, mask_i: FeatureMask, mask_j: FeatureMask) -> float:
        inter = mask_i & mask_j
        if not len(inter):
            raise ContractViolation("masks do not intersect")
        return self.d_max_idx(inter.indices)

    def d_max_idx(self, idx: np.ndarray) -> float:
        key = idx.tobytes()
        try:
            value = self._cache[key]
        except KeyError:
            try:
                value = _dmax_from_extrema(self.hi, self.lo, idx, self.metric)
            except DegenerateRescaleError as err:
                value = err
            self._cache[key] = value
        if isinstance(value, Exception):
            raise value
        return value

    def distance(self, u, mask_u: FeatureMask, v, mask_v: FeatureMask) -> Optional[float]:
        """Rescaled distance between raw vectors; ``None`` when incomparable.

        Incomparable covers both disjoint masks and a degenerate (zero)
        maximum on the shared subspace.
        """
        inter = mask_u & mask_v
        if not len(inter):
            return None
        idx = inter.indices
        try:
            dmax = self.d_max_idx(idx)
        except DegenerateRescaleError:
            return None
        return subspace_distance(u, v, idx, self.metric) / dmax


def rescaled_distance(x: MaskedPoint, y: MaskedPoint, ctx: RescaleContext,
                      metric: Optional[str] = None) -> Optional[float]:
    metric = ctx.metric if metric is None else metric
    if metric != ctx.metric:
        raise ContractViolation(f"context built for {ctx.metric!r}, asked for {metric!r}")
    if x.dim != y.dim or x.dim != ctx.dim:
        raise ContractViolation("dimension mismatch between points and context")
    num = masked_distance(x, y, metric)
    if num is None:
        return None
    return num / ctx.d_max(x.mask, y.mask)


# ---------------------------------------------------------------------------
# merge and optimal centroids
# ---------------------------------------------------------------------------

def merge_centroids(S: Sequence[LabeledCentroid]) -> tuple[np.ndarray, FeatureMask]:
    """Count-weighted per-coordinate average of the centroids in ``S``.

    Each coordinate is averaged only over the centroids observing it; the
    output mask is the union of the input masks.
    """
    S = list(S)
    if not S:
        raise ContractViolation("merge_centroids needs at least one centroid")
    dim = S[0].mask.dim
    flags = np.vstack([c.mask.flags for c in S])
    values = np.vstack([np.where(c.mask.flags, c.vector, 0.0) for c in S])
    weights = np.array([c.count for c in S], dtype=float)[:, None]
    num = np.sum(weights * values, axis=0)
    den = np.sum(weights * flags, axis=0)
    out = np.full(dim, ABSENT)
    seen = den > 0
    out[seen] = num[seen] / np.maximum(1.0, den[seen])
    return out, FeatureMask.from_bool(seen)


def optimal_centroids(central, labels, partition, masks: Sequence[FeatureMask],
                      n_clusters: Optional[int] = None) -> list[tuple[np.ndarray, FeatureMask]]:
    """Per-cluster mean over all masked observations of that cluster's points.

    ``partition[p]`` is the participant holding central point ``p``. Clusters
    ``0 .. n_clusters-1`` without any point are skipped with a logged warning.
    """
    X = np.asarray(central, dtype=float)
    labels = np.asarray(labels)
    partition = np.asarray(partition)
    if X.shape[0] != labels.size or labels.size != partition.size:
        raise ContractViolation("central, labels and partition must have equal length")
    dim = X.shape[1]
    k = int(labels.max()) + 1 if n_clusters is None else n_clusters
    sums = np.zeros((k, dim))
    counts = np.zeros((k, dim))
    for i, mask in enumerate(masks):
        rows = np.flatnonzero(partition == i)
        if rows.size == 0:
            continue
        idx = mask.indices
        for a in np.unique(labels[rows]):
            sel = rows[labels[rows] == a]
            sums[a, idx] += X[np.ix_(sel, idx)].sum(axis=0)
            counts[a, idx] += sel.size
    out = []
    for a in range(k):
        if not counts[a].any():
            log.warning("cluster %d has no points; skipped in optimal centroids", a)
            continue
        seen = counts[a] > 0
        vec = np.full(dim, ABSENT)
        vec[seen] = sums[a, seen] / np.maximum(1.0, counts[a, seen])
        out.append((vec, FeatureMask.from_bool(seen)))
    return out

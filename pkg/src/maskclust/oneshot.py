"""One-shot agglomeration of proxy clusters by inverse-power attraction.

Participants fit a Gaussian to each local cluster; the server samples proxy
clusters from those models, caches the unnormalised pairwise forces once,
and merges groups of proxies bottom-up by highest normalised force,
keeping every intermediate grouping so the number of clusters can be picked
afterwards by silhouette.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .core import FeatureMask, LabeledCentroid, RescaleContext, merge_centroids, pairwise_phi
from .errors import AggregationStuckError, ConfigurationError, ContractViolation, DegenerateRescaleError
from .localclust import (PHASE_LOCAL, PHASE_PROXY, KMeansClusterer, ProxyCluster, bounding_box,
                         derive_seed, fit_gaussian, sample_proxy)
from .partition import Scenario

log = logging.getLogger(__name__)

DISTANCE_FLOOR = 1e-9


@dataclass
class PairForce:
    unnormalized: float
    normalized: float


def _key(p: ProxyCluster) -> tuple:
    return (p.owner, p.local_index)


def _block_distance(A: np.ndarray, B: np.ndarray, metric: str) -> np.ndarray:
    return pairwise_phi(A, B, metric)


def pair_force(p: ProxyCluster, q: ProxyCluster, w: float,
               ctx: RescaleContext) -> Optional[PairForce]:
    """Sum of inverse w-th powers of the rescaled cross distances.

    ``None`` when the two owner masks are disjoint (or the shared subspace is
    degenerate). Rescaled distances below 1e-9 are clamped to 1e-9.
    """
    if w <= 1:
        raise ContractViolation(f"force exponent must exceed 1, got {w}")
    inter = p.mask & q.mask
    if not len(inter):
        return None
    idx = inter.indices
    try:
        dmax = ctx.d_max_idx(idx)
    except DegenerateRescaleError:
        return None
    D = _block_distance(p.points[:, idx], q.points[:, idx], ctx.metric) / dmax
    total = float(np.sum(np.maximum(D, DISTANCE_FLOOR) ** -w))
    return PairForce(total, total / (len(p) * len(q)))


# ---------------------------------------------------------------------------
# force table
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class _MaskBlock:
    mask: FeatureMask
    members: list          # proxy indices
    points: np.ndarray     # stacked full-width points of the members
    bounds: np.ndarray     # row offsets of each member inside ``points``


def _mask_blocks(proxies: Sequence[ProxyCluster]) -> list:
    groups: dict = {}
    for n, p in enumerate(proxies):
        groups.setdefault(p.mask, []).append(n)
    out = []
    for mask, members in groups.items():
        sizes = [len(proxies[n]) for n in members]
        out.append(_MaskBlock(mask, members, np.vstack([proxies[n].points for n in members]),
                              np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(int)))
    return out


def _rescaled_blocks(blocks: list, ctx: RescaleContext) -> Iterator[tuple]:
    """Yield ``(a, b, D)`` for every intersecting block pair ``a <= b``."""
    for a in range(len(blocks)):
        for b in range(a, len(blocks)):
            inter = blocks[a].mask & blocks[b].mask
            if not len(inter):
                continue
            idx = inter.indices
            try:
                dmax = ctx.d_max_idx(idx)
            except DegenerateRescaleError:
                log.info("degenerate subspace between mask blocks %d and %d", a, b)
                continue
            D = _block_distance(blocks[a].points[:, idx], blocks[b].points[:, idx], ctx.metric)
            yield a, b, D / dmax


@dataclass(eq=False)
class ForceTable:
    """Cached unnormalised forces between every pair of proxy clusters.

    ``numerators[p, q]`` is NaN when the owner masks are disjoint; the
    diagonal is unused and NaN.
    """

    numerators: np.ndarray
    sizes: np.ndarray
    w: float
    keys: list

    def index(self, key: tuple) -> int:
        return self.keys.index(key)


def build_force_table(proxies: Sequence[ProxyCluster], w: float = 2.0,
                      ctx: Optional[RescaleContext] = None) -> ForceTable:
    """All pairwise f' values, rescaled over the pooled proxy points by default."""
    if w <= 1:
        raise ContractViolation(f"force exponent must exceed 1, got {w}")
    proxies = list(proxies)
    P = len(proxies)
    ctx = proxy_context(proxies) if ctx is None else ctx
    blocks = _mask_blocks(proxies)
    num = np.full((P, P), np.nan)
    for a, b, D in _rescaled_blocks(blocks, ctx):
        with np.errstate(over="ignore"):  # coincident points overflow at large w
            inv = np.maximum(D, DISTANCE_FLOOR) ** -w
        summed = np.add.reduceat(np.add.reduceat(inv, blocks[a].bounds, axis=0), blocks[b].bounds, axis=1)
        rows, cols = blocks[a].members, blocks[b].members
        num[np.ix_(rows, cols)] = summed
        num[np.ix_(cols, rows)] = summed.T
    np.fill_diagonal(num, np.nan)
    sizes = np.array([len(p) for p in proxies], dtype=float)
    return ForceTable(num, sizes, w, [_key(p) for p in proxies])


def proxy_context(proxies: Sequence[ProxyCluster], metric: str = "euclidean") -> RescaleContext:
    return RescaleContext.from_points(np.vstack([p.points for p in proxies]), metric)


def set_force(r: Sequence[int], s: Sequence[int], table: ForceTable) -> Optional[float]:
    """Normalised force between two groups of proxy indices.

    Disjoint-mask member pairs add nothing to the numerator but their sizes
    still count in the denominator; ``None`` if no member pair is comparable.
    """
    r, s = list(r), list(s)
    if set(r) & set(s):
        raise ContractViolation("groups must be disjoint")
    block = table.numerators[np.ix_(r, s)]
    if np.isnan(block).all():
        return None
    return float(np.nansum(block) / (table.sizes[r].sum() * table.sizes[s].sum()))


# ---------------------------------------------------------------------------
# agglomeration
# ---------------------------------------------------------------------------

@dataclass
class MergeStep:
    step: int
    group_a: list
    group_b: list
    force: float


@dataclass(eq=False)
class MergeForest:
    """Current grouping plus every intermediate grouping ``snapshots[k]``.

    Groups hold proxy indices; ``keys`` maps an index to its
    ``(participant, local_index)`` pair.
    """

    keys: list
    snapshots: dict
    steps: list = field(default_factory=list)

    @property
    def groups(self) -> list:
        return self.snapshots[min(self.snapshots)]

    def grouping(self, k: int) -> list:
        """Snapshot with ``k`` groups, as lists of ``(participant, local_index)``."""
        return [[self.keys[n] for n in grp] for grp in self.snapshots[k]]

    def labels(self, k: int) -> dict:
        return {self.keys[n]: g for g, grp in enumerate(self.snapshots[k]) for n in grp}


def agglomerate(proxies_or_table, w: float = 2.0, stop_k: Optional[int] = None) -> MergeForest:
    """Merge groups of proxy clusters by highest force until ``stop_k`` remain.

    Accepts either the proxy clusters (the force table is then built with
    exponent ``w``) or a prebuilt :class:`ForceTable`. Ties go to the lowest
    ``(r, s)`` pair in the current group order.
    """
    table = proxies_or_table if isinstance(proxies_or_table, ForceTable) \
        else build_force_table(proxies_or_table, w)
    P = len(table.keys)
    if P < 2:
        raise ContractViolation("agglomeration needs at least two proxy clusters")
    stop = 1 if stop_k is None else stop_k
    if not 1 <= stop <= P:
        raise ContractViolation(f"stop_k must be in [1, {P}], got {stop_k}")
    comparable = ~np.isnan(table.numerators)
    num = np.where(comparable, table.numerators, 0.0)
    sizes = table.sizes.copy()
    groups = [[n] for n in range(P)]
    forest = MergeForest(list(table.keys), {P: [list(g) for g in groups]})
    upper = np.triu(np.ones((P, P), dtype=bool), 1)
    step = 0
    while len(groups) > stop:
        G = len(groups)
        force = num / np.outer(sizes, sizes)
        force = np.where(comparable & upper[:G, :G], force, -np.inf)
        flat = int(np.argmax(force))
        r, s = divmod(flat, G)
        if not np.isfinite(force[r, s]):
            raise AggregationStuckError(
                f"no comparable pair among the remaining {G} groups", orphan=groups[0])
        step += 1
        forest.steps.append(MergeStep(step, [table.keys[n] for n in groups[r]],
                                      [table.keys[n] for n in groups[s]], float(force[r, s])))
        num[r, :] += num[s, :]
        num[:, r] += num[:, s]
        comparable[r, :] |= comparable[s, :]
        comparable[:, r] |= comparable[:, s]
        sizes[r] += sizes[s]
        groups[r] = groups[r] + groups[s]
        del groups[s]
        num = np.delete(np.delete(num, s, axis=0), s, axis=1)
        comparable = np.delete(np.delete(comparable, s, axis=0), s, axis=1)
        sizes = np.delete(sizes, s)
        num[r, r] = 0.0
        comparable[r, r] = False
        forest.snapshots[len(groups)] = [list(g) for g in groups]
    return forest


# ---------------------------------------------------------------------------
# model order
# ---------------------------------------------------------------------------

def pooled_distance_sums(proxies: Sequence[ProxyCluster],
                         ctx: Optional[RescaleContext] = None) -> tuple[np.ndarray, np.ndarray]:
    """Per pooled point, the summed rescaled distance to each proxy and the pair count.

    Rows follow the proxies' points in order. A point's own proxy counts
    ``size - 1`` partners; incomparable proxies count zero.
    """
    proxies = list(proxies)
    ctx = proxy_context(proxies) if ctx is None else ctx
    blocks = _mask_blocks(proxies)
    sizes = np.array([len(p) for p in proxies])
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    total = int(sizes.sum())
    S = np.zeros((total, len(proxies)))
    C = np.zeros((total, len(proxies)))

    def rows_of(block):
        return np.concatenate([np.arange(starts[n], starts[n] + sizes[n]) for n in block.members])

    for a, b, D in _rescaled_blocks(blocks, ctx):
        ra, rb = rows_of(blocks[a]), rows_of(blocks[b])
        S[np.ix_(ra, blocks[b].members)] += np.add.reduceat(D, blocks[b].bounds, axis=1)
        C[np.ix_(ra, blocks[b].members)] += sizes[blocks[b].members]
        if a != b:
            S[np.ix_(rb, blocks[a].members)] += np.add.reduceat(D.T, blocks[a].bounds, axis=1)
            C[np.ix_(rb, blocks[a].members)] += sizes[blocks[a].members]
    owner_col = np.repeat(np.arange(len(proxies)), sizes)
    C[np.arange(total), owner_col] -= 1
    return S, C


def grouping_silhouette(S: np.ndarray, C: np.ndarray, point_proxy: np.ndarray,
                        proxy_group: np.ndarray) -> float:
    """Mean silhouette of pooled points for one grouping, from the distance sums."""
    k = int(proxy_group.max()) + 1
    onehot = np.zeros((S.shape[1], k))
    onehot[np.arange(S.shape[1]), proxy_group] = 1.0
    SG, CG = S @ onehot, C @ onehot
    own = proxy_group[point_proxy]
    rows = np.arange(S.shape[0])
    own_cnt = CG[rows, own]
    a = np.where(own_cnt > 0, SG[rows, own] / np.where(own_cnt > 0, own_cnt, 1.0), 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        other = np.where(CG > 0, SG / CG, np.inf)
    other[rows, own] = np.inf
    b = other.min(axis=1)
    defined = (own_cnt > 0) & np.isfinite(b)
    denom = np.maximum(a, b)
    s = np.zeros(S.shape[0])
    ok = defined & (denom > 0)
    s[ok] = (b[ok] - a[ok]) / denom[ok]
    return float(s.mean())


def estimate_k(forest: MergeForest, proxies: Sequence[ProxyCluster], k_min: int, k_max: int,
               ctx: Optional[RescaleContext] = None) -> int:
    """Snapshot size in ``[k_min, k_max]`` with the best pooled-proxy silhouette.

    Ties go to the smallest k.
    """
    return silhouette_by_k(forest, proxies, k_min, k_max, ctx)[0]


def silhouette_by_k(forest, proxies, k_min, k_max, ctx=None) -> tuple[int, dict]:
    ks = [k for k in range(k_min, k_max + 1) if k in forest.snapshots]
    if not ks:
        raise ContractViolation(f"no snapshots available in [{k_min}, {k_max}]")
    if len(ks) == 1:
        return ks[0], {}
    S, C = pooled_distance_sums(proxies, ctx)
    sizes = np.array([len(p) for p in proxies])
    point_proxy = np.repeat(np.arange(len(proxies)), sizes)
    scores = {}
    for k in ks:
        proxy_group = np.empty(len(proxies), dtype=int)
        for g, grp in enumerate(forest.snapshots[k]):
            proxy_group[grp] = g
        scores[k] = grouping_silhouette(S, C, point_proxy, proxy_group)
    best = max(ks, key=lambda k: (scores[k], -k))
    return best, scores


# ---------------------------------------------------------------------------
# top level
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class Algorithm2Result:
    grouping: list
    k: int
    final_centroids: list
    forest: MergeForest
    models: list
    proxies: list
    local_solutions: list
    silhouettes: dict


def run_algorithm2(s: Scenario, w: float = 2.0, m: int = 50, k: Optional[int] = None,
                   rng_seed: int = 0, clusterer=None, k_range: Optional[tuple] = None,
                   local_k_max: Optional[int] = None, ridge: Optional[float] = None,
                   use_bounding_box: bool = False, m_bounds: Optional[tuple] = (30, 100)
                   ) -> Algorithm2Result:
    """Local clustering and Gaussian fitting, proxy sampling, agglomeration.

    With ``k`` given the merging stops at ``k`` groups; otherwise it runs to
    a single group and ``k`` is estimated by silhouette over ``k_range``.
    Final centroids are count-weighted merges of the member models' means.
    """
    if m_bounds is not None and not m_bounds[0] <= m <= m_bounds[1]:
        raise ConfigurationError(f"proxy size m={m} outside {m_bounds}")
    clusterer = clusterer or KMeansClusterer(k_min=2, k_max=local_k_max or k or 8)
    local, models, proxies = [], [], []
    for i, ds in enumerate(s.participants):
        sol = clusterer(ds, derive_seed(rng_seed, i, PHASE_LOCAL))
        local.append(sol)
        for a in range(sol.k):
            members = ds.subset(np.flatnonzero(sol.labels == a))
            model = fit_gaussian(members, ridge=ridge, owner=i, local_index=a)
            models.append(model)
            box = bounding_box(members) if use_bounding_box else None
            proxies.append(sample_proxy(model, m, box, derive_seed(rng_seed, i, PHASE_PROXY, a)))
    P = len(proxies)
    if P < 2:
        raise ContractViolation("need at least two local clusters in total")
    table = build_force_table(proxies, w)
    scores: dict = {}
    if k is not None:
        forest = agglomerate(table, w, stop_k=k)
        k_hat = k
    else:
        forest = agglomerate(table, w)
        lo, hi = k_range or (2, P)
        k_hat, scores = silhouette_by_k(forest, proxies, lo, min(hi, P))
    grouping = forest.grouping(k_hat)
    model_by_key = {(mo.owner, mo.local_index): mo for mo in models}
    final = []
    for grp in grouping:
        cents = [LabeledCentroid(model_by_key[key].mean, model_by_key[key].mask,
                                 model_by_key[key].count, *key) for key in grp]
        final.append(merge_centroids(cents))
    return Algorithm2Result(grouping, k_hat, final, forest, models, proxies, local, scores)


def save_merge_log(forest: MergeForest, path) -> Path:
    """``step,group_a,group_b,force``; members written as ``i:a`` joined by ``;``."""
    path = Path(path)

    def fmt(members):
        return ";".join(f"{i}:{a}" for i, a in members)

    lines = ["step,group_a,group_b,force"]
    lines += [f"{st.step},{fmt(st.group_a)},{fmt(st.group_b)},{st.force!r}" for st in forest.steps]
    path.write_text("\n".join(lines) + "\n")
    return path

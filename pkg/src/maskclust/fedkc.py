"""Federated K-clustering of masked data.

Initialisation aggregates the participants' local centroids at the server
(``method_a`` for identically distributed, chain-connected data;
``method_b`` for biased data on fully connected overlap graphs). The
federated phase then alternates local K-means from the projected global
centroids, Hungarian alignment, and a convex-combination server update.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import ABSENT, FeatureMask, LabeledCentroid, MaskedDataset, RescaleContext, merge_centroids
from .errors import AggregationStuckError, ConfigurationError, ContractViolation, DegenerateRescaleError
from .localclust import PHASE_FEDERATED, PHASE_LOCAL, KMeansClusterer, derive_seed, kmeans
from .partition import Scenario, verify_assumption1, verify_assumption2

log = logging.getLogger(__name__)


@dataclass(eq=False)
class GlobalCentroidSet:
    """K global centroids (rows of ``vectors``), their masks and member lists.

    ``membership[g]`` lists the ``(participant, local_index)`` pairs merged
    into centroid ``g``.
    """

    vectors: np.ndarray
    masks: list
    membership: list

    def __len__(self) -> int:
        return len(self.masks)

    @property
    def entries(self) -> list:
        return [(self.vectors[g], self.masks[g]) for g in range(len(self))]

    def copy(self) -> "GlobalCentroidSet":
        return GlobalCentroidSet(self.vectors.copy(), list(self.masks),
                                 [list(m) for m in self.membership])


@dataclass
class FederatedConfig:
    K: int
    alpha: float = 0.8
    F: int = 3
    local_iters: int = 10
    compat_floor: Optional[int] = None
    tol: Optional[float] = 1e-6

    def __post_init__(self):
        if self.K < 1:
            raise ConfigurationError(f"K must be >= 1, got {self.K}")
        if not 0.0 < self.alpha <= 1.0:
            raise ConfigurationError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.F < 0:
            raise ConfigurationError(f"F must be >= 0, got {self.F}")
        if self.local_iters < 1:
            raise ConfigurationError("local_iters must be >= 1")

    def floor_for(self, n_points: int) -> int:
        if self.compat_floor is not None:
            return self.compat_floor
        return max(2, math.ceil(n_points / (5 * self.K)))


def _key(c: LabeledCentroid) -> tuple:
    return (c.owner, c.local_index)


def _distances_to(ctx: RescaleContext, v: np.ndarray, mask_v: FeatureMask,
                  cents: Sequence[LabeledCentroid]) -> np.ndarray:
    """Rescaled distances from one vector to many centroids; NaN when incomparable.

    Centroids sharing a mask share the subspace and its maximum, so they are
    handled as one block.
    """
    out = np.full(len(cents), np.nan)
    blocks: dict = {}
    for n, c in enumerate(cents):
        blocks.setdefault(c.mask, []).append(n)
    for mask, rows in blocks.items():
        inter = mask & mask_v
        if not len(inter):
            continue
        idx = inter.indices
        try:
            dmax = ctx.d_max_idx(idx)
        except DegenerateRescaleError as err:
            log.debug("skipping subspace %s: %s", idx.tolist(), err)
            continue
        block = np.vstack([cents[r].vector[idx] for r in rows])
        if ctx.metric == "euclidean":
            d = np.sqrt(np.sum((block - v[idx]) ** 2, axis=1))
        else:
            d = np.array([ctx.distance(cents[r].vector, cents[r].mask, v, mask_v) * dmax for r in rows])
        out[rows] = d / dmax
    return out


def _merge_group(members: Sequence[LabeledCentroid]) -> tuple[np.ndarray, FeatureMask]:
    return merge_centroids(members)


def rescaled_distance_matrix(centroids: Sequence[LabeledCentroid],
                             ctx: RescaleContext) -> np.ndarray:
    """Symmetric rescaled distances between local centroids; NaN when incomparable."""
    n = len(centroids)
    D = np.full((n, n), np.nan)
    for z in range(n):
        D[z] = _distances_to(ctx, centroids[z].vector, centroids[z].mask, centroids)
    D = np.where(np.isnan(D), D.T, D)
    np.fill_diagonal(D, 0.0)
    return D


def _farthest_from(D: np.ndarray, Z: list, allowed: np.ndarray) -> int:
    """Allowed index maximising its minimum (non-NaN) distance to ``Z``."""
    sub = D[:, Z]
    valid = ~np.isnan(sub)
    mins = np.where(valid.any(axis=1), np.where(valid, sub, np.inf).min(axis=1), -np.inf)
    mins[~allowed] = -np.inf
    mins[Z] = -np.inf
    if np.all(mins == -np.inf):
        rest = [z for z in np.flatnonzero(allowed) if z not in Z]
        if not rest:
            raise AggregationStuckError("not enough centroids to seed the groups")
        return int(rest[0])
    return int(np.argmax(mins))


def _farthest_pair(D: np.ndarray, allowed_pairs: np.ndarray) -> list:
    W = np.where(np.isnan(D) | ~allowed_pairs, -np.inf, D)
    W[np.tril_indices_from(W)] = -np.inf
    z1, z2 = np.unravel_index(int(np.argmax(W)), W.shape)
    return [int(z1), int(z2)]


def maxmin_seeds(D: np.ndarray, k: int) -> list:
    """Greedy max-min diversity: the farthest pair, then the farthest-from-chosen.

    NaN entries are ignored. Ties go to the lowest index.
    """
    n = D.shape[0]
    if k == 1:
        return [0]
    Z = _farthest_pair(D, np.ones((n, n), dtype=bool))
    everyone = np.ones(n, dtype=bool)
    while len(Z) < k:
        Z.append(_farthest_from(D, Z, everyone))
    return Z


def meta_objective(centroids: Sequence[LabeledCentroid], membership: Sequence[Sequence[tuple]],
                   ctx: RescaleContext) -> float:
    """Sum over groups of squared rescaled distances from members to their merge."""
    by_key = {_key(c): c for c in centroids}
    total = 0.0
    for group in membership:
        if not group:
            continue
        members = [by_key[k] for k in group]
        vec, _ = merge_centroids(members)
        for c in members:
            d = ctx.distance(c.vector, c.mask, vec, c.mask)
            if d is None:
                continue
            total += d ** 2
    return total


def method_a(centroids: Sequence[LabeledCentroid], k: int,
             ctx: Optional[RescaleContext] = None) -> GlobalCentroidSet:
    """Greedy constrained agglomeration of local centroids.

    Groups start from the k centroids of the first participant holding
    exactly k of them (or from max-min seeds on distinct participants). Each
    step merges the remaining centroid and group at minimum rescaled
    distance, never placing two centroids of one participant in one group.
    """
    cents = list(centroids)
    if not 1 <= k <= len(cents):
        raise ContractViolation(f"need 1 <= k <= {len(cents)}, got {k}")
    dim = cents[0].mask.dim
    ctx = RescaleContext.from_points(cents) if ctx is None else ctx
    owners = sorted({c.owner for c in cents})
    sizes = {o: sum(1 for c in cents if c.owner == o) for o in owners}
    full = [o for o in owners if sizes[o] == k]
    if full:
        seeds = [n for n, c in enumerate(cents) if c.owner == full[0]]
    else:
        log.warning("no participant has exactly %d local centroids; seeding by max-min", k)
        seeds = _distinct_owner_seeds(cents, k, ctx)
    groups = [[cents[s]] for s in seeds]
    seeded = set(seeds)
    L = [c for n, c in enumerate(cents) if n not in seeded]

    vecs = np.full((k, dim), ABSENT)
    masks = []
    for g, members in enumerate(groups):
        vecs[g], m = _merge_group(members)
        masks.append(m)
    D = np.column_stack([_distances_to(ctx, vecs[g], masks[g], L) for g in range(k)]) \
        if L else np.empty((0, k))
    owner_of_l = np.array([c.owner for c in L], dtype=int)
    for g in range(k):
        taken = {c.owner for c in groups[g]}
        D[np.isin(owner_of_l, list(taken)), g] = np.inf

    while L:
        W = np.where(np.isnan(D), np.inf, D)
        flat = int(np.argmin(W))
        l, g = divmod(flat, k)
        if not np.isfinite(W[l, g]):
            raise AggregationStuckError(
                f"local centroid {_key(L[0])} cannot join any global centroid", orphan=_key(L[0]))
        c = L.pop(l)
        D = np.delete(D, l, axis=0)
        owner_of_l = np.delete(owner_of_l, l)
        groups[g].append(c)
        vecs[g], masks[g] = _merge_group(groups[g])
        if L:
            D[:, g] = _distances_to(ctx, vecs[g], masks[g], L)
            taken = {m.owner for m in groups[g]}
            D[np.isin(owner_of_l, list(taken)), g] = np.inf
    return GlobalCentroidSet(vecs, masks, [[_key(c) for c in grp] for grp in groups])


def _distinct_owner_seeds(cents, k, ctx):
    """Max-min seeds drawn from distinct participants while any remain unused."""
    if k == 1:
        return [0]
    D = rescaled_distance_matrix(cents, ctx)
    owners = np.array([c.owner for c in cents])
    pairs = owners[:, None] != owners[None, :]
    if not pairs.any():
        pairs = np.ones_like(pairs)
    Z = _farthest_pair(D, pairs)
    while len(Z) < k:
        allowed = ~np.isin(owners, owners[Z])
        if not allowed.any():
            allowed = np.ones(len(cents), dtype=bool)
        Z.append(_farthest_from(D, Z, allowed))
    return Z


def method_b(centroids: Sequence[LabeledCentroid], k: int,
             ctx: Optional[RescaleContext] = None, max_iter: int = 100,
             trace: Optional[list] = None) -> GlobalCentroidSet:
    """Max-min seeded, mask-aware K-means over local centroids.

    Distances are rescaled over all local centroids, group centres are the
    count-weighted merges of their members, and iteration stops when the
    assignment no longer changes. If ``trace`` is a list, the meta-clustering
    objective is appended to it after every update.
    """
    cents = list(centroids)
    if not 1 <= k <= len(cents):
        raise ContractViolation(f"need 1 <= k <= {len(cents)}, got {k}")
    ctx = RescaleContext.from_points(cents) if ctx is None else ctx
    D = rescaled_distance_matrix(cents, ctx)
    Z = maxmin_seeds(D, k)
    vecs = np.vstack([cents[z].vector for z in Z])
    masks = [cents[z].mask for z in Z]
    assign = None
    for _ in range(max_iter):
        dist = np.column_stack([_distances_to(ctx, vecs[g], masks[g], cents) for g in range(k)])
        dist = np.where(np.isnan(dist), np.inf, dist)
        new = np.argmin(dist, axis=1)
        stuck = ~np.isfinite(dist[np.arange(len(cents)), new])
        if stuck.any():
            orphan = _key(cents[int(np.flatnonzero(stuck)[0])])
            raise AggregationStuckError(f"local centroid {orphan} is incomparable with every group",
                                        orphan=orphan)
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        vecs = vecs.copy()
        for g in range(k):
            members = [cents[n] for n in np.flatnonzero(assign == g)]
            if not members:
                log.info("method_b: group %d lost all members; keeping its previous centre", g)
                continue
            vecs[g], masks[g] = merge_centroids(members)
        if trace is not None:
            trace.append(meta_objective(cents, [[_key(cents[n]) for n in np.flatnonzero(assign == g)]
                                                for g in range(k)], ctx))
    membership = [[_key(cents[n]) for n in np.flatnonzero(assign == g)] for g in range(k)]
    return GlobalCentroidSet(vecs, masks, membership)


# ---------------------------------------------------------------------------
# federated phase
# ---------------------------------------------------------------------------

def _nan_sqdist(P: np.ndarray, L: np.ndarray) -> np.ndarray:
    """Squared distances over jointly observed coordinates; NaN when none are shared."""
    diff = P[:, None, :] - L[None, :, :]
    seen = ~np.isnan(diff)
    sq = np.where(seen, diff, 0.0) ** 2
    out = sq.sum(axis=-1)
    out[~seen.any(axis=-1)] = np.nan
    return out


def compatible_centroids(x: MaskedDataset, g: GlobalCentroidSet, floor: int) -> list:
    """Indices of global centroids that win at least ``floor`` of the local points.

    Each local point goes to the nearest projected global centroid under the
    masked distance on the participant's features.
    """
    proj = g.vectors[:, x.mask.indices]
    D = _nan_sqdist(x.observed(), proj)
    D = np.where(np.isnan(D), np.inf, D)
    usable = np.isfinite(D).any(axis=1)
    nearest = np.argmin(D, axis=1)[usable]
    counts = np.bincount(nearest, minlength=len(g))
    return [int(a) for a in range(len(g)) if counts[a] >= floor]


def align_hungarian(projected_globals: np.ndarray, locals_: np.ndarray) -> list:
    """Minimum-cost matching of K_i local centroids onto k global slots.

    Rows of both arrays live in the participant's feature space; NaN entries
    in the projected globals are skipped. Returns a list of length k holding
    the matched local index or ``None``.
    """
    P = np.atleast_2d(np.asarray(projected_globals, dtype=float))
    L = np.atleast_2d(np.asarray(locals_, dtype=float))
    k = P.shape[0]
    if L.shape[0] == 0:
        return [None] * k
    cost = np.sqrt(_nan_sqdist(P, L))
    absent = np.isnan(cost)
    big = (np.nanmax(cost) if (~absent).any() else 1.0) * (k + L.shape[0] + 1) + 1.0
    rows, cols = linear_sum_assignment(np.where(absent, big, cost))
    out: list = [None] * k
    for r, c in zip(rows, cols):
        if not absent[r, c]:
            out[int(r)] = int(c)
    return out


@dataclass
class RoundLog:
    skipped_participants: list = field(default_factory=list)
    empty_slots: list = field(default_factory=list)
    movement: float = 0.0


def _local_update(ds: MaskedDataset, g: GlobalCentroidSet, cfg: FederatedConfig, seed: int):
    idx = ds.mask.indices
    proj = g.vectors[:, idx]
    sel = compatible_centroids(ds, g, cfg.floor_for(len(ds)))
    if not sel:
        return None
    init = proj[sel].copy()
    if np.isnan(init).any():
        fill = np.broadcast_to(ds.observed().mean(axis=0), init.shape)
        init = np.where(np.isnan(init), fill, init)
    sol = kmeans(ds, len(sel), init=init, max_iter=cfg.local_iters, rng_seed=seed)
    match = align_hungarian(proj, sol.dense_centroids())
    return [None if m is None else sol.centroids[m] for m in match]


def federated_round(participants: Sequence[MaskedDataset], g: GlobalCentroidSet,
                    cfg: FederatedConfig, rng_seed: int = 0,
                    round_index: int = 0) -> tuple[GlobalCentroidSet, RoundLog]:
    """One local-refinement, alignment and server-update cycle."""
    k = len(g)
    record = RoundLog()
    aligned = []
    for i, ds in enumerate(participants):
        out = _local_update(ds, g, cfg, derive_seed(rng_seed, ds.owner, PHASE_FEDERATED, round_index))
        if out is None:
            log.info("participant %d has no compatible global centroid; skipping round", ds.owner)
            record.skipped_participants.append(ds.owner)
            continue
        aligned.append(out)
    new = g.copy()
    a_ = cfg.alpha
    for a in range(k):
        contrib = [row[a] for row in aligned if row[a] is not None]
        if not contrib:
            record.empty_slots.append(a)
            continue
        vec, mask = merge_centroids(contrib)
        old, old_mask = g.vectors[a], g.masks[a]
        both = old_mask.flags & mask.flags
        only_new = mask.flags & ~old_mask.flags
        out = old.copy()
        out[both] = (1.0 - a_) * old[both] + a_ * vec[both]
        out[only_new] = vec[only_new]
        new.vectors[a] = out
        new.masks[a] = old_mask | mask
        new.membership[a] = [_key(c) for c in contrib]
    diff = new.vectors - g.vectors
    diff = np.where(np.isnan(diff), 0.0, diff)
    record.movement = float(np.max(np.sqrt(np.sum(diff ** 2, axis=1)))) if k else 0.0
    return new, record


# ---------------------------------------------------------------------------
# top level
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class Algorithm1Result:
    final: GlobalCentroidSet
    history: list
    init_membership: list
    method: str
    local_solutions: list
    warnings: list
    rounds: list


def choose_method(s: Scenario) -> tuple[str, Optional[str]]:
    """A when overlap graphs are connected, masks cover every feature and the
    clusters were spread at random; else B, with a warning if even the
    fully-connected condition fails."""
    if verify_assumption1(s, distribution=False).satisfied and s.identically_distributed is not False:
        return "A", None
    if verify_assumption2(s).satisfied:
        return "B", None
    return "B", "case not supported, defaulting to method B"


def run_algorithm1(s: Scenario, cfg: FederatedConfig, method: str = "auto",
                   clusterer=None, rng_seed: int = 0) -> Algorithm1Result:
    """Local clustering, server initialisation, then ``cfg.F`` federated rounds."""
    if method not in ("auto", "A", "B"):
        raise ConfigurationError(f"method must be auto, A or B; got {method!r}")
    clusterer = clusterer or KMeansClusterer(k_min=2, k_max=cfg.K)
    warnings = []
    local = []
    for i, ds in enumerate(s.participants):
        sol = clusterer(ds, derive_seed(rng_seed, i, PHASE_LOCAL))
        if sol.k > cfg.K:
            raise ContractViolation(f"participant {i} returned {sol.k} > K={cfg.K} clusters")
        local.append(sol)
    cents = [c for sol in local for c in sol.centroids]
    if method == "auto":
        method, warn = choose_method(s)
        if warn:
            log.warning(warn)
            warnings.append(warn)
    ctx = RescaleContext.from_points(cents)
    g = method_a(cents, cfg.K, ctx) if method == "A" else method_b(cents, cfg.K, ctx)
    init_membership = [list(m) for m in g.membership]
    history = [g.copy()]
    rounds = []
    for r in range(cfg.F):
        g, rec = federated_round(s.participants, g, cfg, rng_seed, r)
        history.append(g.copy())
        rounds.append(rec)
        if rec.empty_slots:
            warnings.append(f"round {r}: slots {rec.empty_slots} had no contributor")
        if cfg.tol is not None and rec.movement < cfg.tol:
            break
    return Algorithm1Result(g, history, init_membership, method, local, warnings, rounds)


def save_history(history: Sequence[GlobalCentroidSet], path) -> Path:
    """One row per centroid per round: ``round,slot,f0..f{d-1}`` (``nan`` = absent)."""
    path = Path(path)
    d = history[0].vectors.shape[1]
    rows = [np.concatenate([[r, a], snap.vectors[a]])
            for r, snap in enumerate(history) for a in range(len(snap))]
    header = "round,slot," + ",".join(f"f{m}" for m in range(d))
    fmt = ["%d", "%d"] + ["%.17g"] * d
    np.savetxt(path, np.vstack(rows), fmt=fmt, delimiter=",", header=header, comments="")
    return path

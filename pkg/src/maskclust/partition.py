"""Scenario recipes: split a central dataset across participants and mask it.

Two recipes are provided. ``chain_scenario`` gives each participant a window
of features overlapping its neighbours' windows; ``hub_scenario`` gives
everybody a small shared core plus a private, disjoint block. The
``verify_assumption*`` functions check the resulting overlap graphs.
"""

from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import FeatureMask, MaskedDataset, union_mask
from .errors import ConfigurationError, ContractViolation, ParseError

log = logging.getLogger(__name__)


@dataclass(eq=False)
class Scenario:
    """Central dataset, its partition across participants and their masks.

    ``assignment[p]`` is the participant holding central point ``p`` (-1 when
    the point is not distributed). Participant datasets list their points in
    increasing central index, and ``participants[i].source_index`` is the
    provenance map back into ``central``. ``identically_distributed`` says
    whether each cluster was spread at random (known by construction for
    generated scenarios, ``None`` when unknown).
    """

    central: np.ndarray
    labels: np.ndarray
    masks: list
    assignment: np.ndarray
    identically_distributed: Optional[bool] = None
    participants: list = field(init=False)

    def __post_init__(self):
        self.central = np.asarray(self.central, dtype=float)
        self.labels = np.asarray(self.labels, dtype=int)
        self.assignment = np.asarray(self.assignment, dtype=int)
        N, d = self.central.shape
        if self.labels.shape != (N,) or self.assignment.shape != (N,):
            raise ContractViolation("labels and assignment must have one entry per central point")
        if any(m.dim != d for m in self.masks):
            raise ContractViolation("every mask must have dim equal to the feature count")
        if self.assignment.max(initial=-1) >= len(self.masks):
            raise ContractViolation("assignment refers to a participant without a mask")
        self.participants = []
        for i, mask in enumerate(self.masks):
            rows = np.flatnonzero(self.assignment == i)
            if rows.size == 0:
                raise ConfigurationError(f"participant {i} received no points")
            self.participants.append(MaskedDataset(self.central[rows], mask, i, rows))

    @property
    def n_participants(self) -> int:
        return len(self.masks)

    @property
    def dim(self) -> int:
        return self.central.shape[1]

    @property
    def n_clusters(self) -> int:
        return int(self.labels.max()) + 1

    @property
    def distributed(self) -> np.ndarray:
        return np.flatnonzero(self.assignment >= 0)

    def local_truth(self, i: int) -> np.ndarray:
        return self.labels[self.participants[i].source_index]

    def provenance(self) -> dict:
        return {
            (i, j): int(c)
            for i, ds in enumerate(self.participants)
            for j, c in enumerate(ds.source_index)
        }


# ---------------------------------------------------------------------------
# mask recipes
# ---------------------------------------------------------------------------

def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def chain_windows(d: int, n: int, overlap_fraction: float) -> list[range]:
    """Consecutive feature windows of equal width sharing ``round(o*w)`` features.

    The width is the smallest one that covers ``d`` features; the last window
    is clipped at ``d``.
    """
    if not 0.0 < overlap_fraction < 1.0:
        raise ConfigurationError(f"overlap_fraction must lie in (0, 1), got {overlap_fraction}")
    if n < 1 or d < 1:
        raise ConfigurationError("need at least one participant and one feature")
    if n == 1:
        return [range(0, d)]
    for w in range(1, d + 1):
        shared = _round_half_up(overlap_fraction * w)
        stride = w - shared
        if stride < 1 or shared < 1:
            continue
        if w + (n - 1) * stride >= d:
            starts = [i * stride for i in range(n)]
            if starts[-1] >= d:
                continue
            return [range(s, min(s + w, d)) for s in starts]
    raise ConfigurationError(
        f"cannot fit {n} windows with overlap {overlap_fraction} into {d} features")


def chain_masks(d: int, n: int, overlap_fraction: float,
                feature_order: Optional[np.ndarray] = None) -> list[FeatureMask]:
    order = np.arange(d) if feature_order is None else np.asarray(feature_order)
    return [FeatureMask(frozenset(order[list(w)].tolist()), d)
            for w in chain_windows(d, n, overlap_fraction)]


def hub_masks(d: int, n: int, shared_fraction: float,
              feature_order: Optional[np.ndarray] = None) -> list[FeatureMask]:
    n_shared = _round_half_up(shared_fraction * d)
    if n_shared < 1:
        raise ConfigurationError(f"shared_fraction*d = {shared_fraction * d:g} leaves no shared feature")
    if d - n_shared < n:
        raise ConfigurationError(f"{d - n_shared} private features cannot be split across {n} participants")
    order = np.arange(d) if feature_order is None else np.asarray(feature_order)
    core = set(order[:n_shared].tolist())
    blocks = np.array_split(order[n_shared:], n)
    return [FeatureMask(frozenset(core | set(b.tolist())), d) for b in blocks]


# ---------------------------------------------------------------------------
# point distribution
# ---------------------------------------------------------------------------

def distribute_evenly(labels: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Deal every cluster's shuffled points round-robin over the participants.

    The dealing pointer carries over between clusters so the remainders do
    not always land on the same participants.
    """
    assignment = np.full(labels.size, -1, dtype=int)
    ptr = 0
    for a in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == a))
        assignment[idx] = (ptr + np.arange(idx.size)) % n
        ptr = (ptr + idx.size) % n
    return assignment


def distribute_biased(central: np.ndarray, labels: np.ndarray, n: int) -> np.ndarray:
    """Sort each cluster by its first coordinate and hand out equal contiguous runs."""
    assignment = np.full(labels.size, -1, dtype=int)
    for a in np.unique(labels):
        idx = np.flatnonzero(labels == a)
        order = idx[np.argsort(central[idx, 0], kind="stable")]
        for i, run in enumerate(np.array_split(order, n)):
            assignment[run] = i
    return assignment


def _local_silhouettes_ok(scen: Scenario, floor: float, seed: int) -> bool:
    from .localclust import kmeans, silhouette_score

    for i, ds in enumerate(scen.participants):
        k = np.unique(scen.local_truth(i)).size
        if k < 2 or k >= len(ds):
            continue
        sol = kmeans(ds, k, init="k-means++", rng_seed=seed + i, n_init=3)
        if silhouette_score(ds.observed(), sol.labels) <= floor:
            return False
    return True


def _generate(central, labels, n, make_masks, biased, rng_seed, shuffle_features,
              silhouette_floor, max_retries):
    central = np.asarray(central, dtype=float)
    labels = np.asarray(labels, dtype=int)
    d = central.shape[1]
    rng = np.random.default_rng(rng_seed)
    for attempt in range(max_retries + 1):
        order = rng.permutation(d) if shuffle_features else None
        masks = make_masks(order)
        if biased:
            assignment = distribute_biased(central, labels, n)
        else:
            assignment = distribute_evenly(labels, n, rng)
        scen = Scenario(central, labels, masks, assignment, not biased)
        if silhouette_floor is None or _local_silhouettes_ok(scen, silhouette_floor, int(rng_seed)):
            return scen
        log.info("scenario attempt %d rejected by silhouette floor %g", attempt, silhouette_floor)
    raise ConfigurationError(
        f"no scenario met silhouette floor {silhouette_floor} within {max_retries} retries")


def chain_scenario(central, labels, n: int, overlap_fraction: float = 0.3, rng_seed: int = 0,
                   shuffle_features: bool = True, silhouette_floor: Optional[float] = None,
                   max_retries: int = 10) -> Scenario:
    """Chained feature windows; every cluster spread randomly and evenly."""
    d = np.asarray(central).shape[1]
    chain_windows(d, n, overlap_fraction)
    return _generate(central, labels, n,
                     lambda order: chain_masks(d, n, overlap_fraction, order),
                     False, rng_seed, shuffle_features, silhouette_floor, max_retries)


def hub_scenario(central, labels, n: int, shared_fraction: float = 0.1, biased: bool = False,
                 rng_seed: int = 0, shuffle_features: bool = True,
                 silhouette_floor: Optional[float] = None, max_retries: int = 10) -> Scenario:
    """Shared feature core plus disjoint private blocks.

    With ``biased`` each cluster is sorted by its first coordinate and split
    into contiguous runs, one per participant.
    """
    d = np.asarray(central).shape[1]
    hub_masks(d, n, shared_fraction)
    return _generate(central, labels, n,
                     lambda order: hub_masks(d, n, shared_fraction, order),
                     biased, rng_seed, shuffle_features, silhouette_floor, max_retries)


# ---------------------------------------------------------------------------
# overlap graphs and assumption checks
# ---------------------------------------------------------------------------

@dataclass
class OverlapGraph:
    vertices: list
    edges: set

    def neighbours(self, v: int) -> list:
        return sorted({b for a, b in self.edges if a == v} | {a for a, b in self.edges if b == v})

    def is_connected(self) -> bool:
        if len(self.vertices) <= 1:
            return True
        seen = {self.vertices[0]}
        queue = deque(seen)
        while queue:
            v = queue.popleft()
            for u in self.neighbours(v):
                if u not in seen:
                    seen.add(u)
                    queue.append(u)
        return len(seen) == len(self.vertices)

    def is_complete(self) -> bool:
        vs = self.vertices
        return all((vs[p], vs[q]) in self.edges for p in range(len(vs)) for q in range(p + 1, len(vs)))


def overlap_edges(masks: Sequence[FeatureMask]) -> set:
    """Pairs ``(i, j)``, ``i < j``, of participants whose masks intersect."""
    n = len(masks)
    return {(i, j) for i in range(n) for j in range(i + 1, n) if not masks[i].isdisjoint(masks[j])}


def cluster_vertices(s: Scenario, a: int) -> list:
    held = s.assignment[(s.labels == a) & (s.assignment >= 0)]
    return sorted(np.unique(held).tolist())


def overlap_graph(s: Scenario, a: int, edges: Optional[set] = None) -> OverlapGraph:
    edges = overlap_edges(s.masks) if edges is None else edges
    V = cluster_vertices(s, a)
    Vs = set(V)
    return OverlapGraph(V, {(i, j) for i, j in edges if i in Vs and j in Vs})


def ks_statistic(a: np.ndarray, b: np.ndarray) -> float:
    """Two-sample Kolmogorov-Smirnov statistic of two 1-D samples."""
    a = np.sort(a)
    b = np.sort(b)
    grid = np.concatenate([a, b])
    fa = np.searchsorted(a, grid, side="right") / a.size
    fb = np.searchsorted(b, grid, side="right") / b.size
    return float(np.max(np.abs(fa - fb)))


@dataclass
class Assumption1Report:
    connected: dict
    union_identity: dict
    distribution_check: dict

    @property
    def satisfied(self) -> bool:
        return all(self.connected.values()) and all(self.union_identity.values())


@dataclass
class Assumption2Report:
    fully_connected: dict
    union_identity: dict

    @property
    def satisfied(self) -> bool:
        return all(self.fully_connected.values()) and all(self.union_identity.values())


def _union_identity(s: Scenario, V: list) -> bool:
    return len(union_mask((s.masks[i] for i in V), s.dim)) == s.dim


def _distribution_stat(s: Scenario, a: int, V: list) -> float:
    pooled_rows = np.flatnonzero((s.labels == a) & (s.assignment >= 0))
    worst = 0.0
    for i in V:
        rows = pooled_rows[s.assignment[pooled_rows] == i]
        for m in s.masks[i].indices:
            worst = max(worst, ks_statistic(s.central[rows, m], s.central[pooled_rows, m]))
    return worst


def verify_assumption1(s: Scenario, distribution: bool = True) -> Assumption1Report:
    """Connectivity, feature coverage and a KS surrogate for identical distribution.

    The KS value is the largest per-coordinate statistic between any
    participant's slice of the cluster and the pooled cluster. It is reported,
    not thresholded.
    """
    edges = overlap_edges(s.masks)
    conn, ident, dist = {}, {}, {}
    for a in range(s.n_clusters):
        g = overlap_graph(s, a, edges)
        if not g.vertices:
            continue
        conn[a] = g.is_connected()
        ident[a] = _union_identity(s, g.vertices)
        if distribution:
            dist[a] = _distribution_stat(s, a, g.vertices)
    return Assumption1Report(conn, ident, dist)


def verify_assumption2(s: Scenario) -> Assumption2Report:
    edges = overlap_edges(s.masks)
    full, ident = {}, {}
    for a in range(s.n_clusters):
        g = overlap_graph(s, a, edges)
        if not g.vertices:
            continue
        full[a] = g.is_complete()
        ident[a] = _union_identity(s, g.vertices)
    return Assumption2Report(full, ident)


# ---------------------------------------------------------------------------
# directory export / import
# ---------------------------------------------------------------------------

def _feature_header(d: int) -> str:
    return ",".join(f"f{m}" for m in range(d))


def save_scenario(s: Scenario, directory) -> Path:
    """Write a scenario as plain-text tables.

    Layout: ``masks.json`` (dim plus each participant's sorted feature
    indices), ``participant_NNN.csv`` (columns ``f0..f{d-1}``, ``nan`` for
    masked entries), ``truth.csv`` (participant, local_index, central_index,
    label) and ``central.csv`` (``f0..f{d-1}``, label) holding the unmasked
    reference data used only for evaluation.
    """
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "dim": s.dim,
        "n_participants": s.n_participants,
        "columns": [f"f{m}" for m in range(s.dim)],
        "masks": [m.indices.tolist() for m in s.masks],
        "identically_distributed": s.identically_distributed,
    }
    (out / "masks.json").write_text(json.dumps(manifest, indent=1) + "\n")
    header = _feature_header(s.dim)
    for i, ds in enumerate(s.participants):
        np.savetxt(out / f"participant_{i:03d}.csv", ds.points, fmt="%.17g", delimiter=",",
                   header=header, comments="")
    rows = [(i, j, int(c), int(s.labels[c]))
            for i, ds in enumerate(s.participants) for j, c in enumerate(ds.source_index)]
    np.savetxt(out / "truth.csv", np.array(rows, dtype=np.int64).reshape(-1, 4), fmt="%d",
               delimiter=",", header="participant,local_index,central_index,label", comments="")
    table = np.column_stack([s.central, s.labels])
    fmt = ["%.17g"] * s.dim + ["%d"]
    np.savetxt(out / "central.csv", table, fmt=fmt, delimiter=",",
               header=header + ",label", comments="")
    return out


def load_scenario(directory) -> Scenario:
    src = Path(directory)
    try:
        manifest = json.loads((src / "masks.json").read_text())
        d = int(manifest["dim"])
        masks = [FeatureMask(frozenset(ix), d) for ix in manifest["masks"]]
        central_tab = np.loadtxt(src / "central.csv", delimiter=",", skiprows=1, ndmin=2)
        truth = np.loadtxt(src / "truth.csv", delimiter=",", skiprows=1, ndmin=2, dtype=np.int64)
    except (OSError, KeyError, ValueError) as err:
        raise ParseError(f"cannot read scenario directory {src}: {err}") from err
    central = central_tab[:, :d]
    labels = central_tab[:, d].astype(int)
    assignment = np.full(central.shape[0], -1, dtype=int)
    assignment[truth[:, 2]] = truth[:, 0]
    return Scenario(central, labels, masks, assignment, manifest.get("identically_distributed"))

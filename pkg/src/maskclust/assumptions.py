"""Sampled triplet test of whether masking preserves distance order."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import FeatureMask, RescaleContext
from .errors import StructuralError
from .partition import Scenario, cluster_vertices, overlap_edges


@dataclass
class TripletReport:
    sampled: int
    applicable: int
    satisfied: int

    @property
    def rate(self) -> float:
        return self.satisfied / self.applicable if self.applicable else float("nan")


def _local_rows(s: Scenario) -> dict:
    """``(participant, cluster) -> central row indices`` held by that participant."""
    out = {}
    for i, ds in enumerate(s.participants):
        lab = s.labels[ds.source_index]
        for a in np.unique(lab):
            out[(i, int(a))] = ds.source_index[lab == a]
    return out


def check_triplets(s: Scenario, n_samples: int = 1000, rng_seed: int = 0,
                   max_draws: Optional[int] = None, ctx: Optional[RescaleContext] = None
                   ) -> TripletReport:
    """Draw triplets until ``n_samples`` have a true antecedent (or the draw cap).

    A participant counts as its own neighbour, so ``j`` or ``k`` may equal
    ``i``. ``sampled`` is the total number of triplets drawn.
    """
    if s.n_participants < 2:
        raise StructuralError("triplet test needs at least two participants")
    rows = _local_rows(s)
    edges = overlap_edges(s.masks)
    nbrs = {i: {i} for i in range(s.n_participants)}
    for i, j in edges:
        nbrs[i].add(j)
        nbrs[j].add(i)
    V = {a: cluster_vertices(s, a) for a in range(s.n_clusters)}
    # every (a, b, i) for which both j and k candidates exist
    frames = []
    for a, Va in V.items():
        for i in Va:
            J = sorted(nbrs[i] & set(Va))
            for b, Vb in V.items():
                if b == a:
                    continue
                Kc = sorted(nbrs[i] & set(Vb))
                if J and Kc:
                    frames.append((a, b, i, J, Kc))
    if not frames:
        raise StructuralError("no (cluster, cluster, participant) combination admits a triplet")
    ctx = RescaleContext.from_points(s.central) if ctx is None else ctx
    rng = np.random.default_rng(rng_seed)
    cap = max_draws if max_draws is not None else 100 * n_samples
    X = s.central
    sampled = applicable = satisfied = 0
    while applicable < n_samples and sampled < cap:
        a, b, i, J, Kc = frames[rng.integers(len(frames))]
        j = J[rng.integers(len(J))]
        k = Kc[rng.integers(len(Kc))]
        r1 = rng.choice(rows[(i, a)])
        r2 = rng.choice(rows[(j, a)])
        r3 = rng.choice(rows[(k, b)])
        sampled += 1
        x1, x2, x3 = X[r1], X[r2], X[r3]
        if not np.linalg.norm(x1 - x2) < np.linalg.norm(x1 - x3):
            continue
        applicable += 1
        d12 = ctx.distance(x1, s.masks[i], x2, s.masks[j])
        d13 = ctx.distance(x1, s.masks[i], x3, s.masks[k])
        if d12 is not None and d13 is not None and d12 < d13:
            satisfied += 1
    return TripletReport(sampled, applicable, satisfied)


def bad_masking_instance(n_per_cluster: int = 60, rng_seed: int = 0) -> Scenario:
    """Two 3-D clusters that differ only along the last coordinate, which both participants hide.

    Each participant holds half of each cluster and observes coordinates 0
    and 1, so the clusters look like one blob after masking.
    """
    rng = np.random.default_rng(rng_seed)
    base = rng.normal(scale=1.0, size=(2 * n_per_cluster, 3))
    base[:, 2] *= 0.3
    base[n_per_cluster:, 2] += 10.0
    labels = np.repeat([0, 1], n_per_cluster)
    assignment = np.tile([0, 1], n_per_cluster)
    mask = FeatureMask(frozenset({0, 1}), 3)
    return Scenario(base, labels, [mask, mask], assignment)

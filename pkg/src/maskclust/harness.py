"""Experiment runner: data sources, repetitions, metric records and summary tables."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .assumptions import check_triplets
from .core import optimal_centroids
from .errors import ConfigurationError, MaskClustError, ParseError
from .fedkc import FederatedConfig, run_algorithm1
from .localclust import KMeansClusterer, derive_seed
from .metrics import (centralized_baseline, e1_aggregation, e2_accuracy, e3_centroid_quality,
                      e4_aggregation, e5_accuracy, majority_labels)
from .oneshot import run_algorithm2
from .partition import Scenario, chain_scenario, hub_scenario, load_scenario

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# data sources
# ---------------------------------------------------------------------------

def generate_synthetic(k: int, d: int, n_points: int, separation: float, seed: int = 0,
                       max_tries: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """``k`` unit-variance Gaussian blobs with means pairwise at least ``separation`` apart.

    Means are random unit directions rescaled so the closest pair sits exactly
    ``separation`` apart. ``n_points`` is per blob. Points are grouped by blob.
    """
    if separation <= 0:
        raise ConfigurationError("separation must be positive")
    if k < 1 or d < 1 or n_points < 1:
        raise ConfigurationError("k, d and n_points must be positive")
    rng = np.random.default_rng(seed)
    means = np.zeros((1, d))
    if k > 1:
        for _ in range(max_tries):
            U = rng.standard_normal((k, d))
            U /= np.linalg.norm(U, axis=1, keepdims=True)
            gaps = np.sqrt(((U[:, None, :] - U[None, :, :]) ** 2).sum(-1))
            closest = gaps[np.triu_indices(k, 1)].min()
            if closest > 1e-6:
                means = U * (separation / closest)
                break
        else:
            raise ConfigurationError(f"could not place {k} separated means in {d} dimensions")
    X = np.repeat(means, n_points, axis=0) + rng.standard_normal((k * n_points, d))
    return X, np.repeat(np.arange(k), n_points)


def load_csv(path, label_column: Optional[Union[str, int]] = None, delimiter: str = ","
             ) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Numeric table, optional header; rows and columns are 1-based in errors.

    ``label_column`` is a header name or 0-based column index; that column is
    removed from the points and returned as integer labels.
    """
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh, delimiter=delimiter) if r and any(c.strip() for c in r)]
    if not rows:
        raise ParseError(f"{path}: empty file")
    header = None
    first = rows[0]
    try:
        [float(c) for c in first]
    except ValueError:
        header, rows = [c.strip() for c in first], rows[1:]
    offset = 2 if header else 1
    width = len(header) if header else len(rows[0]) if rows else 0
    values = []
    for r, row in enumerate(rows):
        if len(row) != width:
            raise ParseError(f"row {r + offset}: expected {width} columns, found {len(row)}",
                             row=r + offset)
        parsed = []
        for c, cell in enumerate(row):
            try:
                parsed.append(float(cell))
            except ValueError:
                raise ParseError(f"row {r + offset}, column {c + 1}: non-numeric cell {cell!r}",
                                 row=r + offset, column=c + 1) from None
        values.append(parsed)
    X = np.asarray(values, dtype=float).reshape(len(values), width)
    if label_column is None:
        return X, None
    if isinstance(label_column, str) and not label_column.lstrip("-").isdigit():
        if header is None or label_column not in header:
            raise ConfigurationError(f"label column {label_column!r} not found in header")
        col = header.index(label_column)
    else:
        col = int(label_column)
    if not -width <= col < width:
        raise ConfigurationError(f"label column {col} out of range")
    raw = X[:, col]
    _, labels = np.unique(raw, return_inverse=True)
    return np.delete(X, col, axis=1), labels.astype(int)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    source: dict
    scenario: dict = field(default_factory=lambda: {"recipe": "chain"})
    algorithm: str = "1"
    method: str = "auto"
    K: Optional[int] = None
    alpha: float = 0.8
    F: int = 3
    local_iters: int = 10
    w: float = 2.0
    M: int = 50
    k_estimate: Optional[list] = None
    local_k_max: Optional[int] = None
    repetitions: int = 5
    seed: int = 0
    n_participants: int = 10
    baseline_restarts: int = 10
    triplets: int = 0
    output_dir: str = "results"
    name: str = "experiment"

    def __post_init__(self):
        if self.algorithm not in ("1", "2", "both"):
            raise ConfigurationError(f"algorithm must be 1, 2 or both; got {self.algorithm!r}")
        if self.scenario.get("recipe", "chain") not in ("chain", "hub"):
            raise ConfigurationError("scenario recipe must be chain or hub")
        if self.repetitions < 1:
            raise ConfigurationError("repetitions must be >= 1")
        if self.source.get("type") not in ("synthetic", "csv", "scenario"):
            raise ConfigurationError("source type must be synthetic, csv or scenario")

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as err:
            raise ParseError(f"{path}: {err.msg}", row=err.lineno, column=err.colno) from None
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(raw) - known
        if extra:
            raise ConfigurationError(f"unknown config fields: {sorted(extra)}")
        if "algorithm" in raw:
            raw = {**raw, "algorithm": str(raw["algorithm"])}
        if "source" not in raw:
            raise ConfigurationError("config needs a source")
        return cls(**raw)


def load_source(src: dict):
    """Returns ``(points, labels, scenario_or_None)``."""
    kind = src["type"]
    if kind == "synthetic":
        X, y = generate_synthetic(int(src["k"]), int(src["d"]), int(src["n_points"]),
                                  float(src["separation"]), int(src.get("seed", 0)))
        return X, y, None
    if kind == "csv":
        X, y = load_csv(src["path"], src.get("label_column"), src.get("delimiter", ","))
        if y is None:
            raise ConfigurationError("experiments need a label column for the metrics")
        return X, y, None
    s = load_scenario(src["path"])
    return s.central, s.labels, s


def build_scenario(cfg: ExperimentConfig, X, y, seed: int) -> Scenario:
    sc = cfg.scenario
    if sc.get("recipe", "chain") == "chain":
        return chain_scenario(X, y, cfg.n_participants, sc.get("overlap_fraction", 0.3), seed,
                              sc.get("shuffle_features", True))
    return hub_scenario(X, y, cfg.n_participants, sc.get("shared_fraction", 0.1),
                        sc.get("biased", False), seed, sc.get("shuffle_features", True))


# ---------------------------------------------------------------------------
# running
# ---------------------------------------------------------------------------

def evaluate_algorithm1(s: Scenario, cfg: ExperimentConfig, seed: int) -> dict:
    K = cfg.K or s.n_clusters
    fc = FederatedConfig(K=K, alpha=cfg.alpha, F=cfg.F, local_iters=cfg.local_iters)
    clusterer = KMeansClusterer(k_min=2, k_max=cfg.local_k_max or K)
    res = run_algorithm1(s, fc, cfg.method, clusterer, seed)
    truth = majority_labels(s, res.local_solutions)
    opt = optimal_centroids(s.central, s.labels, s.assignment, s.masks, s.n_clusters)
    q = e3_centroid_quality(res.final, opt)
    return {"method": res.method,
            "E1": e1_aggregation(res.init_membership, truth),
            "E2": e2_accuracy(res.final, s.central, s.labels),
            "E3_cos": q.cosine, "E3_rel": q.relative}


def evaluate_algorithm2(s: Scenario, cfg: ExperimentConfig, seed: int) -> dict:
    K = cfg.K or s.n_clusters
    res = run_algorithm2(s, w=cfg.w, m=cfg.M, k=None, rng_seed=seed,
                         k_range=tuple(cfg.k_estimate) if cfg.k_estimate else None,
                         local_k_max=cfg.local_k_max or K)
    truth = majority_labels(s, res.local_solutions)
    return {"K_hat": res.k,
            "E4": e4_aggregation(res.forest.grouping(K), truth),
            "E5": e5_accuracy(res.grouping, s, res.local_solutions)}


def run_repetition(cfg: ExperimentConfig, X, y, fixed: Optional[Scenario], rep: int) -> list:
    seed = derive_seed(cfg.seed, rep)
    s = fixed if fixed is not None else build_scenario(cfg, X, y, seed)
    base = {"rep": rep, "seed": seed}
    out = []
    algos = ["1", "2"] if cfg.algorithm == "both" else [cfg.algorithm]
    for a in algos:
        rec = {**base, "algorithm": a}
        try:
            rec.update(evaluate_algorithm1(s, cfg, seed) if a == "1" else evaluate_algorithm2(s, cfg, seed))
            rec["status"] = "ok"
        except MaskClustError as err:
            log.error("repetition %d, algorithm %s failed: %s", rep, a, err)
            rec["status"] = f"error:{type(err).__name__}"
        out.append(rec)
    if cfg.triplets:
        rec = {**base, "algorithm": "triplets"}
        try:
            rep_ = check_triplets(s, cfg.triplets, seed)
            rec.update(triplet_rate=rep_.rate, applicable=rep_.applicable, status="ok")
        except MaskClustError as err:
            rec["status"] = f"error:{type(err).__name__}"
        out.append(rec)
    return out


METRIC_ORDER = ["E1", "E2", "E3_cos", "E3_rel", "E4", "E5", "K_hat", "triplet_rate", "baseline"]


def summarize(records: list) -> dict:
    """``{algorithm: {metric: (mean, population std, count)}}`` over successful records."""
    out: dict = {}
    for rec in records:
        if rec.get("status") != "ok":
            continue
        bucket = out.setdefault(rec["algorithm"], {})
        for m in METRIC_ORDER:
            if m in rec:
                bucket.setdefault(m, []).append(float(rec[m]))
    return {a: {m: (float(np.mean(v)), float(np.std(v)), len(v)) for m, v in ms.items()}
            for a, ms in out.items()}


def _fmt(x: float) -> str:
    return f"{x:.6g}"


def render_summary(cfg: ExperimentConfig, summary: dict, n_failed: int) -> str:
    recipe = cfg.scenario.get("recipe", "chain")
    lines = [f"# {cfg.name} | scenario={recipe} | repetitions={cfg.repetitions} | failed={n_failed}"]
    for algo in sorted(summary):
        stats = summary[algo]
        cells = [f"{m} {_fmt(stats[m][0])} ± {_fmt(stats[m][1])}" for m in METRIC_ORDER if m in stats]
        lines.append(f"algorithm {algo}: " + ", ".join(cells))
    return "\n".join(lines) + "\n"


def write_records(records: list, path: Path) -> None:
    cols = ["rep", "seed", "algorithm", "status", "method"] + METRIC_ORDER + ["applicable"]
    present = [c for c in cols if any(c in r for r in records)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(present)
        for r in records:
            w.writerow([repr(r[c]) if isinstance(r.get(c), float) else r.get(c, "") for c in present])


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Runs every repetition and writes ``records.csv``, ``summary.txt``, ``metrics.txt``.

    Report files contain no timestamps, so equal configs give equal bytes.
    """
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    X, y, fixed = load_source(cfg.source)
    records = []
    for rep in range(cfg.repetitions):
        try:
            records.extend(run_repetition(cfg, X, y, fixed, rep))
        except MaskClustError as err:
            log.error("repetition %d failed while building the scenario: %s", rep, err)
            records.append({"rep": rep, "seed": derive_seed(cfg.seed, rep), "algorithm": "-",
                            "status": f"error:{type(err).__name__}"})
    K = cfg.K or int(y.max()) + 1
    records.append({"rep": -1, "seed": cfg.seed, "algorithm": "baseline", "status": "ok",
                    "baseline": centralized_baseline(X, y, K, cfg.baseline_restarts, cfg.seed)})
    summary = summarize(records)
    failed = sum(1 for r in records if r.get("status") != "ok")
    write_records(records, out / "records.csv")
    (out / "summary.txt").write_text(render_summary(cfg, summary, failed))
    kv = [f"{a}.{m}.{stat}={_fmt(v)}" for a in sorted(summary) for m in METRIC_ORDER
          if m in summary[a] for stat, v in zip(("mean", "std"), summary[a][m][:2])]
    (out / "metrics.txt").write_text("\n".join(kv) + "\n")
    return {"records": records, "summary": summary, "failed": failed, "output_dir": out}

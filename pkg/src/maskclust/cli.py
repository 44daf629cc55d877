"""Command-line entry point (``maskclust`` / ``python -m maskclust``)."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .assumptions import check_triplets
from .core import optimal_centroids
from .errors import ConfigurationError, MaskClustError
from .harness import ExperimentConfig, generate_synthetic, load_csv, run_experiment
from .metrics import centralized_baseline, e2_accuracy, e3_centroid_quality
from .partition import chain_scenario, hub_scenario, load_scenario, save_scenario, verify_assumption1, verify_assumption2


def _write_dataset(path, X, y) -> None:
    header = ",".join(f"f{m}" for m in range(X.shape[1])) + ",label"
    np.savetxt(path, np.column_stack([X, y]), fmt=["%.17g"] * X.shape[1] + ["%d"],
               delimiter=",", header=header, comments="")


def cmd_generate(args) -> int:
    X, y = generate_synthetic(args.k, args.d, args.n_points, args.separation, args.seed)
    _write_dataset(args.out, X, y)
    print(f"wrote {X.shape[0]} points in {X.shape[1]} dimensions to {args.out}")
    return 0


def cmd_partition(args) -> int:
    X, y = load_csv(args.data, args.label_column, args.delimiter)
    if y is None:
        raise ConfigurationError("partitioning needs ground-truth labels (--label-column)")
    if args.recipe == "chain":
        s = chain_scenario(X, y, args.participants, args.overlap, args.seed, not args.no_shuffle)
        ok = verify_assumption1(s, distribution=False).satisfied
    else:
        s = hub_scenario(X, y, args.participants, args.shared, args.biased, args.seed, not args.no_shuffle)
        ok = verify_assumption2(s).satisfied
    save_scenario(s, args.out)
    print(f"scenario with {s.n_participants} participants written to {args.out}; "
          f"structural assumption {'holds' if ok else 'FAILS'}")
    return 0


def cmd_run(args) -> int:
    cfg = ExperimentConfig.from_file(args.config)
    if args.output_dir:
        cfg.output_dir = args.output_dir
    result = run_experiment(cfg)
    sys.stdout.write(Path(result["output_dir"], "summary.txt").read_text())
    return 0 if result["failed"] == 0 else 1


def cmd_check(args) -> int:
    s = load_scenario(args.scenario)
    rep = check_triplets(s, args.samples, args.seed)
    print("sampled,applicable,satisfied,rate")
    print(f"{rep.sampled},{rep.applicable},{rep.satisfied},{rep.rate:.3f}")
    return 0


def cmd_eval(args) -> int:
    s = load_scenario(args.scenario)
    tab = np.loadtxt(args.centroids, delimiter=",", skiprows=1, ndmin=2)
    if args.history:
        last = tab[:, 0].max()
        tab = tab[tab[:, 0] == last][:, 2:]
    opt = optimal_centroids(s.central, s.labels, s.assignment, s.masks, s.n_clusters)
    q = e3_centroid_quality(tab, opt)
    print(f"E2={e2_accuracy(tab, s.central, s.labels):.6g}")
    print(f"E3_cos={q.cosine:.6g}")
    print(f"E3_rel={q.relative:.6g}")
    if args.baseline:
        print(f"baseline={centralized_baseline(s.central, s.labels, tab.shape[0], 10, args.seed):.6g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="maskclust", description="Clustering across participants with feature masks.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic Gaussian-blob dataset as CSV")
    g.add_argument("--k", type=int, default=16, help="number of blobs")
    g.add_argument("--d", type=int, default=128, help="dimension")
    g.add_argument("--n-points", type=int, default=100, help="points per blob")
    g.add_argument("--separation", type=float, default=40.0, help="minimum distance between means")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="output CSV (columns f0..,label)")
    g.set_defaults(func=cmd_generate)

    q = sub.add_parser("partition", help="split a labelled CSV across masked participants")
    q.add_argument("--data", required=True, help="input CSV")
    q.add_argument("--label-column", default="label", help="header name or 0-based index")
    q.add_argument("--delimiter", default=",")
    q.add_argument("--recipe", choices=["chain", "hub"], default="chain")
    q.add_argument("--participants", type=int, default=10)
    q.add_argument("--overlap", type=float, default=0.3, help="chain overlap fraction")
    q.add_argument("--shared", type=float, default=0.1, help="hub shared-feature fraction")
    q.add_argument("--biased", action="store_true", help="hub: split clusters by first coordinate")
    q.add_argument("--no-shuffle", action="store_true", help="keep features in natural order")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", required=True, help="scenario directory")
    q.set_defaults(func=cmd_partition)

    r = sub.add_parser("run", help="run an experiment from a JSON config")
    r.add_argument("config", help="JSON file with ExperimentConfig fields")
    r.add_argument("--output-dir", help="override the config's output_dir")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("check-assumptions", help="sampled triplet test on a scenario directory")
    c.add_argument("--scenario", required=True)
    c.add_argument("--samples", type=int, default=1000)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_check)

    e = sub.add_parser("eval", help="score saved global centroids against a scenario")
    e.add_argument("--scenario", required=True)
    e.add_argument("--centroids", required=True, help="CSV with a header row, one centroid per row")
    e.add_argument("--history", action="store_true", help="centroids file is a round history; use the last round")
    e.add_argument("--baseline", action="store_true", help="also report centralized K-means accuracy")
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except MaskClustError as err:
        print(f"error ({type(err).__name__}): {err}", file=sys.stderr)
        return err.exit_code


if __name__ == "__main__":
    sys.exit(main())

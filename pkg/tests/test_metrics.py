import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from maskclust.core import FeatureMask, MaskedDataset
from maskclust.errors import ContractViolation
from maskclust.harness import generate_synthetic
from maskclust.localclust import LocalSolution, fit_gaussian, sample_proxy
from maskclust.metrics import (MetricsReport, centralized_baseline, e1_aggregation, e2_accuracy,
                               e3_centroid_quality, e4_aggregation, e5_accuracy, empirical_tv, empirical_w1,
                               gaussian_tv, majority_labels, matched_fraction, transport_cost)
from maskclust.partition import Scenario

from oracles import w1_enumeration


def exhaustive_match(pred, truth):
    """Best diagonal over all injections of predicted labels into true labels."""
    P, T = sorted(set(pred)), sorted(set(truth))
    best = 0
    small, large, flip = (P, T, False) if len(P) <= len(T) else (T, P, True)
    for img in itertools.permutations(large, len(small)):
        m = dict(zip(small, img))
        hits = sum((m.get(p) == t) if not flip else (m.get(t) == p) for p, t in zip(pred, truth))
        best = max(best, hits)
    return best / len(pred)


def test_matched_fraction_examples():
    assert matched_fraction([1, 1, 0, 0], [0, 0, 1, 1]) == 1.0
    assert matched_fraction([0, 0, 0, 0], [0, 0, 1, 1]) == 0.5
    with pytest.raises(ContractViolation):
        matched_fraction([0, 1], [0])


def test_e1_perfect_and_one_misplaced():
    truth = {(0, 0): 0, (0, 1): 1, (1, 0): 0, (1, 1): 1}
    assert e1_aggregation([[(0, 0), (1, 0)], [(0, 1), (1, 1)]], truth) == 1.0
    assert e1_aggregation([[(0, 0), (1, 0), (1, 1)], [(0, 1)]], truth) == 0.75
    assert e4_aggregation is e1_aggregation


@pytest.mark.parametrize("seed", range(5))
def test_e1_random_grouping_matches_exhaustive_oracle(seed):
    rng = np.random.default_rng(seed)
    k = 6
    truth = {(i, a): a for i in range(10) for a in range(k)}
    groups = [[] for _ in range(k)]
    for key in truth:
        groups[int(rng.integers(k))].append(key)
    groups = [g for g in groups if g]
    keys = sorted(truth)
    gid = {key: g for g, grp in enumerate(groups) for key in grp}
    want = exhaustive_match([gid[x] for x in keys], [truth[x] for x in keys])
    assert e1_aggregation(groups, truth) == pytest.approx(want, abs=1e-15)


def test_e1_random_grouping_sixteen_clusters_matches_hungarian_recomputation():
    from scipy.optimize import linear_sum_assignment
    rng = np.random.default_rng(1)
    truth = {(i, a): a for i in range(10) for a in range(16)}
    labels = {key: int(rng.integers(16)) for key in truth}
    groups = [[k for k in truth if labels[k] == g] for g in range(16)]
    groups = [g for g in groups if g]
    table = np.zeros((len(groups), 16))
    for g, grp in enumerate(groups):
        for key in grp:
            table[g, truth[key]] += 1
    r, c = linear_sum_assignment(-table)
    assert e1_aggregation(groups, truth) == pytest.approx(table[r, c].sum() / 160)


@given(st.lists(st.integers(0, 3), min_size=4, max_size=30), st.integers(0, 10**6))
def test_matching_scores_invariant_under_relabeling(labels, seed):
    rng = np.random.default_rng(seed)
    truth = rng.integers(0, 4, size=len(labels))
    p1, p2 = rng.permutation(10), rng.permutation(10)
    base = matched_fraction(labels, truth)
    assert matched_fraction(p1[labels], p2[truth]) == base
    assert base == pytest.approx(exhaustive_match(list(labels), list(truth)))


def test_e1_rejects_mismatched_keys():
    with pytest.raises(ContractViolation):
        e1_aggregation([[(0, 0)]], {(0, 0): 0, (0, 1): 1})


def test_e2_examples():
    X, y = generate_synthetic(3, 4, 30, 20.0, 0)
    true = np.stack([X[y == a].mean(0) for a in range(3)])
    assert e2_accuracy(true, X, y) == 100.0
    assert e2_accuracy(true[:1], X, y) == pytest.approx(100 * np.bincount(y).max() / len(y))


def test_e2_warns_on_absent_coordinates(caplog):
    X, y = generate_synthetic(2, 3, 20, 20.0, 0)
    V = np.stack([X[y == a].mean(0) for a in range(2)])
    V[0, 2] = np.nan
    with caplog.at_level("WARNING"):
        assert e2_accuracy(V, X, y) == 100.0
    assert "absent" in caplog.text


def test_e3_examples():
    rng = np.random.default_rng(0)
    O = rng.normal(size=(4, 5))
    q = e3_centroid_quality(O[::-1], list(O))
    assert q.cosine == pytest.approx(1.0) and q.relative == pytest.approx(0.0)
    q = e3_centroid_quality(2 * O, list(O))
    assert q.cosine == pytest.approx(1.0) and q.relative == pytest.approx(1.0)
    assert not q.zero_norm


def test_e3_zero_norm_reference_reports_absolute_distance():
    q = e3_centroid_quality(np.array([[3.0, 4.0], [10.0, 10.0]]), [np.zeros(2), np.array([10.0, 10.0])])
    assert q.zero_norm
    assert q.relative == pytest.approx(2.5)


def test_e3_high_dimensional_close_estimate():
    rng = np.random.default_rng(2)
    O = rng.normal(size=(6, 50)) * 10
    q = e3_centroid_quality(O + rng.normal(scale=0.05, size=O.shape), list(O))
    assert q.cosine >= 0.999


def tiny_scenario():
    X = np.array([[0, 0], [0, 1], [10, 10], [10, 11], [0, 0.5], [10, 10.5]], float)
    y = np.array([0, 0, 1, 1, 0, 1])
    s = Scenario(X, y, [FeatureMask.full(2)] * 2, np.array([0, 0, 0, 1, 1, 1]))
    sols = [LocalSolution(np.array([0, 0, 1]), [], 2), LocalSolution(np.array([1, 0, 1]), [], 2)]
    return s, sols


def test_e5_examples():
    s, sols = tiny_scenario()
    truth = majority_labels(s, sols)
    assert truth == {(0, 0): 0, (0, 1): 1, (1, 0): 0, (1, 1): 1}
    good = [[(0, 0), (1, 0)], [(0, 1), (1, 1)]]
    assert e5_accuracy(good, s, sols) == 100.0
    # participant 1's cluster 0 is a single point out of six
    bad = [[(0, 0)], [(0, 1), (1, 1), (1, 0)]]
    assert e5_accuracy(bad, s, sols) == pytest.approx(100 * 5 / 6)


def test_centralized_baseline_examples():
    X, y = generate_synthetic(2, 2, 50, 20.0, 0)
    assert centralized_baseline(X, y, 2) == 100.0
    X, y = generate_synthetic(3, 2, 50, 20.0, 0)
    assert centralized_baseline(X, y, 1) == pytest.approx(100 / 3)


def test_metrics_report_record():
    r = MetricsReport(e1=1.0, e2=100.0)
    assert r.to_record() == {"e1": 1.0, "e2": 100.0}


def test_w1_examples():
    a = np.random.default_rng(0).normal(size=(10, 3))
    assert empirical_w1(a, a) == 0.0
    assert empirical_w1([[0, 0]], [[3, 4]]) == pytest.approx(5.0)
    with pytest.raises(ContractViolation):
        empirical_w1(np.zeros((501, 1)), np.zeros((3, 1)))
    with pytest.raises(ContractViolation):
        empirical_w1(np.zeros((2, 1)), np.zeros((2, 2)))


@pytest.mark.parametrize("n", range(1, 8))
def test_w1_matches_enumeration(n):
    rng = np.random.default_rng(n)
    for _ in range(3 if n == 7 else 10):
        A, B = rng.normal(size=(n, 2)), rng.normal(size=(n, 2))
        assert empirical_w1(A, B) == pytest.approx(w1_enumeration(A.tolist(), B.tolist()), rel=1e-12)


def test_w1_thirty_points_assignment_agrees_with_transport_program():
    rng = np.random.default_rng(0)
    A, B = rng.normal(size=(30, 3)), rng.normal(size=(30, 3)) + 0.5
    C = np.linalg.norm(A[:, None] - B[None], axis=-1)
    assert empirical_w1(A, B) == pytest.approx(transport_cost(C, np.full(30, 1 / 30), np.full(30, 1 / 30)), rel=1e-9)


def test_w1_unequal_sizes_match_replication():
    rng = np.random.default_rng(3)
    A, B = rng.normal(size=(2, 2)), rng.normal(size=(3, 2))
    # replicate to six points each and enumerate
    want = w1_enumeration(np.repeat(A, 3, 0).tolist(), np.repeat(B, 2, 0).tolist())
    assert empirical_w1(A, B) == pytest.approx(want, rel=1e-9)


@given(st.integers(0, 10**6))
def test_w1_metric_axioms(seed):
    rng = np.random.default_rng(seed)
    A, B, C = (rng.normal(size=(6, 2)) * rng.uniform(0.5, 3) for _ in range(3))
    ab, ba = empirical_w1(A, B), empirical_w1(B, A)
    assert ab == pytest.approx(ba, abs=1e-12)
    assert empirical_w1(A, C) <= ab + empirical_w1(B, C) + 1e-12


def test_w1_proxy_fidelity_trend():
    medians = []
    for N in (30, 100, 300):
        vals = []
        for s in range(20):
            X = np.random.default_rng(s).normal(size=(N, 2))
            model = fit_gaussian(MaskedDataset(X, FeatureMask.full(2)))
            vals.append(empirical_w1(X, sample_proxy(model, N, rng_seed=1000 + s).points))
        medians.append(np.median(vals))
    assert medians[0] >= medians[1] >= medians[2]


def test_tv_examples():
    a = np.random.default_rng(0).normal(size=200)
    assert empirical_tv(a, a, 20) == 0.0
    assert empirical_tv(np.zeros(10), np.ones(10), [np.array([-0.5, 0.5, 1.5])]) == 1.0


def test_tv_gaussians_near_analytic_value():
    rng = np.random.default_rng(0)
    a, b = rng.normal(0, 1, 10_000), rng.normal(3, 1, 10_000)
    exact = gaussian_tv(0, 3)
    assert exact == pytest.approx(2 * 0.5 * (1 + math.erf(1.5 / math.sqrt(2))) - 1)
    assert exact == pytest.approx(0.8664, abs=1e-4)
    assert abs(empirical_tv(a, b, [np.linspace(-5, 8, 131)]) - exact) < 0.05

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from maskclust.core import FeatureMask, MaskedDataset
from maskclust.errors import ContractViolation
from maskclust.harness import generate_synthetic
from maskclust.localclust import (KMeansClusterer, derive_seed, fit_gaussian, kmeans, kmeanspp_init,
                                  sample_proxy, select_k_silhouette, silhouette_score)
from maskclust.metrics import empirical_w1

from oracles import silhouette_loops


def two_blobs(n=40, d=3, gap=10.0, seed=0):
    rng = np.random.default_rng(seed)
    X = np.vstack([rng.normal(size=(n, d)), rng.normal(size=(n, d)) + gap])
    return X, np.repeat([0, 1], n)


def test_kmeans_recovers_blob_means():
    X, y = two_blobs()
    sol = kmeans(X, 2, rng_seed=1)
    C = sol.dense_centroids()
    for a in range(2):
        true = X[y == a].mean(axis=0)
        assert np.min(np.linalg.norm(C - true, axis=1)) < 0.5


def test_kmeans_single_cluster_is_the_mean():
    X, _ = two_blobs()
    np.testing.assert_allclose(kmeans(X, 1).dense_centroids()[0], X.mean(axis=0))


def test_kmeans_fixed_point_init():
    X, _ = two_blobs()
    sol = kmeans(X, 2, rng_seed=3)
    again = kmeans(X, 2, init=sol.dense_centroids())
    assert again.n_iter == 1
    assert np.array_equal(again.labels, sol.labels)


def test_kmeans_contract():
    X, _ = two_blobs()
    with pytest.raises(ContractViolation):
        kmeans(X, 0)
    with pytest.raises(ContractViolation):
        kmeans(X[:3], 4)
    with pytest.raises(ContractViolation):
        kmeans(X, 2, init="bogus")


def test_kmeans_on_masked_dataset_lifts_centroids():
    X, _ = two_blobs(d=4)
    mask = FeatureMask(frozenset({1, 3}), 4)
    ds = MaskedDataset(X, mask, owner=7)
    sol = kmeans(ds, 2, rng_seed=0)
    for a, c in enumerate(sol.centroids):
        assert c.owner == 7 and c.local_index == a and c.mask == mask
        assert np.isnan(c.vector[[0, 2]]).all()
        np.testing.assert_allclose(c.vector[[1, 3]], X[sol.labels == a][:, [1, 3]].mean(axis=0), atol=1e-9)
        assert c.count == np.sum(sol.labels == a)


@given(st.integers(0, 10**6), st.integers(1, 6))
def test_kmeans_invariants(seed, k):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(30, 3)) * rng.uniform(0.1, 10)
    sol = kmeans(X, k, init="random", rng_seed=seed, max_iter=50)
    hist = sol.inertia_history
    assert all(b <= a * (1 + 1e-12) + 1e-12 for a, b in zip(hist, hist[1:]))
    counts = np.bincount(sol.labels, minlength=k)
    assert (counts > 0).all()
    for a, c in enumerate(sol.centroids):
        assert c.count == counts[a]
        np.testing.assert_allclose(c.vector, X[sol.labels == a].mean(axis=0), atol=1e-9)


def test_kmeanspp_examples():
    X, _ = two_blobs(n=5)
    seeds = kmeanspp_init(X, len(X), rng_seed=0)
    assert sorted(map(tuple, seeds)) == sorted(map(tuple, X))
    one = kmeanspp_init(X, 1, rng_seed=4)
    assert any(np.array_equal(one[0], x) for x in X)
    with pytest.raises(ContractViolation):
        kmeanspp_init(np.zeros((5, 2)), 2)


def test_kmeanspp_separates_far_blobs():
    X, y = two_blobs(gap=50.0)
    hits = 0
    for seed in range(100):
        S = kmeanspp_init(X, 2, rng_seed=seed)
        owner = [y[np.argmin(np.linalg.norm(X - s, axis=1))] for s in S]
        hits += len(set(owner)) == 2
    assert hits >= 99


def test_kmeanspp_is_deterministic():
    X, _ = two_blobs()
    assert np.array_equal(kmeanspp_init(X, 3, 9), kmeanspp_init(X, 3, 9))


def test_silhouette_matches_loop_oracle():
    rng = np.random.default_rng(2)
    for _ in range(5):
        X = rng.normal(size=(25, 2))
        lab = rng.integers(0, 3, 25)
        lab[0] = 0
        lab[1] = 1
        assert silhouette_score(X, lab) == pytest.approx(silhouette_loops(X, lab.tolist()), abs=1e-12)


def test_select_k_two_blobs():
    X, y = two_blobs(gap=15.0)
    assert select_k_silhouette(X, 2, 5) == 2
    sol = kmeans(X, 2, rng_seed=0)
    assert silhouette_score(X, sol.labels) == pytest.approx(silhouette_loops(X, sol.labels.tolist()))


def test_select_k_single_candidate():
    square = np.array([[0.0, 0], [0, 1], [1, 0], [1, 1]])
    assert select_k_silhouette(square, 2, 2) == 2


def test_select_k_participant_holding_four_blobs():
    X, y = generate_synthetic(16, 128, 30, 60.0, 0)
    keep = np.isin(y, [2, 5, 9, 14])
    mask = FeatureMask(frozenset(range(18)), 128)
    ds = MaskedDataset(X[keep], mask)
    k = select_k_silhouette(ds, 2, 8, rng_seed=1)
    assert k == 4
    scores = {}
    for kk in (3, 4, 5):
        sol = kmeans(ds, kk, rng_seed=derive_seed(1, kk), n_init=5)
        scores[kk] = silhouette_loops(ds.observed(), sol.labels.tolist())
    assert max(scores, key=scores.get) == 4


def test_clusterer_fixed_k_and_selection():
    X, _ = two_blobs(gap=20.0)
    ds = MaskedDataset(X, FeatureMask.full(3))
    assert KMeansClusterer(k=3)(ds, 0).k == 3
    assert KMeansClusterer(k_max=6)(ds, 0).k == 2


def test_fit_gaussian_examples():
    m = fit_gaussian(np.array([[0.0, 0.0], [2.0, 2.0]]))
    np.testing.assert_allclose(m.mean, [1.0, 1.0])
    single = fit_gaussian(np.array([[3.0, 4.0]]), ridge=0.25)
    np.testing.assert_allclose(single.covariance, 0.25 * np.eye(2))


def test_fit_gaussian_large_sample():
    rng = np.random.default_rng(0)
    mu = np.array([1.0, -2.0, 0.5])
    A = rng.normal(size=(3, 3))
    cov = A @ A.T + np.eye(3)
    X = rng.multivariate_normal(mu, cov, size=10_000)
    m = fit_gaussian(X)
    sd = np.sqrt(np.diag(cov))
    assert np.all(np.abs(m.mean - mu) < 5 * sd / np.sqrt(len(X)))
    assert np.all(np.abs(m.covariance - cov) <= 0.1 * np.abs(cov).max())


@given(st.integers(0, 10**6), st.floats(1e-9, 1.0))
def test_fit_gaussian_covariance_is_symmetric_and_floored(seed, ridge):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(int(rng.integers(1, 6)), 4))
    m = fit_gaussian(X, ridge=ridge)
    assert np.array_equal(m.covariance, m.covariance.T)
    assert np.linalg.eigvalsh(m.covariance).min() >= ridge - 1e-12


def test_fit_gaussian_on_masked_points_keeps_mask():
    ds = MaskedDataset(np.random.default_rng(0).normal(size=(10, 5)), FeatureMask(frozenset({0, 4}), 5), owner=3)
    m = fit_gaussian(ds, local_index=2)
    assert m.covariance.shape == (2, 2) and m.owner == 3 and m.local_index == 2
    assert np.isnan(m.mean[1:4]).all()


def test_sample_proxy_examples():
    m = fit_gaussian(np.array([[1.0, 2.0]]), ridge=1e-12)
    p = sample_proxy(m, 1, rng_seed=0)
    np.testing.assert_allclose(p.points[0], [1.0, 2.0], atol=1e-5)
    wide = fit_gaussian(np.random.default_rng(1).normal(size=(20, 2)))
    v = np.array([0.3, -0.7])
    boxed = sample_proxy(wide, 40, bounding_box=(v, v), rng_seed=2)
    assert np.all(boxed.points == v)


def test_proxy_reproducible_and_clamped():
    X = np.random.default_rng(5).normal(size=(50, 3))
    lo, hi = X.min(axis=0), X.max(axis=0)
    m1, m2 = fit_gaussian(X), fit_gaussian(X)
    a = sample_proxy(m1, 60, (lo, hi), rng_seed=8)
    b = sample_proxy(m2, 60, (lo, hi), rng_seed=8)
    assert a.points.tobytes() == b.points.tobytes()
    assert np.all(a.points >= lo) and np.all(a.points <= hi)


def test_proxy_is_closer_to_its_source_than_to_another_cluster():
    rng = np.random.default_rng(7)
    src = rng.normal(size=(300, 2))
    other = rng.normal(size=(300, 2)) + np.array([3.0, 0.0])
    proxy = sample_proxy(fit_gaussian(src), 300, rng_seed=1)
    assert empirical_w1(proxy.points, src) < empirical_w1(proxy.points, other)


def test_derive_seed_streams_differ():
    assert derive_seed(0, 1, 0) != derive_seed(0, 2, 0)
    assert derive_seed(0, 1, 0) == derive_seed(0, 1, 0)

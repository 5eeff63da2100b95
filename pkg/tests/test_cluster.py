import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import comb

from zsunits import cluster
from zsunits.dsp import FeatureSequence


def adjusted_rand_index(labels_a, labels_b):
    a_ids, a = np.unique(labels_a, return_inverse=True)
    b_ids, b = np.unique(labels_b, return_inverse=True)
    table = np.zeros((a_ids.size, b_ids.size))
    np.add.at(table, (a, b), 1)
    sum_cells = comb(table, 2).sum()
    sum_a = comb(table.sum(axis=1), 2).sum()
    sum_b = comb(table.sum(axis=0), 2).sum()
    expected = sum_a * sum_b / comb(len(labels_a), 2)
    return (sum_cells - expected) / (0.5 * (sum_a + sum_b) - expected)


def blobs(seed=0, n=200):
    rng = np.random.default_rng(seed)
    centers = np.array([[0.0, 0.0, 0.0], [10.0, 0.0, 5.0], [0.0, 12.0, -6.0]])
    labels = np.repeat(np.arange(3), n)
    return centers[labels] + rng.normal(scale=0.5, size=(3 * n, 3)), labels


def brute_nearest(x, centers):
    out = []
    for row in x:
        best, best_d = 0, None
        for j, c in enumerate(centers):
            d = sum((a - b) ** 2 for a, b in zip(row, c))
            if best_d is None or d < best_d:
                best, best_d = j, d
        out.append(best)
    return np.array(out)


# -- time reduction ---------------------------------------------------------

def test_time_reduce_identity_and_pairs():
    x = np.array([0.0, 2.0, 4.0, 6.0])
    np.testing.assert_array_equal(cluster.time_reduce(x, 1)[:, 0], x)
    np.testing.assert_array_equal(cluster.time_reduce(x, 2)[:, 0], [1.0, 5.0])


def test_time_reduce_partial_tail_and_rate():
    seq = FeatureSequence(np.arange(98.0)[:, None].repeat(2, axis=1), "custom", 100.0)
    out = cluster.time_reduce(seq, 4)
    assert out.frames.shape == (25, 2)
    assert out.frame_rate == 25.0
    assert out.frames[-1, 0] == pytest.approx((96 + 97) / 2)


def test_time_reduce_rejects_bad_factor():
    with pytest.raises(cluster.ClusterInputError):
        cluster.time_reduce(np.ones((4, 2)), 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 8), st.integers(1, 12), st.integers(0, 1000))
def test_time_reduce_preserves_mean(r, groups, seed):
    x = np.random.default_rng(seed).normal(size=(r * groups, 3))
    out = cluster.time_reduce(x, r)
    np.testing.assert_allclose(out.mean(axis=0), x.mean(axis=0), atol=1e-9)


# -- k-means ----------------------------------------------------------------

def test_kmeans_recovers_blobs():
    x, labels = blobs()
    model = cluster.kmeans_fit(x, 3, batch_size=64, seed=1)
    idx, _ = cluster.kmeans_encode(model, x)
    assert adjusted_rand_index(labels, idx) == 1.0


def test_kmeans_zero_inertia_on_distinct_points():
    pts = np.random.default_rng(2).normal(size=(5, 4))
    x = np.repeat(pts, 7, axis=0)
    model = cluster.kmeans_fit(x, 5, batch_size=8, seed=0)
    assert cluster.kmeans_inertia(model, x) == pytest.approx(0.0, abs=1e-18)


def test_kmeans_deterministic():
    x, _ = blobs(3)
    a = cluster.kmeans_fit(x, 4, seed=9).centroids
    b = cluster.kmeans_fit(x, 4, seed=9).centroids
    assert a.tobytes() == b.tobytes()


def test_kmeans_distinct_centroids():
    x, _ = blobs(4)
    c = cluster.kmeans_fit(x, 8, seed=0).centroids
    d = ((c[:, None] - c[None]) ** 2).sum(-1) + np.eye(8)
    assert d.min() > 1e-12


def test_kmeans_too_few_frames():
    with pytest.raises(cluster.ClusterInputError):
        cluster.kmeans_fit(np.ones((3, 2)), 4)


def test_kmeans_lloyd_inertia_non_increasing():
    x = np.random.default_rng(5).normal(size=(400, 3))
    model = cluster.kmeans_fit(x, 6, iters=1, lloyd_iters=15, seed=0)
    assert np.all(np.diff(model.inertia_history) <= 1e-9)


def test_kmeans_encode_exact_and_tie():
    model = cluster.KMeansModel(
        np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 0.0]]), np.ones(3), cluster.Standardizer.identity(2)
    )
    idx, vecs = cluster.kmeans_encode(model, np.array([[1.0, 1.0], [1.0, 0.0]]))
    assert idx.tolist() == [1, 0]  # [1, 0] is equidistant from codes 0, 1, 2
    np.testing.assert_array_equal(vecs[0], [1.0, 1.0])


def test_kmeans_encode_matches_brute_force():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(300, 5))
    model = cluster.kmeans_fit(x, 7, seed=0)
    frames = rng.normal(size=(10, 5))
    idx, _ = cluster.kmeans_encode(model, frames)
    expected = brute_nearest(model.standardizer.transform(frames), model.centroids)
    np.testing.assert_array_equal(idx, expected)


def test_kmeans_encode_dim_mismatch():
    model = cluster.kmeans_fit(np.random.default_rng(0).normal(size=(20, 3)), 2)
    with pytest.raises(cluster.ClusterInputError):
        cluster.kmeans_encode(model, np.ones((4, 5)))


def test_kmeans_bundle_round_trip():
    x, _ = blobs()
    model = cluster.kmeans_fit(x, 3, seed=0)
    back = cluster.KMeansModel.from_bundle(model.to_bundle())
    np.testing.assert_array_equal(back.centroids, model.centroids)


# -- GMM --------------------------------------------------------------------

def test_gmm_loglik_non_decreasing():
    x, _ = blobs(7)
    model = cluster.gmm_fit(x, 5, iters=25, seed=0)
    assert len(model.loglik_history) == 26
    assert np.all(np.diff(model.loglik_history) >= -1e-8)


def test_gmm_recovers_two_components():
    rng = np.random.default_rng(8)
    means = np.array([[-3.0, 1.0], [4.0, -2.0]])
    sds = np.array([[1.0, 0.5], [0.7, 1.5]])
    n = 1500
    z = rng.integers(0, 2, size=n)
    x = means[z] + sds[z] * rng.normal(size=(n, 2))
    model = cluster.gmm_fit(x, 2, iters=50, seed=0)
    fitted = model.standardizer.inverse(model.means)
    order = np.argsort(fitted[:, 0])
    for comp in range(2):
        se = sds[comp] / np.sqrt((z == comp).sum())
        assert np.all(np.abs(fitted[order[comp]] - means[comp]) < 3 * se)


def test_gmm_single_component_closed_form():
    x = np.random.default_rng(9).normal(loc=[1.0, -2.0], scale=[2.0, 0.3], size=(500, 2))
    model = cluster.gmm_fit(x, 1, iters=3, seed=0, standardize=False)
    np.testing.assert_allclose(model.means[0], x.mean(axis=0), atol=1e-12)
    np.testing.assert_allclose(model.variances[0], x.var(axis=0), atol=1e-12)
    np.testing.assert_allclose(model.weights, [1.0])


def test_gmm_posterior_rows_sum_to_one():
    x, _ = blobs(10)
    model = cluster.gmm_fit(x, 4, iters=10)
    post = cluster.gmm_posterior(model, x)
    np.testing.assert_allclose(post.sum(axis=1), 1.0, atol=1e-9)
    assert np.all((post >= 0) & (post <= 1))


def test_gmm_posterior_dominant_component():
    model = cluster.GmmModel(
        np.array([0.5, 0.5]),
        np.array([[0.0, 0.0], [1.0, 1.0]]),
        np.full((2, 2), 1e-4),
        cluster.Standardizer.identity(2),
    )
    post = cluster.gmm_posterior(model, np.array([[0.0, 0.0]]))
    np.testing.assert_allclose(post[0], [1.0, 0.0], atol=1e-12)


def test_gmm_posterior_matches_linear_density_oracle():
    rng = np.random.default_rng(11)
    model = cluster.GmmModel(
        np.array([0.2, 0.5, 0.3]),
        rng.normal(size=(3, 4)),
        rng.uniform(0.5, 2.0, size=(3, 4)),
        cluster.Standardizer(rng.normal(size=4), rng.uniform(0.5, 2.0, size=4)),
    )
    frames = rng.normal(size=(5, 4))
    z = model.standardizer.transform(frames)
    expected = np.zeros((5, 3))
    for t in range(5):
        dens = []
        for k in range(3):
            p = model.weights[k]
            for d in range(4):
                var = model.variances[k, d]
                p *= np.exp(-((z[t, d] - model.means[k, d]) ** 2) / (2 * var)) / np.sqrt(2 * np.pi * var)
            dens.append(p)
        expected[t] = np.array(dens) / sum(dens)
    np.testing.assert_allclose(cluster.gmm_posterior(model, frames), expected, atol=1e-9)


def test_gmm_variance_floor():
    x = np.random.default_rng(12).normal(size=(60, 2))
    x[:30, 1] = 1.0
    model = cluster.gmm_fit(x, 3, iters=5)
    floor = 1e-6 * model.standardizer.transform(x).var(axis=0)
    assert np.all(model.variances >= floor - 1e-18)


def test_gmm_bundle_round_trip():
    x, _ = blobs(13)
    model = cluster.gmm_fit(x, 3, iters=5)
    back = cluster.GmmModel.from_bundle(model.to_bundle())
    np.testing.assert_array_equal(cluster.gmm_posterior(back, x), cluster.gmm_posterior(model, x))

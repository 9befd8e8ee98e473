import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dceac import clustering
from dceac.autodiff import Tape, ops

from _oracles import kl_direct, numeric_grad, rel_error, soft_assign_direct, target_direct


# -- soft assignment ---------------------------------------------------------------

def test_soft_assign_two_centres():
    q = clustering.soft_assign(np.array([[0.0, 0.0]]), np.array([[0.0, 0.0], [1.0, 0.0]])).data
    np.testing.assert_allclose(q, [[2 / 3, 1 / 3]], rtol=1e-15)


def test_soft_assign_equidistant_is_uniform():
    mu = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
    q = clustering.soft_assign(np.zeros((1, 2)), mu).data
    np.testing.assert_allclose(q, np.full((1, 4), 0.25), rtol=1e-15)


def test_soft_assign_on_centre_is_legal():
    mu = np.random.default_rng(0).normal(size=(3, 5))
    q = clustering.soft_assign(mu.copy(), mu).data
    assert np.all(np.isfinite(q))
    np.testing.assert_array_equal(q.argmax(axis=1), [0, 1, 2])


def test_soft_assign_shape_mismatch():
    with pytest.raises(ValueError):
        clustering.soft_assign(np.zeros((2, 3)), np.zeros((2, 4)))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(2, 5), st.integers(1, 8), st.integers(0, 2**31))
def test_soft_assign_rows_are_distributions(n, k, c, seed):
    r = np.random.default_rng(seed)
    q = clustering.soft_assign(r.normal(size=(n, c)) * 3, r.normal(size=(k, c))).data
    np.testing.assert_allclose(q.sum(axis=1), 1.0, atol=1e-12)
    assert np.all((q > 0) & (q <= 1))


def test_soft_assign_matches_direct():
    r = np.random.default_rng(1)
    z, mu = r.normal(size=(7, 4)), r.normal(size=(3, 4))
    np.testing.assert_allclose(clustering.soft_assign(z, mu).data, soft_assign_direct(z, mu), rtol=1e-12)


# -- target distribution ----------------------------------------------------------

def test_target_distribution_example():
    p = clustering.target_distribution(np.array([[0.9, 0.1], [0.5, 0.5]]))
    np.testing.assert_allclose(p, [[0.972, 0.028], [0.300, 0.700]], atol=5e-4)
    np.testing.assert_allclose(p, target_direct([[0.9, 0.1], [0.5, 0.5]]), rtol=1e-14)


def test_target_single_sample_fixed_point():
    q = np.array([[0.2, 0.5, 0.3]])
    np.testing.assert_allclose(clustering.target_distribution(q), q, rtol=1e-15)


def test_target_one_hot_rows_stay_one_hot():
    q = np.eye(3)[[0, 1, 2, 1]]
    np.testing.assert_array_equal(clustering.target_distribution(q), q)


def test_target_is_constant():
    tape = Tape()
    q = tape.watch("q", np.array([[0.6, 0.4], [0.3, 0.7]]))
    p = clustering.target_distribution(q)
    assert isinstance(p, np.ndarray)


def _equalized(rows):
    """Stack every cyclic shift of every row so that column sums are equal."""
    k = rows.shape[1]
    return np.concatenate([np.roll(rows, s, axis=1) for s in range(k)], axis=0)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(2, 5)),
              elements=st.floats(0.01, 1.0)))
def test_target_sharpens(raw):
    q = _equalized(raw / raw.sum(axis=1, keepdims=True))
    p = clustering.target_distribution(q)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(p.max(axis=1) >= q.max(axis=1) - 1e-12)
    unique = np.sort(q, axis=1)
    decided = unique[:, -1] - unique[:, -2] > 1e-9
    assert np.all(p.argmax(axis=1)[decided] == q.argmax(axis=1)[decided])


# -- KL loss --------------------------------------------------------------------------

def test_kl_examples():
    assert clustering.kl_loss(np.array([[1.0, 0.0]]), np.array([[0.5, 0.5]])).item() == pytest.approx(math.log(2),
                                                                                                      rel=1e-15)
    q = np.array([[0.3, 0.7], [0.5, 0.5]])
    assert clustering.kl_loss(q, q).item() == 0.0


def test_kl_rejects_zero_q_under_positive_p():
    with pytest.raises(ValueError):
        clustering.kl_loss(np.array([[0.5, 0.5]]), np.array([[1.0, 0.0]]))
    with pytest.raises(ValueError):
        clustering.kl_loss(np.zeros((2, 2)), np.zeros((2, 3)))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 5), st.integers(2, 5), st.integers(0, 2**31))
def test_kl_nonnegative(n, k, seed):
    r = np.random.default_rng(seed)
    p, q = r.dirichlet(np.ones(k), size=n), r.dirichlet(np.ones(k), size=n)
    value = clustering.kl_loss(p, q).item()
    assert value >= -1e-12
    assert value == pytest.approx(kl_direct(p, q), rel=1e-10, abs=1e-14)


def test_kl_gradient_goes_to_q_only():
    tape = Tape()
    p = tape.watch("p", np.array([[0.6, 0.4]]))
    q = tape.watch("q", np.array([[0.5, 0.5]]))
    grads = tape.backward(clustering.kl_loss(p, q))
    np.testing.assert_array_equal(grads["p"], 0.0)
    np.testing.assert_allclose(grads["q"], [[-1.2, -0.8]])


def test_clustering_gradients():
    r = np.random.default_rng(2)
    z0, mu0 = r.normal(size=(5, 4)), r.normal(size=(3, 4))
    p = clustering.target_distribution(clustering.soft_assign(z0, mu0).data)

    def build(a):
        return clustering.kl_loss(p, clustering.soft_assign(a["z"], a["mu"]))

    arrays_ = {"z": z0, "mu": mu0}
    tape = Tape()
    grads = tape.backward(build({k: tape.watch(k, v) for k, v in arrays_.items()}))
    for name, arr in arrays_.items():
        num = numeric_grad(lambda: float(build(arrays_).data), arr)
        assert rel_error(grads[name], num) < 1e-4


def test_centres_get_gradient_when_q_differs_from_p():
    r = np.random.default_rng(3)
    z, mu = r.normal(size=(6, 3)), r.normal(size=(2, 3))
    q = clustering.soft_assign(z, mu).data
    p = clustering.target_distribution(q)
    assert not np.allclose(p, q)
    tape = Tape()
    loss = clustering.kl_loss(p, clustering.soft_assign(z, tape.watch("mu", mu)))
    assert np.abs(tape.backward(loss)["mu"]).sum() > 0


# -- k-means -------------------------------------------------------------------------

def test_kmeans_exact_cover():
    x = np.array([[0.0, 0.0], [3.0, 1.0], [-2.0, 4.0]])
    st_ = clustering.kmeans_init(x, 3, seed=0)
    assert sorted(map(tuple, st_.centers)) == sorted(map(tuple, x))
    assert st_.inertia == 0.0


def test_kmeans_identical_points():
    st_ = clustering.kmeans_init(np.full((10, 3), 1.5), 3, seed=0)
    np.testing.assert_array_equal(st_.centers, 1.5)
    assert st_.inertia == 0.0


def test_kmeans_blobs():
    r = np.random.default_rng(4)
    means = np.array([[0.0, 0.0], [5.0, 0.0], [0.0, 5.0]])
    x = np.concatenate([m + 0.1 * r.normal(size=(30, 2)) for m in means])
    truth = np.repeat(np.arange(3), 30)
    st_ = clustering.kmeans_init(x, 3, seed=0)
    blob_means = np.stack([x[truth == j].mean(axis=0) for j in range(3)])
    for m in blob_means:
        assert np.linalg.norm(st_.centers - m, axis=1).min() < 0.2
    # same partition as assigning every point to its generating blob
    assigned = np.linalg.norm(x[:, None] - st_.centers[None], axis=2).argmin(axis=1)
    relabel = {a: t for a, t in zip(assigned, truth)}
    assert all(relabel[a] == t for a, t in zip(assigned, truth))


def test_kmeans_deterministic():
    x = np.random.default_rng(5).normal(size=(50, 4))
    a, b = clustering.kmeans_init(x, 4, seed=9), clustering.kmeans_init(x, 4, seed=9)
    assert a.centers.tobytes() == b.centers.tobytes()


def test_kmeans_rejects_bad_input():
    with pytest.raises(ValueError):
        clustering.kmeans_init(np.zeros((2, 3)), 3)
    with pytest.raises(ValueError):
        clustering.kmeans_init(np.zeros((5, 3)), 1)


def test_kmeans_reseeds_empty_cluster():
    # the duplicate seed leaves one centre empty after the first assignment
    x = np.array([[0.0], [0.1], [10.0], [10.1]])
    centers, inertia = clustering._lloyd(x, np.array([[0.0], [0.0]]), 10, 1e-4)
    assert inertia == pytest.approx(0.01)
    assert sorted(centers.ravel().round(6)) == [0.05, 10.05]


# -- labels ---------------------------------------------------------------------------

def test_predict_labels():
    q = np.array([[0.1, 0.6, 0.3], [0.4, 0.4, 0.2], [0.2, 0.3, 0.5]])
    np.testing.assert_array_equal(clustering.predict_labels(q), [1, 0, 2])


def test_nearest_centre_equals_soft_argmax():
    r = np.random.default_rng(6)
    z, mu = r.normal(size=(40, 3)), r.normal(size=(4, 3))
    d = ((z[:, None] - mu[None]) ** 2).sum(-1)
    np.testing.assert_array_equal(clustering.predict_labels(clustering.soft_assign(z, mu)), d.argmin(axis=1))


def test_ops_compose_with_soft_assign():
    r = np.random.default_rng(7)
    x = r.normal(size=(2, 4, 3, 3))
    q = clustering.soft_assign(ops.global_avg_pool(x), r.normal(size=(2, 4)))
    assert q.shape == (2, 2)

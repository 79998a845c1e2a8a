import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fscpg.fsc import (
    FscPolicy,
    FscTopology,
    TopologyError,
    dense_topology,
    grad_log_softmax,
    softmax,
    sparse_topology,
    symmetric_policy,
)
from tests.oracles import finite_difference

finite_vectors = st.lists(st.floats(-50, 50), min_size=1, max_size=8).map(np.array)


@given(finite_vectors)
def test_softmax_is_a_distribution(v):
    p = softmax(v)
    assert np.all(p > 0) or np.any(v - v.max() < -700)
    assert abs(p.sum() - 1.0) < 1e-12


def test_softmax_stable_for_huge_scores():
    p = softmax([1000.0, 0.0])
    assert p.tolist() == [1.0, 0.0]


@given(finite_vectors, st.data())
def test_grad_log_softmax_sums_to_zero(v, data):
    k = data.draw(st.integers(0, v.size - 1))
    assert abs(grad_log_softmax(v, k).sum()) < 1e-12


def test_grad_log_softmax_matches_finite_difference():
    rng = np.random.default_rng(0)
    v = rng.normal(size=5)
    for k in range(5):
        fd = finite_difference(lambda s: np.log(softmax(s)[k]), v, 1e-6)
        np.testing.assert_allclose(grad_log_softmax(v, k), fd, atol=1e-8)


def test_grad_log_softmax_components_bounded():
    g = grad_log_softmax([3.0, -2.0, 0.5], 1)
    assert np.all(np.abs(g) <= 1.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 30), st.integers(2, 5), st.integers(0, 10**6))
def test_sparse_topology_strongly_connected(n, k, seed):
    k = min(k, n)
    topo = sparse_topology(n, k, seed)
    assert topo.successors.shape == (n, k)
    assert topo.is_strongly_connected()
    for row in topo.successors:
        assert len(set(row.tolist())) == k


def test_sparse_topology_deterministic():
    a = sparse_topology(20, 3, 7).successors
    b = sparse_topology(20, 3, 7).successors
    c = sparse_topology(20, 3, 8).successors
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_out_degree_one_on_many_states_fails():
    with pytest.raises(TopologyError):
        sparse_topology(12, 1, 0, max_attempts=3)


def test_topology_validation():
    with pytest.raises(ValueError):
        FscTopology(np.array([[0, 0]]))
    with pytest.raises(ValueError):
        FscTopology(np.array([[0, 2], [1, 0]]))
    assert dense_topology(4).is_dense


def test_param_layout_theta_then_phi():
    pol = FscPolicy(sparse_topology(4, 2, 0), n_observations=3, n_actions=2)
    assert pol.n_params == 3 * 4 * 2 + 3 * 4 * 2
    vec = np.arange(pol.n_params, dtype=float)
    pol.set_params(vec)
    assert pol.theta[0, 0, 1] == 1.0
    assert pol.phi[0, 0, 0] == pol.n_theta
    np.testing.assert_array_equal(pol.params(), vec)


def test_set_params_rejects_bad_input():
    pol = FscPolicy(dense_topology(2), 2, 2)
    with pytest.raises(ValueError):
        pol.set_params(np.zeros(3))
    with pytest.raises(ValueError):
        pol.set_params(np.full(pol.n_params, np.nan))


def test_distributions():
    pol = FscPolicy(sparse_topology(5, 2, 1), 2, 3).randomize(1.0, 2)
    d = pol.omega(3, 1)
    np.testing.assert_array_equal(d.support, pol.successors[3])
    assert abs(d.probs.sum() - 1) < 1e-12
    w = pol.omega_dense()
    np.testing.assert_allclose(w.sum(axis=2), 1.0)
    assert np.count_nonzero(w[0, 0]) == 2
    np.testing.assert_allclose(pol.mu(2, 0).probs, softmax(pol.theta[0, 2]))


def test_dimension_check():
    pol = FscPolicy(dense_topology(2), 3, 2)
    with pytest.raises(ValueError, match="expects"):
        pol.check_dimensions(4, 2)


def test_checkpoint_round_trip(tmp_path):
    pol = FscPolicy(sparse_topology(6, 2, 3), 4, 3, seed=3).randomize(2.0, 9)
    path = tmp_path / "p.ckpt"
    pol.save(path)
    back = FscPolicy.load(path)
    np.testing.assert_array_equal(back.params(), pol.params())
    np.testing.assert_array_equal(back.successors, pol.successors)
    assert back.seed == 3


def test_checkpoint_rejects_other_files():
    with pytest.raises(ValueError):
        FscPolicy.loads("something else 1\n")


def test_symmetric_policy_condition():
    pol = symmetric_policy(3, 2, 4, seed=5)
    w, m = pol.omega_dense(), pol.mu_table()
    for g in range(4):
        np.testing.assert_array_equal(w[:, g, :], w[:, 0, :])
        np.testing.assert_array_equal(m[:, g, :], m[:, 0, :])

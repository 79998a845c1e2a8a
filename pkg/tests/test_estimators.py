import io
import sys

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from fscpg import envs
from fscpg import estimators as E
from fscpg.fsc import FscPolicy, dense_topology, sparse_topology
from fscpg.gamp import discounted_grad_oracle, exact_eta
from fscpg.model import Pomdp, make_fully_observable
from tests import oracles


def policy_for(model, G, seed, k=None, scale=1.0):
    topo = dense_topology(G) if k is None else sparse_topology(G, k, seed)
    return FscPolicy(topo, model.n_observations, model.n_actions).randomize(scale, seed)


def two_state():
    q0 = sp.csr_matrix([[0.3, 0.7], [0.6, 0.4]])
    q1 = sp.csr_matrix([[0.9, 0.1], [0.15, 0.85]])
    return Pomdp((q0, q1), sp.csr_matrix([[0.8, 0.2], [0.25, 0.75]]), [1.0, -0.5], start=[0.5, 0.5])


class ScaledWorld:
    """Wraps a step source and multiplies its rewards."""

    def __init__(self, inner, c):
        self.inner, self.c = inner, c
        self.n_observations, self.n_actions = inner.n_observations, inner.n_actions

    def reset(self, seed, worker=0):
        return self.inner.reset(seed, worker)

    def step(self, a):
        y, r = self.inner.step(a)
        return y, self.c * r


def test_simulate_step_frequencies():
    model = envs.oracle_pomdp(7)
    rng = np.random.default_rng(0)
    n = 100_000
    q = model.transitions[1].toarray()[0]
    counts = np.bincount([E.simulate_step(model, 0, 1, rng)[0] for _ in range(n)], minlength=model.n_states)
    se = np.sqrt(q * (1 - q) / n)
    assert np.all(np.abs(counts / n - q) < 3 * se + 1e-12)


def test_simulate_step_deterministic_model():
    model = envs.maze_from_ascii(envs.parse_map("#####\n#^.G#\n#####\n"), action_fail=0.0, observation_error=0.0)
    outs = {E.simulate_step(model, 0, 0, np.random.default_rng(s)) for s in range(20)}
    assert len(outs) == 1


def test_simulate_step_one_state():
    model = envs.constant_world(2.5, n_actions=3)
    for u in range(3):
        assert E.simulate_step(model, 0, u, np.random.default_rng(u)) == (0, 0, 2.5)


def test_simulate_step_uses_two_draws():
    model = envs.oracle_pomdp(1)
    a, b = np.random.default_rng(5), np.random.default_rng(5)
    E.simulate_step(model, 0, 0, a)
    b.random(2)
    assert a.random() == b.random()


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_single_istate_matches_memoryless_oracle(seed):
    model = two_state()
    pol = policy_for(model, 1, seed)
    want, eta, _ = oracles.memoryless_gpomdp(model, pol.theta[:, 0, :], 0.9, 10_000, seed)
    got = E.istate_gpomdp(model, pol, 0.9, 10_000, seed)
    np.testing.assert_allclose(got.grad[: pol.n_theta], want.ravel(), rtol=1e-12, atol=1e-15)
    assert not got.grad[pol.n_theta:].any()
    assert got.eta == pytest.approx(eta, abs=1e-12)


def test_exp_equals_istate_with_one_istate():
    model = envs.oracle_pomdp(3)
    pol = policy_for(model, 1, 3)
    a = E.istate_gpomdp(model, pol, 0.95, 20_000, 11)
    b = E.exp_gpomdp(model, pol, 0.95, 20_000, 11)
    np.testing.assert_array_equal(a.grad, b.grad)
    assert a.eta == b.eta


def test_exp_equals_istate_with_saturated_omega():
    # a deterministic I-state walk: exp tracks it exactly, so theta parts agree
    model = envs.oracle_pomdp(4)
    pol = policy_for(model, 3, 4, k=2)
    pol.phi[...] = 0.0
    pol.phi[:, :, 0] = 800.0
    a = E.istate_gpomdp(model, pol, 0.9, 5_000, 2)
    b = E.exp_gpomdp(model, pol, 0.9, 5_000, 2, alpha0=0)
    np.testing.assert_allclose(a.grad[: pol.n_theta], b.grad[: pol.n_theta], atol=1e-12)
    assert a.eta == b.eta


def test_kernel_and_python_paths_identical():
    model = envs.oracle_pomdp(2)
    pol = policy_for(model, 3, 2, k=2)
    world = E.ModelWorld(model)

    class Opaque:
        n_observations, n_actions = world.n_observations, world.n_actions
        reset, step = world.reset, world.step

    for fn in (E.istate_gpomdp, E.exp_gpomdp):
        a = fn(model, pol, 0.9, 3_000, 8)
        b = fn(Opaque(), pol, 0.9, 3_000, 8)
        np.testing.assert_array_equal(a.grad, b.grad)
        assert a.eta == b.eta


@pytest.mark.parametrize("fn", [E.istate_gpomdp, E.exp_gpomdp])
def test_deterministic_given_seed(fn):
    model = envs.oracle_pomdp(5)
    pol = policy_for(model, 2, 5)
    a, b, c = (fn(model, pol, 0.9, 5_000, s) for s in (3, 3, 4))
    np.testing.assert_array_equal(a.grad, b.grad)
    assert not np.array_equal(a.grad, c.grad)


@settings(max_examples=10, deadline=None)
@given(st.floats(-5, 5).filter(lambda c: abs(c) > 1e-3), st.integers(0, 100))
def test_reward_scaling_is_linear(c, seed):
    model = envs.oracle_pomdp(seed)
    pol = policy_for(model, 2, seed)
    base = E.istate_gpomdp(E.ModelWorld(model), pol, 0.9, 2_000, seed)
    scaled = E.istate_gpomdp(ScaledWorld(E.ModelWorld(model), c), pol, 0.9, 2_000, seed)
    np.testing.assert_allclose(scaled.grad, c * base.grad, rtol=1e-10, atol=1e-13)


def test_constant_reward_gradient_has_zero_mean():
    model = envs.constant_world(1.0, n_actions=3, n_observations=1)
    pol = policy_for(model, 3, 0, k=2)
    ests = np.stack([E.istate_gpomdp(model, pol, 0.9, 10_000, s).grad for s in range(50)])
    mean, se = ests.mean(axis=0), ests.std(axis=0, ddof=1) / np.sqrt(len(ests))
    assert np.linalg.norm(mean) < 3 * np.linalg.norm(se)


def test_alpha_stays_normalised():
    model = envs.oracle_pomdp(6)
    pol = policy_for(model, 4, 6, k=2, scale=3.0)
    est = E.exp_gpomdp(model, pol, 0.9, 20_000, 1, record_alpha=True)
    assert est.meta["alpha_sum_dev"] < 1e-9
    assert est.meta["dalpha_sum_dev"] < 1e-9


def test_workers_average_and_split():
    model = envs.oracle_pomdp(1)
    pol = policy_for(model, 2, 1)
    est = E.istate_gpomdp(model, pol, 0.9, 10_001, 4, workers=3)
    assert est.meta["workers"] == 3 and est.meta["world_steps"] == 10_001
    assert E._split_steps(10_001, 3) == [3334, 3334, 3333]
    # thread count never changes the answer
    again = E.istate_gpomdp(model, pol, 0.9, 10_001, 4, workers=3)
    np.testing.assert_array_equal(est.grad, again.grad)


def test_thread_cap_env(monkeypatch):
    monkeypatch.setenv("FSCPG_THREADS", "2")
    assert E.thread_cap() == 2


def test_invalid_arguments():
    model = envs.oracle_pomdp(0)
    pol = policy_for(model, 2, 0)
    with pytest.raises(ValueError):
        E.istate_gpomdp(model, pol, 1.0, 10, 0)
    with pytest.raises(ValueError):
        E.exp_gpomdp(model, pol, 0.5, 0, 0)
    with pytest.raises(ValueError):
        E.istate_gpomdp(model, FscPolicy(dense_topology(2), 5, 2), 0.5, 10, 0)


def test_discounted_limit_small_scale():
    # cheap version of the consistency check: 8 seeds at 2e5 steps, 4 standard errors
    model = envs.oracle_pomdp(0)
    pol = policy_for(model, 2, 0)
    target = discounted_grad_oracle(model, pol, 0.8).grad
    ests = np.stack([E.istate_gpomdp(model, pol, 0.8, 200_000, s).grad for s in range(8)])
    se = ests.std(axis=0, ddof=1) / np.sqrt(len(ests))
    assert np.all(np.abs(ests.mean(axis=0) - target) < 4 * se + 1e-6)


# ---------------------------------------------------------------------------
# belief baseline


def test_belief_filter_matches_enumeration():
    steps = [(0, 1), (1, 0), (0, 1)]
    got = E.belief_filter_trace(two_state(), 0, steps)
    want = oracles.enumerate_posterior(two_state(), 0, steps)
    for a, b in zip(got, want):
        np.testing.assert_allclose(a, b, atol=1e-12)


def test_belief_filter_two_actions():
    model = envs.oracle_pomdp(12)
    steps = [(1, 0), (0, 1), (1, 1)]
    for a, b in zip(E.belief_filter_trace(model, 1, steps), oracles.enumerate_posterior(model, 1, steps)):
        np.testing.assert_allclose(a, b, atol=1e-12)


def test_belief_impossible_observation():
    model = envs.chain_world([[1.0, 0.0], [0.0, 1.0]], [0.0, 1.0], observations=[[1.0, 0.0], [0.0, 1.0]])
    with pytest.raises(E.EstimatorError):
        E.belief_filter_trace(model, 0, [(0, 1)])


def test_belief_fully_observable_is_point_mass():
    model = make_fully_observable(envs.oracle_pomdp(2))
    rng = np.random.default_rng(0)
    steps = [(int(rng.integers(2)), int(rng.integers(model.n_states))) for _ in range(4)]
    for b, (_, y) in zip(E.belief_filter_trace(model, 0, steps)[1:], steps):
        assert b[y] == 1.0


def test_belief_zero_weights_gradient_mean():
    model = envs.oracle_pomdp(3)
    pol = E.BeliefPolicy.for_model(model)
    est = E.belief_policy_gpomdp(model, pol, 0.9, 5_000, 0)
    assert est.grad.shape == (model.n_actions * model.n_states,)
    ests = np.stack([E.belief_policy_gpomdp(envs.constant_world(1.0, 2), np.zeros((2, 1)), 0.9, 5_000, s).grad
                     for s in range(30)])
    se = ests.std(axis=0, ddof=1) / np.sqrt(30)
    assert np.linalg.norm(ests.mean(axis=0)) < 3 * np.linalg.norm(se)


def test_belief_policy_round_trip(tmp_path):
    pol = E.BeliefPolicy(3, 2, np.arange(6.0).reshape(2, 3))
    back = E.BeliefPolicy.loads(pol.dumps())
    np.testing.assert_array_equal(back.weights, pol.weights)
    pol.save(tmp_path / "b.ckpt")
    assert (tmp_path / "b.ckpt").read_text().startswith("fscpg-belief 1")


# ---------------------------------------------------------------------------
# Monte-Carlo evaluation


def test_eval_constant_reward():
    model = envs.constant_world(0.75, n_actions=2)
    pol = policy_for(model, 2, 0)
    assert E.eval_eta_mc(model, pol, 1000, 0) == 0.75


def test_eval_close_to_exact():
    model = envs.oracle_pomdp(0)
    pol = policy_for(model, 2, 0)
    eta, se = E.eval_eta_mc_batches(model, pol, 1_000_000, 0)
    assert abs(eta - exact_eta(model, pol)) < 3 * se


def test_eval_matches_estimator_eta():
    model = envs.oracle_pomdp(1)
    pol = policy_for(model, 2, 1)
    assert E.eval_eta_mc(model, pol, 5_000, 3) == pytest.approx(E.istate_gpomdp(model, pol, 0.5, 5_000, 3).eta)


# ---------------------------------------------------------------------------
# wire protocol


def test_message_framing():
    raw = E.encode_message("OBS 3 REW -0.5")
    assert raw == b"14 OBS 3 REW -0.5\n"
    assert E.read_message(io.BytesIO(raw)) == "OBS 3 REW -0.5"
    assert E.parse_obs_reply("OBS 3 REW -0.5") == (3, -0.5)
    with pytest.raises(E.ProtocolError):
        E.parse_obs_reply("OBS x")
    with pytest.raises(E.ProtocolError):
        E.read_message(io.BytesIO(b"99 short\n"))


def test_serve_world_in_memory():
    model = envs.oracle_pomdp(0)
    req = E.encode_message("RESET 5 0") + b"".join(E.encode_message(f"STEP {a}") for a in (0, 1, 1))
    out = io.BytesIO()
    E.serve_world(model, io.BytesIO(req), out)
    out.seek(0)
    replies = [E.parse_obs_reply(E.read_message(out)) for _ in range(4)]
    world = E.ModelWorld(model)
    assert replies[0][0] == world.reset(5)
    assert replies[1:] == [world.step(a) for a in (0, 1, 1)]


def test_subprocess_world_matches_in_process():
    model = envs.oracle_pomdp(2)
    pol = policy_for(model, 2, 2)
    cmd = [sys.executable, "-m", "fscpg", "serve-env", "--env", "oracle:2"]
    with E.SubprocessWorld(cmd, model.n_observations, model.n_actions) as world:
        remote = E.istate_gpomdp(world, pol, 0.9, 500, 6)
    local = E.istate_gpomdp(model, pol, 0.9, 500, 6)
    np.testing.assert_array_equal(remote.grad, local.grad)
    assert remote.eta == local.eta

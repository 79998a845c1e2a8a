"""Independent reference computations used by the tests.

Everything here is written directly from the definitions with dense numpy
arrays and plain loops, sharing no code with the package beyond model and
policy containers.
"""

from __future__ import annotations

import itertools

import numpy as np


def dense_model(model):
    """``(q[u, i, j], nu[i, y], r[i])`` as dense arrays."""
    q = np.stack([t.toarray() for t in model.transitions])
    return q, model.observations.toarray(), np.asarray(model.rewards)


def softmax(v):
    e = np.exp(v - np.max(v, axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def brute_joint(model, policy) -> np.ndarray:
    """Joint transition matrix by direct summation over every (i, g, j, h, y, u)."""
    q, nu, _ = dense_model(model)
    S, G = model.n_states, policy.n_istates
    w = np.zeros((model.n_observations, G, G))
    for y in range(model.n_observations):
        for g in range(G):
            probs = softmax(policy.phi[y, g])
            for s, h in enumerate(policy.successors[g]):
                w[y, g, h] += probs[s]
    mu = softmax(policy.theta)
    P = np.zeros((S * G, S * G))
    for i, g, j, h in itertools.product(range(S), range(G), range(S), range(G)):
        tot = 0.0
        for y in range(model.n_observations):
            for u in range(model.n_actions):
                tot += nu[i, y] * w[y, g, h] * mu[y, h, u] * q[u, i, j]
        P[i * G + g, j * G + h] = tot
    return P


def stationary_dense(P: np.ndarray) -> np.ndarray:
    """Left null vector of ``P - I`` via eigen-decomposition."""
    vals, vecs = np.linalg.eig(P.T)
    k = np.argmin(np.abs(vals - 1.0))
    v = np.real(vecs[:, k])
    return v / v.sum()


def eta_dense(model, policy) -> float:
    P = brute_joint(model, policy)
    r = np.repeat(np.asarray(model.rewards), policy.n_istates)
    return float(stationary_dense(P) @ r)


def finite_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    out = np.empty_like(x)
    for n in range(x.size):
        e = np.zeros_like(x)
        e[n] = h
        out[n] = (f(x + e) - f(x - e)) / (2 * h)
    return out


def fd_eta_gradient(model, policy, h: float = 1e-5) -> np.ndarray:
    return finite_difference(lambda p: eta_dense(model, policy.with_params(p)), policy.params(), h)


def discounted_gradient(model, policy, beta: float, h: float = 1e-6) -> np.ndarray:
    """``pi' (dP) J_beta`` with ``dP`` by finite differences of the brute-force joint matrix."""
    P = brute_joint(model, policy)
    r = np.repeat(np.asarray(model.rewards), policy.n_istates)
    pi = stationary_dense(P)
    J = np.linalg.solve(np.eye(P.shape[0]) - beta * P, r)
    x = policy.params()
    out = np.empty_like(x)
    for n in range(x.size):
        e = np.zeros_like(x)
        e[n] = h
        dP = (brute_joint(model, policy.with_params(x + e)) - brute_joint(model, policy.with_params(x - e))) / (2 * h)
        out[n] = pi @ dP @ J
    return out


def memoryless_gpomdp(model, theta: np.ndarray, beta: float, T: int, seed: int):
    """Plain GPOMDP for a reactive softmax policy ``theta[y, u]``.

    Written from the algorithm statement with its own sampling code.  It
    draws from the same Philox streams the package documents (agent: two
    uniforms per step, the second picks the action; world: two initial
    uniforms, then transition and observation per step).
    Returns ``(delta, eta, actions)``.
    """
    q, nu, r = dense_model(model)
    agent = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0, 0])))
    world = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0, 1])))

    def draw(p, x):
        c = 0.0
        for k, pk in enumerate(p):
            c += pk
            if x < c:
                return k
        return max(k for k, pk in enumerate(p) if pk > 0)

    x0 = world.random(2)
    i = draw(np.asarray(model.start), x0[0])
    y = draw(nu[i], x0[1])
    z = np.zeros_like(theta)
    delta = np.zeros_like(theta)
    total = 0.0
    actions = []
    ua = agent.random((T, 2))
    uw = world.random((T, 2))
    for t in range(T):
        p = softmax(theta[y])
        u = draw(p, ua[t, 1])
        actions.append(u)
        z *= beta
        z[y] -= p
        z[y, u] += 1.0
        j = draw(q[u, i], uw[t, 0])
        y = draw(nu[j], uw[t, 1])
        rew = r[j]
        delta += (rew * z - delta) / (t + 1)
        total += rew
        i = j
    return delta, total / T, actions


def enumerate_posterior(model, y0: int, steps) -> list[np.ndarray]:
    """``P(i_t | y_0..t, u_0..t-1)`` by summing over every state path."""
    q, nu, _ = dense_model(model)
    S = model.n_states
    out = []
    for t in range(len(steps) + 1):
        post = np.zeros(S)
        for path in itertools.product(range(S), repeat=t + 1):
            p = model.start[path[0]] * nu[path[0], y0]
            for n in range(t):
                u, y = steps[n]
                p *= q[u, path[n], path[n + 1]] * nu[path[n + 1], y]
            post[path[-1]] += p
        out.append(post / post.sum())
    return out


def mdp_average_optimum(model, tol: float = 1e-12, max_iters: int = 200_000) -> float:
    """Optimal average reward with the state observed (relative value iteration).

    Uses the aperiodicity transform ``(P + I) / 2``, which halves the gain.
    """
    T = [t.tocsr() for t in model.transitions]
    r = np.asarray(model.rewards)
    h = np.zeros(model.n_states)
    gain = 0.0
    for _ in range(max_iters):
        q = np.stack([t @ (r + h) for t in T])
        new = 0.5 * h + 0.5 * q.max(axis=0)
        gain = new[0]
        new = new - gain
        if np.max(np.abs(new - h)) < tol:
            h = new
            break
        h = new
    # new = 0.5 h + 0.5 (r' + T h) - gain  =>  gain = 0.5 * (true gain)
    return 2.0 * gain

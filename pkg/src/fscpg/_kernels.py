"""Compiled inner loops for the simulation estimators.

Agent-side steps (sampling, trace and belief updates) are separate jitted
functions so the pure-Python loop used for external environments runs the
exact same arithmetic as the compiled model loop.
"""

import numpy as np
from numba import njit

_JIT = dict(cache=True, nogil=True)


@njit(**_JIT)
def sample_dense(p, x):
    c = 0.0
    n = p.shape[0]
    for k in range(n):
        c += p[k]
        if x < c:
            return k
    # rounding left the cumulative sum just below 1: take the last positive entry
    for k in range(n - 1, -1, -1):
        if p[k] > 0.0:
            return k
    return n - 1


@njit(**_JIT)
def sample_csr(ptr, idx, dat, row, x):
    c = 0.0
    lo = ptr[row]
    hi = ptr[row + 1]
    for k in range(lo, hi):
        c += dat[k]
        if x < c:
            return idx[k]
    return idx[hi - 1]


@njit(**_JIT)
def softmax_into(scores, out):
    m = scores[0]
    for k in range(1, scores.shape[0]):
        if scores[k] > m:
            m = scores[k]
    s = 0.0
    for k in range(scores.shape[0]):
        e = np.exp(scores[k] - m)
        out[k] = e
        s += e
    for k in range(scores.shape[0]):
        out[k] /= s


@njit(**_JIT)
def world_step(tptr, tidx, tdat, optr, oidx, odat, n_states, i, u, x_trans, x_obs):
    j = sample_csr(tptr, tidx, tdat, u * n_states + i, x_trans)
    y = sample_csr(optr, oidx, odat, j, x_obs)
    return j, y


@njit(**_JIT)
def running_mean(delta, z, r, t):
    """``delta += (r z - delta) / t`` for step count ``t >= 1``."""
    inv = 1.0 / t
    for k in range(delta.shape[0]):
        delta[k] += (r * z[k] - delta[k]) * inv


@njit(**_JIT)
def istate_agent_step(theta, phi, succ, beta, y, g, x_istate, x_action, z_theta, z_phi, wbuf, mbuf):
    """Draw ``g' ~ omega(.|g,y)`` and ``u ~ mu(.|g',y)``; update both traces."""
    G = succ.shape[0]
    k = succ.shape[1]
    U = theta.shape[2]
    softmax_into(phi[y, g], wbuf)
    s = sample_dense(wbuf, x_istate)
    h = succ[g, s]
    softmax_into(theta[y, h], mbuf)
    u = sample_dense(mbuf, x_action)
    for n in range(z_phi.shape[0]):
        z_phi[n] *= beta
    for n in range(z_theta.shape[0]):
        z_theta[n] *= beta
    base = (y * G + g) * k
    for s2 in range(k):
        z_phi[base + s2] -= wbuf[s2]
    z_phi[base + s] += 1.0
    base = (y * G + h) * U
    for u2 in range(U):
        z_theta[base + u2] -= mbuf[u2]
    z_theta[base + u] += 1.0
    return h, u


@njit(**_JIT)
def fsc_act(theta, phi, succ, y, g, x_istate, x_action, wbuf, mbuf):
    softmax_into(phi[y, g], wbuf)
    h = succ[g, sample_dense(wbuf, x_istate)]
    softmax_into(theta[y, h], mbuf)
    return h, sample_dense(mbuf, x_action)


@njit(**_JIT)
def exp_agent_step(theta, phi, succ, beta, y, alpha, dalpha, x_action, z,
                   alpha_new, dalpha_new, wbuf, mbar, mtab):
    """Advance the I-state belief, draw ``u`` from the averaged policy, update the trace.

    ``z`` holds the theta block followed by the phi block.
    """
    G = succ.shape[0]
    k = succ.shape[1]
    U = theta.shape[2]
    n_phi = dalpha.shape[1]
    n_theta = z.shape[0] - n_phi
    alpha_new[:] = 0.0
    dalpha_new[:, :] = 0.0
    for g in range(G):
        softmax_into(phi[y, g], wbuf)
        ag = alpha[g]
        base = (y * G + g) * k
        for s in range(k):
            h = succ[g, s]
            w = wbuf[s]
            alpha_new[h] += ag * w
            for p in range(n_phi):
                dalpha_new[h, p] += dalpha[g, p] * w
            aw = ag * w
            for s2 in range(k):
                dalpha_new[h, base + s2] -= aw * wbuf[s2]
            dalpha_new[h, base + s] += aw
    # exact identities: sum alpha = 1, sum dalpha = 0; enforce against drift
    tot = 0.0
    for h in range(G):
        tot += alpha_new[h]
    for h in range(G):
        alpha[h] = alpha_new[h] / tot
    for p in range(n_phi):
        m = 0.0
        for h in range(G):
            m += dalpha_new[h, p]
        m /= G
        for h in range(G):
            dalpha[h, p] = dalpha_new[h, p] - m
    mbar[:] = 0.0
    for h in range(G):
        softmax_into(theta[y, h], mtab[h])
        for u2 in range(U):
            mbar[u2] += alpha[h] * mtab[h, u2]
    u = sample_dense(mbar, x_action)
    inv = 1.0 / mbar[u]
    for n in range(z.shape[0]):
        z[n] *= beta
    for h in range(G):
        c = alpha[h] * mtab[h, u] * inv
        base = (y * G + h) * U
        for u2 in range(U):
            z[base + u2] -= c * mtab[h, u2]
        z[base + u] += c
    for p in range(n_phi):
        acc = 0.0
        for h in range(G):
            acc += dalpha[h, p] * mtab[h, u]
        z[n_theta + p] += acc * inv
    return u


@njit(**_JIT)
def belief_agent_step(weights, b, beta, x_action, z, scores, probs, with_traces):
    U = weights.shape[0]
    S = weights.shape[1]
    for u2 in range(U):
        acc = 0.0
        for i in range(S):
            acc += weights[u2, i] * b[i]
        scores[u2] = acc
    softmax_into(scores, probs)
    u = sample_dense(probs, x_action)
    if with_traces:
        for n in range(z.shape[0]):
            z[n] *= beta
        for u2 in range(U):
            c = (1.0 if u2 == u else 0.0) - probs[u2]
            base = u2 * S
            for i in range(S):
                z[base + i] += c * b[i]
    return u


@njit(**_JIT)
def obs_prob(optr, oidx, odat, j, y):
    for k in range(optr[j], optr[j + 1]):
        if oidx[k] == y:
            return odat[k]
    return 0.0


@njit(**_JIT)
def belief_filter(b, bnext, u, y, tptr, tidx, tdat, optr, oidx, odat):
    """``b <- normalise(nu(y|.) * Q(u)' b)``; returns False if ``y`` is impossible."""
    S = b.shape[0]
    bnext[:] = 0.0
    for i in range(S):
        bi = b[i]
        if bi == 0.0:
            continue
        row = u * S + i
        for k in range(tptr[row], tptr[row + 1]):
            bnext[tidx[k]] += bi * tdat[k]
    tot = 0.0
    for j in range(S):
        if bnext[j] != 0.0:
            bnext[j] *= obs_prob(optr, oidx, odat, j, y)
            tot += bnext[j]
    if tot <= 0.0:
        return False
    for j in range(S):
        b[j] = bnext[j] / tot
    return True


# ---------------------------------------------------------------------------
# whole-block loops over a model world.  ``state`` = [i, g, y, t] (int64),
# ``acc`` = [reward sum] (float64); both are updated in place.


@njit(**_JIT)
def istate_block(ua, uw, tptr, tidx, tdat, optr, oidx, odat, rew, theta, phi, succ, beta,
                 state, acc, z_theta, z_phi, d_theta, d_phi):
    n_states = rew.shape[0]
    wbuf = np.empty(succ.shape[1])
    mbuf = np.empty(theta.shape[2])
    i, g, y, t = state[0], state[1], state[2], state[3]
    total = acc[0]
    for n in range(ua.shape[0]):
        h, u = istate_agent_step(theta, phi, succ, beta, y, g, ua[n, 0], ua[n, 1], z_theta, z_phi, wbuf, mbuf)
        j, y = world_step(tptr, tidx, tdat, optr, oidx, odat, n_states, i, u, uw[n, 0], uw[n, 1])
        r = rew[j]
        t += 1
        running_mean(d_theta, z_theta, r, t)
        running_mean(d_phi, z_phi, r, t)
        total += r
        i = j
        g = h
    state[0], state[1], state[2], state[3] = i, g, y, t
    acc[0] = total


@njit(**_JIT)
def exp_block(ua, uw, tptr, tidx, tdat, optr, oidx, odat, rew, theta, phi, succ, beta,
              state, acc, alpha, dalpha, z, delta):
    n_states = rew.shape[0]
    G = succ.shape[0]
    alpha_new = np.empty(G)
    dalpha_new = np.empty_like(dalpha)
    wbuf = np.empty(succ.shape[1])
    mbar = np.empty(theta.shape[2])
    mtab = np.empty((G, theta.shape[2]))
    i, y, t = state[0], state[2], state[3]
    total = acc[0]
    for n in range(ua.shape[0]):
        u = exp_agent_step(theta, phi, succ, beta, y, alpha, dalpha, ua[n, 1], z,
                           alpha_new, dalpha_new, wbuf, mbar, mtab)
        j, y = world_step(tptr, tidx, tdat, optr, oidx, odat, n_states, i, u, uw[n, 0], uw[n, 1])
        r = rew[j]
        t += 1
        running_mean(delta, z, r, t)
        total += r
        i = j
    state[0], state[2], state[3] = i, y, t
    acc[0] = total


@njit(**_JIT)
def belief_block(ua, uw, tptr, tidx, tdat, optr, oidx, odat, rew, weights, beta,
                 state, acc, b, z, delta, with_traces):
    """Returns False if the filter met an impossible observation."""
    n_states = rew.shape[0]
    U = weights.shape[0]
    scores = np.empty(U)
    probs = np.empty(U)
    bnext = np.empty(n_states)
    i, y, t = state[0], state[2], state[3]
    total = acc[0]
    ok = True
    for n in range(ua.shape[0]):
        u = belief_agent_step(weights, b, beta, ua[n, 1], z, scores, probs, with_traces)
        j, y = world_step(tptr, tidx, tdat, optr, oidx, odat, n_states, i, u, uw[n, 0], uw[n, 1])
        r = rew[j]
        t += 1
        if with_traces:
            running_mean(delta, z, r, t)
        total += r
        i = j
        if not belief_filter(b, bnext, u, y, tptr, tidx, tdat, optr, oidx, odat):
            ok = False
            break
    state[0], state[2], state[3] = i, y, t
    acc[0] = total
    return ok


@njit(**_JIT)
def rollout_block(ua, uw, tptr, tidx, tdat, optr, oidx, odat, rew, theta, phi, succ, state, acc):
    n_states = rew.shape[0]
    wbuf = np.empty(succ.shape[1])
    mbuf = np.empty(theta.shape[2])
    i, g, y, t = state[0], state[1], state[2], state[3]
    total = acc[0]
    for n in range(ua.shape[0]):
        h, u = fsc_act(theta, phi, succ, y, g, ua[n, 0], ua[n, 1], wbuf, mbuf)
        j, y = world_step(tptr, tidx, tdat, optr, oidx, odat, n_states, i, u, uw[n, 0], uw[n, 1])
        total += rew[j]
        t += 1
        i = j
        g = h
    state[0], state[1], state[2], state[3] = i, g, y, t
    acc[0] = total

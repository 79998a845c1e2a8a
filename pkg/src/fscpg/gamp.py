"""Model-based gradient of the long-term average reward.

The world and controller together form a Markov chain over pairs
``(i, g)`` of world state and I-state, flattened as ``i * |G| + g``.  The
gradient is ``pi' (dP) x`` where ``pi`` is the stationary distribution and
``x`` solves ``[I - P + e pi'] x = r``.  :func:`gamp_gradient` approximates
``pi`` with the power method and ``x`` with a truncated series
``sum_n P^n r``; :func:`exact_grad_oracle` solves both densely.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.sparse.csgraph import connected_components

from .fsc import FscPolicy
from .model import Pomdp

log = logging.getLogger(__name__)

DENSE_GUARD = 2000


class ConvergenceError(RuntimeError):
    pass


class StartDependenceWarning(UserWarning):
    """The chain has several closed classes, so ``pi`` depends on the start."""


class RichardsonWarning(UserWarning):
    pass


@dataclass
class JointChain:
    model: Pomdp
    policy: FscPolicy
    P: sp.csr_matrix
    _PT: sp.csr_matrix | None = field(default=None, repr=False)

    @property
    def n_istates(self) -> int:
        return self.policy.n_istates

    @property
    def size(self) -> int:
        return self.P.shape[0]

    @property
    def PT(self) -> sp.csr_matrix:
        if self._PT is None:
            self._PT = self.P.T.tocsr()
        return self._PT

    def index(self, i: int, g: int) -> int:
        return i * self.n_istates + g

    def joint_rewards(self) -> np.ndarray:
        return np.repeat(self.model.rewards, self.n_istates)


@dataclass
class GradEstimate:
    """A gradient in flat parameter layout plus the average reward estimate."""

    grad: np.ndarray
    eta: float
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.eta = float(self.eta)
        self.meta = {k: v.item() if isinstance(v, np.generic) else v for k, v in self.meta.items()}

    def dumps(self) -> str:
        lines = [f"# eta={self.eta!r}"]
        lines.extend(f"# {k}={v!r}" for k, v in sorted(self.meta.items()))
        lines.extend(repr(float(v)) for v in self.grad)
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "GradEstimate":
        import ast

        meta, vals, eta = {}, [], float("nan")
        for ln in text.splitlines():
            if not ln.strip():
                continue
            if ln.startswith("#"):
                key, _, raw = ln[1:].strip().partition("=")
                val = ast.literal_eval(raw)
                if key == "eta":
                    eta = val
                else:
                    meta[key] = val
            else:
                vals.append(float(ln))
        return cls(np.array(vals), eta, meta)


def _policy_tables(policy: FscPolicy):
    return policy.omega_table(), policy.mu_table(), policy.successors


def build_joint(model: Pomdp, policy: FscPolicy) -> JointChain:
    """Assemble ``P[(i,g),(j,h)] = sum_{y,u} nu(y|i) w(h|g,y) mu(u|h,y) q(j|i,u)``."""
    policy.check_dimensions(model.n_observations, model.n_actions)
    quads = model.quads
    w, m, succ = _policy_tables(policy)
    G, k = succ.shape
    # (quad, g, slot) -> probability contribution
    h = succ[None, :, :]
    val = (quads.weight[:, None, None] * w[quads.y]) * m[quads.y[:, None, None], h, quads.u[:, None, None]]
    rows = np.broadcast_to(quads.i[:, None, None] * G + np.arange(G)[None, :, None], val.shape)
    cols = np.broadcast_to(quads.j[:, None, None] * G + h, val.shape)
    n = model.n_states * G
    P = sp.coo_matrix((val.ravel(), (rows.ravel(), cols.ravel())), shape=(n, n)).tocsr()
    P.sum_duplicates()
    P.eliminate_zeros()
    P.sort_indices()
    return JointChain(model, policy, P)


def closed_class_count(P: sp.csr_matrix) -> int:
    """Number of closed communicating classes of the chain ``P``."""
    n_comp, labels = connected_components(P, directed=True, connection="strong")
    if n_comp == 1:
        return 1
    coo = P.tocoo()
    leaving = labels[coo.row] != labels[coo.col]
    open_comps = np.unique(labels[coo.row[leaving]])
    return n_comp - open_comps.size


@dataclass
class StationaryResult:
    pi: np.ndarray
    iterations: int
    residual: float


def stationary(chain: JointChain, eps: float = 1e-4, max_iters: int = 1_000_000,
               pi0: np.ndarray | None = None, damping: float = 0.0) -> StationaryResult:
    """Power method ``pi_{n+1}' = pi_n' P`` from the uniform distribution.

    Stops at the first ``n`` with ``||pi_{n+1} - pi_n||_inf < eps`` and
    returns ``pi_{n+1}`` renormalised; ``iterations`` is that ``n``.
    ``damping = a > 0`` iterates ``(1 - a) P + a I`` instead, which has the
    same stationary distribution but no periodic part.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if not 0.0 <= damping < 1.0:
        raise ValueError("damping must lie in [0, 1)")
    n = chain.size
    PT = chain.PT
    pi = np.full(n, 1.0 / n) if pi0 is None else np.array(pi0, dtype=np.float64)
    for it in range(max_iters):
        nxt = PT @ pi
        if damping:
            nxt = (1.0 - damping) * nxt + damping * pi
        diff = np.max(np.abs(nxt - pi))
        pi = nxt
        if diff < eps:
            if it == 0 and closed_class_count(chain.P) > 1:
                warnings.warn(
                    "power method reached a fixed point immediately but the chain has several "
                    "closed classes; the stationary distribution depends on the start",
                    StartDependenceWarning,
                    stacklevel=2,
                )
            pi = pi / math.fsum(pi)
            return StationaryResult(pi, it, float(diff))
    raise ConvergenceError(
        f"power method did not reach ||pi_(n+1) - pi_n|| < {eps} in {max_iters} iterations; "
        "the chain may be periodic or have several closed classes"
    )


@dataclass
class RichardsonResult:
    x: np.ndarray
    steps: int
    converged: bool


def richardson_x(chain: JointChain, r_joint: np.ndarray, eps: float = 1e-4, check_every: int = 10,
                 max_steps: int | None = None, pi: np.ndarray | None = None,
                 damping: float = 0.0) -> RichardsonResult:
    """Approximate ``x = [I - P + e pi']^{-1} r`` by ``x_N = sum_{n<=N} P^n r``.

    If ``pi`` is given every term is centred, ``v_n - (pi'v_n) e``.  Since
    ``P e = e`` this shifts ``x`` by a multiple of ``e`` only, which the
    gradient contraction ignores, and it makes the series converge even when
    ``pi`` is itself approximate.  Convergence is checked every
    ``check_every`` terms: stop when ``||x_{N+k} - x_N||_inf < eps``.

    With ``damping = a`` the series runs on ``M = (1 - a) P + a I``; since
    ``I - M = (1 - a)(I - P)`` the sum is rescaled by ``1 - a`` on return.
    """
    if eps <= 0 or check_every < 1:
        raise ValueError("need eps > 0 and check_every >= 1")
    if max_steps is None:
        max_steps = 10 * chain.size + 1000
    v = np.array(r_joint, dtype=np.float64)
    if pi is not None:
        v = v - float(pi @ v)
    x = v.copy()
    x_check = x.copy()
    P = chain.P
    n = 0
    while n < max_steps:
        v = (1.0 - damping) * (P @ v) + damping * v if damping else P @ v
        if pi is not None:
            v -= float(pi @ v)
        x += v
        n += 1
        if n % check_every == 0:
            if np.max(np.abs(x - x_check)) < eps:
                return RichardsonResult(x * (1.0 - damping), n, True)
            x_check[...] = x
    warnings.warn(f"Richardson iteration stopped at the cap of {max_steps} steps without converging",
                  RichardsonWarning, stacklevel=2)
    return RichardsonResult(x * (1.0 - damping), n, False)


def grad_contract(chain: JointChain, pi: np.ndarray, x: np.ndarray) -> np.ndarray:
    """``pi' (dP) x`` for every parameter, without materialising ``dP``.

    The result uses the policy's flat layout (theta then phi).
    """
    model, policy = chain.model, chain.policy
    quads = model.quads
    w, m, succ = _policy_tables(policy)
    n_obs, G, U = m.shape
    k = succ.shape[1]
    pi2 = np.asarray(pi).reshape(model.n_states, G)
    x2 = np.asarray(x).reshape(model.n_states, G)
    h = succ[None, :, :]
    # c[q, g, s] = pi(i,g) * nu(y|i) q(j|i,u) * x(j, succ[g,s])
    c = (quads.weight[:, None] * pi2[quads.i])[:, :, None] * x2[quads.j[:, None, None], h]
    y3 = quads.y[:, None, None]
    u3 = quads.u[:, None, None]
    # theta: A[y,h,u] = sum c * w(h|g,y) over quads/slots mapping to (y,h,u)
    a_idx = (y3 * G + h) * U + u3
    A = np.bincount(np.broadcast_to(a_idx, c.shape).ravel(), weights=(c * w[quads.y]).ravel(),
                    minlength=n_obs * G * U).reshape(n_obs, G, U)
    am = A * m
    g_theta = am - m * am.sum(axis=2, keepdims=True)
    # phi: B[y,g,s] = sum c * mu(u|h,y)
    b_idx = (y3 * G + np.arange(G)[None, :, None]) * k + np.arange(k)[None, None, :]
    B = np.bincount(np.broadcast_to(b_idx, c.shape).ravel(), weights=(c * m[y3, h, u3]).ravel(),
                    minlength=n_obs * G * k).reshape(n_obs, G, k)
    bw = B * w
    g_phi = bw - w * bw.sum(axis=2, keepdims=True)
    return np.concatenate([g_theta.ravel(), g_phi.ravel()])


@dataclass
class GampConfig:
    eps_pi: float = 1e-4
    eps_x: float = 1e-4
    check_every: int = 10
    max_steps: int | None = None
    max_pi_iters: int = 1_000_000
    damping: float = 0.0


def gamp_gradient(model: Pomdp, policy: FscPolicy, config: GampConfig | None = None) -> GradEstimate:
    """GAMP: power-method ``pi``, series ``x``, then the gradient contraction."""
    config = config or GampConfig()
    chain = build_joint(model, policy)
    st = stationary(chain, config.eps_pi, config.max_pi_iters, damping=config.damping)
    r = chain.joint_rewards()
    rich = richardson_x(chain, r, config.eps_x, config.check_every, config.max_steps, pi=st.pi,
                        damping=config.damping)
    grad = grad_contract(chain, st.pi, rich.x)
    eta = float(st.pi @ r)
    meta = {
        "engine": "gamp",
        "pi_iterations": st.iterations,
        "richardson_steps": rich.steps,
        "richardson_converged": rich.converged,
        "eps_pi": config.eps_pi,
        "eps_x": config.eps_x,
        "joint_size": chain.size,
        "joint_nnz": int(chain.P.nnz),
    }
    return GradEstimate(grad, eta, meta)


# ---------------------------------------------------------------------------
# exact (dense / direct) evaluation, used as test oracles and for reporting


def _dense_chain(model: Pomdp, policy: FscPolicy) -> tuple[JointChain, np.ndarray]:
    chain = build_joint(model, policy)
    if chain.size > DENSE_GUARD:
        raise ValueError(f"joint chain has {chain.size} states; dense oracle limited to {DENSE_GUARD}")
    return chain, chain.P.toarray()


def dense_stationary(P: np.ndarray) -> np.ndarray:
    """Solve ``pi'(I - P + e e') = e'``; exact when the stationary law is unique."""
    n = P.shape[0]
    A = np.eye(n) - P + np.ones((n, n))
    pi = scipy.linalg.solve(A.T, np.ones(n))
    return pi / math.fsum(pi)


def exact_grad_oracle(model: Pomdp, policy: FscPolicy) -> GradEstimate:
    """Dense solve of ``pi'P = pi'`` and ``[I - P + e pi']x = r``, then contract."""
    chain, P = _dense_chain(model, policy)
    n = P.shape[0]
    pi = dense_stationary(P)
    r = chain.joint_rewards()
    x = scipy.linalg.solve(np.eye(n) - P + np.outer(np.ones(n), pi), r)
    grad = grad_contract(chain, pi, x)
    return GradEstimate(grad, float(pi @ r), {"engine": "exact", "joint_size": n})


def discounted_grad_oracle(model: Pomdp, policy: FscPolicy, beta: float) -> GradEstimate:
    """``pi' (dP) J_beta`` with ``J_beta = (I - beta P)^{-1} r``, the limit of the simulation estimators."""
    chain, P = _dense_chain(model, policy)
    n = P.shape[0]
    pi = dense_stationary(P)
    r = chain.joint_rewards()
    J = scipy.linalg.solve(np.eye(n) - beta * P, r)
    grad = grad_contract(chain, pi, J)
    return GradEstimate(grad, float(pi @ r), {"engine": "discounted-exact", "beta": beta})


def exact_stationary(chain: JointChain) -> np.ndarray:
    """Stationary distribution by a sparse direct solve (any chain size)."""
    n = chain.size
    if n <= DENSE_GUARD:
        return dense_stationary(chain.P.toarray())
    # (I - P') pi = 0 with the last equation replaced by sum(pi) = 1
    A = (sp.identity(n, format="csr") - chain.PT).tolil()
    A[n - 1, :] = np.ones(n)
    b = np.zeros(n)
    b[n - 1] = 1.0
    pi = spla.spsolve(A.tocsc(), b)
    return pi / math.fsum(pi)


def exact_eta(model: Pomdp, policy: FscPolicy) -> float:
    """Long-term average reward ``pi'r`` from an exact stationary solve."""
    chain = build_joint(model, policy)
    pi = exact_stationary(chain)
    return float(pi @ chain.joint_rewards())


def angular_error(a, b) -> float:
    """Angle between two vectors in degrees."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0 if na == nb else 90.0
    ua, ub = a / na, b / nb
    return math.degrees(2.0 * math.atan2(np.linalg.norm(ua - ub), np.linalg.norm(ua + ub)))


def eta_from_start(model: Pomdp, policy: FscPolicy, prune: float = 1e-12, start_istate: int = 0) -> float:
    """Long-run average reward from the model's start distribution.

    Transitions below ``prune`` are dropped first, so a near-deterministic
    controller is evaluated as its deterministic limit.  Each closed class
    of the pruned chain contributes its own average reward, weighted by the
    probability of being absorbed into it from ``(start, start_istate)``.
    """
    chain = build_joint(model, policy)
    P = chain.P.copy()
    P.data[P.data < prune] = 0.0
    P.eliminate_zeros()
    rows = np.asarray(P.sum(axis=1)).ravel()
    P = sp.diags(1.0 / rows) @ P
    n = P.shape[0]
    G = chain.n_istates
    n_comp, labels = connected_components(P, directed=True, connection="strong")
    coo = P.tocoo()
    leaving = labels[coo.row] != labels[coo.col]
    closed = np.setdiff1d(np.arange(n_comp), np.unique(labels[coo.row[leaving]]))
    start = np.zeros(n)
    start[np.arange(model.n_states) * G + start_istate] = model.start
    r = chain.joint_rewards()
    transient = ~np.isin(labels, closed)
    # expected visits to transient states, then absorption mass per state
    if transient.any():
        T = P[transient][:, transient]
        visits = spla.spsolve((sp.identity(T.shape[0], format="csc") - T.T).tocsc(), start[transient])
        absorbed = start.copy()
        absorbed[transient] = 0.0
        absorbed[~transient] += P[transient][:, ~transient].T @ np.atleast_1d(visits)
    else:
        absorbed = start
    eta = 0.0
    for c in closed:
        idx = np.flatnonzero(labels == c)
        mass = absorbed[idx].sum()
        if mass <= 0.0:
            continue
        sub = JointChain(model, policy, P[idx][:, idx].tocsr())
        pi = exact_stationary(sub)
        eta += mass * float(pi @ r[idx])
    return eta

"""Simulation-based gradient estimators and Monte-Carlo evaluation.

Random numbers come from counter-based Philox streams.  Every step takes
two uniforms from the agent stream (I-state choice, then action) and two
from the world stream (transition, then observation), so estimator variants
run on common random numbers seed for seed.  Unused draws are still taken.

Model worlds run in compiled blocks; any other step source (for example a
subprocess speaking the line protocol below) runs through a Python loop that
calls the same compiled agent-side updates.
"""

from __future__ import annotations

import os
import shlex
import subprocess
import sys
from concurrent.futures import ThreadPoolExecutor
from typing import Protocol, runtime_checkable

import numpy as np

from . import _kernels as K
from .fsc import FscPolicy
from .gamp import GradEstimate
from .model import Pomdp

AGENT_STREAM = 0
WORLD_STREAM = 1
BLOCK = 1 << 15


class EstimatorError(RuntimeError):
    pass


def make_stream(seed: int, worker: int, which: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(worker), int(which)])))


def thread_cap() -> int:
    raw = os.environ.get("FSCPG_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            pass
    return os.cpu_count() or 1


# ---------------------------------------------------------------------------
# step sources


@runtime_checkable
class StepSource(Protocol):
    n_observations: int
    n_actions: int

    def reset(self, seed: int, worker: int = 0) -> int: ...

    def step(self, action: int) -> tuple[int, float]: ...


class _ModelArrays:
    def __init__(self, model: Pomdp):
        t = model.stacked_transitions
        o = model.observations
        self.tptr, self.tidx, self.tdat = t.indptr.astype(np.int64), t.indices.astype(np.int64), t.data
        self.optr, self.oidx, self.odat = o.indptr.astype(np.int64), o.indices.astype(np.int64), o.data
        self.rew = np.ascontiguousarray(model.rewards, dtype=np.float64)
        self.start = np.ascontiguousarray(model.start, dtype=np.float64)
        self.n_states = model.n_states

    def world(self):
        return self.tptr, self.tidx, self.tdat, self.optr, self.oidx, self.odat, self.rew

    def initial(self, x_state: float, x_obs: float) -> tuple[int, int]:
        i = K.sample_dense(self.start, x_state)
        return i, K.sample_csr(self.optr, self.oidx, self.odat, i, x_obs)


def simulate_step(model: Pomdp, i: int, u: int, rng: np.random.Generator) -> tuple[int, int, float]:
    """One world transition: ``(j, y_next, r(j))``.  Uses two draws from ``rng``."""
    arrays = _arrays(model)
    x1 = rng.random()
    x2 = rng.random()
    j, y = K.world_step(arrays.tptr, arrays.tidx, arrays.tdat, arrays.optr, arrays.oidx, arrays.odat,
                        arrays.n_states, i, u, x1, x2)
    return int(j), int(y), float(arrays.rew[j])


def _arrays(model: Pomdp) -> _ModelArrays:
    cached = model.__dict__.get("_sim_arrays")
    if cached is None:
        cached = _ModelArrays(model)
        object.__setattr__(model, "_sim_arrays", cached)
    return cached


class ModelWorld:
    """Step source backed by a :class:`Pomdp`.  Also exposes the hidden state."""

    def __init__(self, model: Pomdp):
        self.model = model
        self.n_observations = model.n_observations
        self.n_actions = model.n_actions
        self._a = _arrays(model)
        self.state = 0
        self._rng = None

    def reset(self, seed: int, worker: int = 0) -> int:
        self._rng = make_stream(seed, worker, WORLD_STREAM)
        x = self._rng.random(2)
        self.state, y = self._a.initial(x[0], x[1])
        return int(y)

    def step(self, action: int) -> tuple[int, float]:
        j, y, r = simulate_step(self.model, self.state, int(action), self._rng)
        self.state = j
        return y, r

    def clone(self) -> "ModelWorld":
        return ModelWorld(self.model)


def _as_world(world) -> StepSource:
    return ModelWorld(world) if isinstance(world, Pomdp) else world


class ProtocolError(EstimatorError):
    pass


def encode_message(payload: str) -> bytes:
    """Frame one message as ``<byte length> <payload>\\n``."""
    data = payload.encode("utf-8")
    return str(len(data)).encode() + b" " + data + b"\n"


def read_message(stream) -> str:
    """Read one framed message; raises :class:`ProtocolError` on EOF or bad framing."""
    head = b""
    while True:
        ch = stream.read(1)
        if not ch:
            raise ProtocolError("connection closed")
        if ch == b" ":
            break
        if not ch.isdigit() or len(head) > 12:
            raise ProtocolError(f"bad length prefix {head + ch!r}")
        head += ch
    n = int(head)
    data = stream.read(n)
    if len(data) != n or stream.read(1) != b"\n":
        raise ProtocolError("truncated message")
    return data.decode("utf-8")


def parse_obs_reply(text: str) -> tuple[int, float]:
    parts = text.split()
    if len(parts) != 4 or parts[0] != "OBS" or parts[2] != "REW":
        raise ProtocolError(f"expected 'OBS <int> REW <decimal>', got {text!r}")
    return int(parts[1]), float(parts[3])


class SubprocessWorld:
    """Out-of-process environment.

    Requests are ``RESET <seed> <worker>`` and ``STEP <action>``; every reply
    is ``OBS <int> REW <decimal>`` (the reward of a reset is ignored).  All
    messages use :func:`encode_message` framing on the child's stdin/stdout.
    """

    def __init__(self, command, n_observations: int, n_actions: int):
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        self.n_observations = n_observations
        self.n_actions = n_actions
        self._proc = subprocess.Popen(self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE)

    def _ask(self, payload: str) -> tuple[int, float]:
        self._proc.stdin.write(encode_message(payload))
        self._proc.stdin.flush()
        y, r = parse_obs_reply(read_message(self._proc.stdout))
        if not 0 <= y < self.n_observations:
            raise ProtocolError(f"observation {y} out of range")
        return y, r

    def reset(self, seed: int, worker: int = 0) -> int:
        return self._ask(f"RESET {int(seed)} {int(worker)}")[0]

    def step(self, action: int) -> tuple[int, float]:
        return self._ask(f"STEP {int(action)}")

    def clone(self) -> "SubprocessWorld":
        return SubprocessWorld(self.command, self.n_observations, self.n_actions)

    def close(self) -> None:
        if self._proc.poll() is None:
            self._proc.stdin.close()
            self._proc.wait(timeout=10)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def serve_world(model: Pomdp, stdin=None, stdout=None) -> None:
    """Serve a model over the step protocol until the input closes."""
    stdin = stdin or sys.stdin.buffer
    stdout = stdout or sys.stdout.buffer
    world = ModelWorld(model)
    while True:
        try:
            req = read_message(stdin).split()
        except ProtocolError:
            return
        if req and req[0] == "RESET" and len(req) in (2, 3):
            y, r = world.reset(int(req[1]), int(req[2]) if len(req) == 3 else 0), 0.0
        elif req and req[0] == "STEP" and len(req) == 2:
            y, r = world.step(int(req[1]))
        else:
            raise ProtocolError(f"bad request {req!r}")
        stdout.write(encode_message(f"OBS {y} REW {r!r}"))
        stdout.flush()


# ---------------------------------------------------------------------------
# worker plumbing


def _split_steps(T: int, workers: int) -> list[int]:
    base, extra = divmod(T, workers)
    return [base + (w < extra) for w in range(workers)]


def _run_workers(fn, T: int, workers: int):
    if T < 1:
        raise ValueError("T must be >= 1")
    if workers < 1:
        raise ValueError("workers must be >= 1")
    workers = min(workers, T)
    counts = _split_steps(T, workers)
    if workers == 1:
        return [fn(0, counts[0])], counts
    with ThreadPoolExecutor(max_workers=min(workers, thread_cap())) as pool:
        results = list(pool.map(fn, range(workers), counts))
    return results, counts


def _blocks(seed: int, worker: int, steps: int):
    """Yield matching ``(agent, world)`` uniform blocks of shape ``(n, 2)``."""
    agent = make_stream(seed, worker, AGENT_STREAM)
    done = 0
    while done < steps:
        n = min(BLOCK, steps - done)
        yield agent, n
        done += n


def _check_beta(beta: float) -> None:
    if not 0.0 <= beta < 1.0:
        raise ValueError(f"beta must lie in [0, 1), got {beta}")


def _world_for_worker(world, worker: int):
    if worker == 0:
        return world
    if not hasattr(world, "clone"):
        raise EstimatorError("parallel estimation needs a step source with clone()")
    return world.clone()


def _tables(policy: FscPolicy):
    return (np.ascontiguousarray(policy.theta), np.ascontiguousarray(policy.phi),
            np.ascontiguousarray(policy.successors, dtype=np.int64))


def _combine(results, counts, engine: str, beta, T, seed, workers, extra=None) -> GradEstimate:
    grads = np.stack([r[0] for r in results])
    reward = sum(r[1] for r in results)
    meta = {"engine": engine, "T": int(T), "seed": int(seed), "workers": len(counts), "world_steps": int(T)}
    if beta is not None:
        meta["beta"] = float(beta)
    meta.update(extra or {})
    return GradEstimate(grads.mean(axis=0), reward / T, meta)


# ---------------------------------------------------------------------------
# IState-GPOMDP


def istate_gpomdp(world, policy: FscPolicy, beta: float, T: int, seed: int, workers: int = 1,
                  initial_istate: int = 0) -> GradEstimate:
    """Sampled-I-state policy-gradient estimate of the discounted-credit gradient.

    ``world`` is a :class:`Pomdp` or a step source.  With ``workers > 1``
    each worker runs its own seed stream for ``T / workers`` steps and the
    returned gradient is the unweighted mean.
    """
    _check_beta(beta)
    world = _as_world(world)
    policy.check_dimensions(world.n_observations, world.n_actions)
    theta, phi, succ = _tables(policy)

    def run(worker, steps):
        src = _world_for_worker(world, worker)
        z_t, z_p = np.zeros(theta.size), np.zeros(phi.size)
        d_t, d_p = np.zeros(theta.size), np.zeros(phi.size)
        if isinstance(src, ModelWorld):
            total = _istate_model(src, worker, seed, steps, theta, phi, succ, beta, initial_istate, z_t, z_p, d_t, d_p)
        else:
            total = _istate_loop(src, worker, seed, steps, theta, phi, succ, beta, initial_istate, z_t, z_p, d_t, d_p)
        return np.concatenate([d_t, d_p]), total

    results, counts = _run_workers(run, T, workers)
    return _combine(results, counts, "istate", beta, T, seed, workers)


def _istate_model(src, worker, seed, steps, theta, phi, succ, beta, g0, z_t, z_p, d_t, d_p):
    a = src._a
    wrng = make_stream(seed, worker, WORLD_STREAM)
    x = wrng.random(2)
    i, y = a.initial(x[0], x[1])
    state = np.array([i, g0, y, 0], dtype=np.int64)
    acc = np.zeros(1)
    for agent, n in _blocks(seed, worker, steps):
        K.istate_block(agent.random((n, 2)), wrng.random((n, 2)), *a.world(), theta, phi, succ, beta,
                       state, acc, z_t, z_p, d_t, d_p)
    return acc[0]


def _istate_loop(src, worker, seed, steps, theta, phi, succ, beta, g, z_t, z_p, d_t, d_p):
    wbuf, mbuf = np.empty(succ.shape[1]), np.empty(theta.shape[2])
    y = src.reset(seed, worker)
    total, t = 0.0, 0
    for agent, n in _blocks(seed, worker, steps):
        ua = agent.random((n, 2))
        for row in ua:
            g, u = K.istate_agent_step(theta, phi, succ, beta, y, g, row[0], row[1], z_t, z_p, wbuf, mbuf)
            y, r = src.step(u)
            t += 1
            K.running_mean(d_t, z_t, r, t)
            K.running_mean(d_p, z_p, r, t)
            total += r
    return total


# ---------------------------------------------------------------------------
# Exp-GPOMDP


def exp_gpomdp(world, policy: FscPolicy, beta: float, T: int, seed: int, workers: int = 1,
               alpha0: str | int = "uniform", record_alpha: bool = False) -> GradEstimate:
    """Policy-gradient estimate with the I-state marginalised out.

    ``alpha0`` is ``"uniform"`` or the index of a known initial I-state.
    ``record_alpha`` (Python loop only) stores per-step sums of ``alpha``
    and of each ``dalpha`` column in ``meta`` for diagnostics.
    """
    _check_beta(beta)
    world = _as_world(world)
    policy.check_dimensions(world.n_observations, world.n_actions)
    theta, phi, succ = _tables(policy)
    G = policy.n_istates

    def initial_alpha():
        if alpha0 == "uniform":
            return np.full(G, 1.0 / G)
        a = np.zeros(G)
        a[int(alpha0)] = 1.0
        return a

    def run(worker, steps):
        src = _world_for_worker(world, worker)
        alpha, dalpha = initial_alpha(), np.zeros((G, phi.size))
        z, delta = np.zeros(policy.n_params), np.zeros(policy.n_params)
        if isinstance(src, ModelWorld) and not record_alpha:
            a = src._a
            wrng = make_stream(seed, worker, WORLD_STREAM)
            x = wrng.random(2)
            i, y = a.initial(x[0], x[1])
            state = np.array([i, 0, y, 0], dtype=np.int64)
            acc = np.zeros(1)
            for agent, n in _blocks(seed, worker, steps):
                K.exp_block(agent.random((n, 2)), wrng.random((n, 2)), *a.world(), theta, phi, succ, beta,
                            state, acc, alpha, dalpha, z, delta)
            return delta, acc[0], None
        return _exp_loop(src, worker, seed, steps, theta, phi, succ, beta, alpha, dalpha, z, delta, record_alpha)

    results, counts = _run_workers(run, T, workers)
    extra = {"alpha0": alpha0}
    if record_alpha:
        extra["alpha_sum_dev"] = float(max(r[2][0] for r in results))
        extra["dalpha_sum_dev"] = float(max(r[2][1] for r in results))
    return _combine(results, counts, "exp", beta, T, seed, workers, extra)


def _exp_loop(src, worker, seed, steps, theta, phi, succ, beta, alpha, dalpha, z, delta, record):
    G, k, U = succ.shape[0], succ.shape[1], theta.shape[2]
    alpha_new, dalpha_new = np.empty(G), np.empty_like(dalpha)
    wbuf, mbar, mtab = np.empty(k), np.empty(U), np.empty((G, U))
    y = src.reset(seed, worker)
    total, t = 0.0, 0
    dev_a = dev_d = 0.0
    for agent, n in _blocks(seed, worker, steps):
        ua = agent.random((n, 2))
        for row in ua:
            u = K.exp_agent_step(theta, phi, succ, beta, y, alpha, dalpha, row[1], z,
                                 alpha_new, dalpha_new, wbuf, mbar, mtab)
            if record:
                dev_a = max(dev_a, abs(alpha.sum() - 1.0))
                if dalpha.size:
                    dev_d = max(dev_d, float(np.abs(dalpha.sum(axis=0)).max()))
            y, r = src.step(u)
            t += 1
            K.running_mean(delta, z, r, t)
            total += r
    return delta, total, (dev_a, dev_d)


# ---------------------------------------------------------------------------
# belief-state baseline


class BeliefPolicy:
    """Softmax over actions with scores linear in the belief: ``s(u) = w[u] . b``."""

    def __init__(self, n_states: int, n_actions: int, weights=None):
        self.weights = np.zeros((n_actions, n_states))
        if weights is not None:
            self.weights[...] = weights

    @classmethod
    def for_model(cls, model: Pomdp) -> "BeliefPolicy":
        return cls(model.n_states, model.n_actions)

    @property
    def n_params(self) -> int:
        return self.weights.size

    def params(self) -> np.ndarray:
        return self.weights.ravel().copy()

    def set_params(self, vec) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got shape {vec.shape}")
        if not np.all(np.isfinite(vec)):
            raise ValueError("parameters must be finite")
        self.weights[...] = vec.reshape(self.weights.shape)

    def with_params(self, vec) -> "BeliefPolicy":
        other = self.copy()
        other.set_params(vec)
        return other

    def copy(self) -> "BeliefPolicy":
        return BeliefPolicy(self.weights.shape[1], self.weights.shape[0], self.weights.copy())

    def dumps(self) -> str:
        U, S = self.weights.shape
        lines = ["fscpg-belief 1", f"n_states {S}", f"n_actions {U}", "params"]
        lines.extend(repr(float(v)) for v in self.params())
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "BeliefPolicy":
        lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
        if lines[0] != "fscpg-belief 1" or lines[3] != "params":
            raise ValueError("not a belief policy checkpoint")
        S, U = int(lines[1].split()[1]), int(lines[2].split()[1])
        policy = cls(S, U)
        policy.set_params([float(v) for v in lines[4:]])
        return policy

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.dumps())


def initial_belief(model: Pomdp, y0: int) -> np.ndarray:
    b = np.asarray(model.start, dtype=np.float64) * model.observations[:, y0].toarray().ravel()
    tot = b.sum()
    if tot <= 0:
        raise EstimatorError(f"initial observation {y0} impossible under the start distribution")
    return b / tot


def _belief_run(model: Pomdp, weights, beta, steps, seed, worker, with_traces):
    a = _arrays(model)
    wrng = make_stream(seed, worker, WORLD_STREAM)
    x = wrng.random(2)
    i, y = a.initial(x[0], x[1])
    b = initial_belief(model, y)
    state = np.array([i, 0, y, 0], dtype=np.int64)
    acc = np.zeros(1)
    z, delta = np.zeros(weights.size), np.zeros(weights.size)
    for agent, n in _blocks(seed, worker, steps):
        ok = K.belief_block(agent.random((n, 2)), wrng.random((n, 2)), *a.world(), weights, beta,
                            state, acc, b, z, delta, with_traces)
        if not ok:
            raise EstimatorError(f"belief filter met an impossible observation at step {state[3]}")
    return delta, acc[0]


def belief_policy_gpomdp(model: Pomdp, weights, beta: float, T: int, seed: int,
                         workers: int = 1) -> GradEstimate:
    """Memoryless policy-gradient estimate for a softmax policy over exact beliefs."""
    _check_beta(beta)
    w = _belief_weights(model, weights)
    results, counts = _run_workers(lambda wk, n: _belief_run(model, w, beta, n, seed, wk, True), T, workers)
    return _combine(results, counts, "belief", beta, T, seed, workers)


def _belief_weights(model: Pomdp, weights) -> np.ndarray:
    if isinstance(weights, BeliefPolicy):
        weights = weights.weights
    w = np.ascontiguousarray(weights, dtype=np.float64)
    if w.shape != (model.n_actions, model.n_states):
        raise ValueError(f"belief weights must have shape {(model.n_actions, model.n_states)}, got {w.shape}")
    return w


def belief_filter_trace(model: Pomdp, y0: int, steps: list[tuple[int, int]]) -> list[np.ndarray]:
    """Beliefs after the initial observation and after each ``(action, observation)``."""
    a = _arrays(model)
    b = initial_belief(model, y0)
    out = [b.copy()]
    bnext = np.empty_like(b)
    for u, y in steps:
        if not K.belief_filter(b, bnext, u, y, a.tptr, a.tidx, a.tdat, a.optr, a.oidx, a.odat):
            raise EstimatorError(f"observation {y} impossible after action {u}")
        out.append(b.copy())
    return out


# ---------------------------------------------------------------------------
# Monte-Carlo evaluation


def eval_eta_mc(world, policy, T: int, seed: int, workers: int = 1, initial_istate: int = 0) -> float:
    """Average reward over a ``T``-step trajectory (split over ``workers``)."""
    return eval_eta_mc_batches(world, policy, T, seed, workers, 1, initial_istate)[0]


def eval_eta_mc_batches(world, policy, T: int, seed: int, workers: int = 1, batches: int = 20,
                        initial_istate: int = 0) -> tuple[float, float]:
    """``(mean reward, batch-means standard error)`` over ``T`` steps."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if isinstance(policy, BeliefPolicy):
        if not isinstance(world, (Pomdp, ModelWorld)):
            raise EstimatorError("the belief policy needs a model")
        model = world if isinstance(world, Pomdp) else world.model
        w = _belief_weights(model, policy)

        def run(worker, steps):
            return _belief_rollout(model, w, seed, worker, _bounds(steps, batches))
    else:
        world = _as_world(world)
        policy.check_dimensions(world.n_observations, world.n_actions)
        theta, phi, succ = _tables(policy)

        def run(worker, steps):
            return _rollout(_world_for_worker(world, worker), worker, seed, _bounds(steps, batches),
                            theta, phi, succ, initial_istate)

    results, _ = _run_workers(run, T, workers)
    sums = np.concatenate([r[0] for r in results])
    lens = np.concatenate([r[1] for r in results])
    eta = float(sums.sum() / T)
    means = sums / lens
    se = float(means.std(ddof=1) / np.sqrt(means.size)) if means.size > 1 else float("nan")
    return eta, se


def _bounds(steps: int, batches: int) -> np.ndarray:
    return np.linspace(0, steps, max(1, min(batches, steps)) + 1).astype(np.int64)


def _chunks(bounds):
    """Yield ``(segment, n)`` pieces of at most ``BLOCK`` steps covering every segment."""
    for s in range(len(bounds) - 1):
        left = int(bounds[s + 1] - bounds[s])
        while left:
            n = min(BLOCK, left)
            yield s, n
            left -= n


def _rollout(src, worker, seed, bounds, theta, phi, succ, g):
    """Reward sums of consecutive trajectory segments delimited by ``bounds``."""
    sums = np.zeros(len(bounds) - 1)
    agent = make_stream(seed, worker, AGENT_STREAM)
    if isinstance(src, ModelWorld):
        a = src._a
        wrng = make_stream(seed, worker, WORLD_STREAM)
        x = wrng.random(2)
        i, y = a.initial(x[0], x[1])
        state = np.array([i, g, y, 0], dtype=np.int64)
        for s, n in _chunks(bounds):
            acc = np.zeros(1)
            K.rollout_block(agent.random((n, 2)), wrng.random((n, 2)), *a.world(), theta, phi, succ, state, acc)
            sums[s] += acc[0]
        return sums, np.diff(bounds)
    wbuf, mbuf = np.empty(succ.shape[1]), np.empty(theta.shape[2])
    y = src.reset(seed, worker)
    for s, n in _chunks(bounds):
        for row in agent.random((n, 2)):
            g, u = K.fsc_act(theta, phi, succ, y, g, row[0], row[1], wbuf, mbuf)
            y, r = src.step(u)
            sums[s] += r
    return sums, np.diff(bounds)


def _belief_rollout(model, weights, seed, worker, bounds):
    a = _arrays(model)
    sums = np.zeros(len(bounds) - 1)
    agent = make_stream(seed, worker, AGENT_STREAM)
    wrng = make_stream(seed, worker, WORLD_STREAM)
    x = wrng.random(2)
    i, y = a.initial(x[0], x[1])
    b = initial_belief(model, y)
    state = np.array([i, 0, y, 0], dtype=np.int64)
    empty = np.zeros(0)
    for s, n in _chunks(bounds):
        acc = np.zeros(1)
        if not K.belief_block(agent.random((n, 2)), wrng.random((n, 2)), *a.world(), weights, 0.0,
                              state, acc, b, empty, empty, False):
            raise EstimatorError(f"belief filter met an impossible observation at step {state[3]}")
        sums[s] += acc[0]
    return sums, np.diff(bounds)

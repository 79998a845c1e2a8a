"""Stochastic finite state controllers with softmax lookup tables.

A controller has ``|G|`` internal states (I-states).  Both tables are
indexed by observation first:

* ``theta[y, h, u]`` scores action ``u`` in I-state ``h`` after observing ``y``;
* ``phi[y, g, s]`` scores the ``s``-th successor of I-state ``g``.

Flat parameter vectors hold all of ``theta`` (C order) followed by all of
``phi`` (C order).  Gradients use the same layout.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

CHECKPOINT_VERSION = 1


class Dist(NamedTuple):
    support: np.ndarray
    probs: np.ndarray


def softmax(scores) -> np.ndarray:
    """Max-shifted softmax over the last axis."""
    s = np.asarray(scores, dtype=np.float64)
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def grad_log_softmax(scores, chosen: int) -> np.ndarray:
    """Gradient of ``log softmax(scores)[chosen]`` with respect to ``scores``."""
    g = -softmax(scores)
    g[chosen] += 1.0
    return g


class TopologyError(RuntimeError):
    pass


@dataclass(frozen=True)
class FscTopology:
    """Fixed I-state transition graph: each I-state has ``out_degree`` successors."""

    successors: np.ndarray

    def __post_init__(self):
        succ = np.array(self.successors, dtype=np.int64)
        if succ.ndim != 2:
            raise ValueError("successors must be a (|G|, k) array")
        n, k = succ.shape
        if k < 1 or k > n:
            raise ValueError(f"out-degree {k} outside [1, {n}]")
        if np.any(succ < 0) or np.any(succ >= n):
            raise ValueError("successor index out of range")
        for row in succ:
            if len(set(row.tolist())) != k:
                raise ValueError("successor lists must hold distinct I-states")
        succ = np.sort(succ, axis=1)
        succ.setflags(write=False)
        object.__setattr__(self, "successors", succ)

    @property
    def n_istates(self) -> int:
        return self.successors.shape[0]

    @property
    def out_degree(self) -> int:
        return self.successors.shape[1]

    @property
    def is_dense(self) -> bool:
        return self.out_degree == self.n_istates

    def is_strongly_connected(self) -> bool:
        return _strongly_connected(self.successors)


def _strongly_connected(succ: np.ndarray) -> bool:
    n, k = succ.shape
    adj = csr_matrix((np.ones(n * k), (np.repeat(np.arange(n), k), succ.reshape(-1))), shape=(n, n))
    n_comp, _ = connected_components(adj, directed=True, connection="strong")
    return n_comp == 1


def dense_topology(n_istates: int) -> FscTopology:
    return FscTopology(np.tile(np.arange(n_istates), (n_istates, 1)))


def sparse_topology(n_istates: int, k: int, seed: int, max_attempts: int = 1000) -> FscTopology:
    """Random out-degree-``k`` topology, resampled until strongly connected.

    Successors of each I-state are drawn uniformly without replacement
    (self-loops allowed).  The result depends only on the arguments.
    """
    if not 1 <= k <= n_istates:
        raise ValueError(f"need 1 <= k <= n_istates, got k={k}, n_istates={n_istates}")
    if k == n_istates:
        return dense_topology(n_istates)
    rng = np.random.default_rng(seed)
    for _ in range(max_attempts):
        succ = np.stack([rng.choice(n_istates, size=k, replace=False) for _ in range(n_istates)])
        if _strongly_connected(succ):
            return FscTopology(succ)
    raise TopologyError(
        f"no strongly connected topology with |G|={n_istates}, k={k} in {max_attempts} attempts"
    )


class FscPolicy:
    """Softmax finite state controller.

    Parameters
    ----------
    topology
        I-state transition graph.
    n_observations, n_actions
        Sizes of the world's observation and action sets.
    theta, phi
        Optional initial tables; zeros (uniform distributions) by default.
    """

    def __init__(self, topology: FscTopology, n_observations: int, n_actions: int,
                 theta=None, phi=None, seed: int | None = None):
        self.topology = topology
        self.seed = seed
        g, k = topology.n_istates, topology.out_degree
        self.theta = np.zeros((n_observations, g, n_actions))
        self.phi = np.zeros((n_observations, g, k))
        if theta is not None:
            self.theta[...] = theta
        if phi is not None:
            self.phi[...] = phi

    @classmethod
    def zeros(cls, n_observations, n_actions, n_istates=1, k=None, topology_seed=0):
        k = n_istates if k is None else k
        topo = sparse_topology(n_istates, k, topology_seed)
        return cls(topo, n_observations, n_actions, seed=topology_seed)

    def randomize(self, scale: float, seed: int) -> "FscPolicy":
        """Set every parameter to a uniform draw in ``[-scale, scale]``."""
        rng = np.random.default_rng(seed)
        self.set_params(rng.uniform(-scale, scale, self.n_params))
        return self

    @property
    def n_observations(self) -> int:
        return self.theta.shape[0]

    @property
    def n_istates(self) -> int:
        return self.theta.shape[1]

    @property
    def n_actions(self) -> int:
        return self.theta.shape[2]

    @property
    def successors(self) -> np.ndarray:
        return self.topology.successors

    @property
    def n_theta(self) -> int:
        return self.theta.size

    @property
    def n_phi(self) -> int:
        return self.phi.size

    @property
    def n_params(self) -> int:
        return self.theta.size + self.phi.size

    def params(self) -> np.ndarray:
        return np.concatenate([self.theta.ravel(), self.phi.ravel()])

    def set_params(self, vec) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got shape {vec.shape}")
        if not np.all(np.isfinite(vec)):
            raise ValueError("parameters must be finite")
        self.theta[...] = vec[: self.n_theta].reshape(self.theta.shape)
        self.phi[...] = vec[self.n_theta:].reshape(self.phi.shape)

    def with_params(self, vec) -> "FscPolicy":
        other = self.copy()
        other.set_params(vec)
        return other

    def copy(self) -> "FscPolicy":
        return FscPolicy(self.topology, self.n_observations, self.n_actions,
                         self.theta.copy(), self.phi.copy(), seed=self.seed)

    def split(self, vec) -> tuple[np.ndarray, np.ndarray]:
        """View a flat vector as ``(theta-shaped, phi-shaped)`` arrays."""
        vec = np.asarray(vec)
        return vec[: self.n_theta].reshape(self.theta.shape), vec[self.n_theta:].reshape(self.phi.shape)

    # distributions
    def omega(self, g: int, y: int) -> Dist:
        return Dist(self.successors[g], softmax(self.phi[y, g]))

    def mu(self, h: int, y: int) -> Dist:
        return Dist(np.arange(self.n_actions), softmax(self.theta[y, h]))

    def omega_table(self) -> np.ndarray:
        """``(|Y|, |G|, k)`` successor probabilities."""
        return softmax(self.phi)

    def mu_table(self) -> np.ndarray:
        """``(|Y|, |G|, |U|)`` action probabilities."""
        return softmax(self.theta)

    def omega_dense(self) -> np.ndarray:
        """``(|Y|, |G|, |G|)`` I-state transition probabilities ``w[y, g, h]``."""
        w = np.zeros((self.n_observations, self.n_istates, self.n_istates))
        probs = self.omega_table()
        rows = np.arange(self.n_istates)[:, None]
        w[:, rows, self.successors] = probs
        return w

    def check_dimensions(self, n_observations: int, n_actions: int) -> None:
        if (self.n_observations, self.n_actions) != (n_observations, n_actions):
            raise ValueError(
                f"policy expects |Y|={self.n_observations}, |U|={self.n_actions}; "
                f"model has |Y|={n_observations}, |U|={n_actions}"
            )

    # checkpoints
    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.dumps())

    def dumps(self) -> str:
        lines = [
            f"fscpg-policy {CHECKPOINT_VERSION}",
            f"n_istates {self.n_istates}",
            f"out_degree {self.topology.out_degree}",
            f"n_observations {self.n_observations}",
            f"n_actions {self.n_actions}",
            f"seed {'none' if self.seed is None else self.seed}",
            "successors",
        ]
        lines.extend(" ".join(str(int(h)) for h in row) for row in self.successors)
        lines.append("params")
        lines.extend(repr(float(v)) for v in self.params())
        return "\n".join(lines) + "\n"

    @classmethod
    def load(cls, path) -> "FscPolicy":
        with open(path, encoding="utf-8") as fh:
            return cls.loads(fh.read())

    @classmethod
    def loads(cls, text: str) -> "FscPolicy":
        lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
        magic, version = lines[0].split()
        if magic != "fscpg-policy" or int(version) != CHECKPOINT_VERSION:
            raise ValueError(f"not a policy checkpoint (header {lines[0]!r})")
        header = dict(ln.split(None, 1) for ln in lines[1:6])
        n, k = int(header["n_istates"]), int(header["out_degree"])
        n_obs, n_act = int(header["n_observations"]), int(header["n_actions"])
        seed = None if header["seed"] == "none" else int(header["seed"])
        if lines[6] != "successors" or lines[7 + n] != "params":
            raise ValueError("malformed checkpoint body")
        succ = np.array([[int(t) for t in ln.split()] for ln in lines[7:7 + n]])
        params = np.array([float(v) for v in lines[8 + n:]])
        if succ.shape != (n, k):
            raise ValueError("successor table does not match header")
        policy = cls(FscTopology(succ), n_obs, n_act, seed=seed)
        policy.set_params(params)
        return policy


def symmetric_policy(n_observations: int, n_actions: int, n_istates: int, seed: int = 0,
                     scale: float = 1.0) -> FscPolicy:
    """Dense controller whose tables do not depend on the current I-state.

    ``phi[y, g, :]`` is the same for every ``g`` and ``theta[y, h, :]`` the same
    for every ``h``, both drawn at random per observation.  The I-state
    parameter gradient of the average reward vanishes at such points.
    """
    rng = np.random.default_rng(seed)
    policy = FscPolicy(dense_topology(n_istates), n_observations, n_actions)
    policy.phi[...] = rng.uniform(-scale, scale, (n_observations, 1, n_istates))
    policy.theta[...] = rng.uniform(-scale, scale, (n_observations, 1, n_actions))
    return policy

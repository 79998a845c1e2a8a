"""Benchmark world generators.

Every generator returns a plain :class:`~fscpg.model.Pomdp`.  Layouts for
Heaven/Hell, the factory floor and the navigation maze are ASCII map files
shipped in ``fscpg/maps``.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources

import numpy as np
import scipy.sparse as sp

from .fsc import FscPolicy, dense_topology
from .model import Pomdp

__all__ = [
    "GridMap",
    "load_map",
    "parse_map",
    "heaven_hell",
    "heaven_hell_hand_fsc",
    "factory",
    "factory_hand_policy",
    "maze_from_ascii",
    "pentagon_like",
    "oracle_pomdp",
    "constant_world",
    "chain_world",
]

# Orientation order N, E, S, W; turning right adds one.
_DELTAS = ((-1, 0), (0, 1), (1, 0), (0, -1))
_START_ARROWS = {"^": 0, ">": 1, "v": 2, "<": 3}
# Table value for a "certain" choice in hand-built controllers: exp(-40)
# is far below double-precision resolution of probabilities near 1.
_SURE = 40.0


class MapError(ValueError):
    pass


@dataclass(frozen=True)
class GridMap:
    """Rectangular ASCII map; ``#`` is wall, any other character is a free cell.

    ``options`` holds ``! key value`` header lines (noise rates and the like).
    """

    rows: tuple[str, ...]
    options: dict

    def __post_init__(self):
        if not self.rows:
            raise MapError("empty map")
        width = len(self.rows[0])
        if any(len(r) != width for r in self.rows):
            raise MapError("map rows must all have the same width")
        if not self.cells:
            raise MapError("map has no free cells")

    @property
    def cells(self) -> list[tuple[int, int]]:
        return [(r, c) for r, row in enumerate(self.rows) for c, ch in enumerate(row) if ch != "#"]

    def find(self, chars: str) -> list[tuple[int, int]]:
        return [(r, c) for r, row in enumerate(self.rows) for c, ch in enumerate(row) if ch in chars]

    def is_free(self, r: int, c: int) -> bool:
        return 0 <= r < len(self.rows) and 0 <= c < len(self.rows[0]) and self.rows[r][c] != "#"

    def option(self, key: str, default: float) -> float:
        return float(self.options.get(key, default))


def parse_map(text: str) -> GridMap:
    rows, options = [], {}
    for raw in text.splitlines():
        if raw.startswith("!"):
            key, _, val = raw[1:].strip().partition(" ")
            options[key] = val.strip()
        elif raw.strip():
            rows.append(raw.rstrip("\n"))
    if not rows:
        raise MapError("empty map")
    width = max(len(r) for r in rows)
    rows = [r.ljust(width, "#") for r in rows]
    return GridMap(tuple(rows), options)


def load_map(name_or_path: str) -> GridMap:
    """Load a shipped map by name (``"pentagon-like"``) or a path to a map file."""
    if name_or_path.endswith(".map") and "/" in name_or_path or name_or_path.startswith("."):
        with open(name_or_path, encoding="utf-8") as fh:
            return parse_map(fh.read())
    name = name_or_path if name_or_path.endswith(".map") else name_or_path + ".map"
    try:
        text = resources.files("fscpg.maps").joinpath(name).read_text(encoding="utf-8")
    except FileNotFoundError:
        with open(name_or_path, encoding="utf-8") as fh:
            text = fh.read()
    return parse_map(text)


def _csr(rows: list[dict[int, float]], n_cols: int) -> sp.csr_matrix:
    indptr, indices, data = [0], [], []
    for row in rows:
        for col in sorted(row):
            indices.append(col)
            data.append(row[col])
        indptr.append(len(indices))
    return sp.csr_matrix((np.array(data), np.array(indices, dtype=np.int64), np.array(indptr)),
                         shape=(len(rows), n_cols))


# ---------------------------------------------------------------------------
# Heaven/Hell


def heaven_hell(layout: GridMap | None = None) -> Pomdp:
    """Heaven/Hell: 10 positions x 2 hidden worlds.

    Map symbols: ``A``/``B`` are the two ends of the top bar (``A`` is heaven
    in world 0, ``B`` in world 1), ``s`` the start and ``$`` the signpost.
    Moves N/E/S/W are deterministic; moving into a wall does nothing.  Any
    action at an end returns to the start in a uniformly drawn world.
    Observation = position index, except the signpost also reveals the
    world (observation ``n_positions`` in world 1).
    """
    layout = layout or load_map("heaven-hell")
    cells = layout.cells
    pos = {c: k for k, c in enumerate(cells)}
    npos = len(cells)
    (a_cell,), (b_cell,) = layout.find("A"), layout.find("B")
    (start_cell,), (sign_cell,) = layout.find("s"), layout.find("$")
    ends = {pos[a_cell], pos[b_cell]}
    start, sign = pos[start_cell], pos[sign_cell]
    n = 2 * npos

    def sid(world, p):
        return world * npos + p

    trans = [[None] * n for _ in range(4)]
    rewards = np.zeros(n)
    for world in range(2):
        heaven, hell = (pos[a_cell], pos[b_cell]) if world == 0 else (pos[b_cell], pos[a_cell])
        rewards[sid(world, heaven)] = 1.0
        rewards[sid(world, hell)] = -1.0
        for (r, c), p in pos.items():
            for u, (dr, dc) in enumerate(_DELTAS):
                if p in ends:
                    row = {sid(0, start): 0.5, sid(1, start): 0.5}
                else:
                    tgt = (r + dr, c + dc)
                    row = {sid(world, pos[tgt] if tgt in pos else p): 1.0}
                trans[u][sid(world, p)] = row
    obs = []
    for world in range(2):
        for p in range(npos):
            obs.append({npos if (p == sign and world == 1) else p: 1.0})
    start_dist = np.zeros(n)
    start_dist[[sid(0, start), sid(1, start)]] = 0.5
    names = tuple(f"w{w}-p{p}" for w in range(2) for p in range(npos))
    return Pomdp(
        transitions=tuple(_csr(t, n) for t in trans),
        observations=_csr(obs, npos + 1),
        rewards=rewards,
        start=start_dist,
        state_names=names,
        action_names=("N", "E", "S", "W"),
        observation_names=tuple(f"p{p}" for p in range(npos)) + ("sign-B",),
    )


def heaven_hell_hand_fsc(layout: GridMap | None = None) -> FscPolicy:
    """Three I-state controller that reads the signpost and remembers it.

    I-state 0 means "world unknown", 1 "heaven is at A", 2 "heaven is at B".
    """
    layout = layout or load_map("heaven-hell")
    cells = layout.cells
    pos = {c: k for k, c in enumerate(cells)}
    npos = len(cells)
    (a_cell,), (b_cell,) = layout.find("A"), layout.find("B")
    (sign_cell,) = layout.find("$")
    sign = pos[sign_cell]
    n_obs = npos + 1
    policy = FscPolicy(dense_topology(3), n_obs, 4)
    N, E, S, W = range(4)

    top_row, stem_col = a_cell[0], sign_cell[1]
    for y in range(n_obs):
        p = sign if y == npos else y
        r, c = cells[p]
        for g in range(3):
            if y == sign:
                h = 1
            elif y == npos:
                h = 2
            elif p in (pos[a_cell], pos[b_cell]):
                h = 0
            else:
                h = g
            policy.phi[y, g, h] = _SURE
        in_stem = c == stem_col and r > top_row
        for h in range(3):
            if h == 0:
                # down to the signpost
                if in_stem or c == stem_col:
                    u = S
                else:
                    u = E if c < stem_col else W
            else:
                goal_col = a_cell[1] if h == 1 else b_cell[1]
                if in_stem:
                    u = N
                else:
                    u = E if c < goal_col else W
            policy.theta[y, h, u] = _SURE
    return policy


# ---------------------------------------------------------------------------
# Factory floor

FACTORY_FAIL = 0.1
FACTORY_SENSOR_FAIL = 0.1
AGENT_ACTIONS = ("forward", "left", "right", "wait")


def _factory_layout(layout: GridMap):
    cells = layout.cells
    pos = {c: k for k, c in enumerate(cells)}
    (L,), (M,), (R,) = layout.find("L"), layout.find("M"), layout.find("R")
    return cells, pos, pos[L], pos[M], pos[R]


def _agent_obs_bits(layout: GridMap, cell, orient) -> int:
    """5-bit wall sensor: front, right, back, left (blocked = 1), then top corridor."""
    r, c = cell
    code = 0
    for bit, rel in enumerate((0, 1, 2, 3)):
        dr, dc = _DELTAS[(orient + rel) % 4]
        if not layout.is_free(r + dr, c + dc):
            code |= 1 << bit
    if r == 0:
        code |= 1 << 4
    return code


def factory(layout: GridMap | None = None, action_fail: float = FACTORY_FAIL,
            sensor_fail: float = FACTORY_SENSOR_FAIL) -> Pomdp:
    """Two-robot factory floor, ``104^2 x 2 = 21,632`` states.

    Robot 0 has priority and carries unfinished parts from ``L`` to the middle
    ``M``; robot 1 carries processed parts from ``M`` to ``R``.  Loading and
    unloading happen on the transition out of a shaded cell.  The reward is 1
    in the states where robot 1 is at ``R`` holding a part (it unloads on
    the next transition).  Each robot: forward / turn left / turn right /
    wait, failing (no-op) with probability ``action_fail``; 5-bit sensor
    zeroed with probability ``sensor_fail``.
    """
    layout = layout or load_map("factory")
    cells, pos, L, M, R = _factory_layout(layout)
    nc = len(cells)
    n_agent = nc * 4 * 2
    n = n_agent * n_agent * 2

    def agent_index(cell, orient, carry):
        return (cell * 4 + orient) * 2 + carry

    def decode_agent(a):
        return a // 8, (a // 2) % 4, a % 2

    neighbor = np.full((nc, 4), -1)
    for (r, c), k in pos.items():
        for o, (dr, dc) in enumerate(_DELTAS):
            neighbor[k, o] = pos.get((r + dr, c + dc), -1)

    def step_agent(cell, orient, act):
        """Intended (cell, orient) after an effective action, ignoring the other robot."""
        if act == 1:
            return cell, (orient + 3) % 4
        if act == 2:
            return cell, (orient + 1) % 4
        if act == 0 and neighbor[cell, orient] >= 0:
            return int(neighbor[cell, orient]), orient
        return cell, orient

    start_state = (agent_index(L, 0, 0) * n_agent + agent_index(R, 0, 0)) * 2
    start_row = {start_state: 1.0}
    p_ok = 1.0 - action_fail
    trans = [[None] * n for _ in range(16)]
    rewards = np.zeros(n)
    obs_rows = []
    for a0 in range(n_agent):
        c0, o0, k0 = decode_agent(a0)
        for a1 in range(n_agent):
            c1, o1, k1 = decode_agent(a1)
            for part in range(2):
                s = (a0 * n_agent + a1) * 2 + part
                if c0 == c1:
                    # unreachable co-located configurations; routed to the start so
                    # they stay transient
                    for u in range(16):
                        trans[u][s] = start_row
                    obs_rows.append({0: 1.0})
                    continue
                if c1 == R and k1 == 1:
                    rewards[s] = 1.0
                # load / unload on leaving shaded cells
                nk0, nk1, npart = k0, k1, part
                if c0 == L and k0 == 0:
                    nk0 = 1
                elif c0 == M and k0 == 1 and part == 0:
                    nk0, npart = 0, 1
                if c1 == M and k1 == 0 and part == 1:
                    nk1, npart = 1, 0
                elif c1 == R and k1 == 1:
                    nk1 = 0
                for u0 in range(4):
                    for u1 in range(4):
                        row: dict[int, float] = {}
                        for ok0 in (True, False):
                            for ok1 in (True, False):
                                pr = (p_ok if ok0 else action_fail) * (p_ok if ok1 else action_fail)
                                if pr == 0.0:
                                    continue
                                t0, no0 = step_agent(c0, o0, u0 if ok0 else 3)
                                t1, no1 = step_agent(c1, o1, u1 if ok1 else 3)
                                if t0 == c1:
                                    t0 = c0
                                if t1 == t0 or t1 == c0:
                                    t1 = c1
                                j = ((agent_index(t0, no0, nk0) * n_agent + agent_index(t1, no1, nk1)) * 2
                                     + npart)
                                row[j] = row.get(j, 0.0) + pr
                        trans[u0 * 4 + u1][s] = row
                y0 = _agent_obs_bits(layout, cells[c0], o0)
                y1 = _agent_obs_bits(layout, cells[c1], o1)
                orow: dict[int, float] = {}
                for f0 in (False, True):
                    for f1 in (False, True):
                        pr = (sensor_fail if f0 else 1 - sensor_fail) * (sensor_fail if f1 else 1 - sensor_fail)
                        if pr == 0.0:
                            continue
                        y = (0 if f0 else y0) * 32 + (0 if f1 else y1)
                        orow[y] = orow.get(y, 0.0) + pr
                obs_rows.append(orow)
    start = np.zeros(n)
    start[start_state] = 1.0
    return Pomdp(
        transitions=tuple(_csr(t, n) for t in trans),
        observations=_csr(obs_rows, 1024),
        rewards=rewards,
        start=start,
        action_names=tuple(f"{a}/{b}" for a in AGENT_ACTIONS for b in AGENT_ACTIONS),
    )


def _factory_loop_actions(layout: GridMap, route: list[tuple[int, int]], turn: int) -> dict[int, int]:
    """Map each robot observation on a closed route to forward or a turn.

    ``route`` lists the cells of the loop in travel order; ``turn`` is 1 for
    turn left or 2 for turn right at corners.
    """
    actions: dict[int, int] = {}
    for k, cell in enumerate(route):
        nxt = route[(k + 1) % len(route)]
        want = _DELTAS.index((nxt[0] - cell[0], nxt[1] - cell[1]))
        prev = route[k - 1]
        orient = _DELTAS.index((cell[0] - prev[0], cell[1] - prev[1]))
        while True:
            y = _agent_obs_bits(layout, cell, orient)
            act = 0 if orient == want else turn
            if actions.setdefault(y, act) != act:
                raise MapError(f"hand route is ambiguous at {cell}")
            if orient == want:
                break
            orient = (orient + (1 if turn == 2 else 3)) % 4
    return actions


def factory_hand_policy(layout: GridMap | None = None) -> FscPolicy:
    """Memoryless hand controller: robots circle their half of the floor in opposite senses.

    Robot 0 runs clockwise round the left loop (L, top, M, bottom); robot 1
    runs anticlockwise round the right loop, so both cross the middle column
    in the same direction.  A robot whose sensor reads "no walls" waits.
    """
    layout = layout or load_map("factory")
    (L,), (M,), (R,) = layout.find("L"), layout.find("M"), layout.find("R")
    top, bottom = L[0] - 1, L[0] + 1
    left = [L, (top, L[1])] + [(top, c) for c in range(L[1] + 1, M[1] + 1)] + [M, (bottom, M[1])] \
        + [(bottom, c) for c in range(M[1] - 1, L[1] - 1, -1)]
    right = [M, (bottom, M[1])] + [(bottom, c) for c in range(M[1] + 1, R[1] + 1)] + [R, (top, R[1])] \
        + [(top, c) for c in range(R[1] - 1, M[1] - 1, -1)]
    per_agent = [_factory_loop_actions(layout, left, 2), _factory_loop_actions(layout, right, 1)]
    policy = FscPolicy(dense_topology(1), 1024, 16)
    for y in range(1024):
        acts = []
        for agent, yy in enumerate((y // 32, y % 32)):
            if yy == 0:
                acts.append(3)
            else:
                acts.append(per_agent[agent].get(yy, 2))
        policy.theta[y, 0, acts[0] * 4 + acts[1]] = _SURE
    return policy


# ---------------------------------------------------------------------------
# Navigation maze

MAZE_ACTIONS = ("forward", "left", "right", "declare")


def _bit_flip_rate(total_error: float, bits: int = 3) -> float:
    return 1.0 - (1.0 - total_error) ** (1.0 / bits)


def maze_from_ascii(layout: GridMap, action_fail: float | None = None,
                    observation_error: float | None = None) -> Pomdp:
    """Robot navigation POMDP from an ASCII map.

    Free cells are ``.``; the start is one of ``^ > v <`` (giving the
    initial heading) and the goal is ``G``.  States are (cell, heading) plus
    one "success" state: a rewarded copy of the start pose entered by a
    successful ``declare`` at the goal.  Actions fail (no-op) with
    ``action_fail``.  The observation is three reachability bits (front,
    left, right), each flipped independently at the rate that makes the
    chance of any wrong bit equal to ``observation_error``.
    """
    if action_fail is None:
        action_fail = layout.option("action_fail", 0.12)
    if observation_error is None:
        observation_error = layout.option("observation_error", 0.12)
    cells = layout.cells
    pos = {c: k for k, c in enumerate(cells)}
    starts = [(rc, _START_ARROWS[layout.rows[rc[0]][rc[1]]]) for rc in layout.find("^><v")]
    goals = layout.find("G")
    if len(starts) != 1 or len(goals) != 1:
        raise MapError("maze needs exactly one start (^ > v <) and one goal G")
    (start_cell, start_dir), (goal_cell,) = starts[0], goals
    n_pose = 4 * len(cells)
    success = n_pose
    n = n_pose + 1
    start_state = pos[start_cell] * 4 + start_dir
    flip = _bit_flip_rate(observation_error)

    def pose_obs_row(cell, orient) -> dict[int, float]:
        r, c = cell
        true_bits = []
        for rel in (0, 3, 1):  # front, left, right
            dr, dc = _DELTAS[(orient + rel) % 4]
            true_bits.append(1 if layout.is_free(r + dr, c + dc) else 0)
        row: dict[int, float] = {}
        for y in range(8):
            pr = 1.0
            for b in range(3):
                pr *= (1.0 - flip) if ((y >> b) & 1) == true_bits[b] else flip
            if pr > 0.0:
                row[y] = row.get(y, 0.0) + pr
        return row

    def outcome(cell, orient, act) -> int:
        if act == 1:
            return pos[cell] * 4 + (orient + 3) % 4
        if act == 2:
            return pos[cell] * 4 + (orient + 1) % 4
        if act == 0:
            dr, dc = _DELTAS[orient]
            tgt = (cell[0] + dr, cell[1] + dc)
            return pos[tgt] * 4 + orient if tgt in pos else pos[cell] * 4 + orient
        return success if cell == goal_cell else pos[cell] * 4 + orient

    trans = [[None] * n for _ in range(4)]
    obs = [None] * n
    for cell in cells:
        for orient in range(4):
            s = pos[cell] * 4 + orient
            obs[s] = pose_obs_row(cell, orient)
            for u in range(4):
                row: dict[int, float] = {}
                for j, pr in ((outcome(cell, orient, u), 1.0 - action_fail), (s, action_fail)):
                    if pr > 0.0:
                        row[j] = row.get(j, 0.0) + pr
                trans[u][s] = row
    # success behaves exactly like the start pose
    for u in range(4):
        trans[u][success] = dict(trans[u][start_state])
    obs[success] = dict(obs[start_state])
    rewards = np.zeros(n)
    rewards[success] = 1.0
    start = np.zeros(n)
    start[start_state] = 1.0
    heading = "NESW"
    names = tuple(f"{r},{c}{heading[o]}" for (r, c) in cells for o in range(4)) + ("success",)
    return Pomdp(
        transitions=tuple(_csr(t, n) for t in trans),
        observations=_csr(obs, 8),
        rewards=rewards,
        start=start,
        state_names=names,
        action_names=MAZE_ACTIONS,
        observation_names=tuple(f"F{y & 1}L{(y >> 1) & 1}R{(y >> 2) & 1}" for y in range(8)),
    )


def pentagon_like() -> Pomdp:
    return maze_from_ascii(load_map("pentagon-like"))


# ---------------------------------------------------------------------------
# Small fixtures


def oracle_pomdp(seed: int) -> Pomdp:
    """Random 2-4 state, 2-action, 2-observation world with strictly positive rows."""
    rng = np.random.default_rng([seed, 0x0AC1E])
    n = int(rng.integers(2, 5))

    def rows(r, c):
        a = rng.uniform(0.05, 1.0, (r, c))
        return a / a.sum(axis=1, keepdims=True)

    return Pomdp(
        transitions=(sp.csr_matrix(rows(n, n)), sp.csr_matrix(rows(n, n))),
        observations=sp.csr_matrix(rows(n, 2)),
        rewards=rng.uniform(-1.0, 1.0, n),
    )


def constant_world(reward: float = 1.0, n_actions: int = 1, n_observations: int = 1) -> Pomdp:
    """One state, reward ``reward`` every step."""
    one = sp.csr_matrix(np.ones((1, 1)))
    obs = np.zeros((1, n_observations))
    obs[0, 0] = 1.0
    return Pomdp((one,) * n_actions, sp.csr_matrix(obs), [reward])


def chain_world(P, rewards, observations=None) -> Pomdp:
    """Single-action world with transition matrix ``P`` (a plain Markov chain)."""
    P = np.asarray(P, dtype=np.float64)
    obs = np.ones((P.shape[0], 1)) if observations is None else np.asarray(observations, dtype=np.float64)
    return Pomdp((sp.csr_matrix(P),), sp.csr_matrix(obs), rewards)

"""World models: sparse POMDP storage, the ``.pomdp`` text format, validation.

Transition and observation probabilities are kept as ``scipy.sparse`` CSR
matrices with sorted column indices and no explicit zeros.  Rewards are
state based, ``r(i)``.
"""

from __future__ import annotations

import math
import re
import warnings
from dataclasses import dataclass
from functools import cached_property
import numpy as np
import scipy.sparse as sp

__all__ = [
    "Pomdp",
    "Diagnostic",
    "PomdpSyntaxError",
    "PomdpSemanticError",
    "DiscountIgnoredWarning",
    "as_stochastic_csr",
    "parse_pomdp",
    "load_pomdp",
    "serialize_pomdp",
    "validate",
    "make_fully_observable",
]

#: Tolerance for row sums in model files.
INPUT_ROW_TOL = 1e-6
#: Tolerance for row sums of stored models.
STORED_ROW_TOL = 1e-9


class PomdpSyntaxError(ValueError):
    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class PomdpSemanticError(ValueError):
    pass


class DiscountIgnoredWarning(UserWarning):
    """The model file declares a discount; average reward is optimised instead."""


def as_stochastic_csr(matrix, shape: tuple[int, int] | None = None) -> sp.csr_matrix:
    """Canonical CSR form: float64, sorted indices, duplicates summed, zeros dropped."""
    m = sp.csr_matrix(matrix, shape=shape, dtype=np.float64)
    m.sum_duplicates()
    m.eliminate_zeros()
    m.sort_indices()
    return m


@dataclass(frozen=True, eq=False)
class Pomdp:
    """A finite POMDP with state-based rewards.

    Parameters
    ----------
    transitions
        One ``|S| x |S|`` row-stochastic CSR matrix per action, ``q(j|i,u)``.
    observations
        ``|S| x |Y|`` row-stochastic CSR matrix, ``nu(y|i)``.
    rewards
        Length ``|S|`` vector ``r(i)``.
    start
        Distribution of the initial world state.  Only the simulators use it;
        the average reward does not depend on it for ergodic chains.
    """

    transitions: tuple[sp.csr_matrix, ...]
    observations: sp.csr_matrix
    rewards: np.ndarray
    start: np.ndarray | None = None
    state_names: tuple[str, ...] | None = None
    action_names: tuple[str, ...] | None = None
    observation_names: tuple[str, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "transitions", tuple(as_stochastic_csr(q) for q in self.transitions))
        object.__setattr__(self, "observations", as_stochastic_csr(self.observations))
        r = np.array(self.rewards, dtype=np.float64).reshape(-1)
        r.setflags(write=False)
        object.__setattr__(self, "rewards", r)
        n = r.shape[0]
        if self.start is None:
            start = np.full(n, 1.0 / n) if n else np.zeros(0)
        else:
            start = np.array(self.start, dtype=np.float64).reshape(-1)
        start.setflags(write=False)
        object.__setattr__(self, "start", start)

    @property
    def n_states(self) -> int:
        return self.rewards.shape[0]

    @property
    def n_actions(self) -> int:
        return len(self.transitions)

    @property
    def n_observations(self) -> int:
        return self.observations.shape[1]

    @property
    def reward_bound(self) -> float:
        """``R = max_i |r(i)|``."""
        return float(np.max(np.abs(self.rewards))) if self.n_states else 0.0

    @cached_property
    def stacked_transitions(self) -> sp.csr_matrix:
        """All actions stacked vertically: row ``u*|S| + i`` holds ``q(.|i,u)``."""
        return as_stochastic_csr(sp.vstack(self.transitions, format="csr"))

    @cached_property
    def quads(self) -> "TransitionQuads":
        return TransitionQuads.from_model(self)

    def observation_matrix_dense(self) -> np.ndarray:
        return self.observations.toarray()


@dataclass(frozen=True)
class TransitionQuads:
    """Flat list of every non-zero ``nu(y|i) q(j|i,u)`` term.

    Each entry is one ``(i, y, u, j)`` combination with weight
    ``nu(y|i) * q(j|i,u)``, ordered by ``u`` then ``i`` then ``y`` then ``j``.
    This is the policy-independent part of the joint chain.
    """

    i: np.ndarray
    y: np.ndarray
    u: np.ndarray
    j: np.ndarray
    weight: np.ndarray

    @classmethod
    def from_model(cls, model: Pomdp) -> "TransitionQuads":
        nu = model.observations
        nu_rows = np.repeat(np.arange(model.n_states), np.diff(nu.indptr))
        parts = []
        for u, q in enumerate(model.transitions):
            counts = np.diff(q.indptr)[nu_rows]
            rep = np.repeat(np.arange(nu.nnz), counts)
            starts = np.repeat(q.indptr[nu_rows] - np.cumsum(counts) + counts, counts)
            qk = starts + np.arange(rep.shape[0])
            parts.append((
                nu_rows[rep],
                nu.indices[rep],
                np.full(rep.shape[0], u),
                q.indices[qk],
                nu.data[rep] * q.data[qk],
            ))
        cat = [np.concatenate([p[c] for p in parts]) for c in range(5)]
        idx = [a.astype(np.int64) for a in cat[:4]]
        return cls(*idx, cat[4])

    def __len__(self) -> int:
        return self.weight.shape[0]


@dataclass(frozen=True)
class Diagnostic:
    severity: str
    location: str
    message: str

    def __str__(self) -> str:
        return f"{self.severity}: {self.location}: {self.message}"


def _check_stochastic(m: sp.csr_matrix, name: str, n_rows: int, n_cols: int) -> list[Diagnostic]:
    if m.shape != (n_rows, n_cols):
        return [Diagnostic("error", name, f"shape {m.shape} != ({n_rows}, {n_cols})")]
    out = []
    rows = np.repeat(np.arange(n_rows), np.diff(m.indptr))
    same_row = rows[1:] == rows[:-1]
    for r in np.unique(rows[1:][same_row & (np.diff(m.indices) <= 0)]):
        out.append(Diagnostic("error", f"{name} row {r}", "column indices not strictly increasing"))
    finite = np.isfinite(m.data)
    for k in np.flatnonzero(~finite):
        out.append(Diagnostic("error", f"{name}[{rows[k]}, {m.indices[k]}]", "non-finite entry"))
    for k in np.flatnonzero(finite & (m.data < 0)):
        out.append(Diagnostic("error", f"{name}[{rows[k]}, {m.indices[k]}]", f"negative probability {m.data[k]!r}"))
    sums = np.bincount(rows[finite], weights=m.data[finite], minlength=n_rows)
    for r in np.flatnonzero(np.abs(sums - 1.0) > STORED_ROW_TOL):
        s = math.fsum(m.data[m.indptr[r]:m.indptr[r + 1]])
        if abs(s - 1.0) > STORED_ROW_TOL:
            out.append(Diagnostic("error", f"{name} row {r}", f"row sums to {s!r}, expected 1"))
    return out


def validate(model: Pomdp) -> list[Diagnostic]:
    """Report every violated model invariant.  An empty list means valid."""
    diags: list[Diagnostic] = []
    n = model.n_states
    if n == 0:
        diags.append(Diagnostic("error", "states", "model has no states"))
    if model.n_actions == 0:
        diags.append(Diagnostic("error", "actions", "model has no actions"))
    for u, q in enumerate(model.transitions):
        diags.extend(_check_stochastic(q, f"T(action {u})", n, n))
    diags.extend(_check_stochastic(model.observations, "O", n, model.observations.shape[1]))
    if not np.all(np.isfinite(model.rewards)):
        bad = np.flatnonzero(~np.isfinite(model.rewards))
        diags.append(Diagnostic("error", f"R state {int(bad[0])}", "reward is not finite"))
    start = model.start
    if start.shape != (n,):
        diags.append(Diagnostic("error", "start", f"length {start.shape[0]} != {n}"))
    elif np.any(start < 0) or abs(math.fsum(start) - 1.0) > STORED_ROW_TOL:
        diags.append(Diagnostic("error", "start", "not a probability distribution"))
    return diags


def make_fully_observable(model: Pomdp) -> Pomdp:
    """Copy of ``model`` whose observation is the world state itself."""
    n = model.n_states
    names = model.state_names
    return Pomdp(
        transitions=model.transitions,
        observations=sp.identity(n, format="csr"),
        rewards=model.rewards,
        start=model.start,
        state_names=names,
        action_names=model.action_names,
        observation_names=names,
    )


# ---------------------------------------------------------------------------
# .pomdp text format

_TOKEN_RE = re.compile(r"[^\s:]+|:")
_KEYWORDS = {"discount", "values", "states", "actions", "observations", "start", "T", "O", "R"}


@dataclass
class _Tok:
    text: str
    line: int
    col: int


def _tokenize(text: str) -> list[_Tok]:
    toks = []
    for ln, raw in enumerate(text.splitlines(), start=1):
        body = raw.split("#", 1)[0]
        for m in _TOKEN_RE.finditer(body):
            toks.append(_Tok(m.group(0), ln, m.start() + 1))
    return toks


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


class _Parser:
    def __init__(self, text: str):
        self.toks = _tokenize(text)
        self.pos = 0
        self.states: list[str] | None = None
        self.actions: list[str] | None = None
        self.obs: list[str] | None = None
        self.T: list[dict] | None = None
        self.O: list[dict] | None = None
        self.r: np.ndarray | None = None
        self.start: np.ndarray | None = None
        self.last = _Tok("", 1, 1)

    # token helpers
    def peek(self) -> _Tok | None:
        return self.toks[self.pos] if self.pos < len(self.toks) else None

    def next(self) -> _Tok:
        tok = self.peek()
        if tok is None:
            raise PomdpSyntaxError("unexpected end of file", self.last.line, self.last.col)
        self.pos += 1
        self.last = tok
        return tok

    def expect_colon(self):
        tok = self.next()
        if tok.text != ":":
            raise PomdpSyntaxError(f"expected ':' but found {tok.text!r}", tok.line, tok.col)

    def at_statement_start(self) -> bool:
        tok = self.peek()
        if tok is None:
            return True
        if tok.text in _KEYWORDS:
            nxt = self.toks[self.pos + 1] if self.pos + 1 < len(self.toks) else None
            return nxt is not None and nxt.text == ":"
        return False

    def numbers(self, count: int, what: str) -> np.ndarray:
        vals = []
        for _ in range(count):
            tok = self.next()
            if not _is_number(tok.text):
                raise PomdpSyntaxError(f"expected a number in {what}, found {tok.text!r}", tok.line, tok.col)
            vals.append(float(tok.text))
        return np.array(vals)

    # identifier resolution
    def resolve(self, tok: _Tok, names: list[str] | None, kind: str, wildcard=True) -> list[int]:
        if names is None:
            raise PomdpSyntaxError(f"{kind}s used before declaration", tok.line, tok.col)
        if tok.text == "*" and wildcard:
            return list(range(len(names)))
        if tok.text.isdigit():
            k = int(tok.text)
            if k < len(names):
                return [k]
        elif tok.text in names:
            return [names.index(tok.text)]
        raise PomdpSemanticError(f"line {tok.line}, column {tok.col}: unknown {kind} {tok.text!r}")

    # statements
    def parse(self):
        while self.peek() is not None:
            tok = self.next()
            if tok.text not in _KEYWORDS:
                raise PomdpSyntaxError(f"unexpected token {tok.text!r}", tok.line, tok.col)
            self.expect_colon()
            getattr(self, f"stmt_{tok.text}")(tok)

    def stmt_discount(self, kw):
        val = self.numbers(1, "discount")[0]
        warnings.warn(
            f"discount {val} ignored: the long-term average reward is optimised",
            DiscountIgnoredWarning,
            stacklevel=4,
        )

    def stmt_values(self, kw):
        tok = self.next()
        if tok.text != "reward":
            raise PomdpSemanticError(f"line {tok.line}: only 'values: reward' is supported, got {tok.text!r}")

    def _decl(self, kw) -> list[str]:
        tok = self.next()
        if tok.text.isdigit():
            return [str(k) for k in range(int(tok.text))]
        names = [tok.text]
        while not self.at_statement_start():
            names.append(self.next().text)
        if len(set(names)) != len(names):
            raise PomdpSemanticError(f"line {kw.line}: duplicate {kw.text} names")
        return names

    def _alloc(self):
        if self.states is None or self.actions is None or self.obs is None:
            return
        if self.T is None:
            # sparse rows: T[a][s] and O[a][s] map a column to its probability
            a = len(self.actions)
            self.T = [{} for _ in range(a)]
            self.O = [{} for _ in range(a)]
            self.r = np.zeros(len(self.states))

    def stmt_states(self, kw):
        self.states = self._decl(kw)
        self._alloc()

    def stmt_actions(self, kw):
        self.actions = self._decl(kw)
        self._alloc()

    def stmt_observations(self, kw):
        self.obs = self._decl(kw)
        self._alloc()

    def _need_model(self, kw):
        if self.T is None:
            raise PomdpSyntaxError(
                "states, actions and observations must be declared first", kw.line, kw.col
            )

    def stmt_start(self, kw):
        if self.states is None:
            raise PomdpSyntaxError("states must be declared before start", kw.line, kw.col)
        n = len(self.states)
        tok = self.peek()
        if tok is not None and tok.text == "uniform":
            self.next()
            self.start = np.full(n, 1.0 / n)
        elif tok is not None and not _is_number(tok.text):
            s = self.resolve(self.next(), self.states, "state", wildcard=False)[0]
            self.start = np.zeros(n)
            self.start[s] = 1.0
        else:
            self.start = self.numbers(n, "start distribution")

    def _read_matrix_or_keyword(self, n_rows: int, n_cols: int, what: str, square: bool) -> list[dict]:
        tok = self.peek()
        if tok is not None and tok.text == "uniform":
            self.next()
            return [dict.fromkeys(range(n_cols), 1.0 / n_cols) for _ in range(n_rows)]
        if tok is not None and tok.text == "identity":
            self.next()
            if not square:
                raise PomdpSemanticError(f"line {tok.line}: identity is only valid for transitions")
            return [{k: 1.0} for k in range(n_rows)]
        mat = self.numbers(n_rows * n_cols, what).reshape(n_rows, n_cols)
        return [_row_dict(row) for row in mat]

    def _read_row(self, n: int, what: str) -> dict:
        tok = self.peek()
        if tok is not None and tok.text == "uniform":
            self.next()
            return dict.fromkeys(range(n), 1.0 / n)
        return _row_dict(self.numbers(n, what))

    def _targets(self, kw):
        """Parse the ``<action> [: <state> [: <target>]]`` prefix of T/O lines."""
        parts = [self.next()]
        while True:
            tok = self.peek()
            if tok is not None and tok.text == ":":
                self.next()
                parts.append(self.next())
            else:
                return parts

    def stmt_T(self, kw):
        self._need_model(kw)
        parts = self._targets(kw)
        acts = self.resolve(parts[0], self.actions, "action")
        n = len(self.states)
        if len(parts) == 1:
            mat = self._read_matrix_or_keyword(n, n, "transition matrix", square=True)
            for a in acts:
                self.T[a] = {s: dict(row) for s, row in enumerate(mat)}
        elif len(parts) == 2:
            src = self.resolve(parts[1], self.states, "state")
            row = self._read_row(n, "transition row")
            for a in acts:
                for s in src:
                    self.T[a][s] = dict(row)
        elif len(parts) == 3:
            src = self.resolve(parts[1], self.states, "state")
            dst = self.resolve(parts[2], self.states, "state")
            p = self.numbers(1, "transition probability")[0]
            for a in acts:
                for s in src:
                    row = self.T[a].setdefault(s, {})
                    for d in dst:
                        row[d] = p
        else:
            t = parts[3]
            raise PomdpSyntaxError("too many ':' fields in T", t.line, t.col)

    def stmt_O(self, kw):
        self._need_model(kw)
        parts = self._targets(kw)
        acts = self.resolve(parts[0], self.actions, "action")
        n, y = len(self.states), len(self.obs)
        if len(parts) == 1:
            mat = self._read_matrix_or_keyword(n, y, "observation matrix", square=False)
            for a in acts:
                self.O[a] = {s: dict(row) for s, row in enumerate(mat)}
        elif len(parts) == 2:
            st = self.resolve(parts[1], self.states, "state")
            row = self._read_row(y, "observation row")
            for a in acts:
                for s in st:
                    self.O[a][s] = dict(row)
        elif len(parts) == 3:
            st = self.resolve(parts[1], self.states, "state")
            ob = self.resolve(parts[2], self.obs, "observation")
            p = self.numbers(1, "observation probability")[0]
            for a in acts:
                for s in st:
                    row = self.O[a].setdefault(s, {})
                    for o in ob:
                        row[o] = p
        else:
            t = parts[3]
            raise PomdpSyntaxError("too many ':' fields in O", t.line, t.col)

    def stmt_R(self, kw):
        self._need_model(kw)
        parts = self._targets(kw)
        if len(parts) != 4:
            raise PomdpSyntaxError(
                "expected 'R: <action> : <state> : <end-state> : <obs> <value>'", kw.line, kw.col
            )
        for pos, label in ((0, "action"), (2, "end state"), (3, "observation")):
            if parts[pos].text != "*":
                raise PomdpSemanticError(
                    f"line {parts[pos].line}: rewards must be state based; "
                    f"{label} must be '*', got {parts[pos].text!r}"
                )
        st = self.resolve(parts[1], self.states, "state")
        val = self.numbers(1, "reward")[0]
        self.r[st] = val

    def build(self) -> Pomdp:
        if self.T is None:
            raise PomdpSyntaxError("missing states/actions/observations declarations", self.last.line, self.last.col)
        n, n_a = len(self.states), len(self.actions)
        trans = tuple(
            _rows_to_csr(_normalized([self.T[a].get(s, {}) for s in range(n)], f"T action {self.actions[a]!r}"), n)
            for a in range(n_a)
        )
        # Observation rows not mentioned for an action inherit the rows of the
        # actions that did specify them.
        obs_rows = []
        for s in range(n):
            given = [a for a in range(n_a) if s in self.O[a]]
            ref = self.O[given[0]][s] if given else {}
            for a in given[1:]:
                row = self.O[a][s]
                if any(abs(row.get(k, 0.0) - ref.get(k, 0.0)) > 1e-9 for k in set(row) | set(ref)):
                    raise PomdpSemanticError(
                        f"observation row for state {self.states[s]!r} differs between actions "
                        f"{self.actions[given[0]]!r} and {self.actions[a]!r}; "
                        "observations must not depend on the action"
                    )
            obs_rows.append(ref)
        obs = _rows_to_csr(_normalized(obs_rows, "O"), len(self.obs))
        start = self.start
        if start is not None:
            start = np.zeros(n)
            for k, v in _normalized([_row_dict(self.start)], "start")[0].items():
                start[k] = v
        return Pomdp(
            transitions=trans,
            observations=obs,
            rewards=self.r.copy(),
            start=start,
            state_names=tuple(self.states),
            action_names=tuple(self.actions),
            observation_names=tuple(self.obs),
        )


def _row_dict(values) -> dict:
    return {k: float(v) for k, v in enumerate(values) if v != 0.0}


def _normalized(rows: list[dict], what: str) -> list[dict]:
    """Check sparse probability rows and rescale those within input tolerance of 1."""
    for r, row in enumerate(rows):
        for c in sorted(row):
            if row[c] < 0:
                raise PomdpSemanticError(f"{what}: negative probability at row {r}, column {c}")
    out = []
    for k, row in enumerate(rows):
        s = math.fsum(row.values())
        if abs(s - 1.0) > INPUT_ROW_TOL:
            raise PomdpSemanticError(f"{what}: row {k} sums to {s!r}, expected 1")
        if abs(s - 1.0) > 1e-12:
            row = {c: v / s for c, v in row.items()}
        out.append(row)
    return out


def _rows_to_csr(rows: list[dict], n_cols: int) -> sp.csr_matrix:
    indptr, indices, data = [0], [], []
    for row in rows:
        for c in sorted(row):
            if row[c] != 0.0:
                indices.append(c)
                data.append(row[c])
        indptr.append(len(indices))
    return sp.csr_matrix((np.array(data, dtype=np.float64), np.array(indices, dtype=np.int64),
                          np.array(indptr, dtype=np.int64)), shape=(len(rows), n_cols))


def parse_pomdp(text: str) -> Pomdp:
    """Parse ``.pomdp`` file content.

    Raises
    ------
    PomdpSyntaxError
        Malformed input; carries ``line`` and ``column``.
    PomdpSemanticError
        Unknown identifiers, rows not summing to one, action-dependent
        rewards or observations.
    """
    p = _Parser(text)
    p.parse()
    return p.build()


def load_pomdp(path) -> Pomdp:
    with open(path, encoding="utf-8") as fh:
        return parse_pomdp(fh.read())


def serialize_pomdp(model: Pomdp, comment: str | None = None) -> str:
    """Write ``model`` in the ``.pomdp`` format accepted by :func:`parse_pomdp`.

    Probabilities are written with ``repr`` so parsing the output reproduces
    the stored matrices exactly.
    """
    lines = []
    if comment:
        lines.extend(f"# {c}" for c in comment.splitlines())
    lines.append("values: reward")
    lines.append(f"states: {model.n_states}")
    lines.append(f"actions: {model.n_actions}")
    lines.append(f"observations: {model.n_observations}")
    start = model.start
    if not np.all(start == 1.0 / model.n_states):
        lines.append("start: " + " ".join(repr(float(p)) for p in start))
    lines.append("")
    for u, q in enumerate(model.transitions):
        for i in range(model.n_states):
            for k in range(q.indptr[i], q.indptr[i + 1]):
                lines.append(f"T: {u} : {i} : {q.indices[k]} {float(q.data[k])!r}")
    nu = model.observations
    for i in range(model.n_states):
        for k in range(nu.indptr[i], nu.indptr[i + 1]):
            lines.append(f"O: * : {i} : {nu.indices[k]} {float(nu.data[k])!r}")
    for i, r in enumerate(model.rewards):
        if r != 0.0:
            lines.append(f"R: * : {i} : * : * {float(r)!r}")
    return "\n".join(lines) + "\n"

"""Polak-Ribière conjugate-gradient ascent on the average reward.

Gradient engines are wrapped as ``fn(params, seed) -> (eta, grad)``.  The
line search brackets a sign change of the directional derivative by
geometric growth and refines with a secant step on the derivative, which is
the zero of the quadratic model of ``eta`` along the search direction.
"""

from __future__ import annotations

import csv
import io
import os
import time
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from . import estimators, gamp
from .fsc import FscPolicy
from .model import Pomdp

ENGINES = ("gamp", "exact", "istate", "exp", "belief")
STOCHASTIC = {"istate", "exp", "belief"}
HISTORY_FIELDS = ("iter", "eta", "grad_norm", "step", "wall_secs", "world_steps")


class LineSearchWarning(UserWarning):
    pass


def polak_ribiere_direction(g_new, g_prev=None, d_prev=None) -> np.ndarray:
    """``g_new + max(beta_PR, 0) d_prev``; plain ``g_new`` on the first call."""
    g_new = np.asarray(g_new, dtype=np.float64)
    if g_prev is None or d_prev is None:
        return g_new.copy()
    g_prev = np.asarray(g_prev, dtype=np.float64)
    denom = float(g_prev @ g_prev)
    if denom == 0.0:
        return g_new.copy()
    beta = float(g_new @ (g_new - g_prev)) / denom
    return g_new + max(beta, 0.0) * np.asarray(d_prev, dtype=np.float64)


@dataclass
class LineSearchConfig:
    initial_step: float = 1.0
    growth: float = 2.0
    max_evals: int = 15
    refinements: int = 1
    normalize: bool = True
    max_step: float | None = None

    def __post_init__(self):
        if self.initial_step <= 0 or self.growth <= 1 or self.max_evals < 1 or self.refinements < 0:
            raise ValueError(f"invalid line search settings {self}")
        if self.max_step is not None and self.max_step < self.initial_step:
            raise ValueError("max_step must be at least initial_step")


class LineSearchResult(NamedTuple):
    step: float
    eta: float
    grad: np.ndarray | None
    evals: int


def line_search(fn: Callable[[np.ndarray], tuple[float, np.ndarray]], x, d, settings: LineSearchConfig | None = None,
                eta0: float | None = None, g0=None) -> LineSearchResult:
    """Step along ``d`` from ``x`` maximising ``eta``.

    ``fn(x) -> (eta, grad)``.  Trial points are ``x + s d / ||d||``, so the
    initial step is a distance in parameter space whatever the gradient
    scale.  Returns the chosen multiple of ``d`` (not of the unit vector):
    the evaluated point with the highest ``eta``, or 0 when none beats
    ``eta0`` (if given).
    """
    settings = settings or LineSearchConfig()
    x = np.asarray(x, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    norm = float(np.linalg.norm(d))
    if norm == 0.0:
        return LineSearchResult(0.0, eta0 if eta0 is not None else float("nan"), g0, 0)
    if settings.normalize:
        d = d / norm
    else:
        norm = 1.0
    evals = []

    def probe(s):
        try:
            eta, g = fn(x + s * d)
        except gamp.ConvergenceError:
            # the chain is (numerically) not ergodic out here: treat as an overshoot
            evals.append((s, -np.inf, None, -np.inf))
            return -np.inf
        slope = float(np.asarray(g) @ d)
        evals.append((s, eta, g, slope))
        return slope

    lo, slope_lo = 0.0, float(np.asarray(g0) @ d) if g0 is not None else None
    s = settings.initial_step
    hi = slope_hi = None
    capped = False
    while len(evals) < settings.max_evals:
        slope = probe(s)
        if slope > 0:
            lo, slope_lo = s, slope
            if settings.max_step is not None and s >= settings.max_step:
                capped = True
                break
            s *= settings.growth
            if settings.max_step is not None:
                s = min(s, settings.max_step)
        else:
            hi, slope_hi = s, slope
            break
    if hi is None:
        if not capped:
            warnings.warn(f"no sign change of the directional derivative within {settings.max_evals} evaluations",
                          LineSearchWarning, stacklevel=2)
    else:
        for _ in range(settings.refinements):
            if len(evals) >= settings.max_evals:
                break
            if slope_lo is None:
                # slope at 0 unknown: fall back to bisection
                s = 0.5 * (lo + hi)
            else:
                s = lo + (hi - lo) * slope_lo / (slope_lo - slope_hi) if np.isfinite(slope_hi) else 0.5 * (lo + hi)
                if not lo < s < hi:
                    break
            slope = probe(s)
            if slope > 0:
                lo, slope_lo = s, slope
            else:
                hi, slope_hi = s, slope
    best = max(evals, key=lambda e: e[1])
    if hi is None:
        best = evals[-1]
    if best[2] is None or (eta0 is not None and best[1] < eta0):
        return LineSearchResult(0.0, eta0, g0, len(evals))
    return LineSearchResult(best[0] / norm, best[1], best[2], len(evals))


@dataclass
class OptimConfig:
    """Training settings.  ``grad_tol`` is an infinity-norm threshold."""

    engine: str = "gamp"
    max_iterations: int = 100
    grad_tol: float = 1e-6
    line_search: LineSearchConfig = field(default_factory=LineSearchConfig)
    restart_every: int | None = None
    beta: float = 0.99
    steps: int = 100_000
    workers: int = 1
    seed: int = 0
    fixed_seed: bool = False
    gamp: gamp.GampConfig = field(default_factory=gamp.GampConfig)
    reject_decrease: bool = True

    def __post_init__(self):
        if self.engine not in ENGINES:
            raise ValueError(f"unknown engine {self.engine!r}; choose from {', '.join(ENGINES)}")
        if self.max_iterations < 0 or self.grad_tol < 0 or self.steps < 1 or self.workers < 1:
            raise ValueError("max_iterations, grad_tol, steps and workers must be positive")
        if not 0.0 <= self.beta < 1.0:
            raise ValueError(f"beta must lie in [0, 1), got {self.beta}")
        if isinstance(self.line_search, dict):
            self.line_search = LineSearchConfig(**self.line_search)
        if isinstance(self.gamp, dict):
            self.gamp = gamp.GampConfig(**self.gamp)

    @property
    def stochastic(self) -> bool:
        return self.engine in STOCHASTIC

    def to_dict(self) -> dict:
        return asdict(self)


class HistoryRecord(NamedTuple):
    iter: int
    eta: float
    grad_norm: float
    step: float
    wall_secs: float
    world_steps: int


@dataclass
class TrainHistory:
    records: list[HistoryRecord] = field(default_factory=list)
    stop_reason: str = ""

    def append(self, rec: HistoryRecord) -> None:
        if self.records and rec.iter <= self.records[-1].iter:
            raise ValueError("history iterations must increase")
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def etas(self) -> np.ndarray:
        return np.array([r.eta for r in self.records])

    @property
    def final_eta(self) -> float:
        return self.records[-1].eta

    def secs_to(self, threshold: float) -> float | None:
        for r in self.records:
            if r.eta >= threshold:
                return r.wall_secs
        return None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for r in self.records:
            w.writerow([r.iter, repr(r.eta), repr(r.grad_norm), repr(r.step), repr(r.wall_secs), r.world_steps])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "TrainHistory":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or tuple(rows[0]) != HISTORY_FIELDS:
            raise ValueError("not a training history")
        hist = cls()
        for row in rows[1:]:
            hist.append(HistoryRecord(int(row[0]), float(row[1]), float(row[2]), float(row[3]),
                                      float(row[4]), int(row[5])))
        return hist


def make_engine(source, policy, config: OptimConfig) -> Callable[[np.ndarray, int], tuple[float, np.ndarray]]:
    """Wrap the configured engine as ``fn(params, seed) -> (eta, grad)``."""
    engine = config.engine
    model = source if isinstance(source, Pomdp) else getattr(source, "model", None)
    if engine in ("gamp", "exact", "belief") and model is None:
        raise ValueError(f"engine {engine!r} needs a model, not a bare step source")
    if engine == "belief" and not isinstance(policy, estimators.BeliefPolicy):
        raise ValueError("engine 'belief' trains a BeliefPolicy")
    if engine != "belief" and not isinstance(policy, FscPolicy):
        raise ValueError(f"engine {engine!r} trains an FscPolicy")

    def fn(params, seed):
        p = policy.with_params(params)
        if engine == "gamp":
            est = gamp.gamp_gradient(model, p, config.gamp)
        elif engine == "exact":
            est = gamp.exact_grad_oracle(model, p)
        elif engine == "istate":
            est = estimators.istate_gpomdp(source, p, config.beta, config.steps, seed, config.workers)
        elif engine == "exp":
            est = estimators.exp_gpomdp(source, p, config.beta, config.steps, seed, config.workers)
        else:
            est = estimators.belief_policy_gpomdp(model, p, config.beta, config.steps, seed, config.workers)
        return est.eta, est.grad

    return fn


def _iteration_seed(base: int, it: int) -> int:
    return int(np.random.SeedSequence([int(base), int(it)]).generate_state(1)[0])


def _save_atomic(policy, path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(policy.dumps())
    os.replace(tmp, path)


def train(source, policy, config: OptimConfig | None = None, checkpoint=None,
          callback: Callable[[HistoryRecord], None] | None = None, engine_fn=None) -> TrainHistory:
    """Conjugate-gradient ascent; updates ``policy`` in place and returns the history.

    ``source`` is a :class:`Pomdp` (all engines) or a step source (``istate``
    and ``exp``).  Stochastic engines use one seed per iteration, shared by
    every trial point of that iteration's line search.
    """
    config = config or OptimConfig()
    fn = engine_fn or make_engine(source, policy, config)
    t0 = time.perf_counter()
    history = TrainHistory()
    steps_per_eval = config.steps if config.stochastic else 0
    world_steps = 0

    def seed_for(it):
        return config.seed if config.fixed_seed else _iteration_seed(config.seed, it)

    def record(it, eta, g, step):
        rec = HistoryRecord(it, float(eta), float(np.max(np.abs(g))) if g.size else 0.0, float(step),
                            time.perf_counter() - t0, world_steps)
        history.append(rec)
        if checkpoint is not None:
            _save_atomic(policy, checkpoint)
        if callback is not None:
            callback(rec)

    x = policy.params()
    eta, g = fn(x, seed_for(0))
    world_steps += steps_per_eval
    record(0, eta, g, 0.0)
    d = g_prev = None
    since_restart = 0
    restart_every = config.restart_every or max(1, x.size)
    for it in range(1, config.max_iterations + 1):
        seed = seed_for(it)
        if config.stochastic and it > 1:
            # fresh sample at the current point so the search compares like with like
            eta, g = fn(x, seed)
            world_steps += steps_per_eval
        if not config.stochastic and np.max(np.abs(g), initial=0.0) < config.grad_tol:
            history.stop_reason = "gradient below tolerance"
            break
        if d is None or since_restart >= restart_every:
            d, since_restart = g.copy(), 0
        else:
            d = polak_ribiere_direction(g, g_prev, d)
        if float(g @ d) <= 0:
            d, since_restart = g.copy(), 0
        ls = line_search(lambda p: fn(p, seed), x, d, config.line_search,
                         eta0=eta if config.reject_decrease else None, g0=g)
        world_steps += ls.evals * steps_per_eval
        step = ls.step
        if step == 0.0 and since_restart > 0:
            # conjugate direction failed: retry once along the gradient
            d, since_restart = g.copy(), 0
            ls = line_search(lambda p: fn(p, seed), x, d, config.line_search,
                             eta0=eta if config.reject_decrease else None, g0=g)
            world_steps += ls.evals * steps_per_eval
            step = ls.step
        if step > 0.0:
            x = x + step * d
            policy.set_params(x)
            g_prev, eta, g = g, ls.eta, ls.grad
            since_restart += 1
        record(it, eta, g, step)
        if step == 0.0 and not config.stochastic:
            history.stop_reason = "no ascent step found"
            break
    else:
        history.stop_reason = "iteration limit"
    policy.set_params(x)
    return history

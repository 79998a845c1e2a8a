"""Command-line front end.

Exit codes: 0 success, 1 domain failure (diagnostics, thresholds), 2 usage
or environment error.  Settings come from flags, then an optional JSON
config file (``--config``), then defaults; the effective settings are
written to ``config.echo`` next to the outputs.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
import warnings

import numpy as np

from . import envs, estimators, gamp, optim
from .fsc import FscPolicy, dense_topology, sparse_topology, symmetric_policy, TopologyError
from .model import (PomdpSemanticError, PomdpSyntaxError, Pomdp, load_pomdp, serialize_pomdp,
                    validate)

ENGINES = optim.ENGINES[:1] + optim.ENGINES[2:]  # gamp, istate, exp, belief
DEFAULTS = {
    "model": None,
    "env": None,
    "engine": "gamp",
    "istates": 1,
    "outdegree": None,
    "topology_seed": 0,
    "init_scale": 0.0,
    "policy": None,
    "beta": 0.99,
    "steps": 100_000,
    "workers": 1,
    "seed": 0,
    "out": ".",
    "threshold": None,
    "iterations": 100,
    "grad_tol": 1e-6,
    "eps": 1e-4,
    "damping": 0.0,
    "initial_step": 1.0,
    "refinements": 1,
    "max_step": None,
    "symmetric": False,
    "grid": "10,50,100,500",
}


FD_ABS_FLOOR = 1e-9


class UsageError(Exception):
    pass


class DomainError(Exception):
    pass


# ---------------------------------------------------------------------------
# argument handling


def _common(p: argparse.ArgumentParser, *, policy=True, engine=True, sim=True, out=True):
    src = p.add_argument_group("model source")
    src.add_argument("--model", help="POMDP file")
    src.add_argument("--env", help="builtin: heaven-hell, factory, maze[:<map>], oracle:<seed>, constant")
    p.add_argument("--config", help="JSON file of default settings (flags win)")
    if engine:
        p.add_argument("--engine", choices=ENGINES)
    if policy:
        p.add_argument("--istates", type=int, help="number of I-states |G|")
        p.add_argument("--outdegree", type=int, help="successors per I-state (default: dense)")
        p.add_argument("--topology-seed", type=int)
        p.add_argument("--init-scale", type=float, help="uniform(-s, s) initial parameters")
        p.add_argument("--policy", help="start from this checkpoint")
    if sim:
        p.add_argument("--beta", type=float)
        p.add_argument("--steps", type=int, help="simulation steps T")
        p.add_argument("--workers", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--eps", type=float, help="GAMP power-method and series tolerance")
        p.add_argument("--damping", type=float, help="GAMP damping a in [0, 1)")
    if out:
        p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fscpg", description="Policy-gradient training of finite state controllers.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a POMDP file")
    p.add_argument("path")

    p = sub.add_parser("grad", help="estimate one gradient")
    _common(p)

    p = sub.add_parser("gradcheck", help="compare gradients with finite differences and the exact oracle")
    _common(p, engine=False, sim=False)
    p.add_argument("--symmetric", action="store_true", default=None,
                   help="use the I-state-symmetric dense construction")
    p.add_argument("--grid", help="comma-separated series lengths")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("train", help="conjugate-gradient training")
    _common(p)
    p.add_argument("--iterations", type=int)
    p.add_argument("--grad-tol", type=float)
    p.add_argument("--threshold", type=float, help="report time to reach this eta")
    p.add_argument("--initial-step", type=float)
    p.add_argument("--refinements", type=int)
    p.add_argument("--max-step", type=float, help="cap on the parameter-space length of one step")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _common(p, engine=False)

    p = sub.add_parser("export", help="write a model in the POMDP file format")
    _common(p, policy=False, engine=False, sim=False)

    p = sub.add_parser("serve-env", help="serve a model over the step protocol on stdin/stdout")
    _common(p, policy=False, engine=False, sim=False, out=False)
    return parser


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        try:
            with open(args.config, encoding="utf-8") as fh:
                loaded = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        unknown = set(loaded) - set(DEFAULTS)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
        cfg.update(loaded)
    for key, val in vars(args).items():
        if key in DEFAULTS and val is not None:
            cfg[key] = val
    cfg["command"] = args.command
    _check(cfg)
    return cfg


def _check(cfg: dict) -> None:
    cmd = cfg["command"]
    if cmd in ("grad", "train", "eval") and cfg["steps"] < 1:
        raise UsageError("--steps must be >= 1")
    if cfg["workers"] < 1:
        raise UsageError("--workers must be >= 1")
    if not 0.0 <= cfg["beta"] < 1.0:
        raise UsageError("--beta must lie in [0, 1)")
    if cfg["istates"] < 1:
        raise UsageError("--istates must be >= 1")
    if cfg["eps"] <= 0:
        raise UsageError("--eps must be positive")
    if not 0.0 <= cfg["damping"] < 1.0:
        raise UsageError("--damping must lie in [0, 1)")
    if cfg["max_step"] is not None and cfg["max_step"] < cfg["initial_step"]:
        raise UsageError("--max-step must be at least --initial-step")
    if cmd in ("grad", "train") and cfg["engine"] not in ENGINES:
        raise UsageError(f"unknown engine {cfg['engine']!r}")
    if cfg["model"] is None and cfg["env"] is None:
        raise UsageError("give --model or --env")
    if cfg["model"] is not None and cfg["env"] is not None:
        raise UsageError("give only one of --model and --env")


def load_source(cfg: dict) -> Pomdp:
    if cfg["model"] is not None:
        try:
            return load_pomdp(cfg["model"])
        except OSError as exc:
            raise UsageError(f"cannot read {cfg['model']}: {exc}") from exc
        except (PomdpSyntaxError, PomdpSemanticError) as exc:
            raise DomainError(f"{cfg['model']}: {exc}") from exc
    name = cfg["env"]
    if name == "heaven-hell":
        return envs.heaven_hell()
    if name == "factory":
        return envs.factory()
    if name == "constant":
        return envs.constant_world(1.0, n_actions=2)
    if name == "maze" or name.startswith("maze:"):
        _, _, path = name.partition(":")
        try:
            return envs.maze_from_ascii(envs.load_map(path or "pentagon-like"))
        except (OSError, envs.MapError) as exc:
            raise UsageError(f"cannot load maze {path!r}: {exc}") from exc
    if name.startswith("oracle:"):
        try:
            return envs.oracle_pomdp(int(name.partition(":")[2]))
        except ValueError as exc:
            raise UsageError(f"bad oracle seed in {name!r}") from exc
    raise UsageError(f"unknown env {name!r}")


def load_checkpoint(path: str):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise UsageError(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        if text.startswith("fscpg-belief"):
            return estimators.BeliefPolicy.loads(text)
        return FscPolicy.loads(text)
    except (ValueError, IndexError, KeyError) as exc:
        raise UsageError(f"{path}: not a valid checkpoint ({exc})") from exc


def make_policy(cfg: dict, model: Pomdp):
    if cfg["policy"]:
        policy = load_checkpoint(cfg["policy"])
    elif cfg["command"] in ("grad", "train") and cfg["engine"] == "belief":
        policy = estimators.BeliefPolicy.for_model(model)
    else:
        n, k = cfg["istates"], cfg["outdegree"]
        try:
            topo = dense_topology(n) if k is None or k == n else sparse_topology(n, k, cfg["topology_seed"])
        except (ValueError, TopologyError) as exc:
            raise UsageError(str(exc)) from exc
        policy = FscPolicy(topo, model.n_observations, model.n_actions, seed=cfg["topology_seed"])
        if cfg["init_scale"] > 0:
            policy.randomize(cfg["init_scale"], cfg["topology_seed"])
    check_compatible(policy, model)
    return policy


def check_compatible(policy, model: Pomdp) -> None:
    try:
        if isinstance(policy, estimators.BeliefPolicy):
            if policy.weights.shape != (model.n_actions, model.n_states):
                raise ValueError(f"belief policy has shape {policy.weights.shape}, model needs "
                                 f"{(model.n_actions, model.n_states)}")
        else:
            policy.check_dimensions(model.n_observations, model.n_actions)
    except ValueError as exc:
        raise UsageError(f"dimension mismatch: {exc}") from exc


def _outdir(cfg: dict) -> str:
    os.makedirs(cfg["out"], exist_ok=True)
    return cfg["out"]


def write_echo(cfg: dict) -> None:
    with open(os.path.join(_outdir(cfg), "config.echo"), "w", encoding="utf-8") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _gamp_config(cfg: dict) -> gamp.GampConfig:
    return gamp.GampConfig(eps_pi=cfg["eps"], eps_x=cfg["eps"], damping=cfg["damping"])


def _optim_config(cfg: dict) -> optim.OptimConfig:
    return optim.OptimConfig(
        engine=cfg["engine"], max_iterations=cfg["iterations"], grad_tol=cfg["grad_tol"],
        beta=cfg["beta"], steps=cfg["steps"], workers=cfg["workers"], seed=cfg["seed"],
        gamp=_gamp_config(cfg),
        line_search=optim.LineSearchConfig(initial_step=cfg["initial_step"], refinements=cfg["refinements"],
                                          max_step=cfg["max_step"]),
    )


# ---------------------------------------------------------------------------
# subcommands


def cmd_validate(args) -> int:
    try:
        with open(args.path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        print(f"error: cannot read {args.path}: {exc}", file=sys.stderr)
        return 2
    from .model import parse_pomdp

    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            model = parse_pomdp(text)
    except PomdpSyntaxError as exc:
        print(f"{args.path}:{exc.line}:{exc.column}: error: {exc}", file=sys.stderr)
        return 1
    except PomdpSemanticError as exc:
        print(f"{args.path}: error: {exc}", file=sys.stderr)
        return 1
    diags = validate(model)
    for d in diags:
        print(f"{args.path}: {d}", file=sys.stderr)
    return 1 if diags else 0


def cmd_grad(cfg: dict) -> int:
    model = load_source(cfg)
    policy = make_policy(cfg, model)
    engine = cfg["engine"]
    if engine == "gamp":
        est = gamp.gamp_gradient(model, policy, _gamp_config(cfg))
    elif engine == "istate":
        est = estimators.istate_gpomdp(model, policy, cfg["beta"], cfg["steps"], cfg["seed"], cfg["workers"])
    elif engine == "exp":
        est = estimators.exp_gpomdp(model, policy, cfg["beta"], cfg["steps"], cfg["seed"], cfg["workers"])
    else:
        est = estimators.belief_policy_gpomdp(model, policy, cfg["beta"], cfg["steps"], cfg["seed"], cfg["workers"])
    out = _outdir(cfg)
    write_echo(cfg)
    with open(os.path.join(out, "grad.csv"), "w", encoding="utf-8") as fh:
        fh.write(est.dumps())
    print(f"eta {est.eta!r}")
    print(f"grad_inf_norm {float(np.max(np.abs(est.grad), initial=0.0))!r}")
    return 0


def _fd_gradient(model, policy, h=1e-5) -> np.ndarray:
    x = policy.params()
    out = np.empty_like(x)
    for n in range(x.size):
        e = np.zeros_like(x)
        e[n] = h
        out[n] = (gamp.exact_eta(model, policy.with_params(x + e)) - gamp.exact_eta(model, policy.with_params(x - e))) / (2 * h)
    return out


def cmd_gradcheck(cfg: dict) -> int:
    model = load_source(cfg)
    n = cfg["istates"]
    if model.n_states * n > gamp.DENSE_GUARD:
        print(f"error: joint size {model.n_states * n} exceeds the dense limit {gamp.DENSE_GUARD}; "
              "use a smaller model or fewer I-states", file=sys.stderr)
        return 2
    if cfg["symmetric"]:
        policy = symmetric_policy(model.n_observations, model.n_actions, n, seed=cfg["seed"])
    else:
        policy = make_policy(cfg, model)
        if not cfg["policy"] and cfg["init_scale"] == 0:
            policy.randomize(1.0, cfg["seed"])
    try:
        grid = [int(v) for v in str(cfg["grid"]).split(",")]
    except ValueError as exc:
        raise UsageError(f"bad --grid {cfg['grid']!r}") from exc
    exact = gamp.exact_grad_oracle(model, policy)
    fd = _fd_gradient(model, policy)
    # relative to the largest component, with an absolute floor for the rounding noise of
    # differencing eta at step 1e-5 (~1e-11), so a vanishing gradient is not a failure
    scale = float(np.max(np.abs(fd), initial=0.0))
    err = float(np.max(np.abs(exact.grad - fd), initial=0.0))
    rel = err / scale if scale > 0 else 0.0
    ok = err <= 1e-5 * scale + FD_ABS_FLOOR
    print(f"eta {exact.eta!r}")
    print(f"fd_abs_error {err:.3e}")
    print(f"fd_rel_error {rel:.3e} {'ok' if ok else 'FAIL'}")
    print("N,angular_error_deg")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", gamp.RichardsonWarning)
        for N in grid:
            est = gamp.gamp_gradient(model, policy, gamp.GampConfig(eps_pi=1e-12, eps_x=1e-300, max_steps=N))
            print(f"{N},{gamp.angular_error(est.grad, exact.grad):.6g}")
    phi = exact.grad[policy.n_theta:]
    phi_max = float(np.max(np.abs(phi), initial=0.0))
    print(f"phi_block_max {phi_max:.3e}{' (all zero)' if phi_max < 1e-10 else ''}")
    return 0 if ok else 1


def cmd_train(cfg: dict) -> int:
    model = load_source(cfg)
    policy = make_policy(cfg, model)
    out = _outdir(cfg)
    write_echo(cfg)
    ckpt = os.path.join(out, "policy.ckpt")
    history = optim.train(model, policy, _optim_config(cfg), checkpoint=ckpt)
    with open(os.path.join(out, "history.csv"), "w", encoding="utf-8") as fh:
        fh.write(history.to_csv())
    print(f"iterations {len(history) - 1}")
    print(f"final_eta {history.final_eta!r}")
    print(f"stop {history.stop_reason}")
    if cfg["threshold"] is not None:
        secs = history.secs_to(cfg["threshold"])
        print(f"secs_to_threshold {'never' if secs is None else f'{secs:.3f}'}")
    return 0


def exact_eta_if_small(model: Pomdp, policy) -> float | None:
    if isinstance(policy, estimators.BeliefPolicy):
        return None
    size = model.n_states * policy.n_istates
    if size <= gamp.DENSE_GUARD:
        return gamp.exact_eta(model, policy)
    if size <= 200_000:
        return gamp.eta_from_start(model, policy)
    return None


def cmd_eval(cfg: dict) -> int:
    if not cfg["policy"]:
        raise UsageError("eval needs --policy")
    model = load_source(cfg)
    policy = make_policy(cfg, model)
    eta, se = estimators.eval_eta_mc_batches(model, policy, cfg["steps"], cfg["seed"], cfg["workers"])
    exact = exact_eta_if_small(model, policy)
    print(f"mc_eta {eta!r} stderr {se!r}")
    if exact is not None:
        print(f"exact_eta {exact!r}")
    out = _outdir(cfg)
    write_echo(cfg)
    with open(os.path.join(out, "eval.csv"), "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "eta", "stderr", "steps"])
        w.writerow(["monte_carlo", repr(eta), repr(se), cfg["steps"]])
        if exact is not None:
            w.writerow(["exact", repr(exact), "0.0", 0])
    return 0


def cmd_export(cfg: dict) -> int:
    model = load_source(cfg)
    text = serialize_pomdp(model, comment=f"exported {cfg['env'] or cfg['model']}")
    if cfg["out"] and cfg["out"] != ".":
        path = cfg["out"]
        if os.path.isdir(path):
            path = os.path.join(path, "model.pomdp")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_serve_env(cfg: dict) -> int:
    estimators.serve_world(load_source(cfg))
    return 0


COMMANDS = {
    "grad": cmd_grad,
    "gradcheck": cmd_gradcheck,
    "train": cmd_train,
    "eval": cmd_eval,
    "export": cmd_export,
    "serve-env": cmd_serve_env,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and 2
    if args.command == "validate":
        return cmd_validate(args)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DomainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (gamp.ConvergenceError, estimators.EstimatorError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

import csv
import json

import numpy as np
import pytest

from fscpg import envs
from fscpg.cli import main
from fscpg.fsc import FscPolicy, dense_topology
from fscpg.gamp import GradEstimate, exact_grad_oracle
from fscpg.model import serialize_pomdp
from fscpg.optim import TrainHistory


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def values(out):
    """``key value`` lines of a command's output as a dict of strings."""
    return {ln.split()[0]: ln.split()[1:] for ln in out.splitlines() if ln.strip()}


def test_validate_exit_codes(tmp_path, capsys):
    good = tmp_path / "hh.pomdp"
    good.write_text(serialize_pomdp(envs.heaven_hell()))
    assert run(capsys, "validate", good)[0] == 0

    bad = tmp_path / "bad.pomdp"
    bad.write_text("states: 2\nactions: 1\nobservations: 1\nT: 0\n0.5 0.4\n0 1\nO: * uniform\n")
    code, _, err = run(capsys, "validate", bad)
    assert code == 1
    assert len(err.strip().splitlines()) == 1

    assert run(capsys, "validate", tmp_path / "missing.pomdp")[0] == 2


def test_grad_gamp_matches_exact(tmp_path, capsys):
    code, out, _ = run(capsys, "grad", "--env", "oracle:0", "--istates", 2, "--init-scale", 1.0,
                       "--eps", 1e-12, "--out", tmp_path)
    assert code == 0
    model = envs.oracle_pomdp(0)
    pol = FscPolicy(dense_topology(2), 2, 2).randomize(1.0, 0)
    ref = exact_grad_oracle(model, pol)
    assert float(values(out)["eta"][0]) == pytest.approx(ref.eta, abs=1e-8)
    est = GradEstimate.loads((tmp_path / "grad.csv").read_text())
    np.testing.assert_allclose(est.grad, ref.grad, atol=1e-8)
    echo = json.loads((tmp_path / "config.echo").read_text())
    assert echo["engine"] == "gamp" and echo["istates"] == 2


def test_grad_rejects_zero_steps(tmp_path, capsys):
    code, _, err = run(capsys, "grad", "--env", "oracle:0", "--engine", "istate", "--steps", 0, "--out", tmp_path)
    assert code == 2 and "steps" in err


def test_exp_and_istate_agree_with_one_istate(tmp_path, capsys):
    grads = []
    for engine in ("istate", "exp"):
        out_dir = tmp_path / engine
        code, _, _ = run(capsys, "grad", "--env", "oracle:1", "--engine", engine, "--steps", 5000,
                         "--seed", 3, "--init-scale", 0.5, "--out", out_dir)
        assert code == 0
        grads.append(GradEstimate.loads((out_dir / "grad.csv").read_text()).grad)
    np.testing.assert_array_equal(grads[0], grads[1])


def test_gradcheck_report(capsys):
    code, out, _ = run(capsys, "gradcheck", "--env", "oracle:1", "--istates", 2)
    assert code == 0
    lines = out.splitlines()
    start = lines.index("N,angular_error_deg") + 1
    errs = [float(ln.split(",")[1]) for ln in lines[start:start + 4]]
    assert errs == sorted(errs, reverse=True)
    assert "ok" in values(out)["fd_rel_error"]


def test_gradcheck_symmetric_phi_zero(capsys):
    code, out, _ = run(capsys, "gradcheck", "--env", "heaven-hell", "--istates", 3, "--symmetric")
    assert code == 0
    assert "(all zero)" in out


def test_gradcheck_guard(capsys):
    code, _, err = run(capsys, "gradcheck", "--env", "heaven-hell", "--istates", 200)
    assert code == 2 and "dense limit" in err


def test_train_flat_history_on_one_state(tmp_path, capsys):
    code, out, _ = run(capsys, "train", "--env", "constant", "--istates", 2, "--init-scale", 1.0,
                       "--iterations", 5, "--threshold", 0.5, "--out", tmp_path)
    assert code == 0
    hist = TrainHistory.from_csv((tmp_path / "history.csv").read_text())
    assert np.all(hist.etas == 1.0)
    assert values(out)["secs_to_threshold"] != ["never"]
    FscPolicy.load(tmp_path / "policy.ckpt")


def test_train_and_eval_heaven_hell_hand_policy(tmp_path, capsys):
    ckpt = tmp_path / "hand.ckpt"
    envs.heaven_hell_hand_fsc().save(ckpt)
    code, out, _ = run(capsys, "eval", "--env", "heaven-hell", "--policy", ckpt, "--steps", 200_000,
                       "--out", tmp_path)
    assert code == 0
    v = values(out)
    assert float(v["exact_eta"][0]) == pytest.approx(1 / 11, abs=1e-12)
    mc, se = float(v["mc_eta"][0]), float(v["mc_eta"][2])
    assert abs(mc - 1 / 11) < 3 * se + 1e-9
    rows = list(csv.reader((tmp_path / "eval.csv").open()))
    assert rows[0] == ["method", "eta", "stderr", "steps"]
    assert float(rows[1][1]) == mc and float(rows[2][1]) == float(v["exact_eta"][0])


def test_eval_dimension_mismatch(tmp_path, capsys):
    ckpt = tmp_path / "hand.ckpt"
    envs.heaven_hell_hand_fsc().save(ckpt)
    code, _, err = run(capsys, "eval", "--env", "oracle:0", "--policy", ckpt, "--out", tmp_path)
    assert code == 2 and "dimension" in err


def test_config_file_and_precedence(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"env": "oracle:2", "istates": 3, "seed": 9}))
    code, _, _ = run(capsys, "grad", "--config", cfg, "--seed", 4, "--out", tmp_path)
    assert code == 0
    echo = json.loads((tmp_path / "config.echo").read_text())
    assert echo["istates"] == 3 and echo["seed"] == 4

    cfg.write_text(json.dumps({"bogus": 1}))
    assert run(capsys, "grad", "--config", cfg, "--env", "oracle:0")[0] == 2


def test_usage_errors(capsys):
    assert run(capsys, "grad")[0] == 2
    assert run(capsys, "grad", "--env", "nowhere")[0] == 2
    assert run(capsys, "grad", "--env", "oracle:0", "--beta", 1.5)[0] == 2
    assert run(capsys, "bogus-command")[0] == 2


def test_export_round_trip(tmp_path, capsys):
    code, out, _ = run(capsys, "export", "--env", "heaven-hell")
    assert code == 0 and out.startswith("#")
    path = tmp_path / "hh.pomdp"
    path.write_text(out)
    assert run(capsys, "validate", path)[0] == 0
    code, _, _ = run(capsys, "grad", "--model", path, "--istates", 1, "--out", tmp_path)
    assert code == 0


def test_belief_engine_grad(tmp_path, capsys):
    code, out, _ = run(capsys, "grad", "--env", "oracle:3", "--engine", "belief", "--steps", 2000, "--out", tmp_path)
    assert code == 0
    assert "eta" in values(out)


def test_deterministic_stochastic_train(tmp_path, capsys):
    outs = []
    for k in range(2):
        d = tmp_path / str(k)
        code, _, _ = run(capsys, "train", "--env", "oracle:4", "--engine", "istate", "--istates", 2,
                         "--steps", 2000, "--iterations", 2, "--out", d)
        assert code == 0
        outs.append(FscPolicy.load(d / "policy.ckpt").params())
    np.testing.assert_array_equal(*outs)

import json
import os

import numpy as np
import pytest

from diffcem import cli, ebm


def run(capsys, argv):
    code = cli.main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def test_lml_proj_example(capsys):
    code, out, _ = run(capsys, ["lml-proj", "--x", "2,0", "--k", "1",
                                "--tau", "1"])
    assert code == 0
    assert "0.73106" in out and "0.26894" in out


def test_lml_proj_json(capsys):
    code, out, _ = run(capsys, ["lml-proj", "--x", "1,2,3,4", "--k", "2",
                                "--tau", "0.5", "--json"])
    assert code == 0
    doc = json.loads(out)
    assert abs(sum(doc["y"]) - 2) <= 1e-9
    assert doc["residual"] <= 1e-9


def test_lml_proj_tau_zero_points_at_topk(capsys):
    code, _, err = run(capsys, ["lml-proj", "--x", "2,0", "--k", "1",
                                "--tau", "0"])
    assert code == 2
    assert "topk" in err


def test_topk(capsys):
    code, out, _ = run(capsys, ["topk", "--x", "3,1,2", "--k", "2"])
    assert code == 0
    assert out.strip().endswith("1, 0, 1")


def test_missing_required_flag_exits_2():
    with pytest.raises(SystemExit) as e:
        cli.main(["lml-proj", "--k", "1", "--tau", "1"])
    assert e.value.code == 2


def test_version(capsys):
    with pytest.raises(SystemExit) as e:
        cli.main(["--version"])
    assert e.value.code == 0
    assert "diffcem v" in capsys.readouterr().out


def test_fmt_17_digits():
    assert cli._fmt(0.1) == "0.10000000000000001"
    assert cli._fmt(1) == "1"
    assert cli._fmt(np.float64(2.5)) == "2.5"
    assert float(cli._fmt(np.pi)) == np.pi


def test_write_csv_format(tmp_path):
    path = tmp_path / "t.csv"
    cli.write_csv(path, ("a", "b"), [(1, 0.5), (2, 1.0 / 3.0)])
    raw = path.read_bytes()
    assert b"\r" not in raw
    lines = raw.decode().splitlines()
    assert lines[0] == "a,b"
    assert float(lines[2].split(",")[1]) == 1.0 / 3.0


def test_optimize_cem_quadratic(capsys, tmp_path):
    code, out, _ = run(capsys, [
        "optimize", "--method", "cem", "--tau", "0", "--seed", "0",
        "--out", str(tmp_path)])
    assert code == 0
    doc = json.loads(out)
    assert abs(doc["x_hat"][0] - 3.0) <= 0.1
    saved = json.loads((tmp_path / "result.json").read_text())
    assert saved["result"]["x_hat"] == doc["x_hat"]
    assert saved["config"]["method"] == "cem"


def test_optimize_dcem_multimodal(capsys, tmp_path):
    code, out, _ = run(capsys, [
        "optimize", "--objective", "multimodal", "--N", "60", "--k", "6",
        "--T", "8", "--sigma0-sq", "4", "--out", str(tmp_path)])
    assert code == 0
    doc = json.loads(out)
    assert np.isfinite(doc["f_x_hat"])
    assert len(doc["mean_value_per_iteration"]) == 8


def test_optimize_unknown_objective(capsys, tmp_path):
    code, _, err = run(capsys, ["optimize", "--objective", "nope",
                                "--out", str(tmp_path)])
    assert code == 2
    assert "unknown objective" in err


def test_optimize_method_tau_mismatch(capsys, tmp_path):
    code, _, err = run(capsys, ["optimize", "--method", "cem", "--tau", "1",
                                "--out", str(tmp_path)])
    assert code == 2
    assert "tau" in err


def test_config_file_and_flag_precedence(capsys, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"seed": 5, "N": 30, "k": 3, "T": 4}))
    code, _, _ = run(capsys, ["optimize", "--config", str(cfg),
                              "--seed", "7", "--out", str(tmp_path)])
    assert code == 0
    saved = json.loads((tmp_path / "result.json").read_text())
    assert saved["config"]["seed"] == 7  # flag beats file
    assert saved["config"]["N"] == 30  # file beats default


def test_config_file_unknown_key(capsys, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"n_samples": 30}))
    code, _, err = run(capsys, ["optimize", "--config", str(cfg),
                                "--out", str(tmp_path)])
    assert code == 2
    assert "unknown config keys" in err


def test_output_root_env_var(capsys, tmp_path, monkeypatch):
    monkeypatch.setenv("DIFFCEM_OUTPUT_ROOT", str(tmp_path / "root"))
    code, _, _ = run(capsys, ["optimize", "--method", "cem", "--tau", "0",
                              "--T", "2", "--seed", "3"])
    assert code == 0
    assert (tmp_path / "root" / "optimize-seed3" / "result.json").exists()


TINY_REGRESS = {
    "outer_steps": 2, "batch": 4, "n_train": 16, "n_val": 8, "val_every": 1,
    "dcem_N": 20, "dcem_k": 5, "dcem_T": 2, "gd_steps": 3,
    "surface_nx": 5, "surface_ny": 7,
}


def regress_args(tmp_path, out_name, method="dcem"):
    cfg = tmp_path / "regress.json"
    if not cfg.exists():
        cfg.write_text(json.dumps(TINY_REGRESS))
    return ["regress", "--config", str(cfg), "--method", method,
            "--out", str(tmp_path / out_name)]


def test_regress_writes_expected_files(capsys, tmp_path):
    code, out, _ = run(capsys, regress_args(tmp_path, "r1"))
    assert code == 0
    d = tmp_path / "r1"
    for name in ("loss_dcem.csv", "surface_dcem.csv", "ablation_dcem.csv",
                 "manifest.json"):
        assert (d / name).exists(), name
    manifest = json.loads((d / "manifest.json").read_text())
    assert manifest["status"] == "ok"
    assert manifest["config"]["outer_steps"] == 2
    assert "probe_fraction" in manifest["metrics"]["dcem"]
    lines = (d / "loss_dcem.csv").read_text().splitlines()
    assert lines[0] == "step,train_mse,val_mse"
    assert len(lines) == 4  # header + step 0 + two validated steps
    assert json.loads(out)["dcem"]["final_val_mse"] > 0


def test_regress_rerun_is_byte_identical(capsys, tmp_path):
    assert run(capsys, regress_args(tmp_path, "a"))[0] == 0
    assert run(capsys, regress_args(tmp_path, "b"))[0] == 0
    for name in ("loss_dcem.csv", "surface_dcem.csv", "ablation_dcem.csv"):
        a = (tmp_path / "a" / name).read_bytes()
        b = (tmp_path / "b" / name).read_bytes()
        assert a == b, name


def test_regress_divergence_exit_code(capsys, tmp_path, monkeypatch):
    monkeypatch.setattr(ebm, "DIVERGENCE_THRESHOLD", 1e-12)
    code, _, err = run(capsys, regress_args(tmp_path, "div"))
    assert code == 1
    assert "failed" in err
    manifest = json.loads((tmp_path / "div" / "manifest.json").read_text())
    assert manifest["status"] == "failed"


TINY_CARTPOLE = {
    "outer_steps": 1, "val_every": 1, "n_val": 2, "H": 5,
    "expert_N": 50, "expert_k": 5, "expert_T": 2,
    "embed_N": 10, "embed_k": 3, "embed_T": 2,
    "surface_grid": 8, "n_trajectories": 1,
}


def cartpole_args(tmp_path, out_name, *extra):
    cfg = tmp_path / "cartpole.json"
    if not cfg.exists():
        cfg.write_text(json.dumps(TINY_CARTPOLE))
    return ["cartpole", "--config", str(cfg),
            "--out", str(tmp_path / out_name), *extra]


def test_cartpole_writes_expected_files(capsys, tmp_path):
    code, out, _ = run(capsys, cartpole_args(tmp_path, "c1"))
    assert code == 0
    d = tmp_path / "c1"
    for name in ("curve.csv", "improvement.csv", "surface.csv",
                 "trajectory_0.csv", "manifest.json"):
        assert (d / name).exists(), name
    doc = json.loads(out)
    assert 0 < doc["improvement_factor"]
    traj = (d / "trajectory_0.csv").read_text().splitlines()
    assert traj[0] == "t,p,p_dot,theta,theta_dot,u"
    assert len(traj) == 7  # header + H+1 states


def test_cartpole_expert_only(capsys, tmp_path):
    code, out, _ = run(capsys, cartpole_args(tmp_path, "ex", "--expert-only"))
    assert code == 0
    doc = json.loads(out)
    assert np.isfinite(doc["mean_expert_cost"])
    lines = (tmp_path / "ex" / "expert_costs.csv").read_text().splitlines()
    assert len(lines) == 3  # header + n_val rows


def test_cartpole_ablate_grid(capsys, tmp_path):
    code, _, _ = run(capsys, cartpole_args(
        tmp_path, "ab", "--ablate", "--ablate-nz", "2",
        "--ablate-tau", "1.0,0.0", "--ablate-seeds", "1"))
    assert code == 0
    lines = (tmp_path / "ab" / "improvement.csv").read_text().splitlines()
    assert lines[0].startswith("n_z,tau,seed,improvement_factor")
    assert len(lines) == 3  # header + 2 cells
    taus = {float(line.split(",")[1]) for line in lines[1:]}
    assert taus == {1.0, 0.0}

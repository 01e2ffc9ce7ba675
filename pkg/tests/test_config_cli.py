import csv
import json

import numpy as np
import pytest

from hnp.cli import EXIT_FAIL, EXIT_OK, EXIT_USAGE, _curve_grid, run_command
from hnp.config import ConfigFileError, RunConfig, finalize, key_table, parse_config

TINY = """
# small and fast
iterations = 3
d = 16
d_z = 8
d_w = 16
heads = 2
n_z = 2
n_w = 2
"""

TINY_CLS = TINY + """
data = synthetic
feature_dim = 6
"""


# -- config files ---------------------------------------------------------------

def test_defaults():
    cfg = finalize(RunConfig())
    assert cfg.mode == "regression" and cfg.model.x_dim == 1 and cfg.model.n_tasks == 4
    assert cfg.default_eval_episodes() == 1000
    assert cfg.train.base_lr == 1e-4 and cfg.train.decay_every == 3000


def test_shared_keys_set_every_section():
    cfg = parse_config("n_z = 3\nn_tasks = 2\ndata = synthetic\nn_domains = 2\n")
    assert cfg.train.n_z == 3 and cfg.model.n_z == 3
    assert cfg.spec.n_tasks == 2 and cfg.model.n_tasks == 2
    assert cfg.mode == "classification" and cfg.default_eval_episodes() == 600


def test_intervals_and_bools():
    cfg = parse_config("intervals = -1:0, 0:1\nuse_w = off\ninclude_context_in_target = yes\n")
    assert cfg.gp.intervals == ((-1.0, 0.0), (0.0, 1.0)) and cfg.model.n_tasks == 2
    assert cfg.train.use_w is False and cfg.gp.include_context_in_target


@pytest.mark.parametrize("text, line, key", [
    ("d = 16\nbogus = 1\n", 2, "bogus"),
    ("d = 16\nd = 32\n", 2, "d"),
    ("iterations = many\n", 1, "iterations"),
    ("\n\nuse_z = perhaps\n", 3, "use_z"),
    ("intervals = 0-1\n", 1, "intervals"),
    ("x_dim = 4\n", 1, "x_dim"),
    ("no equals sign\n", 1, None),
    ("decay_factor = 2.0\n", 1, "decay_factor"),
])
def test_errors_name_line_and_key(text, line, key):
    with pytest.raises(ConfigFileError) as info:
        parse_config(text, "run.cfg")
    assert info.value.line == line and info.value.key == key
    assert str(info.value).startswith(f"run.cfg:{line}:")


def test_synthetic_task_domain_mismatch():
    with pytest.raises(ConfigFileError, match="n_domains"):
        parse_config("data = synthetic\nn_tasks = 3\n")


def test_roundtrip():
    cfg = parse_config(TINY_CLS)
    assert RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_key_table_covers_sections():
    table = key_table()
    assert {"iterations", "d", "length_scale", "shots", "noise", "data"} <= set(table)
    assert "mode" not in table


# -- CLI ---------------------------------------------------------------------------

@pytest.fixture
def cfgs(tmp_path):
    (tmp_path / "reg.cfg").write_text(TINY)
    (tmp_path / "cls.cfg").write_text(TINY_CLS)
    return tmp_path


@pytest.mark.parametrize("sub", [[], ["gen-data"], ["train"], ["eval"], ["predict-curve"], ["prop-test"]])
def test_help(sub, capsys):
    assert run_command(sub + ["--help"]) == EXIT_OK
    assert "usage" in capsys.readouterr().out


@pytest.mark.parametrize("argv", [
    [], ["frobnicate"], ["train"], ["eval", "--ckpt", "x"], ["train", "--out", "o", "--model", "gpt"],
    ["gen-data", "--kind", "gp", "--out", "o", "--count", "two"],
])
def test_usage_errors(argv):
    assert run_command(argv) == EXIT_USAGE


def test_bad_config_is_usage_error(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("iterations = 2\nwidth = 3\n")
    assert run_command(["train", "--config", str(bad), "--out", str(tmp_path / "m")]) == EXIT_USAGE
    assert "bad.cfg:2" in capsys.readouterr().err


def test_missing_checkpoint(tmp_path):
    assert run_command(["eval", "--ckpt", str(tmp_path / "none"), "--out", str(tmp_path / "o.json")]) == EXIT_USAGE


def test_log_env(monkeypatch, tmp_path):
    monkeypatch.setenv("HNP_LOG", "loud")
    assert run_command(["gen-data", "--kind", "gp", "--out", str(tmp_path / "e.json")]) == EXIT_USAGE
    monkeypatch.setenv("HNP_LOG", "debug")
    assert run_command(["gen-data", "--kind", "gp", "--out", str(tmp_path / "e.json")]) == EXIT_OK


@pytest.mark.parametrize("kind", ["gp", "synthetic"])
def test_gen_data(tmp_path, kind):
    out = tmp_path / "eps.json"
    assert run_command(["gen-data", "--kind", kind, "--count", "3", "--seed", "4", "--out", str(out)]) == EXIT_OK
    doc = json.loads(out.read_text())
    assert doc["kind"] == kind and len(doc["episodes"]) == 3
    again = tmp_path / "again.json"
    run_command(["gen-data", "--kind", kind, "--count", "3", "--seed", "4", "--out", str(again)])
    assert again.read_bytes() == out.read_bytes()


def test_train_is_byte_reproducible(cfgs):
    paths = []
    for run in ("a", "b"):
        out = cfgs / f"{run}.ckpt"
        assert run_command(["train", "--config", str(cfgs / "reg.cfg"), "--seed", "1", "--out", str(out)]) == EXIT_OK
        paths.append(out)
    assert paths[0].read_bytes() == paths[1].read_bytes()
    logs = [p.with_name(p.stem + ".runlog.csv").read_bytes() for p in paths]
    assert logs[0] == logs[1] and logs[0].startswith(b"iter,loss,nll,kl_z,kl_w,lr,seconds\n")


def test_eval_untrained_classifier_near_chance(cfgs, capsys):
    ckpt = cfgs / "m.ckpt"
    (cfgs / "zero.cfg").write_text(TINY_CLS.replace("iterations = 3", "iterations = 0"))
    assert run_command(["train", "--config", str(cfgs / "zero.cfg"), "--model", "cnp", "--out", str(ckpt)]) == EXIT_OK
    out = cfgs / "metrics.json"
    assert run_command(["eval", "--ckpt", str(ckpt), "--episodes", "100", "--out", str(out)]) == EXIT_OK
    doc = json.loads(out.read_text())
    assert abs(doc["rows"]["average"]["mean"] - 0.2) < 0.06 and doc["episodes"] == 100
    assert out.with_suffix(".csv").read_text().startswith("name,mean,ci95,n\n")
    assert capsys.readouterr().out.startswith("average:")


def test_eval_mode_mismatch(cfgs):
    ckpt = cfgs / "m.ckpt"
    run_command(["train", "--config", str(cfgs / "reg.cfg"), "--out", str(ckpt)])
    assert run_command(["eval", "--ckpt", str(ckpt), "--config", str(cfgs / "cls.cfg"),
                        "--out", str(cfgs / "o.json")]) == EXIT_USAGE


def test_predict_curve(cfgs):
    ckpt = cfgs / "m.ckpt"
    run_command(["train", "--config", str(cfgs / "reg.cfg"), "--out", str(ckpt)])
    out = cfgs / "curve.csv"
    assert run_command(["predict-curve", "--ckpt", str(ckpt), "--grid-n", "40", "--out", str(out)]) == EXIT_OK
    rows = list(csv.DictReader(out.open()))
    assert list(rows[0]) == ["x", "mean", "std", "is_context", "task"]
    assert len(rows) == 160
    for task in "0123":
        sub = [r for r in rows if r["task"] == task]
        assert len(sub) == 40 and sum(int(r["is_context"]) for r in sub) == 5
        xs = [float(r["x"]) for r in sub]
        assert xs == sorted(xs)
    assert all(float(r["std"]) > 0 for r in rows)
    assert run_command(["predict-curve", "--ckpt", str(ckpt), "--grid-min", "1", "--grid-max", "0",
                        "--out", str(out)]) == EXIT_USAGE


def test_predict_curve_rejects_classifier(cfgs):
    ckpt = cfgs / "m.ckpt"
    run_command(["train", "--config", str(cfgs / "cls.cfg"), "--out", str(ckpt)])
    assert run_command(["predict-curve", "--ckpt", str(ckpt), "--out", str(cfgs / "c.csv")]) == EXIT_USAGE


def test_curve_grid_places_contexts():
    xs, flags = _curve_grid(-1.0, 1.0, 5, np.array([0.1, 0.12]))
    assert flags.sum() == 2 and {0.1, 0.12} <= set(xs.tolist())
    assert np.all(np.diff(xs) >= 0)


@pytest.mark.parametrize("check", ["exchangeability", "marginalization"])
def test_prop_test_pass(cfgs, check):
    ckpt = cfgs / "m.ckpt"
    run_command(["train", "--config", str(cfgs / "reg.cfg"), "--out", str(ckpt)])
    out = cfgs / "rep.json"
    code = run_command(["prop-test", "--ckpt", str(ckpt), "--check", check, "--episodes", "3",
                        "--trials", "3", "--out", str(out)])
    doc = json.loads(out.read_text())
    assert code == EXIT_OK and doc["pass"]
    assert len(doc["reports"]) == 3
    assert set(doc["reports"][0]) == {"check", "episode_id", "trials", "max_rel_err", "pass"}


def test_prop_test_fail_exit_code(cfgs, monkeypatch):
    import hnp.eval

    ckpt = cfgs / "m.ckpt"
    run_command(["train", "--config", str(cfgs / "reg.cfg"), "--out", str(ckpt)])
    real = hnp.eval.exchangeability_check
    monkeypatch.setattr(hnp.eval, "exchangeability_check",
                        lambda *a, **k: real(*a, **{**k, "break_alignment": True}))
    code = run_command(["prop-test", "--ckpt", str(ckpt), "--check", "exchangeability", "--episodes", "2",
                        "--trials", "2", "--out", str(cfgs / "rep.json")])
    assert code == EXIT_FAIL

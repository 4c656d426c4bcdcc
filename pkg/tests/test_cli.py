import json

import pytest

from thclab import solver
from thclab.cli import EXIT_INVALID, EXIT_OK, EXIT_RUNTIME, main
from thclab.serialize import read_csv, read_snapshot

from conftest import small_config


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text(small_config(**{"experiment.window": "0.1", "experiment.t_back": "[0.1, 0.2]",
                                 "experiment.ou_samples": "200", "experiment.cocycle_splits": "3"}))
    return p


def manifest(d):
    m = json.loads((d / "manifest.json").read_text())
    m.pop("timing")
    return m


def test_simulate_twice_identical(tmp_path, cfg_file):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["simulate", "--config", str(cfg_file), "--out", str(a)]) == EXIT_OK
    assert main(["simulate", "--config", str(cfg_file), "--out", str(b)]) == EXIT_OK
    ma, mb = manifest(a), manifest(b)
    assert ma == mb
    assert ma["status"] == "ok" and ma["seed"] == 7
    assert {"config.toml", "diagnostics.csv"} <= set(ma["outputs"])
    assert ma["results"]["envelope_violations"] == 0
    snaps = sorted(p.name for p in (a / "snapshots").iterdir())
    assert snaps == ["snap_00000000.bin", "snap_00000050.bin", "snap_00000100.bin"]
    with open(a / "snapshots" / snaps[-1], "rb") as fh:
        assert read_snapshot(fh).t == pytest.approx(0.2)
    kind, cols, rows = read_csv(a / "diagnostics.csv")
    assert kind == "diagnostics" and rows.shape == (101, len(cols))


def test_rerun_from_echoed_config(tmp_path, cfg_file):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["simulate", "--config", str(cfg_file), "--out", str(a)]) == EXIT_OK
    assert main(["simulate", "--config", str(a / "config.toml"), "--out", str(b)]) == EXIT_OK
    assert manifest(a)["outputs"] == manifest(b)["outputs"]


def test_invalid_inputs(tmp_path, cfg_file, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[grid]\nny = 2\nfoo = 1\n")
    assert main(["simulate", "--config", str(bad), "--out", str(tmp_path / "x")]) == EXIT_INVALID
    err = capsys.readouterr().err
    assert "line 2" in err and "line 3" in err and "noise.seed" in err
    assert main(["simulate", "--config", str(tmp_path / "missing.toml"), "--out", str(tmp_path / "x")]) == EXIT_INVALID
    assert main(["frobnicate", "--config", str(cfg_file)]) == EXIT_INVALID
    assert main(["simulate", "--config", str(cfg_file)]) == EXIT_INVALID


def test_runtime_failure(tmp_path, cfg_file, monkeypatch):
    original = solver.Model.step

    def failing(self, state, path, step_index, **kw):
        if step_index == 60:
            raise solver.BlowUpError(step_index, state.t)
        return original(self, state, path, step_index, **kw)

    monkeypatch.setattr(solver.Model, "step", failing)
    out = tmp_path / "r"
    assert main(["simulate", "--config", str(cfg_file), "--out", str(out)]) == EXIT_RUNTIME
    m = manifest(out)
    assert m["status"] == "failed"
    assert "step 60" in m["error"]
    with open(out / "snapshots" / "last_good.bin", "rb") as fh:
        assert read_snapshot(fh).t == pytest.approx(60 * 2e-3)


def test_constants_prints_table(cfg_file, capsys):
    assert main(["constants", "--config", str(cfg_file)]) == EXIT_OK
    out = capsys.readouterr().out
    for key in ("alpha_env", "c5_env", "R1_sq", "epsilon_L", "control-parameter check", "deficit", "lambda1"):
        assert key in out


def test_twin_writes_report(tmp_path, cfg_file):
    out = tmp_path / "t"
    assert main(["twin", "--config", str(cfg_file), "--out", str(out), "--perturb-scale", "1e-3", "--modes", "4"]) == EXIT_OK
    kind, cols, rows = read_csv(out / "determining.csv")
    assert kind == "determining" and cols[:3] == ["t", "state_gap", "window_gap"]
    assert rows[0, 1] == pytest.approx(1e-3)
    assert manifest(out)["results"]["functionals"] == "modes4"


def test_other_modes(tmp_path, cfg_file):
    for mode in ("pullback", "ou-check", "cocycle-check"):
        out = tmp_path / mode
        assert main([mode, "--config", str(cfg_file), "--out", str(out)]) == EXIT_OK
        assert manifest(out)["status"] == "ok"
    assert manifest(tmp_path / "cocycle-check")["results"] == {"exact": True, "mutation_detected": True}

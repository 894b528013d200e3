import json
import shutil
import subprocess
import sys
from pathlib import Path

import pytest

from heavyclip.cli import CSV_VERSION_LINE, main
from heavyclip.config import ConfigError, load_config, parse_config

ROOT = Path(__file__).resolve().parents[1]
MINIMAL = ROOT / "configs" / "minimal.json"


def _write(tmp_path, data, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data), encoding="utf-8")
    return path


def _base(**over):
    cfg = json.loads(MINIMAL.read_text(encoding="utf-8"))
    cfg.update(over)
    return cfg


def _read_csv(path):
    text = path.read_bytes().decode("utf-8")
    lines = text.split("\n")
    assert lines[0] == CSV_VERSION_LINE
    assert lines[-1] == ""
    return [line.split(",") for line in lines[1:-1]]


def test_minimal_run(tmp_path, capsys):
    assert main(["run", "--config", str(MINIMAL), "--out", str(tmp_path), "--threads", "1"]) == 0
    run_dir = Path(capsys.readouterr().out.strip())
    assert run_dir.parent == tmp_path and run_dir.name.startswith("run-")
    rows = _read_csv(run_dir / "summary.csv")
    assert rows[0] == ["experiment", "regime", "p", "sigma", "T", "M", "quantile", "bound", "ratio",
                       "event_fraction", "slope", "pass"]
    assert len(rows) == 2
    assert rows[1][0] == "smoke" and rows[1][-1] == "true"
    assert (run_dir / "config-echo.json").exists()
    report = json.loads((run_dir / "reports" / "smoke-T256.json").read_text())
    assert report["bound"]["pass"] is True
    trial = _read_csv(run_dir / "trials" / "smoke-T256-trial1.csv")
    assert trial[0] == ["t", "delta_t", "r_t", "grad_norm_sq", "theta_norm_sq", "clipped", "event_sum"]
    assert len(trial) == 257


def test_no_carriage_returns(tmp_path, capsys):
    main(["run", "--config", str(MINIMAL), "--out", str(tmp_path)])
    run_dir = Path(capsys.readouterr().out.strip())
    for path in run_dir.rglob("*"):
        if path.is_file():
            assert b"\r" not in path.read_bytes()


def test_bad_delta_exits_2(tmp_path, capsys):
    path = _write(tmp_path, _base(delta=1.5))
    assert main(["run", "--config", str(path), "--out", str(tmp_path)]) == 2
    assert "delta" in capsys.readouterr().err


@pytest.mark.parametrize("over, field", [
    ({"T": [512, 256]}, "T"),
    ({"regime": "strongly-convex"}, "regime"),
    ({"noise": {"kind": "cauchy"}}, "noise"),
    ({"M": 5}, "M"),
    ({"checks": ["bound", "magic"]}, "checks"),
    ({"surprise": 1}, "surprise"),
    ({"base_seed": -1}, "base_seed"),
    ({"x1": [0.0, 0.0]}, "x1"),
    ({"schedule": {"eta": 0.1, "lambda": 1.0}}, "checks"),
    ({"checks": ["rate"]}, "T"),
])
def test_config_validation_names_field(tmp_path, capsys, over, field):
    path = _write(tmp_path, _base(**over))
    assert main(["run", "--config", str(path), "--out", str(tmp_path)]) == 2
    assert field in capsys.readouterr().err


def test_nonconvex_event_check_needs_exact_noise():
    raw = _base(regime="nonconvex", objective={"name": "nonconvex-sigmoid-well", "dim": 2},
                noise={"kind": "gaussian", "sigma": 1.0}, checks=["event"])
    with pytest.raises(ConfigError) as info:
        parse_config(raw)
    assert info.value.field.endswith("checks")


def test_convex_objective_required_for_convex_regime():
    with pytest.raises(ConfigError, match="not convex"):
        parse_config(_base(objective={"name": "nonconvex-sigmoid-well", "dim": 1}))


def test_missing_config_file(tmp_path, capsys):
    assert main(["run", "--config", str(tmp_path / "absent.json")]) == 2
    assert main(["run"]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json", encoding="utf-8")
    assert main(["run", "--config", str(bad)]) == 2


def test_config_round_trip():
    cfg = load_config(str(ROOT / "configs" / "reproduce.json"))
    again = parse_config(cfg.to_dict())
    assert again.to_dict() == cfg.to_dict()
    assert again.digest() == cfg.digest()


def test_config_hash_depends_on_content_not_layout(tmp_path):
    data = _base()
    a = _write(tmp_path, data, "a.json")
    b = tmp_path / "b.json"
    b.write_text(json.dumps(data, indent=7, sort_keys=True), encoding="utf-8")
    assert load_config(str(a)).digest() == load_config(str(b)).digest()
    c = _write(tmp_path, _base(base_seed=2), "c.json")
    assert load_config(str(c)).digest() != load_config(str(a)).digest()
    assert load_config(str(a), seed_override=2).digest() == load_config(str(c)).digest()


def test_rerun_overwrites_identically(tmp_path, capsys):
    main(["run", "--config", str(MINIMAL), "--out", str(tmp_path)])
    run_dir = Path(capsys.readouterr().out.strip())
    first = {p: p.read_bytes() for p in run_dir.rglob("*") if p.is_file()}
    main(["run", "--config", str(MINIMAL), "--out", str(tmp_path)])
    assert Path(capsys.readouterr().out.strip()) == run_dir
    assert {p: p.read_bytes() for p in run_dir.rglob("*") if p.is_file()} == first


def _noisy_config(tmp_path):
    return _write(tmp_path, _base(noise={"kind": "pareto_sphere", "alpha": 1.8, "p": 1.5, "sigma": 1.0},
                                  T=[128, 512], M=40, trial_csv_limit=1), "noisy.json")


def test_summary_identical_across_threads(tmp_path, capsys):
    cfg = _noisy_config(tmp_path)
    outs = []
    for threads in ("1", "4"):
        out = tmp_path / f"out{threads}"
        assert main(["run", "--config", str(cfg), "--out", str(out), "--threads", threads]) == 0
        outs.append(Path(capsys.readouterr().out.strip()))
    assert (outs[0] / "summary.csv").read_bytes() == (outs[1] / "summary.csv").read_bytes()


def test_failing_check_exits_1(tmp_path, capsys):
    # a rate target that cannot be met
    path = _write(tmp_path, _base(T=[64, 128, 256, 512], checks=["rate"], rate_target=5.0, rate_tolerance=0.1))
    assert main(["run", "--config", str(path), "--out", str(tmp_path)]) == 1
    assert "check failed: smoke/rate" in capsys.readouterr().err


def test_schedule_command(capsys):
    assert main(["schedule", "--regime", "convex", "--T", "16", "--delta", "0.1", "--sigma", "1",
                 "--p", "2", "--L", "1", "--R1", "1"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["schedule"]["lambda"] == 16.0
    assert out["schedule"]["eta"] == pytest.approx(6.045e-4, rel=1e-3)
    assert out["theorem_bound"] == pytest.approx(206.8, abs=0.05)

    assert main(["schedule", "--regime", "nonconvex", "--T", "16", "--delta", "0.1", "--sigma", "1",
                 "--p", "2", "--L", "1", "--Delta1", "1"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["parameter_properties"]["pass"] is True
    assert out["schedule"]["lambda"] == pytest.approx(103.38, abs=0.01)

    assert main(["schedule", "--regime", "convex", "--T", "16", "--delta", "0.1", "--sigma", "1",
                 "--p", "2", "--L", "1"]) == 2
    assert main(["schedule", "--regime", "convex", "--T", "16", "--delta", "2", "--sigma", "1",
                 "--p", "2", "--L", "1", "--R1", "1"]) == 2


def test_verify_lemma2_default_grid(tmp_path, capsys):
    assert main(["verify", "lemma2", "--grid", "default", "--out", str(tmp_path)]) == 0
    rows = _read_csv(tmp_path / "lemma2-grid.csv")
    assert rows[0] == ["lambda", "bias_norm", "bias_bound", "u_sq_moment", "u_sq_bound", "pass"]
    assert len(rows) == 37
    assert all(r[-1] == "true" for r in rows[1:])
    details = json.loads((tmp_path / "lemma2-grid.json").read_text())
    assert len(details) == 36 and {"tight_constant_ratio", "bias_scaling_ratio"} <= set(details[0])


def test_verify_lemma2_refusal(capsys):
    assert main(["verify", "lemma2", "--grad-norm", "0.9", "--lambda", "1"]) == 2
    assert "lambda/2" in capsys.readouterr().err


def test_verify_lemma2_single_point(capsys):
    assert main(["verify", "lemma2", "--grad-norm", "0.4", "--lambda", "1",
                 "--noise", '{"kind": "two_point", "magnitude": 100, "prob": 0.001, "p": 1.5}']) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["bias_norm"] == pytest.approx(0.0004, abs=1e-15)
    assert main(["verify", "lemma2", "--grad-norm", "0.4", "--lambda", "1", "--noise", "{oops"]) == 2


def test_verify_freedman(tmp_path, capsys):
    assert main(["verify", "freedman", "--spec", "rademacher", "--out", str(tmp_path)]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["bound"] == pytest.approx(0.0335, abs=1e-4)
    assert out["empirical_prob"] < 0.005
    assert out["trials"] == 100_000
    assert (tmp_path / "freedman.json").exists()
    assert main(["verify", "freedman", "--spec", "zero", "--trials", "1000"]) == 0
    capsys.readouterr()
    assert main(["verify", "freedman", "--spec", "clipped-noise", "--lambda", "4", "--T", "32",
                 "--b", "40", "--F", "200", "--trials", "5000",
                 "--noise", '{"kind": "pareto_sphere", "alpha": 1.8, "p": 1.5, "sigma": 1}']) == 0


def test_bad_threads_and_seed(capsys):
    assert main(["run", "--config", str(MINIMAL), "--threads", "0"]) == 2
    assert main(["run", "--config", str(MINIMAL), "--seed", str(2**64)]) == 2


def test_console_script_and_module_entry(tmp_path):
    exe = shutil.which("heavyclip")
    cmd = [exe] if exe else [sys.executable, "-m", "heavyclip"]
    res = subprocess.run(cmd + ["schedule", "--regime", "nonconvex", "--T", "16", "--delta", "0.1",
                                "--sigma", "0", "--p", "1.5", "--L", "1", "--Delta1", "1"],
                         capture_output=True, text=True, check=False)
    assert res.returncode == 0, res.stderr
    assert json.loads(res.stdout)["schedule"]["lambda"] == 4.0
    res = subprocess.run([sys.executable, "-m", "heavyclip", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "run" in res.stdout

import json

import pytest

from sausage_sym import battery, cli
from sausage_sym.compare import ComparisonReport
from sausage_sym.io import mask_from_text, parse_config, read_csv, sha256_file

POLARIZE_CFG = """\
dim: 2
h: 0.1
set:
  - box: {min: [0.3, -0.5], max: [1.2, 0.4]}
  - ball: {center: [-0.8, 0.6], radius: 0.3}
halfspace: {direction: [1, 0], offset_steps: 3}
"""

BALL_CHECK_CFG = """\
name: ball
check: symmetrization_mass
dim: 2
h: 0.1
set: [{ball: {center: [0, 0], radius: 0.8}}]
times: [0, 0.25]
"""


def _write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


def _run(args):
    return cli.run([str(a) for a in args])


@pytest.fixture(autouse=True)
def _no_env(monkeypatch):
    monkeypatch.delenv(cli.OUT_ENV, raising=False)


def test_polarize_writes_raster_and_is_byte_identical(tmp_path):
    cfg = _write(tmp_path, "p.yaml", POLARIZE_CFG)
    assert _run(["polarize", "--config", cfg, "--out", tmp_path / "a"]) == 0
    assert _run(["polarize", "--config", cfg, "--out", tmp_path / "b"]) == 0
    for name in ("set.mask", "polarized.mask", "summary.csv", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    A = mask_from_text((tmp_path / "a" / "set.mask").read_text())
    PA = mask_from_text((tmp_path / "a" / "polarized.mask").read_text())
    assert A.count == PA.count
    assert PA != A


def test_check_centered_ball_has_zero_margin(tmp_path):
    cfg = _write(tmp_path, "c.yaml", BALL_CHECK_CFG)
    assert _run(["check", "--config", cfg, "--out", tmp_path / "o"]) == 0
    rows = read_csv(tmp_path / "o" / "scenario.csv")
    assert [float(r["t"]) for r in rows] == [0.0, 0.25]
    for r in rows:
        assert abs(float(r["margin"])) < 1e-8
    summary = read_csv(tmp_path / "o" / "summary.csv")
    assert summary[0]["verdict"] == "holds"


def test_default_battery_one_row_per_scenario(tmp_path):
    assert _run(["battery", "--out", tmp_path / "o"]) == 0
    rows = read_csv(tmp_path / "o" / "summary.csv")
    scenarios = battery.battery_from_config(*_default_doc())
    assert [r["scenario"] for r in rows] == [sc.name for sc in scenarios]
    assert all(r["verdict"] != "violated" for r in rows)
    for sc in scenarios:
        assert (tmp_path / "o" / "scenarios" / sc.name / "scenario.csv").exists()


def _default_doc():
    doc = parse_config(cli.default_battery_text())
    return doc, doc.data


def _report(times):
    return ComparisonReport("x", list(times), [0.1 * (i + 1) / 3 for i in range(len(times))],
                            [0.7 / 3] * len(times), 1e-3)


def test_emit_plot_data_empty_and_single_row():
    assert cli.emit_plot_data(_report([])) == "t,lhs,rhs,margin,tolerance\n"
    text = cli.emit_plot_data(_report([0.5]))
    assert len(text.strip().splitlines()) == 2


def test_emit_plot_data_round_trip(tmp_path):
    rep = _report([0.0, 0.1, 1 / 3])
    cli.emit_plot_data(rep, tmp_path / "r.csv")
    rows = read_csv(tmp_path / "r.csv")
    assert [float(r["t"]) for r in rows] == rep.times
    assert [float(r["lhs"]) for r in rows] == rep.lhs
    assert [float(r["rhs"]) for r in rows] == rep.rhs
    assert [float(r["margin"]) for r in rows] == rep.margin
    assert all(float(r["tolerance"]) == rep.tolerance_used for r in rows)


@pytest.mark.parametrize("text, key, line", [
    ("dim: 2\nh: 0.1\nsett: []\nhalfspace: {direction: [1, 0], offset_steps: 0}\n", "sett", 3),
    ("dim: 2\nh: 0.1\nset: []\nhalfspace:\n  direction: [1, 0]\n  offset: 2\n", "halfspace.offset", 6),
    ("dim: 2\nh: 0.1\nh: 0.2\n", "duplicate key 'h'", 3),
    ("dim: two\nh: 0.1\nset: []\nhalfspace: {direction: [1, 0], offset_steps: 0}\n", "dim", 1),
])
def test_config_errors_name_key_and_line(tmp_path, capsys, text, key, line):
    cfg = _write(tmp_path, "bad.yaml", text)
    assert _run(["polarize", "--config", cfg, "--out", tmp_path / "o"]) == 1
    err = capsys.readouterr().err
    assert f"bad.yaml:{line}:" in err
    assert key in err


def test_missing_config_file_is_operational_error(tmp_path, capsys):
    assert _run(["solve", "--config", tmp_path / "nope.yaml", "--out", tmp_path / "o"]) == 1
    assert "cannot read config" in capsys.readouterr().err


def test_env_var_overrides_out(tmp_path, monkeypatch):
    cfg = _write(tmp_path, "p.yaml", POLARIZE_CFG)
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "env"))
    assert _run(["polarize", "--config", cfg, "--out", tmp_path / "flag"]) == 0
    assert (tmp_path / "env" / "manifest.json").exists()
    assert not (tmp_path / "flag").exists()


@pytest.mark.parametrize("command, text", [
    ("polarize", POLARIZE_CFG + "initial: [{center: [0.5, 0.0], width: 0.4, amplitude: 0.5}]\n"),
    ("check", BALL_CHECK_CFG),
    ("solve", "dim: 1\nh: 0.05\nset: [{box: {min: [-0.5], max: [0.5]}}]\ntimes: [0, 0.1]\n"),
    ("sausage", "dim: 1\nh: 0.05\nset: [{box: {min: [-0.5], max: [0.5]}}]\nhorizon: 0.2\n"
                "delta: 0.01\nn_paths: 200\nseed: 4\nhitting_integral: true\n"),
])
def test_regenerate_from_manifest(tmp_path, command, text):
    cfg = _write(tmp_path, "c.yaml", text)
    assert _run([command, "--config", cfg, "--out", tmp_path / "a"]) == 0
    manifest = tmp_path / "a" / "manifest.json"
    assert _run([command, "--config", manifest, "--out", tmp_path / "b"]) == 0
    first = json.loads(manifest.read_text())
    second = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert first == second
    for name, digest in first["artifacts"].items():
        assert sha256_file(tmp_path / "b" / name) == digest


def test_inputs_are_not_mutated(tmp_path):
    a = tmp_path / "a"
    cfg = _write(tmp_path, "p.yaml", POLARIZE_CFG)
    assert _run(["polarize", "--config", cfg, "--out", a]) == 0
    raster_cfg = _write(tmp_path, "r.yaml", "set_raster: a/set.mask\n"
                        "halfspace: {direction: [0, 1], offset_steps: -2}\n")
    before = {p: p.read_bytes() for p in (cfg, raster_cfg, a / "set.mask")}
    assert _run(["polarize", "--config", raster_cfg, "--out", tmp_path / "b"]) == 0
    assert {p: p.read_bytes() for p in before} == before


def test_seed_flag_overrides_config(tmp_path):
    text = ("dim: 1\nh: 0.05\nset: [{box: {min: [-0.5], max: [0.5]}}]\nhorizon: 0.2\n"
            "delta: 0.01\nn_paths: 200\nseed: 4\n")
    cfg = _write(tmp_path, "s.yaml", text)
    assert _run(["sausage", "--config", cfg, "--seed", 9, "--out", tmp_path / "o"]) == 0
    assert read_csv(tmp_path / "o" / "sausage.csv")[0]["seed"] == "9"


def test_violated_verdict_exits_2(tmp_path, monkeypatch):
    def fake(sc, refine=False, levels=1):
        return battery.ScenarioResult(sc, ComparisonReport(sc.check, [0.25], [1.0], [0.0], 0.1))

    monkeypatch.setattr(battery, "run_scenario", fake)
    cfg = _write(tmp_path, "c.yaml", BALL_CHECK_CFG)
    assert _run(["check", "--config", cfg, "--out", tmp_path / "o"]) == 2
    assert read_csv(tmp_path / "o" / "summary.csv")[0]["verdict"] == "violated"
    assert json.loads((tmp_path / "o" / "manifest.json").read_text())["exit_code"] == 2


def test_command_mismatch_with_config(tmp_path, capsys):
    cfg = _write(tmp_path, "c.yaml", "command: solve\n" + POLARIZE_CFG)
    assert _run(["polarize", "--config", cfg, "--out", tmp_path / "o"]) == 1
    assert "command" in capsys.readouterr().err

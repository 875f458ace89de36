"""Command-line runner tests: config parsing, exit codes, artifacts."""

import numpy as np
import pytest

from diamondwave import cli, solver


# -- config parsing ----------------------------------------------------------

GOOD_CFG = """\
# comment line
[metric]
kind = minkowski
n = 2

[aperture]
r = 1.0        # trailing comment
T = 5.0

[pipeline]
points = 2.5 1.0 0.0 ; 2.4 0.9 0.1
"""


def write_cfg(tmp_path, text, name="exp.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_parse_config_sections(tmp_path):
    sec = cli.parse_config(write_cfg(tmp_path, GOOD_CFG))
    assert sec["metric"]["kind"] == "minkowski"
    assert sec["aperture"]["r"] == "1.0"
    assert "points" in sec["pipeline"]


def test_parse_config_rejects_key_outside_section(tmp_path):
    with pytest.raises(cli.ConfigError, match="outside"):
        cli.parse_config(write_cfg(tmp_path, "a = 1\n"))


def test_parse_config_rejects_duplicate_key(tmp_path):
    with pytest.raises(cli.ConfigError, match="duplicate"):
        cli.parse_config(write_cfg(tmp_path, "[s]\na = 1\na = 2\n"))


def test_parse_config_rejects_bare_line(tmp_path):
    with pytest.raises(cli.ConfigError, match="key = value"):
        cli.parse_config(write_cfg(tmp_path, "[s]\nnonsense\n"))


def test_experiment_config_builds_fields(tmp_path):
    cfg = cli.ExperimentConfig(cli.parse_config(write_cfg(tmp_path, """\
[metric]
kind = split
n = 2
beta = 1 + 0.05*sin(x1)
conformal = 1 + 0.02*x2
[potential]
V = exp(-(x1^2 + x2^2)/0.2)
[aperture]
r = 1.0
T = 5.0
[pipeline]
points = 2.5 1.0 0.0
""")))
    assert cfg.metric.kind == "split"
    p = np.array([0.3, 0.1, -0.2])
    assert cfg.metric.beta(p) == pytest.approx(1 + 0.05 * np.sin(0.1))
    assert cfg.V(p) == pytest.approx(np.exp(-(0.1**2 + 0.2**2) / 0.2))
    assert len(cfg.points) == 1


def test_experiment_config_cfl_gate(tmp_path):
    with pytest.raises(cli.ConfigError, match="CFL"):
        cli.ExperimentConfig(cli.parse_config(write_cfg(tmp_path, """\
[metric]
n = 2
[aperture]
r = 1.0
T = 5.0
[grid]
h = 0.01
dt = 0.009
""")))


def test_experiment_config_bad_point_arity(tmp_path):
    with pytest.raises(cli.ConfigError, match="coordinates"):
        cli.ExperimentConfig(cli.parse_config(write_cfg(tmp_path, """\
[metric]
n = 2
[aperture]
r = 1.0
T = 5.0
[pipeline]
points = 2.5 1.0
""")))


# -- exit codes --------------------------------------------------------------

def test_unknown_suite_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as exc:
        cli.main(["verify", "nosuch", "--out", str(tmp_path)])
    assert exc.value.code == 2


def test_missing_config_is_io_error(tmp_path, capsys):
    assert cli.main(["recover", str(tmp_path / "absent.cfg")]) == cli.EXIT_IO
    assert "error" in capsys.readouterr().err


def test_unknown_dump_id_is_usage_error(tmp_path, capsys):
    code = cli.main(["dump", "solution", "nosuch", "--out", str(tmp_path)])
    assert code == cli.EXIT_USAGE


# -- verify ------------------------------------------------------------------

def test_verify_writes_csv_and_passes(tmp_path, capsys):
    code = cli.main(["verify", "recovery", "--out", str(tmp_path)])
    assert code == cli.EXIT_OK
    text = (tmp_path / "verify_recovery.csv").read_text()
    assert text.splitlines()[0] == "check,status,detail"
    assert "fail" not in text


def test_verify_deterministic(tmp_path, capsys):
    cli.main(["verify", "recovery", "--out", str(tmp_path / "a"),
              "--seed", "7"])
    cli.main(["verify", "recovery", "--out", str(tmp_path / "b"),
              "--seed", "7"])
    a = (tmp_path / "a" / "verify_recovery.csv").read_bytes()
    b = (tmp_path / "b" / "verify_recovery.csv").read_bytes()
    assert a == b


# -- dump --------------------------------------------------------------------

def test_dump_beam_manifest_has_decay_constant(tmp_path, capsys):
    assert cli.main(["dump", "beam", "flat", "--out", str(tmp_path)]) == 0
    text = (tmp_path / "beam_flat.txt").read_text()
    assert "measured C constant" in text


def test_dump_zero_solution_roundtrip(tmp_path, capsys):
    assert cli.main(["dump", "solution", "zero", "--out", str(tmp_path)]) == 0
    back = solver.read_snapshot(str(tmp_path / "solution_zero.snap"))
    assert back.sup_norm() == 0.0


def test_dump_packet_csv(tmp_path, capsys):
    assert cli.main(["dump", "packet", "free", "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "packet_free.csv").read_text().splitlines()
    assert lines[0] == "s,t,x1,re_u,im_u"
    assert len(lines) == 252


# -- recover -----------------------------------------------------------------

RECOVER_CFG = """\
[metric]
kind = minkowski
n = 2
[potential]
V = exp(-((x1-1.0)^2 + x2^2)/0.16)
[aperture]
r = 1.0
T = 5.0
[pipeline]
mode = fast
points = 2.5 1.0 0.0
"""


def test_recover_smoke(tmp_path, capsys):
    cfgp = write_cfg(tmp_path, RECOVER_CFG)
    code = cli.main(["recover", cfgp, "--out", str(tmp_path / "out")])
    assert code == cli.EXIT_OK
    report = (tmp_path / "out" / "report.csv").read_text()
    assert "V_recovered" in report.splitlines()[0]
    prof = (tmp_path / "out" / "recovered_profile.csv").read_text().splitlines()
    assert len(prof) == 2
    rel_err = float(prof[1].split(",")[-1])
    assert rel_err < 0.10
    rr = (tmp_path / "out" / "run_report.txt").read_text()
    assert "stage timings" in rr and "pass" in rr

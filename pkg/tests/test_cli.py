import json
import math

import numpy as np
import pytest
import yaml

from qcbadc import cli
from qcbadc.cli import ConfigError, coefficient_table, load_config, main, parse_frequency, parse_time
from qcbadc.system import InvalidDesignError

CHEAP = {
    "design": {"N": 3, "OSR": 8, "f_n": "1/8"},
    "calibration": {"K_h": 64, "K_train": 8192, "auto_kh": False},
    "analysis": {"nfft": 2048, "segments": 2},
}


@pytest.fixture
def cheap_config(tmp_path):
    path = tmp_path / "exp.yaml"
    path.write_text(yaml.safe_dump(CHEAP))
    return str(path)


@pytest.mark.parametrize(
    "text,f_s,want",
    [("1/8", 1.0, 0.125), (0.25, 2.0, 0.5), ("2.5e6 Hz", 1e7, 2.5e6), ("3/8", 4.0, 1.5), (None, 1.0, None)],
)
def test_parse_frequency(text, f_s, want):
    assert parse_frequency(text, f_s) == want


def test_parse_time():
    assert parse_time("0.25", 2.0) == 0.125
    assert parse_time("1e-3 s", 2.0) == 1e-3


def test_defaults_are_nominal_point():
    cfg = load_config()
    assert (cfg.design.N, cfg.design.OSR, cfg.design.f_n) == (6, 8, 0.125)
    assert cfg.design.phi_kappa == pytest.approx(math.pi / 3)
    assert cfg.run.nfft == 1 << 14
    assert cfg.mc.p == 0.10


def test_file_and_overrides_merge(cheap_config):
    cfg = load_config(cheap_config, {"design.N": 4}, ["analysis.guard=5", "design.f_n=0.25"])
    assert cfg.design.N == 4 and cfg.run.guard == 5 and cfg.design.f_n == 0.25
    assert cfg.run.calibration.K_h == 64


@pytest.mark.parametrize(
    "sets",
    [["design.bogus=1"], ["nosuch.key=1"], ["analysis.nfft=1000"], ["input.kind=analog"], ["montecarlo.workers=0"],
     ["analysis.notch_method=guess"], ["montecarlo.snr_bins=[1, 0, 0.5]"], ["design.tau_dc=1.5"]],
)
def test_invalid_configs_rejected(sets):
    with pytest.raises((ConfigError, ValueError)):
        load_config(sets=sets)


def test_invalid_design_rejected():
    with pytest.raises(InvalidDesignError):
        load_config(overrides={"design.OSR": 0.5})


def test_main_exit_code_for_invalid_input(tmp_path, capsys):
    assert main(["design", "--OSR", "0.5", "-o", str(tmp_path)]) == 2
    assert "error" in capsys.readouterr().err
    assert main(["design", "--set", "design.nope=1", "-o", str(tmp_path)]) == 2
    (tmp_path / "bad.yaml").write_text("design: [1, 2")
    assert main(["design", str(tmp_path / "bad.yaml"), "-o", str(tmp_path)]) == 2


def test_design_command(tmp_path, capsys):
    assert main(["design", "--fn", "1/8", "-o", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "design.json").read_text())
    assert doc["system"]["beta"] == 0.5
    # 0.5 * (pi/4) / (2 sin(pi/8)) * cos(pi/3)
    assert doc["control"]["kappa_phi"] == pytest.approx(0.5130861 * 0.5, abs=1e-7)
    assert doc["f_test"] == pytest.approx(0.125 - 1 / 64)
    assert "f_test" in capsys.readouterr().out
    prov = json.loads((tmp_path / "provenance.json").read_text())
    assert prov["toolkit"]["name"] == "qcbadc" and "seeds" in prov
    assert prov["config"]["design"]["f_n"] == "1/8"


def test_design_document_round_trip(tmp_path):
    cfg = load_config(overrides={"output": str(tmp_path)})
    doc = cli.cmd_design(cfg, out=open(tmp_path / "log", "w"))
    assert json.loads((tmp_path / "design.json").read_text()) == json.loads(json.dumps(doc))


def test_coefficient_table_endpoints():
    t = coefficient_table(0.5, 256)
    assert t.shape == (256, 5)
    np.testing.assert_array_equal(t[0], [0.0, 0.5, 0.0, -2.0, 0.0])
    row = t[np.argmin(np.abs(t[:, 0] - 1 / 8))]
    np.testing.assert_allclose(row[1:], [0.5130861, 0.0, -1.8477591, -0.7653669], atol=1e-7)
    assert t[-1, 0] < 0.5


def test_coeff_sweep_command(tmp_path):
    assert main(["coeff-sweep", "--points", "16", "-o", str(tmp_path)]) == 0
    lines = (tmp_path / "coefficients.csv").read_text().splitlines()
    assert lines[0] == "fpT,kappa,bar_kappa,tilde_kappa,bar_tilde_kappa"
    assert len(lines) == 17
    assert [float(v) for v in lines[1].split(",")] == [0.0, 0.5, 0.0, -2.0, 0.0]


def test_run_command_artifacts_and_rerun(tmp_path, cheap_config, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", cheap_config, "-o", str(a)]) == 0
    assert "SNR" in capsys.readouterr().out
    names = {"provenance.json", "trace.qcbt", "filter.qcbf", "filter.csv", "estimate.csv", "spectrum.csv", "snr.json"}
    assert names <= {p.name for p in a.iterdir()}
    assert main(["run", cheap_config, "-o", str(b)]) == 0
    for name in names - {"provenance.json"}:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    snr = json.loads((a / "snr.json").read_text())
    assert snr["stable"] and snr["snr_db"] > 30


def test_single_notch_sweep_equals_run(tmp_path, cheap_config):
    assert main(["run", cheap_config, "-o", str(tmp_path / "r")]) == 0
    assert main(["sweep-notch", cheap_config, "--notches", "1/8", "-o", str(tmp_path / "s")]) == 0
    run_snr = json.loads((tmp_path / "r" / "snr.json").read_text())["snr_db"]
    sweep_snr = json.loads((tmp_path / "s" / "notch0_snr.json").read_text())["snr_db"]
    assert run_snr == sweep_snr
    rows = (tmp_path / "s" / "sweep.csv").read_text().splitlines()
    assert rows[0] == "f_n,kind,stable,snr_db,f_hat_n" and len(rows) == 2


def test_sweep_with_lowpass_entry(tmp_path, cheap_config, capsys):
    assert main(["sweep-notch", cheap_config, "--notches", "1/8,2/8", "--lowpass", "-o", str(tmp_path)]) == 0
    rows = (tmp_path / "sweep.csv").read_text().splitlines()[1:]
    assert [r.split(",")[1] for r in rows] == ["quadrature", "quadrature", "real"]
    assert "SNR spread" in capsys.readouterr().out


def test_montecarlo_command(tmp_path, cheap_config, capsys):
    args = ["montecarlo", cheap_config, "--trials", "3", "--p", "0.1", "-o", str(tmp_path)]
    assert main(args) == 0
    out = capsys.readouterr().out
    assert "unstable: 0" in out
    for name in ("trials.csv", "hist_snr.csv", "hist_f_hat.csv", "summary.json", "checkpoint.jsonl", "provenance.json"):
        assert (tmp_path / name).exists()
    first = {n: (tmp_path / n).read_bytes() for n in ("trials.csv", "hist_snr.csv", "hist_f_hat.csv")}
    # resumes entirely from the checkpoint and reproduces the files
    assert main(args) == 0
    for n, data in first.items():
        assert (tmp_path / n).read_bytes() == data
    edges = [r.split(",")[0] for r in (tmp_path / "hist_snr.csv").read_text().splitlines()[1:]]
    assert edges[0] == "-8" and len(edges) == 24


def test_numerical_failure_exit_code(tmp_path, cheap_config, capsys):
    args = ["run", cheap_config, "--set", "calibration.max_iter=1", "--set", "calibration.tol=1e-15", "-o", str(tmp_path)]
    assert main(args) == 3
    assert "calibrate" in capsys.readouterr().err


def test_selftest_command(capsys):
    assert main(["selftest"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and out.count("PASS") == 7

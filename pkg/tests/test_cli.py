import csv
import math
import subprocess
import sys

import pytest

from randquant.cli import parse_rate, parse_rho, run_cli
from randquant.errors import InvalidArgument

SMALL_SOURCE = "[source]\nn_points = 201\n"


def _write(tmp_path, text):
    path = tmp_path / "cfg.toml"
    path.write_text(text)
    return str(path)


def test_parse_rate_forms():
    assert parse_rate("log2(5)") == pytest.approx(math.log2(5))
    assert parse_rate(1.4) == 1.4
    assert parse_rate(" 2 ") == 2.0
    with pytest.raises(InvalidArgument):
        parse_rate("two")


def test_parse_rho_forms():
    assert parse_rho("0.3:0.3:0.9") == (0.3, 0.6, 0.9)
    assert parse_rho("0.1,0.5") == (0.1, 0.5)
    assert parse_rho([0.2]) == (0.2,)
    with pytest.raises(InvalidArgument):
        parse_rho("0.9:0.1:0.3")


def test_unknown_key_reports_line(tmp_path, capsys):
    cfg = _write(tmp_path, "seed = 1\n\n[sweep]\nrate_mode = \"fixed\"\nrate_pointz = [1]\n")
    assert run_cli(["sweep", "--config", cfg]) == 2
    assert f"{cfg}:5: unknown key 'rate_pointz'" in capsys.readouterr().err


def test_wrong_type_reports_line(tmp_path, capsys):
    cfg = _write(tmp_path, "[correlate]\nrate_mode = \"fixed\"\nn_samples = \"many\"\n")
    assert run_cli(["correlate", "--config", cfg, "--out", str(tmp_path / "o.csv")]) == 2
    assert ":3:" in capsys.readouterr().err


def test_bad_toml_is_a_config_error(tmp_path, capsys):
    cfg = _write(tmp_path, "seed = \n")
    assert run_cli(["sweep", "--config", cfg]) == 2
    assert "error:" in capsys.readouterr().err


def test_missing_rates_and_mode(tmp_path, capsys):
    cfg = _write(tmp_path, SMALL_SOURCE)
    assert run_cli(["sweep", "--config", cfg, "--mode", "fixed"]) == 2
    assert run_cli(["sweep", "--config", cfg, "--rates", "1"]) == 2
    assert run_cli(["sweep", "--config", cfg, "--mode", "fixed", "--rates", "1.3"]) == 2


def test_bad_flag_exits_with_usage_error(capsys):
    assert run_cli(["sweep", "--no-such-flag"]) == 2


def test_sweep_writes_expected_table(tmp_path):
    cfg = _write(tmp_path, SMALL_SOURCE)
    out = tmp_path / "s.csv"
    status = run_cli(["sweep", "--config", cfg, "--mode", "fixed", "--rates", "log2(3)",
                      "--families", "optimal-deterministic,constrained-deterministic",
                      "--out", str(out)])
    assert status == 0
    rows = list(csv.reader(out.open()))
    assert rows[0] == ["family", "rate_bits", "distortion", "snr_db", "ortho_residual",
                       "err_src_corr", "converged"]
    assert [r[0] for r in rows[1:]] == ["constrained-deterministic", "optimal-deterministic"]


def test_design_then_whiteness_from_bundle(tmp_path):
    cfg = _write(tmp_path, SMALL_SOURCE)
    bundle = tmp_path / "opt.csv"
    assert run_cli(["design", "--config", cfg, "--family", "optimal-deterministic",
                    "--rate", "log2(4)", "--mode", "fixed", "--out", str(bundle)]) == 0
    out = tmp_path / "w.csv"
    assert run_cli(["whiteness", "--config", cfg, "--family", "optimal-deterministic",
                    "--bundle", str(bundle), "--samples", "5000", "--out", str(out)]) == 0
    rows = list(csv.reader(out.open()))
    assert len(rows) == 21
    assert sum(float(r[-1]) for r in rows[1:]) == pytest.approx(1.0)


def test_conventional_has_no_bundle(tmp_path, capsys):
    cfg = _write(tmp_path, SMALL_SOURCE)
    assert run_cli(["design", "--config", cfg, "--family", "conventional-dither",
                    "--mode", "fixed", "--rate", "1"]) == 2


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "randquant", "--help"], capture_output=True,
                         text=True)
    assert res.returncode == 0
    assert "sweep" in res.stdout

import json
import os

import numpy as np
import pytest

from mvhedge.cli import main
from mvhedge.errors import ConfigError
from mvhedge.runconfig import load_config, parse_expression

BASE = """
[model]
theta = 1.0
sigma = 1.0
rho = 0.0
horizon = 1.0
payoff_kind = constant
payoff_a = 1.0

[solver]
lattice_steps = 6
tolerance = 1e-10
pde_nx = 81
pde_nt = 81

[mc]
n_paths = 2000
n_steps = 24
seed = 99

[output]
directory = {out}
"""


def write_config(tmp_path, body=None, **overrides):
    text = (body or BASE).format(out=tmp_path / "out")
    for key, value in overrides.items():
        section, opt = key.split(".")
        lines = []
        in_section = False
        replaced = False
        for line in text.splitlines():
            if line.strip().startswith("["):
                if in_section and not replaced:
                    lines.append(f"{opt} = {value}")
                    replaced = True
                in_section = line.strip() == f"[{section}]"
            elif in_section and line.split("=")[0].strip() == opt:
                line = f"{opt} = {value}"
                replaced = True
            lines.append(line)
        if not replaced:
            lines.append(f"[{section}]\n{opt} = {value}" if f"[{section}]" not in text
                         else f"{opt} = {value}")
        text = "\n".join(lines)
    path = tmp_path / "run.ini"
    path.write_text(text)
    return str(path)


# ------------------------------------------------------------------- parsing

def test_expression_grammar():
    f = parse_expression("1 + 0.5*t - sin(x)**2")
    assert f.uses_x and f.uses_t and not f.is_constant
    val = f(2.0, np.array([0.0, np.pi / 2]))
    np.testing.assert_allclose(val, [2.0, 1.0])
    c = parse_expression("2.5")
    assert c.is_constant and c.is_deterministic
    with pytest.raises(ConfigError):
        parse_expression("__import__('os')")
    with pytest.raises(ConfigError):
        parse_expression("t +")
    with pytest.raises(ConfigError):
        parse_expression("foo(t)")


def test_load_config_defaults_and_validation(tmp_path):
    cfg = load_config(write_config(tmp_path))
    assert cfg.lattice_steps == 6
    assert cfg.h_tilde_sign == "section3"
    assert cfg.formats == ("csv", "json")
    with pytest.raises(ConfigError, match="model.rho"):
        load_config(write_config(tmp_path, **{"model.rho": "1.0"}))
    with pytest.raises(ConfigError, match="solver.tolerance"):
        load_config(write_config(tmp_path, **{"solver.tolerance": "-1"}))
    with pytest.raises(ConfigError, match="unknown option"):
        load_config(write_config(tmp_path, **{"model.bogus": "1"}))
    with pytest.raises(ConfigError):
        load_config(str(tmp_path / "missing.ini"))


# ------------------------------------------------------------------ commands

def test_solve_operator_writes_results(tmp_path):
    cfg_path = write_config(tmp_path)
    out = tmp_path / "out"
    assert main(["solve-operator", "--config", cfg_path, "--quiet"]) == 0
    summary = json.loads((out / "operator_summary.json").read_text())
    assert summary["Y0"] == pytest.approx(0.5, abs=1e-9)
    assert summary["pi0"] == pytest.approx(0.5, abs=1e-9)
    assert (out / "operator_result.csv").exists()
    assert (out / "operator_strategy.csv").exists()


def test_cli_idempotent_outputs(tmp_path):
    cfg_path = write_config(tmp_path)
    out = tmp_path / "out"
    main(["simulate", "--config", cfg_path, "--quiet"])
    first = (out / "hedge_report.csv").read_bytes()
    main(["simulate", "--config", cfg_path, "--quiet"])
    assert (out / "hedge_report.csv").read_bytes() == first


def test_invalid_rho_exits_2(tmp_path, capsys):
    cfg_path = write_config(tmp_path, **{"model.rho": "1.0"})
    assert main(["solve-operator", "--config", cfg_path]) == 2
    err = capsys.readouterr().err
    assert "rho**2 < 1" in err


def test_solver_failure_exits_3(tmp_path):
    cfg_path = write_config(tmp_path, **{"model.rho": "0.9",
                                         "solver.max_iter": "2"})
    assert main(["solve-operator", "--config", cfg_path, "--quiet"]) == 3


def test_solve_bsde_reports_proportionality(tmp_path):
    cfg_path = write_config(tmp_path, **{"model.rho": "0.5"})
    out = tmp_path / "out"
    assert main(["solve-bsde", "--config", cfg_path, "--quiet"]) == 0
    summary = json.loads((out / "bsde_summary.json").read_text())
    assert summary["max_VH_minus_cV"] <= 1e-10
    assert summary["V0"] == pytest.approx(summary["VH0"], abs=1e-10)


def test_solve_bsde_theta_zero_value_one(tmp_path):
    cfg_path = write_config(tmp_path, **{"model.theta": "0.0"})
    out = tmp_path / "out"
    assert main(["solve-bsde", "--config", cfg_path, "--quiet"]) == 0
    summary = json.loads((out / "bsde_summary.json").read_text())
    assert summary["V0"] == pytest.approx(1.0, abs=1e-12)


def test_solve_pde_dump_and_gaps(tmp_path):
    cfg_path = write_config(tmp_path)
    out = tmp_path / "out"
    assert main(["solve-pde", "--config", cfg_path, "--quiet"]) == 0
    lines = (out / "pde_grid.csv").read_text().splitlines()
    nx, nt = int(lines[0].split(",")[0]), int(lines[0].split(",")[1])
    assert (nx, nt) == (81, 81)
    assert len(lines) == 1 + nt
    summary = json.loads((out / "pde_summary.json").read_text())
    assert summary["max_gap_vs_ode"] <= 1e-3
    assert (out / "pde_gaps.csv").exists()


def test_verify_passes_default_and_stress(tmp_path):
    cfg_path = write_config(tmp_path, **{"model.rho": "0.5"})
    out = tmp_path / "out"
    assert main(["verify", "--config", cfg_path, "--quiet"]) == 0
    log = (out / "verify_log.txt").read_text()
    assert "RESULT OK" in log and "FAIL" not in log

    stress = write_config(tmp_path, **{"model.rho": "0.99"})
    assert main(["verify", "--config", stress, "--quiet"]) == 0


def test_verify_flags_flipped_sign(tmp_path):
    cfg_path = write_config(tmp_path, **{"model.rho": "0.5",
                                         "solver.h_tilde_sign": "section1"})
    out = tmp_path / "out"
    assert main(["verify", "--config", cfg_path, "--quiet"]) == 1
    log = (out / "verify_log.txt").read_text()
    assert "FAIL h_tilde_sign" in log
    assert "sign discrepancy" in log


def test_simulate_hidden_claim_replication(tmp_path):
    cfg_path = write_config(tmp_path, **{"model.rho": "0.5",
                                         "model.theta": "0.0",
                                         "model.payoff_kind": "hidden",
                                         "model.payoff_a": "0.0",
                                         "model.payoff_b": "1.0"})
    out = tmp_path / "out"
    assert main(["simulate", "--config", cfg_path, "--quiet"]) == 0
    summary = json.loads((out / "simulate_summary.json").read_text())
    # replication is exact; the tree-solved position differs from 1 by at
    # most one quadrature ulp, leaving squared errors at the rounding floor
    assert summary["mean_sq_error"] <= 1e-28


def test_seed_override_changes_output(tmp_path):
    cfg_path = write_config(tmp_path)
    out = tmp_path / "out"
    main(["simulate", "--config", cfg_path, "--quiet"])
    base = json.loads((out / "simulate_summary.json").read_text())
    main(["simulate", "--config", cfg_path, "--quiet", "--seed", "1234"])
    other = json.loads((out / "simulate_summary.json").read_text())
    assert other["seed"] == 1234
    assert other["mean_sq_error"] != base["mean_sq_error"]


def test_report_renders_figures(tmp_path):
    cfg_path = write_config(tmp_path, **{"mc.n_paths": "500"})
    out = tmp_path / "out"
    assert main(["report", "--config", cfg_path, "--quiet"]) == 0
    for name in ("fig_value_curve.png", "fig_pde_surface.png",
                 "fig_strategy.png", "fig_hedge_hist.png"):
        assert (out / name).stat().st_size > 0
    # delimited outputs sit alongside the figures
    for name in ("operator_result.csv", "bsde_result.csv", "pde_grid.csv",
                 "hedge_report.csv"):
        assert (out / name).exists()

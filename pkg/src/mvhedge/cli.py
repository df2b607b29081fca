"""Batch front door: config in, solver pipelines out.

Subcommands: solve-operator, solve-bsde, solve-pde, simulate, verify, report.
Exit codes: 0 success, 1 verification failure, 2 config error, 3 solver
failure. All randomness flows from the single config seed (--seed overrides).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import bsde as bsde_mod
from . import montecarlo as mc
from . import operator as op
from . import pde as pde_mod
from .errors import ConfigError, MvhError
from .lattice import TimeGrid, build_lattice, martingale_defect
from .model import DiffusionSpec, PayoffSpec
from .runconfig import RunConfig, load_config


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.17g}"
    return str(v)


def write_csv(path, header, rows) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def write_json(path, payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _say(quiet, *parts):
    if not quiet:
        print(*parts)


def _operator_pipeline(cfg: RunConfig):
    spec = cfg.build_spec()
    lattice = build_lattice(TimeGrid(cfg.lattice_steps, cfg.horizon))
    tilde = op.compute_tilde_inputs(spec, lattice, sign=cfg.h_tilde_sign)
    solution = op.solve_martingale_equation(tilde, spec, lattice,
                                            tol=cfg.tolerance,
                                            max_iter=cfg.max_iter or None)
    pi = op.optimal_strategy(solution, tilde, spec, lattice)
    return spec, lattice, tilde, solution, pi


def cmd_solve_operator(cfg: RunConfig, out_dir: str, quiet: bool) -> int:
    spec, lattice, tilde, solution, pi = _operator_pipeline(cfg)
    energy_gap = op.energy_identity_gap(solution, tilde, spec, lattice)
    EY2 = float(np.mean(solution.Y_tilde.terminal ** 2))
    EH2 = float(np.mean(np.asarray(tilde.H_tilde) ** 2))
    summary = {
        "Y0": float(solution.Y_tilde[0][0]),
        "residual_norm": solution.residual_norm,
        "iterations": solution.iterations,
        "energy_identity_gap": energy_gap,
        "E_Y_T_sq": EY2,
        "E_H_tilde_sq": EH2,
        "martingale_defect": martingale_defect(solution.Y_tilde, lattice),
        "pi0": float(pi[0][0]),
        "h_tilde_sign": cfg.h_tilde_sign,
        "lattice_steps": cfg.lattice_steps,
    }
    if "json" in cfg.formats:
        write_json(os.path.join(out_dir, "operator_summary.json"), summary)
    if "csv" in cfg.formats:
        write_csv(os.path.join(out_dir, "operator_result.csv"),
                  ("quantity", "value"), sorted(summary.items()))
        rows = [(t, lattice.times[t], float(pi[t].min()), float(pi[t].mean()),
                 float(pi[t].max())) for t in range(lattice.n_steps)]
        write_csv(os.path.join(out_dir, "operator_strategy.csv"),
                  ("step", "time", "pi_min", "pi_mean", "pi_max"), rows)
    _say(quiet, f"operator: Y0={summary['Y0']:.10g} residual={solution.residual_norm:.3e} "
         f"iterations={solution.iterations}")
    return 0


def cmd_solve_bsde(cfg: RunConfig, out_dir: str, quiet: bool) -> int:
    spec, lattice, tilde, op_solution, op_pi = _operator_pipeline(cfg)
    fb = bsde_mod.solve_fbsde(spec, lattice, tilde, newton_tol=cfg.newton_tol)
    Y_rec, _psi_rec = bsde_mod.reconstruct_operator_solution(
        fb.V, fb.phi, fb.V_H, fb.phi_H, fb.pi_star, fb.X_hat)
    gap_Y = max(float(np.max(np.abs(op_solution.Y_tilde[t] - Y_rec[t])))
                for t in range(lattice.n_steps + 1))
    summary = {
        "V0": float(fb.V[0][0]),
        "VH0": float(fb.V_H[0][0]),
        "pi0": float(fb.pi_star[0][0]),
        "reconstruction_gap_vs_operator": gap_Y,
        "max_VH_minus_cV": float("nan"),
        "ratio_gap_vs_V": float("nan"),
    }
    if spec.payoff.kind == "constant" and spec.payoff.value > 0:
        c = spec.payoff.value
        summary["max_VH_minus_cV"] = max(
            float(np.max(np.abs(fb.V_H[t] - c * fb.V[t])))
            for t in range(lattice.n_steps + 1))
        V_check, report = bsde_mod.value_process(op_solution.Y_tilde, op_pi, c,
                                                 spec, lattice)
        summary["ratio_gap_vs_V"] = max(
            float(np.nanmax(np.abs(V_check[t] - fb.V[t])))
            for t in range(lattice.n_steps + 1))
        summary["min_Y_tilde"] = report.min_Y
        summary["min_dominance"] = report.min_dominance
        summary["positivity_violations"] = len(report.violations)
    if "json" in cfg.formats:
        write_json(os.path.join(out_dir, "bsde_summary.json"), summary)
    if "csv" in cfg.formats:
        write_csv(os.path.join(out_dir, "bsde_result.csv"),
                  ("quantity", "value"), sorted(summary.items()))
        rows = [(t, lattice.times[t], float(fb.V[t].min()), float(fb.V[t].mean()),
                 float(fb.V[t].max()), float(fb.V_H[t].mean()))
                for t in range(lattice.n_steps + 1)]
        write_csv(os.path.join(out_dir, "bsde_values.csv"),
                  ("step", "time", "V_min", "V_mean", "V_max", "VH_mean"), rows)
    _say(quiet, f"bsde: V0={summary['V0']:.10g} VH0={summary['VH0']:.10g} "
         f"pi0={summary['pi0']:.10g} gap={gap_Y:.3e}")
    return 0


def cmd_solve_pde(cfg: RunConfig, out_dir: str, quiet: bool) -> int:
    grid = pde_mod.solve_value_pde(cfg.theta, cfg.rho, x_min=cfg.pde_xmin,
                                   x_max=cfg.pde_xmax, nx=cfg.pde_nx,
                                   nt=cfg.pde_nt, horizon=cfg.horizon,
                                   newton_tol=cfg.newton_tol)
    grid.dump(os.path.join(out_dir, "pde_grid.csv"))
    summary = {"nx": grid.nx, "nt": grid.nt, "u0_mid": float(grid.u[0, grid.nx // 2]),
               "u_min": float(grid.u.min()), "u_max": float(grid.u.max())}
    if cfg.theta.is_deterministic:
        u_ode = pde_mod.ode_u(cfg.theta, cfg.rho, grid.t)
        mid = grid.u[:, grid.nx // 2]
        gaps = np.abs(mid - u_ode)
        summary["max_gap_vs_ode"] = float(gaps.max())
        if "csv" in cfg.formats:
            write_csv(os.path.join(out_dir, "pde_gaps.csv"),
                      ("time", "u_pde_mid", "u_ode", "gap"),
                      [(grid.t[k], mid[k], u_ode[k], gaps[k])
                       for k in range(grid.nt)])
    if "json" in cfg.formats:
        write_json(os.path.join(out_dir, "pde_summary.json"), summary)
    _say(quiet, f"pde: u(0, mid)={summary['u0_mid']:.10g}"
         + (f" max gap vs ode {summary['max_gap_vs_ode']:.3e}"
            if "max_gap_vs_ode" in summary else ""))
    return 0


def _strategy_rule(cfg: RunConfig, spec: DiffusionSpec):
    """Simulation rule: mesh representation for constant claims, tree
    snapping otherwise."""
    if spec.payoff.kind == "constant":
        grid = pde_mod.solve_value_pde(cfg.theta, cfg.rho, x_min=cfg.pde_xmin,
                                       x_max=cfg.pde_xmax, nx=cfg.pde_nx,
                                       nt=cfg.pde_nt, horizon=cfg.horizon,
                                       newton_tol=cfg.newton_tol)
        return mc.MarkovPdeRule(grid, spec, spec.payoff.value)
    if cfg.n_steps % cfg.lattice_steps:
        raise ConfigError("mc.n_steps: must be a multiple of "
                          "solver.lattice_steps for tree-snapped strategies")
    spec2, lattice, tilde, solution, pi = _operator_pipeline(cfg)
    return mc.LatticeRule(pi, lattice)


def cmd_simulate(cfg: RunConfig, out_dir: str, quiet: bool) -> int:
    spec = cfg.build_spec()
    rule = _strategy_rule(cfg, spec)
    batch = mc.simulate_paths(spec, cfg.n_paths, cfg.n_steps, cfg.seed)
    report = mc.hedging_error(batch, rule, spec.payoff, spec.initial_capital)
    if "csv" in cfg.formats:
        write_csv(os.path.join(out_dir, "hedge_report.csv"),
                  ("quantity", "value", "std_error", "n_paths", "n_steps", "seed"),
                  report.csv_rows())
    if "json" in cfg.formats:
        write_json(os.path.join(out_dir, "simulate_summary.json"), {
            "mean_sq_error": report.mean_sq_error,
            "std_error": report.std_error,
            "n_paths": report.n_paths,
            "n_steps": report.n_steps,
            "seed": report.seed,
        })
    _say(quiet, f"simulate: mse={report.mean_sq_error:.10g} "
         f"+- {report.std_error:.3g} (n={report.n_paths})")
    return 0


def _verify_checks(cfg: RunConfig):
    """Invariant suite; yields (name, passed, detail)."""
    spec = cfg.build_spec()
    lattice = build_lattice(TimeGrid(cfg.lattice_steps, cfg.horizon))
    dt = lattice.dt
    tilde = op.compute_tilde_inputs(spec, lattice, sign=cfg.h_tilde_sign)
    solution = op.solve_martingale_equation(tilde, spec, lattice, tol=cfg.tolerance,
                                            max_iter=cfg.max_iter or None)
    pi = op.optimal_strategy(solution, tilde, spec, lattice)
    scale = max(1.0, float(np.mean(np.asarray(tilde.H_tilde) ** 2)))

    defect = martingale_defect(solution.Y_tilde, lattice)
    yield ("martingale_property", defect <= 1e-10, f"defect {defect:.3e}")

    rng_local = np.random.default_rng(cfg.seed)
    ok, worst = True, 0.0
    for _ in range(8):
        y = rng_local.standard_normal(2 ** lattice.n_steps)
        quad = float(np.mean(y * op.apply_operator_A(y, spec, lattice)))
        worst = min(worst, quad)
        ok = ok and quad >= -1e-10
    yield ("operator_positivity", ok, f"min quadratic form {worst:.3e}")

    gap = op.energy_identity_gap(solution, tilde, spec, lattice)
    yield ("energy_identity", gap <= 10 * cfg.tolerance * scale, f"gap {gap:.3e}")

    EY2 = float(np.mean(solution.Y_tilde.terminal ** 2))
    EH2 = float(np.mean(np.asarray(tilde.H_tilde) ** 2))
    yield ("norm_bound", EY2 <= EH2 * (1 + 1e-8) + 1e-12,
           f"E[Y^2]={EY2:.6g} E[H~^2]={EH2:.6g}")

    fb = bsde_mod.solve_fbsde(spec, lattice, tilde, newton_tol=cfg.newton_tol)
    Y_rec, _ = bsde_mod.reconstruct_operator_solution(
        fb.V, fb.phi, fb.V_H, fb.phi_H, fb.pi_star, fb.X_hat)
    gap_Y = max(float(np.max(np.abs(solution.Y_tilde[t] - Y_rec[t])))
                for t in range(lattice.n_steps + 1))
    gap_bound = 5.0 * dt * scale / (1.0 - spec.rho ** 2)
    yield ("bsde_reconstruction", gap_Y <= gap_bound,
           f"max node gap {gap_Y:.3e} (O(dt) coupling, dt={dt:.3g}, "
           f"bound {gap_bound:.3e})")

    if spec.payoff.kind == "constant" and spec.payoff.value > 0:
        c = spec.payoff.value
        _, report = bsde_mod.value_process(solution.Y_tilde, pi, c, spec, lattice)
        yield ("positivity", report.min_Y > 0.0, f"min Y {report.min_Y:.6g}")
        yield ("dominance", report.min_dominance >= -5.0 * dt * max(1.0, c),
               f"min (c - X) - Y = {report.min_dominance:.3e}")

    n_tree = min(5, cfg.lattice_steps)
    small = build_lattice(TimeGrid(n_tree, cfg.horizon))
    tilde_s = op.compute_tilde_inputs(spec, small, sign=cfg.h_tilde_sign)
    sol_s = op.solve_martingale_equation(tilde_s, spec, small, tol=cfg.tolerance)
    pi_s = op.optimal_strategy(sol_s, tilde_s, spec, small)
    tree = mc.FullInfoTree(spec, n_tree)
    resid = (tree.payoff_values(spec.payoff)
             - tree.wealth(pi_s.levels, spec.initial_capital))
    worst_stat = 0.0
    for k in range(n_tree):
        for p in range(2 ** k):
            direction = (tree.prefix[:, k] == p) * tree.dS[:, k]
            worst_stat = max(worst_stat, abs(tree.expectation(resid * direction)))
    bound = 5.0 * (spec.horizon / n_tree) * scale
    yield ("variational_orthogonality", worst_stat <= bound,
           f"max |E[(H - X*) X(delta)]| = {worst_stat:.3e} (bound {bound:.3e})")

    # sign convention check: perfect replication of the hidden claim w0_T
    rho_chk = cfg.rho if cfg.rho != 0.0 else 0.5
    chk_spec = DiffusionSpec(theta=0.0, sigma=1.0, rho=rho_chk, horizon=cfg.horizon,
                             payoff=PayoffSpec.hidden(lambda y: y,
                                                      lambda y: np.ones_like(y),
                                                      label="w0_T"))
    small = build_lattice(TimeGrid(min(6, cfg.lattice_steps), cfg.horizon))
    tilde_c = op.compute_tilde_inputs(chk_spec, small, sign=cfg.h_tilde_sign)
    sol_c = op.solve_martingale_equation(tilde_c, chk_spec, small, tol=cfg.tolerance)
    pi_c = op.optimal_strategy(sol_c, tilde_c, chk_spec, small)
    pi_gap = max(float(np.max(np.abs(pi_c[t] - 1.0))) for t in range(small.n_steps))
    tree_c = mc.FullInfoTree(chk_spec, min(5, small.n_steps))
    err = tree_c.strategy_error([np.ones(2 ** k) for k in range(tree_c.n)],
                                chk_spec.payoff, 0.0)
    replicates = pi_gap <= 1e-8
    detail = (f"perfect replication: max|pi - 1| = {pi_gap:.3e}, "
              f"unit-strategy tree error {err:.3e}")
    if cfg.h_tilde_sign == "section1":
        detail += (" -- the flipped legacy sign yields pi = 2 rho^2 - 1 and a "
                   "strictly positive hedging error; this is the documented "
                   "sign discrepancy, use 'section3'")
    yield ("h_tilde_sign", replicates, detail)


def cmd_verify(cfg: RunConfig, out_dir: str, quiet: bool) -> int:
    lines = []
    all_ok = True
    for name, passed, detail in _verify_checks(cfg):
        all_ok = all_ok and passed
        line = f"{'PASS' if passed else 'FAIL'} {name}: {detail}"
        lines.append(line)
        _say(quiet, line)
    lines.append("RESULT " + ("OK" if all_ok else "FAILED"))
    _say(quiet, lines[-1])
    with open(os.path.join(out_dir, "verify_log.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return 0 if all_ok else 1


def cmd_report(cfg: RunConfig, out_dir: str, quiet: bool) -> int:
    from . import report as report_mod
    return report_mod.run_report(cfg, out_dir, quiet)


_COMMANDS = {
    "solve-operator": cmd_solve_operator,
    "solve-bsde": cmd_solve_bsde,
    "solve-pde": cmd_solve_pde,
    "simulate": cmd_simulate,
    "verify": cmd_verify,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mvhedge",
        description="Mean-variance hedging under restricted information")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="INI run configuration")
        p.add_argument("--out", default=None, help="output directory override")
        p.add_argument("--seed", type=int, default=None, help="seed override")
        p.add_argument("--quiet", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        out_dir = args.out or cfg.out_dir
        os.makedirs(out_dir, exist_ok=True)
        return _COMMANDS[args.command](cfg, out_dir, args.quiet)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except MvhError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

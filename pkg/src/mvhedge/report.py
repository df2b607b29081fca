"""Report pipeline: run the solvers for one config and render figures.

Produces the same delimited outputs as the individual subcommands plus PNG
figures next to them: the value curve against its closed form, the solved
mesh, the strategy profile over the tree, and the simulated shortfall
distribution.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from . import bsde as bsde_mod
from . import cli
from . import montecarlo as mc
from . import operator as op
from . import pde as pde_mod
from .lattice import TimeGrid, build_lattice
from .runconfig import RunConfig


def _save(fig, out_dir, name, quiet):
    path = os.path.join(out_dir, name)
    fig.savefig(path, dpi=130, bbox_inches="tight")
    plt.close(fig)
    if not quiet:
        print(f"wrote {path}")


def run_report(cfg: RunConfig, out_dir: str, quiet: bool) -> int:
    cli.cmd_solve_operator(cfg, out_dir, quiet)
    cli.cmd_solve_bsde(cfg, out_dir, quiet)
    cli.cmd_solve_pde(cfg, out_dir, quiet)
    cli.cmd_simulate(cfg, out_dir, quiet)

    spec = cfg.build_spec()
    lattice = build_lattice(TimeGrid(cfg.lattice_steps, cfg.horizon))
    tilde = op.compute_tilde_inputs(spec, lattice, sign=cfg.h_tilde_sign)
    solution = op.solve_martingale_equation(tilde, spec, lattice,
                                            tol=cfg.tolerance,
                                            max_iter=cfg.max_iter or None)
    pi = op.optimal_strategy(solution, tilde, spec, lattice)
    fb = bsde_mod.solve_fbsde(spec, lattice, tilde, newton_tol=cfg.newton_tol)
    grid = pde_mod.solve_value_pde(cfg.theta, cfg.rho, x_min=cfg.pde_xmin,
                                   x_max=cfg.pde_xmax, nx=cfg.pde_nx,
                                   nt=cfg.pde_nt, horizon=cfg.horizon,
                                   newton_tol=cfg.newton_tol)

    # value curves: PDE mid-line, backward-system V range, closed form
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    mid = grid.u[:, grid.nx // 2]
    ax.plot(grid.t, mid, label="pde u(t, 0)", lw=1.5)
    if cfg.theta.is_deterministic:
        ax.plot(grid.t, pde_mod.ode_u(cfg.theta, cfg.rho, grid.t), "--",
                label="root closed form", lw=1.2)
    v_lo = [float(fb.V[t].min()) for t in range(lattice.n_steps + 1)]
    v_hi = [float(fb.V[t].max()) for t in range(lattice.n_steps + 1)]
    ax.fill_between(lattice.times, v_lo, v_hi, alpha=0.25,
                    label="tree V range")
    ax.set_xlabel("t")
    ax.set_ylabel("value process")
    ax.legend()
    _save(fig, out_dir, "fig_value_curve.png", quiet)

    # solved mesh
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    im = ax.pcolormesh(grid.x, grid.t, grid.u, shading="auto")
    fig.colorbar(im, ax=ax, label="u(t, x)")
    ax.set_xlabel("x")
    ax.set_ylabel("t")
    _save(fig, out_dir, "fig_pde_surface.png", quiet)

    # strategy values per node at a few steps
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    steps = sorted({0, lattice.n_steps // 2, lattice.n_steps - 1})
    for t in steps:
        ax.plot(lattice.w[t], pi[t], "o", ms=3,
                label=f"t = {lattice.times[t]:.3g}")
    ax.set_xlabel("observed state w")
    ax.set_ylabel("optimal position")
    ax.legend()
    _save(fig, out_dir, "fig_strategy.png", quiet)

    # simulated shortfall distribution
    rule = cli._strategy_rule(cfg, spec)
    n_paths = min(cfg.n_paths, 20000)
    batch = mc.simulate_paths(spec, n_paths, cfg.n_steps, cfg.seed)
    X = mc.terminal_wealth(batch, rule, spec.initial_capital)
    from .model import payoff_on_paths
    H = payoff_on_paths(spec.payoff, batch.dw.sum(axis=1), batch.dw0.sum(axis=1))
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    ax.hist(X - H, bins=80)
    ax.set_xlabel("terminal shortfall X_T - H")
    ax.set_ylabel("paths")
    _save(fig, out_dir, "fig_hedge_hist.png", quiet)
    return 0

"""Nonlinear value PDE of the diffusion model and its closed-form reductions.

For a constant claim the value process is u(t, w_t) where u solves

    u_t + (1/2) u_xx = (theta(t,x) u + rho u_x)^2 / (1 - rho^2 + rho^2 u),
    u(T, x) = 1,

solved backward by a Crank-Nicolson step with a damped-free Newton iteration
and reflecting (u_x = 0) boundaries. For x-independent theta the PDE
collapses to an ODE whose solution is the root nu(rho, alpha) of
(1-rho^2)/u - rho^2 ln u = alpha evaluated at alpha = 1-rho^2 + int_t^T
theta^2; at rho = 0 everything is explicit. A Feynman-Kac Monte Carlo
representation of u provides an independent consistency check.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import cumulative_simpson
from scipy.linalg import solve_banded

from . import rng
from .errors import (ExtrapolationError, InvariantViolation, NewtonError)
from .model import as_coefficient


@dataclass
class PdeGrid:
    """Backward solution u on a rectangular time-space mesh.

    u has shape (nt, nx) with u[k] the space profile at time t[k]; the last
    row is the terminal condition u(T, x) = 1.
    """

    t: np.ndarray
    x: np.ndarray
    u: np.ndarray
    rho: float

    @property
    def nx(self) -> int:
        return self.x.size

    @property
    def nt(self) -> int:
        return self.t.size

    @property
    def dx(self) -> float:
        return float(self.x[1] - self.x[0])

    def u_x(self) -> np.ndarray:
        """Centered space derivative honoring the reflecting boundaries."""
        ux = np.zeros_like(self.u)
        ux[:, 1:-1] = (self.u[:, 2:] - self.u[:, :-2]) / (2.0 * self.dx)
        return ux

    def time_index(self, t_value: float) -> int:
        k = int(np.argmin(np.abs(self.t - t_value)))
        if abs(self.t[k] - t_value) > 1e-9 * max(1.0, abs(self.t[-1])):
            raise ValueError(f"t={t_value} is not a grid time level")
        return k

    def dump(self, path) -> None:
        """Write the documented exchange format: one header line
        `nx,nt,x_min,x_max,t_min,t_max`, then nt rows of nx comma-separated
        u-values (time ascending)."""
        with open(path, "w") as fh:
            fh.write(f"{self.nx},{self.nt},{self.x[0]:.17g},{self.x[-1]:.17g},"
                     f"{self.t[0]:.17g},{self.t[-1]:.17g}\n")
            for row in self.u:
                fh.write(",".join(f"{v:.17g}" for v in row) + "\n")

    @classmethod
    def load(cls, path, rho: float = 0.0) -> "PdeGrid":
        with open(path) as fh:
            nx, nt, x0, x1, t0, t1 = fh.readline().strip().split(",")
            nx, nt = int(nx), int(nt)
            u = np.loadtxt(fh, delimiter=",", ndmin=2)
        if u.shape != (nt, nx):
            raise ValueError(f"grid body {u.shape} does not match header ({nt},{nx})")
        return cls(t=np.linspace(float(t0), float(t1), nt),
                   x=np.linspace(float(x0), float(x1), nx), u=u, rho=rho)


def _banded_tridiag(diag, lower, upper):
    ab = np.zeros((3, diag.size))
    ab[0, 1:] = upper[:-1]
    ab[1] = diag
    ab[2, :-1] = lower[1:]
    return ab


def solve_value_pde(theta, rho: float, x_min: float = -6.0, x_max: float = 6.0,
                    nx: int = 401, nt: int = 400, horizon: float = 1.0,
                    newton_tol: float = 1e-12, max_newton: int = 30) -> PdeGrid:
    """Crank-Nicolson backward march with a per-step Newton iteration.

    Parameters
    ----------
    theta : callable or number
        Market price of risk theta(t, x).
    rho : float
        Observation correlation, rho**2 < 1.
    x_min, x_max, nx, nt, horizon : grid geometry (nt time points).
    newton_tol : max-norm residual target of each implicit step.

    Returns
    -------
    PdeGrid with u > 0 everywhere; raises NewtonError on a stalled step and
    InvariantViolation if positivity is lost.
    """
    if not rho ** 2 < 1.0:
        raise ValueError("rho**2 must be < 1")
    theta = as_coefficient(theta)
    x = np.linspace(x_min, x_max, nx)
    t = np.linspace(0.0, horizon, nt)
    dx = x[1] - x[0]
    u = np.empty((nt, nx))
    u[-1] = 1.0

    def d2(v):
        out = np.empty_like(v)
        out[1:-1] = (v[2:] - 2.0 * v[1:-1] + v[:-2]) / dx ** 2
        out[0] = 2.0 * (v[1] - v[0]) / dx ** 2        # ghost u[-1] = u[1]
        out[-1] = 2.0 * (v[-2] - v[-1]) / dx ** 2
        return out

    def d1(v):
        out = np.zeros_like(v)
        out[1:-1] = (v[2:] - v[:-2]) / (2.0 * dx)
        return out

    def rhs_terms(tk, v):
        th = np.broadcast_to(np.asarray(theta(tk, x), dtype=float), x.shape)
        p = d1(v)
        D = 1.0 - rho ** 2 + rho ** 2 * v
        q = th * v + rho * p
        return th, p, D, q

    def G(tk, v):
        th, p, D, q = rhs_terms(tk, v)
        return -0.5 * d2(v) + q ** 2 / D

    for k in range(nt - 2, -1, -1):
        dt = t[k + 1] - t[k]
        g_next = G(t[k + 1], u[k + 1])
        v = u[k + 1].copy()
        converged = False
        for _ in range(max_newton):
            R = u[k + 1] - v - 0.5 * dt * (G(t[k], v) + g_next)
            if float(np.abs(R).max()) <= newton_tol:
                converged = True
                break
            th, p, D, q = rhs_terms(t[k], v)
            f_u = 2.0 * q * th / D - q ** 2 * rho ** 2 / D ** 2
            f_p = 2.0 * q * rho / D
            # J = dR/dv = -I - dt/2 (-1/2 L2 + diag(f_u) + diag(f_p) L1)
            diag = -1.0 - 0.5 * dt * (1.0 / dx ** 2 + f_u)
            upper = -0.5 * dt * (-0.5 / dx ** 2 + f_p / (2.0 * dx))
            lower = -0.5 * dt * (-0.5 / dx ** 2 - f_p / (2.0 * dx))
            upper = np.full(nx, 0.0) + upper
            lower = np.full(nx, 0.0) + lower
            # reflecting boundaries: L2 rows use 2/dx^2 off-diagonal, L1 rows 0
            upper[0] = -0.5 * dt * (-1.0 / dx ** 2)
            lower[-1] = -0.5 * dt * (-1.0 / dx ** 2)
            ab = _banded_tridiag(diag, lower, upper)
            v = v - solve_banded((1, 1), ab, R)
        if not converged:
            raise NewtonError(f"implicit step at time index {k} stalled: "
                              f"residual {float(np.abs(R).max()):.3e}")
        if not np.all(v > 0.0):
            raise InvariantViolation(f"u lost positivity at time index {k}")
        u[k] = v
    return PdeGrid(t=t, x=x, u=u, rho=rho)


def nu_root(rho: float, alpha) -> np.ndarray | float:
    """Unique positive root of (1-rho^2)/u - rho^2 ln u = alpha, alpha > 0.

    Vectorized in alpha; bracketing bisection followed by Newton polishing to
    |f(u)| <= 1e-13. Decreasing in alpha.
    """
    a = np.atleast_1d(np.asarray(alpha, dtype=float))
    if np.any(a <= 0.0):
        raise ValueError("alpha must be positive")
    if not rho ** 2 < 1.0:
        raise ValueError("rho**2 must be < 1")
    r2 = rho ** 2

    def f(u):
        return (1.0 - r2) / u - r2 * np.log(u) - a

    lo = np.full_like(a, 1.0)
    while np.any(f(lo) < 0.0):
        lo = np.where(f(lo) < 0.0, lo / 2.0, lo)
    hi = np.full_like(a, 1.0)
    while np.any(f(hi) > 0.0):
        hi = np.where(f(hi) > 0.0, hi * 2.0, hi)
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        neg = f(mid) < 0.0
        hi = np.where(neg, mid, hi)
        lo = np.where(neg, lo, mid)
    u = 0.5 * (lo + hi)
    for _ in range(4):
        fp = -(1.0 - r2) / u ** 2 - r2 / u
        u = u - f(u) / fp
    if np.any(np.abs(f(u)) > 1e-13 * np.maximum(1.0, np.abs(a))):
        raise NewtonError("nu_root failed to polish below 1e-13")
    return u if np.ndim(alpha) else float(u[0])


def _tail_integrals(fn, time_grid, refine: int = 32):
    """int_t^T fn(s) ds at each grid time by composite Simpson on a refined mesh."""
    tg = np.asarray(time_grid, dtype=float)
    if tg.size == 1:
        return np.zeros(1)
    fine = np.concatenate([np.linspace(tg[i], tg[i + 1], refine + 1)[:-1]
                           for i in range(tg.size - 1)] + [tg[-1:]])
    vals = np.asarray(fn(fine), dtype=float)
    cum = np.concatenate([[0.0], cumulative_simpson(vals, x=fine)])
    knots = np.arange(0, fine.size, refine)
    return cum[-1] - cum[knots]


def ode_u(theta, rho: float, time_grid) -> np.ndarray:
    """Deterministic-theta reduction: u(t) = nu(rho, 1-rho^2 + int_t^T theta^2)."""
    theta = as_coefficient(theta)
    tails = _tail_integrals(lambda s: np.asarray(theta(s, np.zeros_like(s))) ** 2,
                            time_grid)
    return np.atleast_1d(nu_root(rho, 1.0 - rho ** 2 + tails))


def closed_form_rho0(theta, c_H: float, time_grid):
    """Explicit rho = 0, deterministic-theta solution for a constant claim.

    Returns (Y0, phi_curve, pi_curve) on the given time grid in the unit
    volatility normalization: Y0 = c / (1 + int_0^T theta^2); the noise
    integrand vanishes for constant claims, and the strategy curve is
    c theta_t / (1 + int_0^T theta^2).
    """
    theta = as_coefficient(theta)
    tg = np.asarray(time_grid, dtype=float)
    total = _tail_integrals(lambda s: np.asarray(theta(s, np.zeros_like(s))) ** 2,
                            tg)[0]
    Y0 = c_H / (1.0 + total)
    phi_curve = np.zeros_like(tg)
    pi_curve = c_H * np.asarray(theta(tg, np.zeros_like(tg)), dtype=float) / (1.0 + total)
    return float(Y0), phi_curve, pi_curve


def _exponential_drivers(grid: PdeGrid, theta):
    """g = -(theta u + rho u_x) / (1 - rho^2 + rho^2 u) on the mesh."""
    theta = as_coefficient(theta)
    ux = grid.u_x()
    th = np.stack([np.broadcast_to(np.asarray(theta(tk, grid.x), dtype=float),
                                   grid.x.shape) for tk in grid.t])
    D = 1.0 - grid.rho ** 2 + grid.rho ** 2 * grid.u
    return -(th * grid.u + grid.rho * ux) / D, th


def markov_representation(grid: PdeGrid, w_path, theta, rho: float, c_H: float,
                          sigma=None, times=None):
    """Pathwise value martingale and strategy from the solved mesh.

    Evaluates Y_t = c u(t, w_t) E_t and pi_t = c g~(t, w_t) E_t / sigma with
    g~ = (theta u + rho u_x)/(1 - rho^2 + rho^2 u) and E the stochastic
    exponential of -int g~ (theta ds + rho dw), accumulated in logs with the
    Ito correction. The path must stay inside the solved x-range.
    """
    theta = as_coefficient(theta)
    sigma = as_coefficient(1.0 if sigma is None else sigma)
    w = np.asarray(w_path, dtype=float)
    if times is None:
        times = np.linspace(grid.t[0], grid.t[-1], w.size)
    times = np.asarray(times, dtype=float)
    if w.min() < grid.x[0] or w.max() > grid.x[-1]:
        raise ExtrapolationError(
            f"path range [{w.min():.3g}, {w.max():.3g}] leaves the grid "
            f"[{grid.x[0]:.3g}, {grid.x[-1]:.3g}]")
    ux_grid = grid.u_x()

    def at(tk, wk, table):
        k = grid.time_index(tk)
        return float(np.interp(wk, grid.x, table[k]))

    n = w.size - 1
    Y = np.empty(w.size)
    pi = np.empty(n)
    log_e = 0.0
    for k in range(w.size):
        uk = at(times[k], w[k], grid.u)
        Y[k] = c_H * uk * np.exp(log_e)
        if k == n:
            break
        uxk = at(times[k], w[k], ux_grid)
        thk = float(np.asarray(theta(times[k], w[k])))
        g_t = (thk * uk + rho * uxk) / (1.0 - rho ** 2 + rho ** 2 * uk)
        pi[k] = c_H * g_t * np.exp(log_e) / float(np.asarray(sigma(times[k], w[k])))
        dt = times[k + 1] - times[k]
        dw = w[k + 1] - w[k]
        log_e += -g_t * (thk * dt + rho * dw) - 0.5 * g_t ** 2 * rho ** 2 * dt
    return Y, pi


def feynman_kac_check(grid: PdeGrid, theta, rho: float, t0: float, x0: float,
                      n_paths: int, seed: int, chunk: int = 50000):
    """Monte Carlo estimate of u(t0, x0) from its exponential representation.

    Simulates the observed Brownian motion on the grid's own time levels and
    accumulates the stochastic exponential of int g (theta ds + rho dw) with
    g read off the mesh (values are held flat beyond the space boundaries,
    consistent with the reflecting boundary condition). The ds-integrals use
    the trapezoid rule along the path, the dw-sum the left endpoint. Returns
    (estimate, standard_error); paths are seeded per (seed, path, step) so
    any chunking reproduces identical numbers.
    """
    g_grid, th_grid = _exponential_drivers(grid, theta)
    k0 = grid.time_index(t0)
    n_steps = grid.nt - 1 - k0
    total = 0.0
    total_sq = 0.0
    done = 0
    while done < n_paths:
        m = min(chunk, n_paths - done)
        # draw index of (path p, step k) is p * n_steps + k, so any chunking
        # of the path range reproduces identical increments
        z = rng.normals(seed, done * n_steps, m * n_steps).reshape(m, n_steps)
        w = np.full(m, float(x0))
        log_e = np.zeros(m)
        g = np.interp(w, grid.x, g_grid[k0])
        drift = g * np.interp(w, grid.x, th_grid[k0]) - 0.5 * g ** 2 * rho ** 2
        for k in range(k0, grid.nt - 1):
            dt = grid.t[k + 1] - grid.t[k]
            dw = np.sqrt(dt) * z[:, k - k0]
            log_e += g * rho * dw
            w += dw
            g_next = np.interp(w, grid.x, g_grid[k + 1])
            drift_next = (g_next * np.interp(w, grid.x, th_grid[k + 1])
                          - 0.5 * g_next ** 2 * rho ** 2)
            log_e += 0.5 * (drift + drift_next) * dt
            g, drift = g_next, drift_next
        vals = np.exp(log_e)
        total += float(vals.sum())
        total_sq += float((vals ** 2).sum())
        done += m
    mean = total / n_paths
    var = max(total_sq / n_paths - mean ** 2, 0.0)
    return mean, float(np.sqrt(var / n_paths))

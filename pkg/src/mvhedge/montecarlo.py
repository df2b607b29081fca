"""Simulation, hedging-error estimation and the exact small-tree oracle.

Paths are driven by two independent Gaussian increment streams (observed dw
and orthogonal dw_perp) drawn from a counter-based generator keyed by
(seed, path, step), so results are bit-reproducible under any chunking. The
asset noise is dw0 = rho dw - sqrt(1-rho^2) dw_perp and the traded return
increment is dS = sigma (theta dt + dw0).

Strategy rules see only the observed increments, which enforces the
restricted-information constraint by construction. For small period counts a
full-information product tree with exactly correlated +-1 signs provides the
global least-squares optimum and exact expectations, used as the oracle
against which continuous-time formulas are certified.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import rng
from .errors import ResourceError, ShapeError
from .lattice import AdaptedField, ObservationLattice
from .model import DiffusionSpec, PayoffSpec, payoff_on_paths
from .pde import PdeGrid, ode_u

#: default cap on n_paths * n_steps (about 0.5 GB per increment array)
DEFAULT_BUDGET = 2 ** 26

#: hard cap for the exact oracle: 4**n atoms
ORACLE_MAX_PERIODS = 6


@dataclass
class PathBatch:
    """Increments of the observed and orthogonal Brownian motions."""

    dw: np.ndarray        # (n_paths, n_steps), Normal(0, dt)
    dw_perp: np.ndarray
    spec: DiffusionSpec
    seed: int

    @property
    def n_paths(self) -> int:
        return self.dw.shape[0]

    @property
    def n_steps(self) -> int:
        return self.dw.shape[1]

    @property
    def dt(self) -> float:
        return self.spec.horizon / self.n_steps

    @property
    def dw0(self) -> np.ndarray:
        r = self.spec.rho
        return r * self.dw - math.sqrt(1.0 - r ** 2) * self.dw_perp

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.spec.horizon, self.n_steps + 1)


def simulate_paths(spec: DiffusionSpec, n_paths: int, n_steps: int,
                   seed: int, budget: int = DEFAULT_BUDGET) -> PathBatch:
    """Euler increments of the two-noise market; see the module docstring."""
    if n_paths * n_steps > budget:
        raise ResourceError(
            f"n_paths * n_steps = {n_paths * n_steps:,} exceeds the budget "
            f"{budget:,}; chunk the run or raise the budget")
    dt = spec.horizon / n_steps
    z = rng.normals(seed, 0, 2 * n_paths * n_steps)
    z = z.reshape(n_paths, n_steps, 2)
    sq = math.sqrt(dt)
    return PathBatch(dw=sq * z[:, :, 0], dw_perp=sq * z[:, :, 1],
                     spec=spec, seed=seed)


class StrategyRule:
    """Per-step trading rule fed only the observed increments.

    reset(n_paths, times) is called once per evaluation; step(dw_prev) is
    then called once per trading date with the increment observed over the
    previous step (None on the first call) and returns the money position for
    the coming step.
    """

    def reset(self, n_paths: int, times: np.ndarray) -> None:
        self.k = 0
        self.n_paths = n_paths
        self.times = times

    def step(self, dw_prev):
        raise NotImplementedError

    def _advance(self):
        self.k += 1


class ConstantRule(StrategyRule):
    def __init__(self, value: float):
        self.value = float(value)

    def step(self, dw_prev):
        self._advance()
        return np.full(self.n_paths, self.value)


class CurveRule(StrategyRule):
    """Deterministic strategy curve pi(t)."""

    def __init__(self, fn):
        self.fn = fn

    def step(self, dw_prev):
        t = self.times[self.k]
        self._advance()
        return np.full(self.n_paths, float(self.fn(t)))


class SignalRule(StrategyRule):
    """pi_t = fn(t, w_t) of the running observed state."""

    def __init__(self, fn):
        self.fn = fn

    def reset(self, n_paths, times):
        super().reset(n_paths, times)
        self.w = np.zeros(n_paths)

    def step(self, dw_prev):
        if dw_prev is not None:
            self.w = self.w + dw_prev
        t = self.times[self.k]
        self._advance()
        return np.broadcast_to(np.asarray(self.fn(t, self.w), dtype=float),
                               (self.n_paths,)).copy()


class ShiftedRule(StrategyRule):
    """Base rule plus a constant bump (negative-control helper)."""

    def __init__(self, base: StrategyRule, delta: float):
        self.base = base
        self.delta = float(delta)

    def reset(self, n_paths, times):
        super().reset(n_paths, times)
        self.base.reset(n_paths, times)

    def step(self, dw_prev):
        self._advance()
        return self.base.step(dw_prev) + self.delta


class LatticeRule(StrategyRule):
    """Evaluate a tree strategy on finer paths by block-sign snapping.

    The simulation step count must be a multiple of the tree step count;
    each tree period's node is chosen by the sign of the aggregated observed
    increment over the period, so the rule remains predictable.
    """

    def __init__(self, pi_field: AdaptedField, lattice: ObservationLattice):
        self.pi = pi_field
        self.lattice = lattice

    def reset(self, n_paths, times):
        super().reset(n_paths, times)
        n_fine = times.size - 1
        if n_fine % self.lattice.n_steps:
            raise ShapeError(f"{n_fine} simulation steps do not subdivide "
                             f"{self.lattice.n_steps} tree steps")
        self.block = n_fine // self.lattice.n_steps
        self.node = np.zeros(n_paths, dtype=np.int64)
        self.acc = np.zeros(n_paths)
        self.tree_step = 0

    def step(self, dw_prev):
        if dw_prev is not None:
            self.acc += dw_prev
            if self.k % self.block == 0:
                self.node = 2 * self.node + (self.acc < 0)
                self.acc[:] = 0.0
                self.tree_step += 1
        self._advance()
        return self.pi[self.tree_step][self.node]


class MarkovPdeRule(StrategyRule):
    """Strategy of the mesh representation for a constant claim.

    pi_t = c g~(t, w_t) E_t / sigma(t, w_t), with the stochastic exponential
    E accumulated from the observed path; u and u_x are interpolated from the
    solved grid (linear in t and x).
    """

    def __init__(self, grid: PdeGrid, spec: DiffusionSpec, c_H: float):
        self.grid = grid
        self.spec = spec
        self.c = float(c_H)
        self.ux = grid.u_x()

    def reset(self, n_paths, times):
        super().reset(n_paths, times)
        self.w = np.zeros(n_paths)
        self.log_e = np.zeros(n_paths)
        self._prev = None

    def _interp(self, table, t, w):
        g = self.grid
        j = min(max(int(np.searchsorted(g.t, t, side="right")) - 1, 0), g.nt - 2)
        lam = (t - g.t[j]) / (g.t[j + 1] - g.t[j])
        lo = np.interp(w, g.x, table[j])
        hi = np.interp(w, g.x, table[j + 1])
        return (1.0 - lam) * lo + lam * hi

    def step(self, dw_prev):
        rho = self.spec.rho
        if dw_prev is not None:
            t_prev = self.times[self.k - 1]
            dt = self.times[self.k] - t_prev
            self.log_e += (-self._prev_g * (self._prev_th * dt + rho * dw_prev)
                           - 0.5 * self._prev_g ** 2 * rho ** 2 * dt)
            self.w = self.w + dw_prev
        t = self.times[self.k]
        u = self._interp(self.grid.u, t, self.w)
        ux = self._interp(self.ux, t, self.w)
        th = np.broadcast_to(np.asarray(self.spec.theta(t, self.w), dtype=float),
                             self.w.shape)
        sg = np.broadcast_to(np.asarray(self.spec.sigma(t, self.w), dtype=float),
                             self.w.shape)
        g = (th * u + rho * ux) / (1.0 - rho ** 2 + rho ** 2 * u)
        self._prev_g, self._prev_th = g, th
        self._advance()
        return self.c * g * np.exp(self.log_e) / sg


@dataclass
class HedgeReport:
    """Summary of E[(x + int pi dS - H)^2] over a batch."""

    mean_sq_error: float
    std_error: float
    n_paths: int
    n_steps: int
    seed: int
    wealth_mean: float
    wealth_std: float
    wealth_min: float
    wealth_max: float
    shortfall_mean: float

    def csv_rows(self):
        meta = (self.n_paths, self.n_steps, self.seed)
        rows = [("mean_sq_error", self.mean_sq_error, self.std_error) + meta]
        for name in ("wealth_mean", "wealth_std", "wealth_min", "wealth_max",
                     "shortfall_mean"):
            rows.append((name, getattr(self, name), "") + meta)
        return rows


def _run_paths(batch: PathBatch, rule: StrategyRule, x: float):
    """One sequential pass: wealth and both terminal states.

    The observed and asset accumulators use the same summation order as the
    wealth update, so a replicating strategy nets an exactly zero shortfall
    path by path.
    """
    spec = batch.spec
    dt = batch.dt
    times = batch.times
    dw0 = batch.dw0
    w = np.zeros(batch.n_paths)
    w0 = np.zeros(batch.n_paths)
    X = np.full(batch.n_paths, float(x))
    rule.reset(batch.n_paths, times)
    dw_prev = None
    for k in range(batch.n_steps):
        pi = rule.step(dw_prev)
        th = np.broadcast_to(np.asarray(spec.theta(times[k], w), dtype=float), w.shape)
        sg = np.broadcast_to(np.asarray(spec.sigma(times[k], w), dtype=float), w.shape)
        X = X + pi * sg * (th * dt + dw0[:, k])
        w0 = w0 + dw0[:, k]
        dw_prev = batch.dw[:, k]
        w = w + dw_prev
    return X, w, w0


def terminal_wealth(batch: PathBatch, rule: StrategyRule, x: float) -> np.ndarray:
    """x + sum_k pi_k sigma_k (theta_k dt + dw0_k) per path."""
    return _run_paths(batch, rule, x)[0]


def hedging_error(batch: PathBatch, rule: StrategyRule, payoff: PayoffSpec,
                  x: float) -> HedgeReport:
    """Mean and standard error of the squared terminal shortfall."""
    X, w_T, w0_T = _run_paths(batch, rule, x)
    H = payoff_on_paths(payoff, w_T, w0_T)
    sq = (X - H) ** 2
    n = batch.n_paths
    return HedgeReport(
        mean_sq_error=float(sq.mean()),
        std_error=float(sq.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0,
        n_paths=n, n_steps=batch.n_steps, seed=batch.seed,
        wealth_mean=float(X.mean()), wealth_std=float(X.std(ddof=1)) if n > 1 else 0.0,
        wealth_min=float(X.min()), wealth_max=float(X.max()),
        shortfall_mean=float((X - H).mean()))


@dataclass
class PerturbationRow:
    label: str
    statistic: float
    std_error: float


def perturbation_test(batch: PathBatch, pi_star_rule: StrategyRule,
                      directions, payoff: PayoffSpec, x: float):
    """First-order optimality statistics E[(H - X*) X(delta)] per direction.

    directions is a list of (label, StrategyRule); each statistic should be
    statistically compatible with zero (up to 3 standard errors plus the
    time-discretization bias) when pi_star_rule is optimal.
    """
    X_star, w_T, w0_T = _run_paths(batch, pi_star_rule, x)
    H = payoff_on_paths(payoff, w_T, w0_T)
    R = H - X_star
    n = batch.n_paths
    rows = []
    for label, rule in directions:
        Xd = terminal_wealth(batch, rule, 0.0)
        prod = R * Xd
        rows.append(PerturbationRow(label, float(prod.mean()),
                                    float(prod.std(ddof=1) / math.sqrt(n))))
    return rows


class FullInfoTree:
    """Product tree of correlated +-1 sign pairs with exact expectations.

    Per period the joint law of (asset sign, observed sign) puts mass
    (1+rho)/4 on agreeing pairs and (1-rho)/4 on disagreeing ones, giving
    E[xi0 xi] = rho exactly; increments are signs scaled by sqrt(dt).
    """

    def __init__(self, spec: DiffusionSpec, n_periods: int):
        if n_periods > ORACLE_MAX_PERIODS:
            raise ResourceError(f"n_periods={n_periods} too large: the tree "
                                f"holds 4**n atoms (cap {ORACLE_MAX_PERIODS})")
        self.spec = spec
        self.n = n_periods
        self.dt = spec.horizon / n_periods
        sq = math.sqrt(self.dt)
        atoms = 4 ** n_periods
        digits = (np.arange(atoms)[:, None] // 4 ** np.arange(n_periods - 1, -1, -1)[None, :]) % 4
        self.xi0 = np.where(digits < 2, 1.0, -1.0)          # asset sign
        self.xi = np.where(digits % 2 == 0, 1.0, -1.0)      # observed sign
        agree = self.xi0 == self.xi
        p = np.where(agree, (1.0 + spec.rho) / 4.0, (1.0 - spec.rho) / 4.0)
        self.prob = p.prod(axis=1)
        # observed state before each period and observed-prefix node index
        w_cum = np.concatenate([np.zeros((atoms, 1)), np.cumsum(self.xi * sq, axis=1)],
                               axis=1)
        self.w_before = w_cum[:, :-1]
        bits = (self.xi < 0).astype(np.int64)
        idx = np.zeros((atoms, n_periods + 1), dtype=np.int64)
        for k in range(n_periods):
            idx[:, k + 1] = 2 * idx[:, k] + bits[:, k]
        self.prefix = idx  # prefix[:, k] indexes the node before period k
        times = np.linspace(0.0, spec.horizon, n_periods + 1)[:-1]
        th = np.stack([np.broadcast_to(np.asarray(spec.theta(times[k], self.w_before[:, k]),
                                                  dtype=float), (atoms,))
                       for k in range(n_periods)], axis=1)
        sg = np.stack([np.broadcast_to(np.asarray(spec.sigma(times[k], self.w_before[:, k]),
                                                  dtype=float), (atoms,))
                       for k in range(n_periods)], axis=1)
        self.dS = sg * (th * self.dt + self.xi0 * sq)
        self.dS_hat = sg * (th * self.dt + spec.rho * self.xi * sq)

    def expectation(self, values) -> float:
        return float(self.prob @ np.asarray(values, dtype=float))

    def payoff_values(self, payoff: PayoffSpec) -> np.ndarray:
        sq = math.sqrt(self.dt)
        w_T = sq * self.xi.sum(axis=1)
        w0_T = sq * self.xi0.sum(axis=1)
        return payoff_on_paths(payoff, w_T, w0_T)

    def strategy_values(self, pi_levels) -> np.ndarray:
        """Per-atom, per-period strategy from observed-prefix node values."""
        cols = [np.asarray(pi_levels[k], dtype=float)[self.prefix[:, k]]
                for k in range(self.n)]
        return np.stack(cols, axis=1)

    def wealth(self, pi_levels, x: float) -> np.ndarray:
        return x + (self.strategy_values(pi_levels) * self.dS).sum(axis=1)

    def strategy_error(self, pi_levels, payoff: PayoffSpec, x: float) -> float:
        """Exact E[(x + sum pi dS - H)^2] for an observed-prefix strategy."""
        gap = self.wealth(pi_levels, x) - self.payoff_values(payoff)
        return self.expectation(gap ** 2)

    def projected_integral(self, pi_levels) -> np.ndarray:
        """E[sum pi dS | full observed path] per atom (exact projection)."""
        contrib = self.strategy_values(pi_levels) * self.dS
        total = contrib.sum(axis=1)
        groups = self.prefix[:, -1]  # terminal observed path
        weighted = np.bincount(groups, weights=self.prob * total, minlength=2 ** self.n)
        mass = np.bincount(groups, weights=self.prob, minlength=2 ** self.n)
        return (weighted / mass)[groups]

    def hat_integral(self, pi_levels) -> np.ndarray:
        """sum pi dS_hat per atom (integral against the projected price)."""
        return (self.strategy_values(pi_levels) * self.dS_hat).sum(axis=1)


def markov_tree_strategy(spec: DiffusionSpec, n_periods: int, c: float):
    """Continuous-time optimal strategy for a constant claim on tree paths.

    Uses the deterministic-theta closed form u(t) (the root representation)
    and log-accumulates the stochastic exponential along each observed
    prefix; this is the continuum formula discretized onto the tree, so its
    exact tree error exceeds the oracle optimum by O(dt).
    """
    n = n_periods
    dt = spec.horizon / n
    sq = math.sqrt(dt)
    times = np.linspace(0.0, spec.horizon, n + 1)
    u = ode_u(spec.theta, spec.rho, times)
    rho = spec.rho
    th = np.array([float(np.asarray(spec.theta(tk, 0.0))) for tk in times])
    sg = np.array([float(np.asarray(spec.sigma(tk, 0.0))) for tk in times])
    g_t = (th * u) / (1.0 - rho ** 2 + rho ** 2 * u)
    levels = []
    log_e = np.zeros(1)
    for k in range(n):
        levels.append(c * g_t[k] * np.exp(log_e) / sg[k])
        incr = np.empty(2 ** (k + 1))
        ito = 0.5 * g_t[k] ** 2 * rho ** 2 * dt
        incr[0::2] = -g_t[k] * (th[k] * dt + rho * sq) - ito
        incr[1::2] = -g_t[k] * (th[k] * dt - rho * sq) - ito
        log_e = log_e.repeat(2) + incr
    return levels


@dataclass
class OracleResult:
    pi_levels: list
    error: float
    tree: FullInfoTree


def lsq_oracle(spec: DiffusionSpec, n_periods: int,
               payoff: PayoffSpec | None = None, x: float = 0.0) -> OracleResult:
    """Exact global least-squares optimum over observed-prefix strategies.

    Solves the normal equations of min E[(x + sum_k pi_k dS_k - H)^2] over
    the (2**n - 1)-dimensional space of strategies measurable with respect to
    the observed sign prefix, with exact expectations on the product tree.
    """
    if payoff is None:
        payoff = spec.payoff
    tree = FullInfoTree(spec, n_periods)
    n = n_periods
    cols = []
    for k in range(n):
        for p in range(2 ** k):
            cols.append((tree.prefix[:, k] == p) * tree.dS[:, k])
    C = np.stack(cols, axis=1)
    W = tree.prob
    H = tree.payoff_values(payoff)
    G = C.T @ (W[:, None] * C)
    b = C.T @ (W * (H - x))
    coef, *_ = np.linalg.lstsq(G, b, rcond=None)
    pi_levels = []
    pos = 0
    for k in range(n):
        width = 2 ** k
        pi_levels.append(coef[pos:pos + width].copy())
        pos += width
    return OracleResult(pi_levels=pi_levels,
                        error=tree.strategy_error(pi_levels, payoff, x),
                        tree=tree)

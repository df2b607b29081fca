"""Binary path-tree discretization of the observation filtration.

The observed Brownian motion w is discretized as a non-recombining binary
tree: node j at step t has children 2j ("up", +sqrt(dt)) and 2j+1 ("down",
-sqrt(dt)), each with conditional probability 1/2. The discrete w is then an
exact martingale with bracket <w>_t = t, and every conditional expectation is
a pairwise mean, so projections and Kunita-Watanabe decompositions are exact
to rounding. Value processes adapted to the observed filtration live on the
tree as one array of node values per step ("adapted fields").
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import LatticeSizeError, ShapeError

#: hard cap on tree depth; 2**20 terminal atoms ~ 8 MB per float64 level and
#: ~16 MB for a full adapted field, doubling with every extra step.
MAX_STEPS = 20

DRIVERS = ("dw", "dt", "dS_hat")


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on [0, horizon] with n_steps steps of length dt."""

    n_steps: int
    horizon: float

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.n_steps + 1)


class ObservationLattice:
    """Binary non-recombining path tree carrying the observed filtration.

    Attributes
    ----------
    grid : TimeGrid
    w : list of ndarray
        w[t] holds the w-value of each of the 2**t step-t path atoms.
    """

    def __init__(self, grid: TimeGrid):
        if grid.n_steps > MAX_STEPS:
            raise LatticeSizeError(
                f"n_steps={grid.n_steps} exceeds cap {MAX_STEPS}: the tree "
                f"stores 2**n path atoms ({2 ** grid.n_steps:,} at the "
                f"requested depth), which is the memory bound"
            )
        self.grid = grid
        sq = math.sqrt(grid.dt)
        levels = [np.zeros(1)]
        for t in range(grid.n_steps):
            levels.append(np.repeat(levels[t], 2) + self.child_signs(t) * sq)
        self.w = levels

    @property
    def n_steps(self) -> int:
        return self.grid.n_steps

    @property
    def dt(self) -> float:
        return self.grid.dt

    @property
    def sqrt_dt(self) -> float:
        return math.sqrt(self.grid.dt)

    @property
    def times(self) -> np.ndarray:
        return self.grid.times

    @staticmethod
    def child_signs(t: int) -> np.ndarray:
        """Increment signs for the step t -> t+1, child-ordered (+1, -1, ...)."""
        return np.tile([1.0, -1.0], 2 ** t)

    def increments(self, t: int) -> np.ndarray:
        """Delta w over step t -> t+1, one value per step-(t+1) atom."""
        return self.child_signs(t) * self.sqrt_dt

    def atom_probability(self, t: int) -> float:
        return 2.0 ** -t

    def expectation(self, terminal_values: np.ndarray) -> float:
        """Expectation of a terminal payoff under the uniform atom weights."""
        v = np.asarray(terminal_values, dtype=float)
        if v.shape != (2 ** self.n_steps,):
            raise ShapeError(f"expected {2 ** self.n_steps} terminal values, got {v.shape}")
        return float(np.mean(v))

    def node_index(self, signs) -> int:
        """Tree node reached by a sequence of +-1 observed increment signs."""
        j = 0
        for s in signs:
            j = 2 * j + (0 if s > 0 else 1)
        return j


class AdaptedField:
    """Process adapted to the tree: one array of node values per step.

    A field spanning steps 0..n has n+1 levels; a predictable integrand
    (value at step t known at step t) spans steps 0..n-1 and has n levels.
    """

    def __init__(self, levels):
        self.levels = [np.atleast_1d(np.asarray(v, dtype=float)) for v in levels]
        for t, v in enumerate(self.levels):
            if v.shape != (2 ** t,):
                raise ShapeError(f"level {t} has shape {v.shape}, expected ({2 ** t},)")

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, t) -> np.ndarray:
        return self.levels[t]

    @property
    def terminal(self) -> np.ndarray:
        return self.levels[-1]

    @classmethod
    def constant(cls, value: float, n_levels: int) -> "AdaptedField":
        return cls([np.full(2 ** t, float(value)) for t in range(n_levels)])

    @classmethod
    def from_function(cls, fn, lattice: ObservationLattice, n_levels=None) -> "AdaptedField":
        """Sample fn(t_value, w_values) on each level; n_levels defaults to n+1."""
        if n_levels is None:
            n_levels = lattice.n_steps + 1
        times = lattice.times
        return cls([np.broadcast_to(np.asarray(fn(times[t], lattice.w[t]), dtype=float),
                                    (2 ** t,)).copy()
                    for t in range(n_levels)])

    def map(self, fn) -> "AdaptedField":
        return AdaptedField([fn(v) for v in self.levels])

    def binary_op(self, other, op) -> "AdaptedField":
        if isinstance(other, AdaptedField):
            return AdaptedField([op(a, b) for a, b in zip(self.levels, other.levels)])
        return AdaptedField([op(a, other) for a in self.levels])

    def __add__(self, other):
        return self.binary_op(other, np.add)

    def __sub__(self, other):
        return self.binary_op(other, np.subtract)

    def __mul__(self, other):
        return self.binary_op(other, np.multiply)

    def __truediv__(self, other):
        return self.binary_op(other, np.divide)


@dataclass
class GkwParts:
    """Discrete Kunita-Watanabe decomposition of a terminal claim.

    initial_value + sum_t integrand[t] * dw reconstructs the induced
    martingale; residual_defect is the largest conditional covariance left
    between the reconstruction residual and dw (zero on a binary tree up to
    rounding).
    """

    initial_value: float
    integrand: AdaptedField  # predictable: levels 0..n-1
    residual_defect: float


def build_lattice(grid: TimeGrid) -> ObservationLattice:
    """Build the observation tree; raises LatticeSizeError above the cap."""
    return ObservationLattice(grid)


def conditional_expectation(field_at_next_step, lattice=None) -> np.ndarray:
    """Project step-(t+1) node values onto step t (pairwise child mean)."""
    v = np.atleast_1d(np.asarray(field_at_next_step, dtype=float))
    n = v.shape[0]
    if n < 2 or n & (n - 1):
        raise ShapeError(f"level size {n} is not a power of two >= 2")
    if lattice is not None and n > 2 ** lattice.n_steps:
        raise ShapeError(f"level size {n} exceeds the lattice terminal size")
    return v.reshape(-1, 2).mean(axis=1)


def induced_martingale(terminal_values, lattice: ObservationLattice) -> AdaptedField:
    """All conditional expectations E[Y_T | step-t node] of a terminal claim."""
    n = lattice.n_steps
    v = np.asarray(terminal_values, dtype=float)
    if v.shape != (2 ** n,):
        raise ShapeError(f"expected {2 ** n} terminal values, got {v.shape}")
    levels = [v]
    for _ in range(n):
        levels.append(conditional_expectation(levels[-1]))
    return AdaptedField(levels[::-1])


def gkw_integrand_level(next_level: np.ndarray, lattice: ObservationLattice) -> np.ndarray:
    """E[dY dw | node] / dt for one step, from the step-(t+1) values."""
    up = next_level[0::2]
    dn = next_level[1::2]
    return (up - dn) / (2.0 * lattice.sqrt_dt)


def discrete_gkw(terminal_values, lattice: ObservationLattice) -> GkwParts:
    """Decompose a terminal claim against the observed increments.

    On the binary tree the representation is exact: each martingale increment
    is proportional to the +-sqrt(dt) branch increment, so the residual is
    zero and the integrand at a node is (up-child - down-child) / (2 sqrt(dt)).
    """
    mart = induced_martingale(terminal_values, lattice)
    integrand = []
    defect = 0.0
    for t in range(lattice.n_steps):
        phi = gkw_integrand_level(mart[t + 1], lattice)
        integrand.append(phi)
        resid_incr = mart[t + 1] - np.repeat(mart[t], 2) \
            - np.repeat(phi, 2) * lattice.increments(t)
        cond_cov = 0.5 * (resid_incr[0::2] - resid_incr[1::2]) * lattice.sqrt_dt
        defect = max(defect, float(np.max(np.abs(cond_cov))))
    return GkwParts(float(mart[0][0]), AdaptedField(integrand), defect)


def stochastic_integral(integrand: AdaptedField, driver: str,
                        lattice: ObservationLattice,
                        theta: AdaptedField | None = None,
                        sigma: AdaptedField | None = None,
                        rho: float = 0.0) -> AdaptedField:
    """Running sums of a predictable integrand against a driver.

    driver "dw" integrates the observed increments, "dt" time, and "dS_hat"
    the projected price sigma * (theta dt + rho dw); the coefficient fields
    are only consulted for "dS_hat".
    """
    if driver not in DRIVERS:
        raise ValueError(f"unknown driver {driver!r}; expected one of {DRIVERS}")
    if len(integrand) < lattice.n_steps:
        raise ShapeError("integrand must be predictable with one level per step")
    dt = lattice.dt
    levels = [np.zeros(1)]
    for t in range(lattice.n_steps):
        pi = integrand[t]
        if driver == "dw":
            incr = pi.repeat(2) * lattice.increments(t)
        elif driver == "dt":
            incr = pi.repeat(2) * dt
        else:
            drift = (sigma[t] * theta[t] * dt).repeat(2)
            noise = (sigma[t] * rho).repeat(2) * lattice.increments(t)
            incr = pi.repeat(2) * (drift + noise)
        levels.append(levels[t].repeat(2) + incr)
    return AdaptedField(levels)


def martingale_defect(field: AdaptedField, lattice: ObservationLattice) -> float:
    """Max over nodes of |node value - mean of its children|."""
    worst = 0.0
    for t in range(min(len(field), lattice.n_steps + 1) - 1):
        gap = field[t] - conditional_expectation(field[t + 1])
        worst = max(worst, float(np.max(np.abs(gap))))
    return worst

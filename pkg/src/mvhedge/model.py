"""Market model and claim descriptions for the partially observed diffusion.

Two correlated Brownian motions drive the market: the return of the risky
asset follows dS = sigma * (theta dt + dw0) while only the second Brownian
motion w is observed (corr(dw0, dw) = rho). Strategies may depend on the
w-path only. theta is the market price of risk, sigma the volatility, and
lambda = theta / sigma the drift density of the return.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import CapabilityError, ConditionError
from .lattice import AdaptedField, ObservationLattice

PAYOFF_KINDS = ("constant", "observable", "hidden")


def as_coefficient(c) -> Callable:
    """Wrap a number into a constant coefficient function of (t, x)."""
    if callable(c):
        return c
    value = float(c)
    return lambda t, x: np.full_like(np.asarray(x, dtype=float), value)


@dataclass(frozen=True)
class PayoffSpec:
    """Contingent claim H at the horizon.

    kind "constant" pays value; "observable" pays g(w_T); "hidden" pays
    g(w0_T) where w0 is the unobserved driving Brownian motion. Hidden claims
    need g_prime for the conditional integrand.
    """

    kind: str
    value: float = 0.0
    g: Optional[Callable] = None
    g_prime: Optional[Callable] = None
    label: str = ""

    def __post_init__(self):
        if self.kind not in PAYOFF_KINDS:
            raise CapabilityError(
                f"unsupported payoff kind {self.kind!r}; supported: {PAYOFF_KINDS}")
        if self.kind != "constant" and self.g is None:
            raise CapabilityError(f"{self.kind} payoff needs a function g")

    @classmethod
    def constant(cls, value: float) -> "PayoffSpec":
        return cls("constant", value=float(value), label=f"constant({value})")

    @classmethod
    def observable(cls, g, label="g(w_T)") -> "PayoffSpec":
        return cls("observable", g=g, label=label)

    @classmethod
    def hidden(cls, g, g_prime, label="g(w0_T)") -> "PayoffSpec":
        return cls("hidden", g=g, g_prime=g_prime, label=label)


def make_payoff(kind: str, family: str = "linear", a: float = 0.0,
                b: float = 1.0, strike: float = 0.0) -> PayoffSpec:
    """Named payoff families usable from run configurations.

    linear: a + b*y, square: (y - strike)**2, call: max(y - strike, 0),
    put: max(strike - y, 0).
    """
    if kind == "constant":
        return PayoffSpec.constant(a)
    if family == "linear":
        g = lambda y: a + b * np.asarray(y, dtype=float)
        gp = lambda y: np.full_like(np.asarray(y, dtype=float), b)
    elif family == "square":
        g = lambda y: (np.asarray(y, dtype=float) - strike) ** 2
        gp = lambda y: 2.0 * (np.asarray(y, dtype=float) - strike)
    elif family == "call":
        g = lambda y: np.maximum(np.asarray(y, dtype=float) - strike, 0.0)
        gp = lambda y: (np.asarray(y, dtype=float) > strike).astype(float)
    elif family == "put":
        g = lambda y: np.maximum(strike - np.asarray(y, dtype=float), 0.0)
        gp = lambda y: -(np.asarray(y, dtype=float) < strike).astype(float)
    else:
        raise CapabilityError(f"unknown payoff family {family!r}")
    label = f"{family}({a},{b},{strike})"
    if kind == "observable":
        return PayoffSpec.observable(g, label=label)
    if kind == "hidden":
        return PayoffSpec.hidden(g, gp, label=label)
    raise CapabilityError(f"unsupported payoff kind {kind!r}")


@dataclass
class DiffusionSpec:
    """Market coefficients, horizon, claim and initial capital.

    theta and sigma may be numbers or callables of (t, x) with x the observed
    state w_t; rho is the correlation between the asset noise and the
    observation noise and must satisfy rho**2 < 1 strictly.
    """

    theta: Callable | float
    sigma: Callable | float
    rho: float
    horizon: float
    payoff: PayoffSpec = field(default_factory=lambda: PayoffSpec.constant(1.0))
    initial_capital: float = 0.0

    def __post_init__(self):
        self.theta = as_coefficient(self.theta)
        self.sigma = as_coefficient(self.sigma)
        self.rho = float(self.rho)
        if not self.rho ** 2 < 1.0:
            raise ConditionError(
                f"rho={self.rho} violates the strict information gap: "
                "rho**2 < 1 is required")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")

    def theta_field(self, lattice: ObservationLattice) -> AdaptedField:
        f = AdaptedField.from_function(self.theta, lattice)
        if not np.all([np.isfinite(v).all() for v in f.levels]):
            raise ConditionError("theta is not finite on the lattice")
        return f

    def sigma_field(self, lattice: ObservationLattice) -> AdaptedField:
        f = AdaptedField.from_function(self.sigma, lattice)
        low = min(float(v.min()) for v in f.levels)
        if not low > 0:
            raise ConditionError(f"sigma must be bounded away from 0; min sampled {low}")
        return f


def payoff_on_lattice_terminal(payoff: PayoffSpec, lattice: ObservationLattice) -> np.ndarray:
    """Terminal payoff values for claims measurable on the observed tree."""
    if payoff.kind == "constant":
        return np.full(2 ** lattice.n_steps, payoff.value)
    if payoff.kind == "observable":
        return np.asarray(payoff.g(lattice.w[-1]), dtype=float)
    raise CapabilityError("hidden claims have no exact lattice terminal values; "
                          "use the conditional-projection inputs instead")


def payoff_on_paths(payoff: PayoffSpec, w_T: np.ndarray, w0_T: np.ndarray) -> np.ndarray:
    """Evaluate the claim on simulated terminal values."""
    if payoff.kind == "constant":
        return np.full_like(w_T, payoff.value)
    if payoff.kind == "observable":
        return np.asarray(payoff.g(w_T), dtype=float)
    return np.asarray(payoff.g(w0_T), dtype=float)

"""Martingale operator equation for the optimal restricted-information hedge.

The terminal value of the optimal-hedge martingale Y solves the linear
equation (Id + A) Y_T = H_tilde, where on the lattice

    (A xi)_T = sum_t (theta_t Y_t + rho phi_t) (theta_t dt + rho dw_t) / (1 - rho^2)

with Y_t the conditional expectation of xi at step t and phi_t its
Kunita-Watanabe integrand against dw. H_adj ("H tilde") is the claim
projected on the observed filtration and corrected by the predictable
integrand h_tilde. The optimal strategy is assembled from (Y, phi, h_tilde).

A is positive: (xi, A xi) = E sum (theta Y + rho phi)^2 dt / (1-rho^2) >= 0,
exactly on the tree. The same computation shows the discrete A is in fact
self-adjoint under the atom-probability inner product (the dense assembly is
asserted symmetric in the tests), so the normal equations never leave the
Krylov space of A itself; we still solve via CGNR, which only relies on
positivity.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import CapabilityError, ConditionError, SolverError
from .lattice import (AdaptedField, GkwParts, ObservationLattice,
                      conditional_expectation, discrete_gkw,
                      gkw_integrand_level, induced_martingale,
                      stochastic_integral)
from .model import DiffusionSpec, payoff_on_lattice_terminal

H_TILDE_SIGNS = ("section3", "section1")


@dataclass
class TildeInputs:
    """Inputs of the operator equation derived from the claim.

    h_tilde is predictable (levels 0..n-1); H_tilde lives on the terminal
    atoms; H_hat is the projected claim E[H | observed path up to t].
    """

    h_tilde: AdaptedField
    H_tilde: np.ndarray
    H_hat: AdaptedField
    sign: str = "section3"


@dataclass
class OperatorSolution:
    Y_tilde: AdaptedField
    phi_tilde: GkwParts  # integrand of Y against dw
    residual_norm: float
    iterations: int
    residual_history: list = dc_field(default_factory=list)

    def psi_tilde(self, spec: DiffusionSpec, lattice: ObservationLattice) -> AdaptedField:
        """Integrand against the projected price martingale: phi / (rho sigma)."""
        if spec.rho == 0.0:
            raise ConditionError("psi_tilde is undefined at rho = 0; use phi_tilde")
        sig = spec.sigma_field(lattice)
        return AdaptedField([self.phi_tilde.integrand[t] / (spec.rho * sig[t])
                             for t in range(len(self.phi_tilde.integrand))])


def _gauss_hermite_expectation(fn, mean, variance, order=20):
    """E[fn(N(mean, variance))] by Gauss-Hermite quadrature, vectorized in mean.

    Weights are renormalized to unit total and the rule is anchored at the
    mean, E[f] = f(m) + sum w_i (f(x_i) - f(m)), so constant integrands are
    reproduced exactly rather than to quadrature rounding.
    """
    nodes, weights = np.polynomial.hermite.hermgauss(order)
    weights = weights / weights.sum()
    scale = np.sqrt(2.0 * variance)
    m = np.atleast_1d(np.asarray(mean, dtype=float))
    samples = m[:, None] + scale * nodes[None, :]
    at_mean = np.asarray(fn(m), dtype=float)
    vals = np.asarray(fn(samples), dtype=float)
    return at_mean + (vals - at_mean[:, None]) @ weights


def compute_tilde_inputs(spec: DiffusionSpec, lattice: ObservationLattice,
                         sign: str = "section3", gh_order: int = 20) -> TildeInputs:
    """Project the claim onto the observed filtration.

    Constant and observable claims have h_tilde = 0 and H_tilde equal to the
    claim itself on the tree. Hidden claims g(w0_T) use the Gaussian
    conditional law w0_T | observed path ~ N(rho w_t, T - rho^2 t): the
    orthogonal integrand is -sqrt(1-rho^2) E[g'], and

        h_tilde = (1 - rho^2) E[g'(N(rho w_t, T - rho^2 t))] / sigma_t

    under the default "section3" sign convention ("section1" flips it; that
    convention fails the perfect-replication check and is kept only for
    reproducing the discrepancy).
    """
    if sign not in H_TILDE_SIGNS:
        raise ValueError(f"unknown h_tilde sign {sign!r}; expected {H_TILDE_SIGNS}")
    n = lattice.n_steps
    rho = spec.rho
    payoff = spec.payoff

    if payoff.kind in ("constant", "observable"):
        terminal = payoff_on_lattice_terminal(payoff, lattice)
        zero = AdaptedField([np.zeros(2 ** t) for t in range(n)])
        return TildeInputs(zero, terminal, induced_martingale(terminal, lattice), sign)

    if payoff.g_prime is None:
        raise CapabilityError(
            "hidden claims need g_prime: the conditional integrand of a "
            "general terminal claim is a Malliavin derivative, which is "
            "outside the supported payoff families")

    T = spec.horizon
    sig = spec.sigma_field(lattice)
    times = lattice.times
    factor = (1.0 - rho ** 2) if sign == "section3" else -(1.0 - rho ** 2)
    h_levels = []
    for t in range(n):
        var = T - rho ** 2 * times[t]
        eg = _gauss_hermite_expectation(payoff.g_prime, rho * lattice.w[t], var, gh_order)
        h_levels.append(factor * eg / sig[t])
    h_tilde = AdaptedField(h_levels)

    hat_levels = []
    for t in range(n + 1):
        var = T - rho ** 2 * times[t]
        hat_levels.append(_gauss_hermite_expectation(payoff.g, rho * lattice.w[t],
                                                     var, gh_order))
    H_hat = AdaptedField(hat_levels)

    theta = spec.theta_field(lattice)
    correction = stochastic_integral(h_tilde * (1.0 / (1.0 - rho ** 2)), "dS_hat",
                                     lattice, theta=theta, sigma=sig, rho=rho)
    return TildeInputs(h_tilde, H_hat.terminal - correction.terminal, H_hat, sign)


class _OperatorContext:
    """Precomputed coefficient levels for repeated operator applications."""

    def __init__(self, spec: DiffusionSpec, lattice: ObservationLattice):
        if not spec.rho ** 2 < 1.0:
            raise ConditionError("operator requires rho**2 < 1")
        self.lattice = lattice
        self.rho = spec.rho
        self.theta = spec.theta_field(lattice)
        self.dim = 2 ** lattice.n_steps

    def apply(self, xi: np.ndarray) -> np.ndarray:
        """One application of A to terminal values (backward pass + path sums)."""
        lat = self.lattice
        n = lat.n_steps
        dt, sq = lat.dt, lat.sqrt_dt
        rho = self.rho
        # backward: conditional expectations and dw-integrands of xi
        levels = [np.asarray(xi, dtype=float)]
        for _ in range(n):
            levels.append(conditional_expectation(levels[-1]))
        levels = levels[::-1]
        # forward: accumulate (theta Y + rho phi)(theta dt + rho dw) / (1-rho^2)
        acc = np.zeros(1)
        for t in range(n):
            phi = gkw_integrand_level(levels[t + 1], lat)
            c = (self.theta[t] * levels[t] + rho * phi) / (1.0 - rho ** 2)
            incr = np.empty(2 ** (t + 1))
            incr[0::2] = c * (self.theta[t] * dt + rho * sq)
            incr[1::2] = c * (self.theta[t] * dt - rho * sq)
            acc = acc.repeat(2) + incr
        return acc


def apply_operator_A(terminal_values, spec: DiffusionSpec,
                     lattice: ObservationLattice) -> np.ndarray:
    """Apply the drift-and-projection operator A to terminal values."""
    return _OperatorContext(spec, lattice).apply(np.asarray(terminal_values, dtype=float))


def solve_martingale_equation(tilde: TildeInputs, spec: DiffusionSpec,
                              lattice: ObservationLattice, tol: float = 1e-10,
                              max_iter: int | None = None) -> OperatorSolution:
    """Solve (Id + A) Y_T = H_tilde by CGNR and rebuild the martingale.

    Matrix-free conjugate gradients on the normal equations B^T B x = B^T b
    with B = Id + A; only the positivity of A is used. Converges when the
    true residual ||B x - b|| drops below tol * ||b|| in the atom-probability
    norm; raises SolverError with the residual history otherwise.
    """
    ctx = _OperatorContext(spec, lattice)
    b = np.asarray(tilde.H_tilde, dtype=float)
    dim = ctx.dim
    if b.shape != (dim,):
        raise ValueError(f"H_tilde has shape {b.shape}, expected ({dim},)")
    if max_iter is None:
        max_iter = 10 * dim

    def B(v):
        return v + ctx.apply(v)

    norm_b = float(np.linalg.norm(b))
    history = []
    if norm_b == 0.0:
        x = np.zeros(dim)
        iters = 0
    else:
        # CGNR; B is self-adjoint here so B^T r = B r (tests assert symmetry)
        x = np.zeros(dim)
        r = b - B(x)
        z = B(r)
        p = z.copy()
        zz = float(z @ z)
        iters = 0
        converged = False
        for iters in range(1, max_iter + 1):
            w = B(p)
            alpha = zz / float(w @ w)
            x += alpha * p
            r -= alpha * w
            res = float(np.linalg.norm(r))
            history.append(res / norm_b)
            if res <= tol * norm_b:
                converged = True
                break
            z = B(r)
            zz_new = float(z @ z)
            p = z + (zz_new / zz) * p
            zz = zz_new
        if not converged:
            raise SolverError(
                f"CGNR did not reach tol={tol} in {max_iter} iterations "
                f"(relative residual {history[-1]:.3e})", residual_history=history)

    residual = float(np.sqrt(np.mean((B(x) - b) ** 2)))
    return OperatorSolution(Y_tilde=induced_martingale(x, lattice),
                            phi_tilde=discrete_gkw(x, lattice),
                            residual_norm=residual, iterations=iters,
                            residual_history=history)


def optimal_strategy(solution: OperatorSolution, tilde: TildeInputs,
                     spec: DiffusionSpec, lattice: ObservationLattice) -> AdaptedField:
    """Optimal money-in-stock process per node.

    pi_t = (h_tilde_t + (theta_t/sigma_t) Y_t + rho phi_t / sigma_t) / (1-rho^2);
    the rho-weighted term vanishes automatically at rho = 0, where the price
    projection carries no observable noise.
    """
    theta = spec.theta_field(lattice)
    sig = spec.sigma_field(lattice)
    rho = spec.rho
    levels = []
    for t in range(lattice.n_steps):
        lam = theta[t] / sig[t]
        levels.append((tilde.h_tilde[t] + lam * solution.Y_tilde[t]
                       + rho * solution.phi_tilde.integrand[t] / sig[t])
                      / (1.0 - rho ** 2))
    return AdaptedField(levels)


def hedged_wealth(pi: AdaptedField, spec: DiffusionSpec,
                  lattice: ObservationLattice, x: float) -> AdaptedField:
    """Projected wealth x + integral of pi against the projected price."""
    theta = spec.theta_field(lattice)
    sig = spec.sigma_field(lattice)
    integral = stochastic_integral(pi, "dS_hat", lattice, theta=theta,
                                   sigma=sig, rho=spec.rho)
    return AdaptedField([v + x for v in integral.levels])


def energy_identity_gap(solution: OperatorSolution, tilde: TildeInputs,
                        spec: DiffusionSpec, lattice: ObservationLattice) -> float:
    """|E[Y_T H_tilde] - E[Y_T^2] - E sum (theta Y + rho phi)^2 dt/(1-rho^2)|.

    Both sides are exact tree expectations; for the exact solution the gap is
    zero, so the observed gap measures solver residual.
    """
    theta = spec.theta_field(lattice)
    rho = spec.rho
    YT = solution.Y_tilde.terminal
    lhs = float(np.mean(YT * tilde.H_tilde) - np.mean(YT ** 2))
    rhs = 0.0
    for t in range(lattice.n_steps):
        num = (theta[t] * solution.Y_tilde[t]
               + rho * solution.phi_tilde.integrand[t]) ** 2
        rhs += float(np.mean(num)) * lattice.dt / (1.0 - rho ** 2)
    return abs(lhs - rhs)

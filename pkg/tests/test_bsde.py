import numpy as np
import pytest

from mvhedge import (DiffusionSpec, PayoffSpec, TimeGrid, build_lattice,
                     compute_tilde_inputs, fb_strategy, hedged_wealth,
                     optimal_strategy, reconstruct_operator_solution,
                     solve_fbsde, solve_martingale_equation, solve_V,
                     solve_VH, value_process)
from mvhedge.lattice import conditional_expectation, gkw_integrand_level


def constant_spec(theta=1.0, rho=0.5, c=1.0, T=1.0):
    return DiffusionSpec(theta=theta, sigma=1.0, rho=rho, horizon=T,
                         payoff=PayoffSpec.constant(c))


def solve_all(spec, n):
    lat = build_lattice(TimeGrid(n, spec.horizon))
    tilde = compute_tilde_inputs(spec, lat)
    fb = solve_fbsde(spec, lat, tilde)
    return lat, tilde, fb


# ---------------------------------------------------------------------- V

def test_V_is_one_without_drift():
    spec = constant_spec(theta=0.0, rho=0.6)
    lat = build_lattice(TimeGrid(6, 1.0))
    V, phi = solve_V(spec, lat)
    for level in V.levels:
        np.testing.assert_allclose(level, 1.0, atol=1e-13)
    for level in phi.levels:
        np.testing.assert_allclose(level, 0.0, atol=1e-13)


def test_V0_converges_to_closed_form():
    # rho = 0, theta = 1, T = 1: V_0 -> 1 / (1 + T) = 0.5
    spec = constant_spec(theta=1.0, rho=0.0)
    gaps = {}
    for n in (6, 12):
        lat = build_lattice(TimeGrid(n, 1.0))
        V, _ = solve_V(spec, lat)
        gaps[n] = abs(V[0][0] - 0.5)
    assert gaps[12] < 0.02
    assert gaps[12] < 0.7 * gaps[6]


def test_V_freezes_when_drift_stops():
    # theta vanishes after t0: the driver is zero there, so V = 1 onwards
    t0 = 0.5
    theta = lambda t, x: np.where(t < t0, 1.0, 0.0) + 0.0 * x
    spec = DiffusionSpec(theta=theta, sigma=1.0, rho=0.6, horizon=1.0,
                         payoff=PayoffSpec.constant(1.0))
    lat = build_lattice(TimeGrid(8, 1.0))
    V, _ = solve_V(spec, lat)
    for t in range(4, 9):  # t0 = step 4 of 8
        np.testing.assert_allclose(V[t], 1.0, atol=1e-13)
    assert V[0][0] < 1.0


def test_V_range_invariant():
    spec = constant_spec(theta=1.0, rho=0.9)
    lat = build_lattice(TimeGrid(8, 1.0))
    V, _ = solve_V(spec, lat)
    for level in V.levels:
        assert np.all(level > 0.0) and np.all(level <= 1.0 + 1e-14)


# ---------------------------------------------------------------------- V^H

def test_VH_proportional_for_constant_claim():
    spec = constant_spec(theta=1.0, rho=0.5, c=2.0)
    lat, tilde, fb = solve_all(spec, 8)
    for t in range(9):
        np.testing.assert_allclose(fb.V_H[t], 2.0 * fb.V[t], atol=1e-13)


def test_VH_zero_claim():
    spec = constant_spec(theta=1.0, rho=0.5, c=1.0)
    lat = build_lattice(TimeGrid(5, 1.0))
    tilde = compute_tilde_inputs(spec, lat)
    V, phi = solve_V(spec, lat)
    zero = type(tilde)(h_tilde=tilde.h_tilde, H_tilde=np.zeros(32),
                       H_hat=tilde.H_hat, sign=tilde.sign)
    V_H, _ = solve_VH(V, phi, zero, spec, lat)
    for level in V_H.levels:
        np.testing.assert_allclose(level, 0.0, atol=1e-14)


def test_VH_is_projection_without_drift():
    payoff = PayoffSpec.observable(lambda y: y ** 2)
    spec = DiffusionSpec(theta=0.0, sigma=1.0, rho=0.5, horizon=1.0,
                         payoff=payoff)
    lat = build_lattice(TimeGrid(6, 1.0))
    tilde = compute_tilde_inputs(spec, lat)
    V, phi = solve_V(spec, lat)
    V_H, _ = solve_VH(V, phi, tilde, spec, lat)
    mart = np.asarray(tilde.H_tilde, dtype=float)
    for t in range(6, -1, -1):
        np.testing.assert_allclose(V_H[t], mart, atol=1e-13)
        if t:
            mart = conditional_expectation(mart)


def test_VH_linearity():
    spec = constant_spec(theta=1.0, rho=0.6)
    lat = build_lattice(TimeGrid(6, 1.0))
    tilde = compute_tilde_inputs(spec, lat)
    V, phi = solve_V(spec, lat)
    gen = np.random.default_rng(3)
    h1 = gen.standard_normal(64)
    h2 = gen.standard_normal(64)
    mk = lambda h: type(tilde)(h_tilde=tilde.h_tilde, H_tilde=h,
                               H_hat=tilde.H_hat, sign=tilde.sign)
    a, b = 1.7, -0.6
    VH1, _ = solve_VH(V, phi, mk(h1), spec, lat)
    VH2, _ = solve_VH(V, phi, mk(h2), spec, lat)
    VH12, _ = solve_VH(V, phi, mk(a * h1 + b * h2), spec, lat)
    for t in range(7):
        np.testing.assert_allclose(VH12[t], a * VH1[t] + b * VH2[t], atol=1e-12)


# ----------------------------------------------------------------- strategy

def test_fb_strategy_already_hedged():
    spec = constant_spec(theta=0.0, rho=0.5, c=2.0)
    lat, tilde, _ = solve_all(spec, 5)
    V, phi = solve_V(spec, lat)
    V_H, phi_H = solve_VH(V, phi, tilde, spec, lat)
    pi, X = fb_strategy(V, phi, V_H, phi_H, 2.0, spec, lat)
    for level in pi.levels:
        np.testing.assert_allclose(level, 0.0, atol=1e-13)
    for level in X.levels:
        np.testing.assert_allclose(level, 2.0, atol=1e-13)


def test_fb_strategy_deterministic_benchmark():
    spec = constant_spec(theta=1.0, rho=0.0, c=1.0)
    lat, tilde, fb = solve_all(spec, 8)
    # position at time zero approaches c / (1 + T) = 1/2
    assert fb.pi_star[0][0] == pytest.approx(0.5, abs=0.02)


def test_fb_strategy_agrees_with_operator_form():
    # probability-weighted node gap; the plain sup over atoms is not an O(dt)
    # quantity because the tree keeps reaching further into the tails
    spec = constant_spec(theta=1.0, rho=0.5)
    gaps = {}
    for n in (6, 12):
        lat, tilde, fb = solve_all(spec, n)
        sol = solve_martingale_equation(tilde, spec, lat, tol=1e-12)
        pi_op = optimal_strategy(sol, tilde, spec, lat)
        gaps[n] = max(float(np.sqrt(np.mean((pi_op[t] - fb.pi_star[t]) ** 2)))
                      for t in range(n))
    assert gaps[12] < 0.65 * gaps[6]
    assert gaps[12] < 0.05  # O(dt) agreement at moderate resolution


# ----------------------------------------------------- reconstruction, ratio

def test_reconstruction_trivial_cases():
    spec = constant_spec(theta=0.0, rho=0.5, c=1.5)
    lat, tilde, fb = solve_all(spec, 5)
    Y, psi = reconstruct_operator_solution(fb.V, fb.phi, fb.V_H, fb.phi_H,
                                           fb.pi_star, fb.X_hat)
    for t in range(6):
        np.testing.assert_allclose(Y[t], 1.5, atol=1e-13)

    zero_claim = DiffusionSpec(theta=1.0, sigma=1.0, rho=0.5, horizon=1.0,
                               payoff=PayoffSpec.constant(0.0))
    lat, tilde, fb = solve_all(zero_claim, 5)
    Y, _ = reconstruct_operator_solution(fb.V, fb.phi, fb.V_H, fb.phi_H,
                                         fb.pi_star, fb.X_hat)
    for t in range(6):
        np.testing.assert_allclose(Y[t], 0.0, atol=1e-13)


def test_reconstruction_two_resolution_convergence():
    spec = constant_spec(theta=1.0, rho=0.5)
    gaps = {}
    for n in (8, 16):
        lat, tilde, fb = solve_all(spec, n)
        sol = solve_martingale_equation(tilde, spec, lat, tol=1e-12)
        Y, _ = reconstruct_operator_solution(fb.V, fb.phi, fb.V_H, fb.phi_H,
                                             fb.pi_star, fb.X_hat)
        gaps[n] = max(float(np.sqrt(np.mean((sol.Y_tilde[t] - Y[t]) ** 2)))
                      for t in range(n + 1))
    assert gaps[16] < 0.65 * gaps[8]  # O(dt): expect about half


def test_value_process_trivial():
    spec = constant_spec(theta=0.0, rho=0.5, c=1.0)
    lat = build_lattice(TimeGrid(5, 1.0))
    tilde = compute_tilde_inputs(spec, lat)
    sol = solve_martingale_equation(tilde, spec, lat)
    pi = optimal_strategy(sol, tilde, spec, lat)
    V_check, report = value_process(sol.Y_tilde, pi, 1.0, spec, lat)
    for level in V_check.levels:
        np.testing.assert_allclose(level, 1.0, atol=1e-12)
    assert report.min_Y > 0.0
    assert not report.violations


def test_value_process_converges_to_V():
    spec = constant_spec(theta=1.0, rho=0.5)
    gaps = {}
    for n in (8, 16):
        lat, tilde, fb = solve_all(spec, n)
        sol = solve_martingale_equation(tilde, spec, lat, tol=1e-12)
        pi = optimal_strategy(sol, tilde, spec, lat)
        V_check, report = value_process(sol.Y_tilde, pi, 1.0, spec, lat)
        assert report.min_Y > 0.0
        assert report.min_dominance >= -5.0 * lat.dt
        gaps[n] = max(float(np.nanmax(np.abs(V_check[t] - fb.V[t])))
                      for t in range(n + 1))
    assert gaps[16] < 0.65 * gaps[8]


def test_value_process_rho0_limit():
    spec = constant_spec(theta=1.0, rho=0.0)
    lat, tilde, fb = solve_all(spec, 10)
    sol = solve_martingale_equation(tilde, spec, lat, tol=1e-12)
    pi = optimal_strategy(sol, tilde, spec, lat)
    V_check, _ = value_process(sol.Y_tilde, pi, 1.0, spec, lat)
    assert V_check[0][0] == pytest.approx(0.5, abs=0.02)


def test_value_process_guards_input():
    spec = constant_spec(theta=0.0)
    lat, tilde, fb = solve_all(spec, 3)
    with pytest.raises(ValueError):
        value_process(fb.V_H, fb.pi_star, -1.0, spec, lat)


# ------------------------------------------------- ratio-identity invariants

def test_scaling_relation_exact():
    # solving with terminal constant c equals c times the unit solution
    base = constant_spec(theta=1.0, rho=0.6, c=1.0)
    scaled = constant_spec(theta=1.0, rho=0.6, c=3.5)
    lat, tilde1, fb1 = solve_all(base, 6)
    _, tildec, fbc = solve_all(scaled, 6)
    for t in range(6):
        np.testing.assert_allclose(fbc.pi_star[t], 3.5 * fb1.pi_star[t],
                                   atol=1e-12)
    for t in range(7):
        np.testing.assert_allclose(fbc.V_H[t], 3.5 * fb1.V_H[t], atol=1e-12)

    sol1 = solve_martingale_equation(tilde1, base, lat, tol=1e-13)
    solc = solve_martingale_equation(tildec, scaled, lat, tol=1e-13)
    for t in range(7):
        np.testing.assert_allclose(solc.Y_tilde[t], 3.5 * sol1.Y_tilde[t],
                                   atol=1e-10)


def test_positivity_and_dominance_grid():
    for rho2 in (0.0, 0.25, 0.5, 0.81):
        for theta in (0.0, 0.5, 1.0):
            spec = constant_spec(theta=theta, rho=float(np.sqrt(rho2)), c=1.0)
            lat = build_lattice(TimeGrid(6, 1.0))
            tilde = compute_tilde_inputs(spec, lat)
            sol = solve_martingale_equation(tilde, spec, lat, tol=1e-12)
            pi = optimal_strategy(sol, tilde, spec, lat)
            _, report = value_process(sol.Y_tilde, pi, 1.0, spec, lat)
            assert report.min_Y > 0.0, (rho2, theta)
            assert report.min_dominance >= -5.0 * lat.dt, (rho2, theta)


def test_ratio_satisfies_bsde_to_second_order():
    # U = Y/(c - X) plugged into the quadratic driver leaves O(dt^2) per-node
    # residuals; halving dt divides the worst residual by about four
    spec = constant_spec(theta=1.0, rho=0.5)
    worst = {}
    for n in (6, 12):
        lat = build_lattice(TimeGrid(n, 1.0))
        tilde = compute_tilde_inputs(spec, lat)
        sol = solve_martingale_equation(tilde, spec, lat, tol=1e-13)
        pi = optimal_strategy(sol, tilde, spec, lat)
        X = hedged_wealth(pi, spec, lat, 0.0)
        U = [sol.Y_tilde[t] / (1.0 - X[t]) for t in range(n + 1)]
        rho, dt = spec.rho, lat.dt
        res = 0.0
        for t in range(n):
            m = conditional_expectation(U[t + 1])
            phi_w = gkw_integrand_level(np.asarray(U[t + 1]), lat)
            z = U[t] + 0.0  # theta = sigma = 1: z = U + rho phi_w
            z = U[t] + rho * phi_w
            driver = z ** 2 / (1.0 - rho ** 2 + rho ** 2 * U[t])
            res = max(res, float(np.max(np.abs(U[t] - m + dt * driver))))
        worst[n] = res
    assert worst[12] < 0.35 * worst[6]  # about quarter per halving

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvhedge import (AdaptedField, LatticeSizeError, ShapeError, TimeGrid,
                     build_lattice, conditional_expectation, discrete_gkw,
                     induced_martingale, martingale_defect,
                     stochastic_integral)
from mvhedge.lattice import MAX_STEPS


def test_time_grid_basics():
    g = TimeGrid(4, 2.0)
    assert g.dt == 0.5
    assert np.allclose(g.times, [0, 0.5, 1.0, 1.5, 2.0])
    with pytest.raises(ValueError):
        TimeGrid(0, 1.0)
    with pytest.raises(ValueError):
        TimeGrid(4, -1.0)


def test_build_lattice_single_step():
    lat = build_lattice(TimeGrid(1, 1.0))
    assert lat.w[1].tolist() == [1.0, -1.0]
    assert lat.atom_probability(1) == 0.5


def test_build_lattice_two_steps():
    lat = build_lattice(TimeGrid(2, 1.0))
    sq = math.sqrt(0.5)
    np.testing.assert_allclose(lat.w[2], np.array([2, 0, 0, -2]) * sq)


def test_conditional_increment_variance_unit_dt():
    # T=4, n=4 forces dt=1, so Var[dw | node] = 1 at every node
    lat = build_lattice(TimeGrid(4, 4.0))
    for t in range(4):
        incr = lat.increments(t)
        var = conditional_expectation(incr ** 2) - conditional_expectation(incr) ** 2
        np.testing.assert_allclose(var, 1.0)


def test_lattice_probabilities_and_martingale():
    lat = build_lattice(TimeGrid(5, 2.0))
    for t in range(6):
        assert abs(2 ** t * lat.atom_probability(t) - 1.0) < 1e-15
    w_field = AdaptedField(lat.w)
    assert martingale_defect(w_field, lat) == 0.0
    # exact bracket: E[dw^2 | node] = dt
    for t in range(5):
        np.testing.assert_allclose(conditional_expectation(lat.increments(t) ** 2),
                                   lat.dt)


def test_lattice_cap():
    with pytest.raises(LatticeSizeError, match=f"{2 ** (MAX_STEPS + 1):,}"):
        build_lattice(TimeGrid(MAX_STEPS + 1, 1.0))


def test_conditional_expectation_examples():
    assert conditional_expectation([3.0, 1.0]).tolist() == [2.0]
    np.testing.assert_allclose(conditional_expectation(np.full(8, 2.5)), 2.5)
    lat = build_lattice(TimeGrid(3, 1.0))
    np.testing.assert_allclose(conditional_expectation(lat.increments(2)), 0.0)
    with pytest.raises(ShapeError):
        conditional_expectation([1.0, 2.0, 3.0])


def test_gkw_identity_integrand():
    lat = build_lattice(TimeGrid(4, 1.0))
    parts = discrete_gkw(lat.w[4], lat)
    assert parts.initial_value == 0.0
    for level in parts.integrand.levels:
        np.testing.assert_allclose(level, 1.0, atol=1e-14)
    assert parts.residual_defect <= 1e-12


def test_gkw_square_minus_time():
    # on binary increments d(w^2 - t) = 2 w dw exactly
    lat = build_lattice(TimeGrid(5, 1.5))
    parts = discrete_gkw(lat.w[5] ** 2 - 1.5, lat)
    assert abs(parts.initial_value) < 1e-14
    for t in range(5):
        np.testing.assert_allclose(parts.integrand[t], 2.0 * lat.w[t], atol=1e-13)
    assert parts.residual_defect <= 1e-12


def test_gkw_constant():
    lat = build_lattice(TimeGrid(3, 1.0))
    parts = discrete_gkw(np.full(8, 4.2), lat)
    assert parts.initial_value == pytest.approx(4.2, abs=1e-15)
    for level in parts.integrand.levels:
        np.testing.assert_allclose(level, 0.0, atol=1e-15)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 6))
def test_gkw_reconstruction_and_orthogonality(seed, n):
    # reconstruction initial + int phi dw reproduces the martingale exactly;
    # residual increments have zero conditional covariance with dw
    lat = build_lattice(TimeGrid(n, 1.0))
    terminal = np.random.default_rng(seed).standard_normal(2 ** n)
    parts = discrete_gkw(terminal, lat)
    assert parts.residual_defect <= 1e-12
    recon = stochastic_integral(parts.integrand, "dw", lat)
    np.testing.assert_allclose(recon.terminal + parts.initial_value, terminal,
                               atol=1e-12)
    assert martingale_defect(recon, lat) <= 1e-12


def test_stochastic_integral_unit_integrands():
    lat = build_lattice(TimeGrid(4, 1.0))
    ones = AdaptedField([np.ones(2 ** t) for t in range(4)])
    np.testing.assert_allclose(stochastic_integral(ones, "dw", lat).terminal,
                               lat.w[4], atol=1e-14)
    np.testing.assert_allclose(stochastic_integral(ones, "dt", lat).terminal,
                               1.0, atol=1e-14)
    with pytest.raises(ValueError, match="driver"):
        stochastic_integral(ones, "dB", lat)


def test_stochastic_integral_w_dw_enumeration():
    # four paths by hand: sum_t w_t dw_t with w_0 = 0
    lat = build_lattice(TimeGrid(2, 1.0))
    w_pred = AdaptedField([lat.w[0], lat.w[1]])
    result = stochastic_integral(w_pred, "dw", lat)
    np.testing.assert_allclose(result.terminal, [0.5, -0.5, -0.5, 0.5],
                               atol=1e-12)


def test_stochastic_integral_price_driver():
    lat = build_lattice(TimeGrid(3, 1.0))
    ones = AdaptedField([np.ones(2 ** t) for t in range(3)])
    theta = AdaptedField([np.full(2 ** t, 0.7) for t in range(3)])
    sigma = AdaptedField([np.full(2 ** t, 2.0) for t in range(3)])
    out = stochastic_integral(ones, "dS_hat", lat, theta=theta, sigma=sigma,
                              rho=0.5)
    expected = 2.0 * (0.7 * 1.0 + 0.5 * lat.w[3])
    np.testing.assert_allclose(out.terminal, expected, atol=1e-13)


def test_martingale_defect_examples():
    lat = build_lattice(TimeGrid(4, 1.0))
    assert martingale_defect(AdaptedField(lat.w), lat) == 0.0
    ramp = AdaptedField([np.full(2 ** t, lat.times[t]) for t in range(5)])
    assert martingale_defect(ramp, lat) == pytest.approx(lat.dt)


def test_projection_of_running_integral():
    # E_t[I_T] recovers the running integral once the predictable drift
    # compensator is added back; for a driftless driver they coincide
    rng = np.random.default_rng(42)
    lat = build_lattice(TimeGrid(5, 1.0))
    pi = AdaptedField([rng.standard_normal(2 ** t) for t in range(5)])
    theta = AdaptedField([np.full(2 ** t, 0.8) for t in range(5)])
    theta0 = AdaptedField([np.zeros(2 ** t) for t in range(5)])
    sigma = AdaptedField([np.full(2 ** t, 1.3) for t in range(5)])

    driftless = stochastic_integral(pi, "dS_hat", lat, theta=theta0,
                                    sigma=sigma, rho=0.6)
    proj = induced_martingale(driftless.terminal, lat)
    for t in range(6):
        np.testing.assert_allclose(proj[t], driftless[t], atol=1e-12)

    integral = stochastic_integral(pi, "dS_hat", lat, theta=theta,
                                   sigma=sigma, rho=0.6)
    drift = stochastic_integral(pi * theta * sigma, "dt", lat)
    proj = induced_martingale(integral.terminal, lat)
    # E_t[I_T] - I_t = E_t[remaining drift]
    remaining = induced_martingale(drift.terminal, lat)
    for t in range(6):
        np.testing.assert_allclose(proj[t] - integral[t],
                                   remaining[t] - drift[t], atol=1e-12)


def test_bracket_ratio_is_rho_squared():
    # conditional variance of the projected price noise over the full one
    lat = build_lattice(TimeGrid(4, 2.0))
    rho, sigma = 0.7, 1.9
    for t in range(4):
        dm_hat_var = conditional_expectation((rho * sigma * lat.increments(t)) ** 2)
        dm_var = sigma ** 2 * lat.dt
        np.testing.assert_allclose(dm_hat_var / dm_var, rho ** 2, atol=1e-14)
        assert np.all(dm_hat_var / dm_var <= 1.0)


def test_adapted_field_validation():
    with pytest.raises(ShapeError):
        AdaptedField([np.zeros(2)])  # level 0 must have one node
    f = AdaptedField.constant(3.0, 4)
    assert len(f) == 4 and f[3].shape == (8,)

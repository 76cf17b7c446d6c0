import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mcre import certify, econ
from mcre._common import Stream, make_rng
from mcre.dynamics import EnvironmentSpec, gaussian_quantile

GAUSS = EnvironmentSpec("gaussian-ar1", params={"phi": 0.5, "sigma": 1.0})


def _null_model():
    zeros = lambda y: np.zeros(y.shape[0])  # noqa: E731
    ones = lambda y: np.ones(y.shape[0])  # noqa: E731
    return econ.LocationScaleModel(lambda y, x: np.zeros_like(x), lambda y, x: np.ones_like(x),
                                   zeros, zeros, zeros, ones)


# simulation

def test_null_model_is_pure_noise():
    env = np.zeros((50, 1))
    path = econ.simulate_location_scale(_null_model(), env, 3.0, 50, seed=5)
    expected = [gaussian_quantile(make_rng(5, Stream.NOISE, 0, t).random(1))[0] for t in range(50)]
    assert path[0] == 3.0 and np.allclose(path[1:], expected, rtol=0, atol=0)


def test_threshold_ar_certificate_passes():
    model = econ.threshold_ar()
    cert = econ.location_scale_certificate(model)
    y = np.zeros((1, 1))
    assert cert.gamma(y)[0] == pytest.approx(0.6)
    kern = econ.location_scale_kernel(model)

    def sampler(rng, n):
        return rng.normal(0, 5, (n, 1)), rng.normal(0, 2, (n, 1))

    rep = certify.verify_drift_mc(kern, cert, sampler, 200, 4000, seed=1)
    assert rep.passed


def test_persistent_ar_autocorrelation():
    model = econ.persistent_ar()
    T = 20_000
    path = econ.simulate_location_scale(model, np.full((T, 1), 5.0), 0.0, T, seed=2)
    r1 = np.corrcoef(path[1000:-1], path[1001:])[0, 1]
    assert r1 > 0.95


def test_envelope_runtime_assertion():
    bad = econ.LocationScaleModel(lambda y, x: 2 * x, lambda y, x: np.ones_like(x),
                                  a=lambda y: np.ones(y.shape[0]), b_env=lambda y: np.zeros(y.shape[0]),
                                  c_env=lambda y: np.zeros(y.shape[0]), d_env=lambda y: np.ones(y.shape[0]))
    with pytest.raises(AssertionError):
        econ.simulate_location_scale(bad, np.zeros((5, 1)), 1.0, 5, seed=0)


def test_nonpositive_sigma_rejected():
    model = econ.LocationScaleModel(lambda y, x: 0 * x, lambda y, x: x,
                                    a=lambda y: np.zeros(y.shape[0]), b_env=lambda y: np.zeros(y.shape[0]),
                                    c_env=lambda y: np.ones(y.shape[0]), d_env=lambda y: np.zeros(y.shape[0]))
    with pytest.raises(ValueError, match="sigma"):
        econ.simulate_location_scale(model, np.zeros((5, 1)), -1.0, 5, seed=0)


@given(st.integers(0, 1000), st.sampled_from(["normal", "uniform", "laplace"]))
def test_threshold_envelopes_hold_along_paths(seed, noise):
    model = econ.threshold_ar(noise=noise)
    env = np.asarray(GAUSS.sample(0, 99, seed, reps=8).values)
    econ.simulate_location_scale(model, env, 0.0, 100, seed=seed)  # asserts envelopes per step


def test_kernel_density_matches_simulation():
    model = econ.threshold_ar(noise="laplace")
    kern = econ.location_scale_kernel(model)
    x = np.full((200_001, 1), 1.5)
    y = np.full((200_001, 1), -0.5)
    grid = np.linspace(-30, 30, 200_001)[:, None]
    dens = kern.density(y, x, grid)
    assert np.trapezoid(dens, grid[:, 0]) == pytest.approx(1.0, abs=1e-6)


def test_noises_have_unit_variance():
    u = (np.arange(400_000) + 0.5) / 400_000
    for kind in econ.NOISES:
        e = econ._noise(u, kind)
        assert abs(e.mean()) < 1e-6 and e.var() == pytest.approx(1.0, abs=2e-3)


# Nadaraya-Watson

@pytest.mark.parametrize("name", ["epanechnikov", "triangular"])
def test_kernels_integrate_to_one(name):
    assert econ.kernel_integral(name) == pytest.approx(1.0, abs=1e-6)
    u = np.linspace(-2, 2, 401)
    k = econ.KERNELS[name]
    assert np.allclose(k(u), k(-u)) and np.all(k(u[np.abs(u) > 1]) == 0)


def test_constant_response_is_reproduced():
    rng = np.random.default_rng(0)
    Z = rng.uniform(-1, 1, (500, 2))
    grid = econ.box_grid(0.8, 2, 9)
    est, valid = econ.nw_estimate("epanechnikov", 0.3, Z, np.full(500, 2.5), grid)
    assert valid.all() and np.allclose(est, 2.5, rtol=1e-14)


@given(st.integers(0, 10_000), st.floats(0.1, 1.0))
def test_estimate_is_convex_combination(seed, h):
    rng = np.random.default_rng(seed)
    Z = rng.uniform(-1, 1, (200, 2))
    X = rng.normal(size=200)
    grid = econ.box_grid(1.0, 2, 7)
    est, valid = econ.nw_estimate("triangular", h, Z, X, grid)
    for g, e, ok in zip(grid, est, valid):
        if not ok:
            continue
        contrib = np.all(np.abs(g - Z) < h, axis=1)
        assert X[contrib].min() - 1e-12 <= e <= X[contrib].max() + 1e-12


def test_guard_excludes_empty_cells():
    Z = np.zeros((50, 1))
    est, valid = econ.nw_estimate("epanechnikov", 0.1, Z, np.ones(50), np.array([[0.0], [5.0]]))
    assert valid.tolist() == [True, False] and math.isnan(est[1])


def test_bandwidth_rule():
    est = econ.NwEstimator(c_h=2.0)
    assert est.bandwidth(1000, 2) == pytest.approx(2.0 * (math.log(1000) / 1000) ** (1 / 6))
    assert econ.NwEstimator(h=0.3).bandwidth(1000, 2) == 0.3


def test_linear_regression_large_sample():
    # with unit noise the corner variance alone is about 0.03 per grid point
    model = econ.linear_ar(rho=0.5, beta=0.5, sigma0=0.5)
    res = econ.nw_fit_and_error(econ.NwEstimator(), model, GAUSS, 100_000, 1.0, seed=3)
    assert res.excluded == 0 and res.sup_error < 0.05


def test_small_bandwidth_is_rejected():
    with pytest.raises(ValueError, match="bandwidth too small"):
        econ.nw_fit_and_error(econ.NwEstimator(h=1e-4), econ.linear_ar(), GAUSS, 200, 1.0, seed=0)
    with pytest.raises(ValueError):
        econ.nw_fit_and_error(econ.NwEstimator(), econ.linear_ar(), GAUSS, 50, 1.0, seed=0)


def test_rate_check_reports_theory():
    rep = econ.nw_rate_check(econ.NwEstimator(), econ.threshold_ar(), GAUSS, 500, factor=4,
                             seeds=2, seed=1)
    expected = (math.log(500) / 500) ** (2 / 6) / (math.log(2000) / 2000) ** (2 / 6)
    assert rep["theoretical_ratio"] == pytest.approx(expected)
    assert rep["relative"] == pytest.approx(rep["observed_ratio"] / expected)


# Poisson MLE

def test_closed_form_scores_and_hessian_match_numerical():
    dgp = econ.PoissonDGP()
    X, Y = dgp.simulate(500, 1)
    G, x = econ._design(X, Y)
    theta = np.array([1.1, 0.25, 0.6])
    grad = econ.numerical_gradient(lambda t: econ.poisson_loglik(t, G, x), theta)
    assert np.allclose(grad, econ.poisson_scores(theta, G, x).sum(axis=0), rtol=1e-6)
    num_h = econ.numerical_hessian(lambda t: econ.poisson_scores(t, G, x).mean(axis=0), theta)
    assert np.allclose(num_h, econ.poisson_hessian(theta, G, x), rtol=1e-5, atol=1e-8)


def test_well_specified_fit_is_consistent():
    dgp = econ.PoissonDGP()
    X, Y = dgp.simulate(10_000, 2)
    fit = econ.mle_fit(econ.MleHarness.poisson(), X, Y, seed=3)
    assert not fit.boundary
    assert np.all(np.abs(fit.theta - dgp.theta_true) <= 3 * fit.se)
    ratio = np.trace(fit.N) / np.trace(fit.V_outer)
    assert 0.7 <= ratio <= 1.4


def test_fit_invariants():
    X, Y = econ.PoissonDGP(eta_z=(0.7,)).simulate(3000, 4)
    fit = econ.mle_fit(econ.MleHarness.poisson(starts=6), X, Y, seed=5)
    assert fit.loglik >= max(fit.start_values) - 1e-9
    assert np.allclose(fit.sandwich, fit.sandwich.T)
    assert np.linalg.eigvalsh(fit.sandwich).min() >= -1e-10
    G, x = econ._design(X, Y)
    assert fit.loglik == pytest.approx(econ.poisson_loglik(fit.theta, G, x), rel=1e-12)


def test_misspecified_fit_is_stable():
    dgp = econ.PoissonDGP(eta_z=(0.7,))
    assert not dgp.well_specified and dgp.theta_true is None
    h = econ.MleHarness.poisson()
    a = econ.mle_fit(h, *dgp.simulate(10_000, 6), seed=7)
    b = econ.mle_fit(h, *dgp.simulate(40_000, 8), seed=9)
    pooled = np.sqrt(a.se ** 2 + b.se ** 2)
    assert np.all(np.abs(a.theta - b.theta) < 3 * pooled)


def test_hac_reduces_to_outer_product_at_lag_zero():
    S = np.random.default_rng(0).normal(size=(300, 2))
    Sc = S - S.mean(axis=0)
    assert np.allclose(econ.bartlett_hac(S, 0), Sc.T @ Sc / 300)


def test_harness_dimension_mismatch():
    X, Y = econ.PoissonDGP().simulate(200, 0)
    with pytest.raises(ValueError):
        econ.mle_fit(econ.MleHarness.poisson(m=2), X, Y, seed=0)


def test_clt_needs_enough_reps():
    with pytest.raises(ValueError):
        econ.clt_coverage(econ.MleHarness.poisson(), econ.PoissonDGP(), 100, 50, 0.95, seed=0)


def test_clt_coverage_well_specified():
    rep = econ.clt_coverage(econ.MleHarness.poisson(), econ.PoissonDGP(), 1000, 200, 0.9, seed=1)
    assert rep.pseudo_source == "true parameter"
    lo, hi = rep.band
    assert np.all((rep.coverage >= lo) & (rep.coverage <= hi))
    assert rep.to_dict()["reps"] == 200

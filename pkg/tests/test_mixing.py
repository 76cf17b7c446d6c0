import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mcre import dynamics, mixing, oracle
from mcre.dynamics import MixingRateDescriptor


def _joint(case):
    return oracle.joint_transition(case.P, case.table)


def _joint_pi(case):
    return dynamics.stationary_distribution(_joint(case))


# exact coefficients

def test_rank_one_chain_has_zero_alpha():
    T = np.tile([0.2, 0.5, 0.3], (3, 1))
    assert mixing.exact_alpha_finite(T, [1, 0, 0], 1) == pytest.approx(0.0, abs=1e-15)
    assert mixing.exact_alpha_finite(T, [0.3, 0.3, 0.4], 4, window=range(3)) < 1e-15


def test_frozen_chain_has_quarter_alpha():
    T = np.eye(2)
    for n in (1, 5, 50):
        assert mixing.exact_alpha_finite(T, [0.5, 0.5], n) == pytest.approx(0.25, abs=1e-15)


def test_exhaustive_equals_ascent_on_oracle(oracle_case):
    J = _joint(oracle_case)
    init = oracle.joint_initial(oracle_case.init, [1, 0, 0])
    for n in (1, 2, 5):
        ex = mixing.exact_alpha_finite(J, init, n, window=range(3), exhaustive=True)
        asc = mixing.exact_alpha_finite(J, init, n, window=range(3), exhaustive=False)
        assert asc == pytest.approx(ex, abs=1e-14)


def test_two_state_alpha_closed_form():
    # for two states alpha(n) = pi0 pi1 |1 - a - b|^n at stationarity
    a, b = 0.2, 0.3
    T = np.array([[1 - a, a], [b, 1 - b]])
    pi = np.array([b, a]) / (a + b)
    for n in range(1, 8):
        expected = pi[0] * pi[1] * abs(1 - a - b) ** n
        assert mixing.exact_alpha_finite(T, pi, n) == pytest.approx(expected, rel=1e-12)


def test_phi_and_psi_dominate_alpha(oracle_case):
    J = _joint(oracle_case)
    pi = _joint_pi(oracle_case)
    for n in (1, 3, 6):
        a = mixing.exact_alpha_finite(J, pi, n)
        assert mixing.exact_phi_finite(J, pi, n) >= a - 1e-14
        assert mixing.exact_psi_finite(J, pi, n) >= mixing.exact_phi_finite(J, pi, n) - 1e-14


def test_alpha_non_increasing_on_oracle(oracle_case):
    J = _joint(oracle_case)
    init = oracle.joint_initial(oracle_case.init, [0, 0, 1])
    vals = [mixing.exact_alpha_finite(J, init, n, window=range(4)) for n in range(1, 16)]
    assert np.all(np.diff(vals) <= 1e-12)


def test_curve_caps_and_keeps_raw():
    c = mixing.MixingCurve([1, 2, 3], [0.1, 0.2, 0.05])
    assert np.array_equal(c.raw, [0.1, 0.2, 0.05])
    assert np.all(np.diff(c.values) <= 0) and np.all(c.values <= 0.25)
    assert c(0) == 0.25
    with pytest.raises(ValueError):
        mixing.MixingCurve([1], [0.1], kind="beta")


# empirical diagnostic

def test_empirical_alpha_iid_null():
    rng = np.random.default_rng(0)
    path = rng.normal(size=(50_000, 2))
    cur = mixing.empirical_alpha(path, [1, 2, 5])
    se = np.asarray(cur.metadata["se"])
    assert np.all(cur.raw <= 3 * se)
    assert "lower-bound" in cur.metadata["note"]


def test_empirical_alpha_frozen():
    path = np.random.default_rng(1).integers(0, 2, 5000)[:, None].repeat(40, axis=1)
    cur = mixing.empirical_alpha(path[:, :, None], [1, 5, 20])
    assert np.allclose(cur.raw, 0.25, atol=0.01)


def test_empirical_alpha_below_exact_on_oracle(oracle_case):
    c = oracle_case
    T = 100_000
    traj = c.env.sample(0, T - 1, 3)
    xs = dynamics.simulate_mcre(c.kernel, traj, 0, seed=4)[:T]
    path = np.column_stack([xs, np.asarray(traj.values)])
    lags = [1, 2, 3, 5, 8]
    cur = mixing.empirical_alpha(path, lags)
    se = np.asarray(cur.metadata["se"])
    exact = [mixing.exact_alpha_finite(_joint(c), _joint_pi(c), n) for n in lags]
    assert np.all(cur.raw <= np.asarray(exact) + 3 * se)


def test_empirical_alpha_rejects_short_path():
    with pytest.raises(ValueError):
        mixing.empirical_alpha(np.zeros((20, 1)), [5])


# transfer bound

def test_transfer_iid_environment():
    b = 0.9 ** np.arange(20)
    val, m = mixing.transfer_bound(lambda k: 0.0, b, 1, 10, detail=True)
    assert m == 1 and val == b[8]


def test_transfer_instant_coupling():
    alpha = MixingRateDescriptor("geometric", c=0.25, rho=0.5)
    val, m = mixing.transfer_bound(alpha, np.zeros(20), 2, 10, detail=True)
    assert m == 4 and val == pytest.approx(alpha(8))


def test_transfer_rejects_short_lag():
    with pytest.raises(ValueError):
        mixing.transfer_bound(lambda k: 0.0, np.zeros(5), 3, 2)


def test_transfer_dominates_exact_alpha(oracle_case):
    c = oracle_case
    window = range(0, 11)
    x_law = np.eye(3)[2]
    b, _ = oracle.exact_b(c.P, c.init, c.table, c.dob, x_law, 0, window, 20)
    J = _joint(c)
    jinit = oracle.joint_initial(c.init, x_law)
    for n in range(1, 21):
        axy = mixing.exact_alpha_finite(J, jinit, n, window)
        ay = lambda k: mixing.exact_alpha_finite(c.P, c.init, k, window)  # noqa: E731
        assert mixing.transfer_bound(ay, b, 1, n) + 1e-12 >= axy


# main bound and rates

def _params(alpha, kappa=0.5, c=1.0, n_max=500):
    return mixing.BoundParams(0.5 ** np.arange(n_max + 2), kappa, c, alpha)


def test_main_bound_worked_example():
    alpha = MixingRateDescriptor("zero-after-lag", m=0)
    val, arg = mixing.main_bound(_params(alpha), 16)
    assert val == pytest.approx(0.125, abs=1e-15) and arg == (4, 4)


def test_main_bound_brute_force():
    alpha = MixingRateDescriptor("geometric", c=0.25, rho=0.7)
    params = _params(alpha, kappa=0.6, c=2.0)
    for variant, shift in (("theorem", 1), ("extended", 0)):
        for n in (1, 7, 23):
            cands = [2.0 * (0.5 ** i + 0.6 ** (n / q) + alpha(q + shift - i))
                     for q in range(1, n + 1) for i in range(1, q + 1)]
            assert mixing.main_bound(params, n, variant)[0] == pytest.approx(min(cands), rel=1e-14)


def test_main_bound_no_mixing_floor():
    params = mixing.BoundParams(0.5 ** np.arange(40), 0.5, 1.0, lambda k: 0.25)
    for n in (1, 5, 30):
        val, _ = mixing.main_bound(params, n)
        assert val >= 0.25


def test_main_bound_single_candidate():
    alpha = MixingRateDescriptor("geometric", c=0.25, rho=0.5)
    val, arg = mixing.main_bound(_params(alpha, kappa=0.3), 1)
    assert arg == (1, 1) and val == pytest.approx(0.5 + 0.3 + alpha(1))


def test_main_bound_non_increasing():
    alpha = MixingRateDescriptor("power", c=0.25, a=2.0)
    params = _params(alpha)
    vals = [mixing.main_bound(params, n)[0] for n in range(1, 80)]
    assert np.all(np.diff(vals) <= 1e-15)


def test_main_bound_needs_r():
    params = mixing.BoundParams(np.ones(5), 0.5, 1.0, lambda k: 0.0)
    with pytest.raises(ValueError):
        mixing.main_bound(params, 10)


def test_geometric_recipe_ratio():
    alpha = MixingRateDescriptor("geometric", c=0.25, rho=0.5)
    params = _params(alpha, n_max=400)
    grid = [1, 2, 5, 10, 25, 50, 100, 200, 300, 400]
    tab = mixing.rate_table("geometric", params, grid)
    exact = np.array([mixing.main_bound(params, n)[0] for n in grid])
    ratio = tab.envelope / exact
    assert np.all(ratio >= 1 - 1e-12) and np.all(ratio <= 20)


def test_power_recipe_slope():
    alpha = MixingRateDescriptor("power", c=0.25, a=3.0)
    grid = np.unique(np.logspace(2, 4, 25).astype(int))
    # a small kappa keeps the geometric terms below the alpha term from n = 100 on
    params = mixing.BoundParams(lambda i: 0.5 ** i, math.exp(-8), 1.0, alpha)
    tab = mixing.rate_table("power", params, grid, a=3.0)
    slope = np.polyfit(np.log(grid), np.log(tab.envelope / np.log(grid) ** 3), 1)[0]
    assert abs(slope + 3) <= 0.2


def test_recipe_at_one_is_suboptimal():
    alpha = MixingRateDescriptor("geometric", c=0.25, rho=0.5)
    params = _params(alpha)
    assert mixing.rate_table("geometric", params, [1]).envelope[0] >= mixing.main_bound(params, 1)[0]


def test_recipe_needs_geometric_r():
    params = mixing.BoundParams(np.ones(10), 0.5, 1.0, lambda k: 0.0, r_form="power")
    with pytest.raises(ValueError):
        mixing.rate_table("geometric", params, [4])


# products

def test_product_bound_examples():
    assert mixing.product_bound_theta("psi", 0.0, 0.5, n=3) == 0.125
    assert mixing.product_bound_theta("phi", 0.1, 0.5, 1.0, 3) == pytest.approx(0.18)
    assert mixing.product_bound_theta("alpha", 0.01, 0.5, 1.0, 3) == pytest.approx(0.145)


def test_product_bound_errors():
    with pytest.raises(ValueError):
        mixing.product_bound_theta("phi", 0.1, 0.5, None, 3)
    with pytest.raises(ValueError):
        mixing.product_bound_theta("psi", 0.1, 1.0, None, 3)


@given(st.sampled_from(["alpha", "phi", "psi"]), st.floats(0, 2), st.floats(0.01, 0.99),
       st.integers(1, 30))
def test_product_bound_floor(kind, coeff, theta_hat, n):
    theta_bar = theta_hat + 0.5
    val = mixing.product_bound_theta(kind, coeff, theta_hat, theta_bar, n)
    assert val >= theta_hat ** n * (1 - 1e-12)
    if kind in ("psi", "alpha"):
        assert mixing.product_bound_theta(kind, 0.0, theta_hat, theta_bar, n) == pytest.approx(
            theta_hat ** n, rel=1e-14)


def test_block_bound_independent():
    bb = mixing.block_product_bound(0.7, None, lambda p: 0.0, 10)
    assert bb.p == 2 and bb.delta == pytest.approx(1 / 3)
    assert bb.kappa_block == pytest.approx(math.sqrt(0.7))


def test_block_bound_scan():
    bb = mixing.block_product_bound(0.9, None, lambda p: 2.0 ** -p, 10)
    assert bb.p == 4 and bb.base == pytest.approx(0.95625)


def test_block_bound_unavailable():
    with pytest.raises(ValueError):
        mixing.block_product_bound(0.9, None, lambda p: 1.0, 10, p_cap=50)


def test_block_bound_against_product_expectation():
    P = np.array([[0.8, 0.2], [0.3, 0.7]])
    pi = dynamics.stationary_distribution(P)
    gam = np.array([0.5, 1.2])
    gamma_hat = float(pi @ gam)
    decay = lambda p: mixing.exact_psi_finite(P, pi, p)  # noqa: E731
    env = dynamics.EnvironmentSpec("finite-markov", params={"P": P})
    reps = 20_000
    ys = np.asarray(env.sample(0, 49, 7, reps=reps).values)
    for n in (5, 10, 20, 50):
        bb = mixing.block_product_bound(gamma_hat, None, decay, n)
        prods = np.prod(gam[ys[:, :n]] ** bb.delta, axis=1)
        est, se = prods.mean(), prods.std(ddof=1) / math.sqrt(reps)
        # exact stationary expectation by matrix products
        D = np.diag(gam ** bb.delta)
        exact = pi @ np.linalg.matrix_power(D @ P, n - 1) @ D @ np.ones(2)
        assert abs(est - exact) <= 4 * se
        assert est <= bb.c * bb.kappa ** n + 3 * se


# concentration helpers

def test_useful_bound_substitution():
    val = mixing.useful_bound(0.1, 1.0, 1.0, 100)
    expected = math.exp(-10) + 2 * 0.1 * math.sqrt(math.pi) * 10 * math.exp(-9.75)
    assert val == pytest.approx(expected, rel=1e-14) and val == pytest.approx(2.52e-4, rel=1e-2)
    assert mixing.useful_bound(0.0, 1.0, 1.0, 100) == 1.0
    assert mixing.useful_admissible(0.1, 1.0, 1.0) and not mixing.useful_admissible(5.0, 1.0, 1.0)


def test_useful_bound_dominates_product_moment():
    # log W ~ N(-1, 0.5^2): sub-Gaussian with M = 2 sigma^2
    sigma, delta, n, reps = 0.5, 0.1, 50, 100_000
    rng = np.random.default_rng(5)
    logw = rng.normal(-1, sigma, (reps, n)).sum(axis=1)
    est = np.exp(delta * logw).mean()
    exact = math.exp(-delta * n + delta ** 2 * n * sigma ** 2 / 2)
    assert est == pytest.approx(exact, rel=0.01)
    assert est <= mixing.useful_bound(delta, 1.0, 2 * sigma ** 2, n)


def test_rio_bound_direct():
    M, v, q, lam, Mn, a = 1.5, 20.0, 3, 10.0, 40.0, 0.01
    expected = 4 * math.exp(-(v / (2 * q * M)) * math.log(1 + lam * q * M / v)) + 4 * Mn * a / lam
    assert mixing.rio_bound(M, v, q, lam, Mn, a) == pytest.approx(expected, rel=1e-14)
    with pytest.raises(ValueError):
        mixing.rio_bound(M, v, q, 1.0, Mn, a)
    with pytest.raises(ValueError):
        mixing.rio_bound(M, v, 1, lam, Mn, a)


def test_sufexp_substitution():
    assert mixing.sufexp(1, 1, 10, 1.0, 2, 0.0) == pytest.approx(6.7379e-3, rel=1e-4)


def test_sufexp_hoeffding_tail():
    # centred uniform summands on [-1/2, 1/2]: P(S_n >= n delta) <= exp(-2 n delta^2)
    delta, q, reps = 0.1, 2, 50_000
    rng = np.random.default_rng(6)
    for n in (10, 50, 100, 200):
        s = (rng.random((reps, n)) - 0.5).sum(axis=1)
        est = (s >= n * delta).mean()
        assert est <= mixing.sufexp(1.0, 2 * delta * q, n, delta, q, 0.0) + 3 / math.sqrt(reps)


def test_merlevede_values():
    assert mixing.merlevede_bound(1, 1, 0.0, 10) == 1.0
    ln = math.log(16)
    assert mixing.merlevede_bound(1, 1, 1, 16) == pytest.approx(
        math.exp(-16 / (1 + ln * math.log(ln))), rel=1e-14)
    assert mixing.merlevede_bound(1, 1, 1, 16) == pytest.approx(1.53e-2, rel=0.02)
    vals = [mixing.merlevede_bound(1, 1, 1, n) for n in range(3, 10_001)]
    assert np.all(np.diff(vals) < 0)
    with pytest.raises(ValueError):
        mixing.merlevede_bound(1, 1, 1, 2)


def test_products_vanishing_exceptional_term():
    p = mixing.ProductsParams(0.2, route="given", pn=lambda n: 0.0, EK=3.0, L=1.0, lam=1.0)
    pn, dn, _ = mixing.products_pn_and_dn(p, 10)
    assert pn == 0.0 and dn == pytest.approx(3.0 * math.exp(-2.0))


def test_products_moment_route():
    n, s = 10, 1.0
    delta1 = math.log(1e4) / (n * s)
    p = mixing.ProductsParams(delta1, route="given", dn_route="moment", pn=lambda m: 1e-4,
                              L=1.0, k=2.0, s=s)
    assert mixing.dn_bound(p, n) == pytest.approx(1e-2 + 1e-4, rel=1e-12)


def test_products_missing_constants():
    with pytest.raises(ValueError, match="missing"):
        mixing.pn_bound(mixing.ProductsParams(0.2, route="merlevede"), 10)


def test_pn_bound_dominates_bernoulli_products():
    # gamma in {0.1, 1} with probability 1/2 each; -log gamma has mean 1.1513 and range 2.3026
    delta1, reps = 0.5, 200_000
    mean = 0.5 * math.log(10)
    params = mixing.ProductsParams(delta1, route="rio", M=math.log(10),
                                   v_per_step=0.25 * math.log(10) ** 2, gap=mean - delta1)
    rng = np.random.default_rng(8)
    hits = rng.random((reps, 60)) < 0.5
    log_prod = -np.cumsum(hits, axis=1) * math.log(10)
    for n in range(1, 61):
        est = (log_prod[:, n - 1] > -n * delta1).mean()
        assert est <= mixing.pn_bound(params, n) + 3 * math.sqrt(max(est * (1 - est), 1 / reps) / reps)


def test_calculators_are_pure():
    alpha = MixingRateDescriptor("power", c=0.25, a=2.0)
    a = mixing.main_bound(_params(alpha), 37)
    b = mixing.main_bound(_params(alpha), 37)
    assert a == b
    assert mixing.useful_bound(0.2, 1, 1, 30) == mixing.useful_bound(0.2, 1, 1, 30)

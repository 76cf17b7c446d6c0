import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mcre import certify, couple, dynamics, oracle
from mcre._common import binomial_z, table_fn
from mcre.dynamics import EnvironmentSpec, Trajectory

N_MAX = 20


def _finite_ck(case):
    return couple.CouplingKernel(case.kernel, case.minor, case.R)


def _env_rows(case, n, reps, seed):
    return np.asarray(case.env.sample(0, n - 1, seed, reps=reps).values)


def _ar1_ck(a=0.5, sigma=1.0, R=2.0):
    return couple.CouplingKernel(dynamics.ar1_kernel(a, sigma), certify.ar1_minorization(a, sigma), R)


def test_identical_starts_are_coupled_at_zero(oracle_case):
    traj = oracle_case.env.sample(0, 9, 1)
    run = couple.couple_paths(_finite_ck(oracle_case), traj, 1, 1, 0, 10, seed=2)
    assert run.coupled_at == 0
    assert np.array_equal(run.path1, run.path2)


def test_certain_regeneration_couples_in_one_step():
    # rows identical within each environment: the Doeblin mass is 1
    row = np.array([[0.2, 0.5, 0.3], [0.6, 0.1, 0.3]])
    table = np.repeat(row[:, None, :], 3, axis=1)
    kern = dynamics.finite_kernel(table)
    minor = certify.finite_minorization(kern)
    ck = couple.CouplingKernel(kern, minor, 1.0)
    env = np.random.default_rng(0).integers(0, 2, (500, 5))
    cb = couple.couple_batch(ck, env, 0, 2, 5, seed=3)
    assert np.all(cb.coupled_at == 1)
    assert np.all(cb.regen[:, 0])


def test_zero_horizon_run(oracle_case):
    traj = oracle_case.env.sample(0, 3, 1)
    run = couple.couple_paths(_finite_ck(oracle_case), traj, 0, 2, 0, 0, seed=2)
    assert math.isinf(run.coupled_at) and run.path1.shape == (1,)
    with pytest.raises(ValueError):
        couple.couple_paths(_finite_ck(oracle_case), traj, 0, 2, 0, -1, seed=2)


def test_split_mode_requires_densities():
    kern = dynamics.deterministic_kernel(lambda x, y: x)
    with pytest.raises(ValueError):
        couple.CouplingKernel(kern, certify.ar1_minorization(0.5, 1.0), 1.0)
    couple.CouplingKernel(kern, None, 1.0, mode="shared-noise-only")


def test_invalid_certificate_is_a_hard_error(oracle_case):
    # claims 1.5 times the true overlap mass
    good = oracle_case.minor
    bad = certify.MinorizationCertificate(
        lambda R, y: 1 - 1.5 * (1 - good.beta(R, y)), good.kappa_sampler, good.kappa_arity,
        good.V, good.kappa_log_density)
    ck = couple.CouplingKernel(oracle_case.kernel, bad, 1.0)
    env = _env_rows(oracle_case, 30, 400, 5)
    with pytest.raises(ValueError, match="residual acceptance"):
        couple.couple_batch(ck, env, 0, 2, 30, seed=1)


def test_noncoupling_matches_pair_chain(oracle_case):
    c = oracle_case
    reps = 10_000
    env = _env_rows(c, N_MAX, reps, 11)
    x1 = np.random.default_rng(4).choice(3, reps, p=[0.2, 0.3, 0.5])
    cb = couple.couple_batch(_finite_ck(c), env, x1, 0, N_MAX, seed=12, record=False)
    freq = cb.noncoupled(N_MAX).mean(axis=0)
    exact = oracle.exact_noncoupling(c.P, c.init, c.table, c.dob, [0.2, 0.3, 0.5], 0, 0, N_MAX)
    assert np.all(binomial_z(freq[1:], exact[1:], reps) <= 3)


def test_coupled_paths_keep_their_marginals(oracle_case):
    c = oracle_case
    reps = 10_000
    env = _env_rows(c, N_MAX, reps, 21)
    cb = couple.couple_batch(_finite_ck(c), env, 0, 2, N_MAX, seed=22)
    for path, start in ((cb.path1, 0), (cb.path2, 2)):
        exact = oracle.state_marginals(c.P, c.init, c.table, np.eye(3)[start], N_MAX)
        occ = np.stack([(path == s).mean(axis=0) for s in range(3)], axis=1)
        assert np.all(binomial_z(occ, exact, reps) <= 3.5)


def test_absorption_and_regeneration_validity(oracle_case):
    c = oracle_case
    env = _env_rows(c, 25, 2000, 31)
    x1 = np.random.default_rng(0).integers(0, 3, 2000)
    cb = couple.couple_batch(_finite_ck(c), env, x1, 2, 25, seed=32)
    for i in range(2000):
        run = cb.run(i)
        if not math.isinf(run.coupled_at):
            k = int(run.coupled_at)
            assert np.array_equal(run.path1[k:], run.path2[k:])
        for t in run.regenerations:
            assert c.minor.V(run.path1[t:t + 1])[0] <= c.R
            assert c.minor.V(run.path2[t:t + 1])[0] <= c.R


def test_ar1_regeneration_inside_small_set_only():
    ck = _ar1_ck(R=1.0)
    env = np.zeros((500, 40, 1))
    x1 = np.random.default_rng(1).normal(0, 3, (500, 1))
    cb = couple.couple_batch(ck, env, x1, np.zeros(1), 40, seed=4)
    t_idx = np.nonzero(cb.regen)
    assert np.all(np.abs(cb.path1[t_idx][:, 0]) <= 1.0)
    assert np.all(np.abs(cb.path2[t_idx][:, 0]) <= 1.0)
    for i in range(500):
        k = cb.coupled_at[i]
        if k != couple.NEVER:
            assert np.array_equal(cb.path1[i, k:], cb.path2[i, k:])


def test_run_to_dict_round_trip(oracle_case):
    traj = oracle_case.env.sample(0, 9, 1)
    d = couple.couple_paths(_finite_ck(oracle_case), traj, 0, 2, 3, 5, seed=1).to_dict()
    assert d["j"] == 3 and d["p"] == 1 and len(d["path1"]) == 6


# b(n)

def test_b_is_zero_for_point_mass_init(oracle_case):
    c = oracle_case
    bc = couple.estimate_b(_finite_ck(c), c.env, 1, 1, 1, range(6), [0], 300, seed=0)
    assert np.all(bc.estimate == 0) and np.all(bc.raw == 0)


def test_b_matches_exact_sup_over_j(oracle_case):
    c = oracle_case
    law = np.array([0.0, 0.0, 1.0])
    bc = couple.estimate_b(_finite_ck(c), c.env, 0, 2, 1, range(1, N_MAX + 1), [0, 1, 2, 3],
                           10_000, seed=7)
    exact, _ = oracle.exact_b(c.P, c.init, c.table, c.dob, law, 0, [0, 1, 2, 3], N_MAX)
    assert np.all(binomial_z(bc.raw, exact[1:], bc.reps) <= 3)
    assert np.all(np.diff(bc.estimate) <= 0)


def test_b_ar1_loglinear_decay():
    ck = _ar1_ck(R=2.0)
    env = EnvironmentSpec("iid", params={"dist": "normal"})
    bc = couple.estimate_b(ck, env, np.zeros(1), lambda rng, n: rng.normal(0, 2, (n, 1)), 1,
                           range(31), [0, 5], 10_000, seed=3)
    fit = bc.loglinear_fit(30)
    assert fit["slope"] < -0.1


def test_b_rejects_empty_grids(oracle_case):
    with pytest.raises(ValueError):
        couple.estimate_b(_finite_ck(oracle_case), oracle_case.env, 0, 2, 1, [], [0], 10, 0)


# random times

def _constant_certs(gamma, beta_value):
    drift = certify.DriftCertificate(certify.norm_power(1), gamma, 1.0)
    minor = certify.MinorizationCertificate(lambda R, y: np.full(np.shape(y)[0], beta_value),
                                            None, 1, certify.norm_power(1))
    return drift, minor


def _traj(values):
    values = np.asarray(values)
    return Trajectory(values, 0, len(values) - 1, "test", 0)


def _flat_traj(n):
    return _traj(np.zeros((n + 5, 1)))


def test_random_times_hand_enumeration():
    drift, minor = _constant_certs(0.5, 0.2)
    n = 30
    rt = couple.random_times(_flat_traj(n), drift, minor, 2.0, 0.5, 0, n)
    assert rt.R_C == 16.0
    assert np.array_equal(rt.tau_tilde, np.arange(2, n + 1))
    assert np.array_equal(rt.tau, np.arange(2, n + 1, 2))
    for m in range(2, n + 1):
        assert rt.L(m) == (m - 2) // 2


def test_random_times_expansive_is_empty():
    drift, minor = _constant_certs(2.0, 0.2)
    rt = couple.random_times(_flat_traj(20), drift, minor, 2.0, 0.5, 0, 20)
    assert rt.empty and rt.L() == 0


def test_random_times_blocked_by_minorization():
    drift, minor = _constant_certs(0.1, 1 - 1e-9)
    rt = couple.random_times(_flat_traj(20), drift, minor, 2.0, 0.5, 0, 20)
    assert rt.empty and rt.L() == 0


def test_random_times_preconditions():
    drift, minor = _constant_certs(0.5, 0.2)
    with pytest.raises(ValueError):
        couple.random_times(_flat_traj(5), drift, minor, 1.0, 0.5, 0, 5)
    with pytest.raises(ValueError):
        couple.random_times(_flat_traj(5), drift, minor, 2.0, 1.0, 0, 5)


@given(st.integers(0, 10_000), st.floats(1.2, 6.0), st.integers(0, 5))
def test_random_times_reevaluated(seed, C, j):
    rng = np.random.default_rng(seed)
    n = 40
    ys = rng.integers(0, 3, n + j + 2)
    gam, K, bet = np.array([0.3, 0.8, 1.4]), np.array([0.5, 1.0, 2.0]), np.array([0.1, 0.4, 0.9])
    drift = certify.DriftCertificate(certify.finite_V([0, 1]), table_fn(gam), table_fn(K))
    minor = certify.MinorizationCertificate(lambda R, y: bet[np.asarray(y)], None, 1,
                                            certify.finite_V([0, 1]))
    traj = _traj(ys)
    rt = couple.random_times(traj, drift, minor, C, 0.5, j, n)
    Ci = math.ceil(C)
    assert rt.tau_tilde[0] == Ci + j
    assert np.all(np.diff(rt.tau_tilde) > 0)
    for t in rt.tau_tilde[1:]:
        g = gam[ys]
        sup = max(np.prod(g[t - l:t]) for l in range(Ci, t - j + 1))
        S = K[ys[t - 1]] + sum(np.prod(g[t - l:t]) * K[ys[t - l - 1]] for l in range(1, t - j))
        assert sup <= 1 - 1 / C + 1e-12
        assert S <= C + 1e-12
        assert bet[ys[t]] <= 0.5
    assert np.all(np.diff(rt.L_curve) >= 0)
    for m in range(n + 1):
        assert rt.L(m) == max(int(np.sum(rt.tau <= m + j)) - 1, 0)


def test_quenched_bound_substitution():
    drift, minor = _constant_certs(0.5, 0.2)
    rt = couple.random_times(_flat_traj(8), drift, minor, 2.0, 0.5, 0, 8)
    assert rt.L(8) == 3
    assert couple.quenched_bound(rt, 1.0, 0.5, 0.0, 0.0, 8) == 0.125
    assert couple.quenched_bound(rt, 0.2, 0.5, 1.0, 1.0, 0) == pytest.approx(0.6)
    assert couple.quenched_bound(rt, 5.0, 0.5, 0.0, 0.0, 0) == 1.0


def _oracle_times(case, ys, C=5.0, beta_bar=0.4):
    drift = certify.DriftCertificate(certify.finite_V([0.0, 1.0, 2.0]), 0.5, 2.0)
    traj = _traj(ys)
    return couple.random_times(traj, drift, case.minor, C, beta_bar, 0, len(ys) - 1)


def test_calibrated_quenched_bound_dominates_exact(oracle_case):
    c = oracle_case
    n = 40
    V1, V2 = 0.0, 2.0

    def sample(seed, count):
        out = []
        for ys in _env_rows(c, n + 1, count, seed):
            rt = _oracle_times(c, ys)
            exact = oracle.quenched_noncoupling(c.table, c.dob, ys[:n], 0, 2)
            out.append((rt, exact))
        return out

    train = sample(1, 200)
    L_all = np.concatenate([rt.L_curve for rt, _ in train])
    p_all = np.concatenate([ex for _, ex in train])
    fit = couple.calibrate_quenched(L_all, p_all, V1, V2)
    assert fit["source"] == "fitted"
    held = sample(2, 300)
    ok = [all(couple.quenched_bound(rt, fit["M"], fit["rho"], V1, V2, m) >= ex[m] - 1e-12
              for m in range(n + 1)) for rt, ex in held]
    assert np.mean(ok) >= 0.99

    avg = np.mean([[couple.quenched_bound(rt, fit["M"], fit["rho"], V1, V2, m)
                    for m in range(n + 1)] for rt, _ in held], axis=0)
    reps = 10_000
    cb = couple.couple_batch(_finite_ck(c), _env_rows(c, n, reps, 3), 0, 2, n, seed=4,
                             record=False)
    freq = cb.noncoupled(n).mean(axis=0)
    assert np.all(avg >= freq - 3 * np.maximum(np.sqrt(freq * (1 - freq) / reps), 1 / reps))


# forward coupling

def test_forward_requires_two_sided_env(oracle_case):
    env = EnvironmentSpec("finite-markov", params={"P": oracle_case.P})
    with pytest.raises(ValueError):
        couple.forward_couple_stationary(_finite_ck(oracle_case), env, 0, 10, 5, 10, 0)


def test_forward_exchangeable_partners(oracle_case):
    rep = couple.forward_couple_stationary(_finite_ck(oracle_case), oracle_case.env, "burn-in",
                                           50, 30, 2000, seed=1)
    assert np.all(np.diff(rep.tail) <= 0) and rep.tail[-1] < 0.01
    assert "burn-in" in rep.note


def test_forward_matches_exact_tail_and_bounds_tv(oracle_case):
    c = oracle_case
    B, n, reps = 200, 20, 10_000
    rep = couple.forward_couple_stationary(_finite_ck(c), c.env, 0, B, n, reps, seed=5)
    exact = oracle.burn_in_pair_noncoupling(c.P, c.init, c.table, c.dob, 0, B, n)
    assert np.all(binomial_z(rep.tail, exact, reps) <= 3)
    tv = oracle.stationary_tv(c.P, c.init, c.table, 0, n)
    assert np.all(rep.tv + 3 * 2 * np.maximum(rep.tail_se, 1 / reps) >= tv)


def test_forward_ar1_tv_small_by_fifty():
    env = EnvironmentSpec("iid", params={"dist": "normal"}, two_sided=True)
    rep = couple.forward_couple_stationary(_ar1_ck(R=2.0), env, np.zeros(1), 1000, 50, 5000,
                                           seed=6)
    assert np.all(np.diff(rep.tv) <= 0) and rep.tv[50] < 0.05


# drift along a trajectory

def test_drift_along_single_step():
    cert = certify.DriftCertificate(certify.norm_power(1), lambda y: 0.1 + y[:, 0],
                                    lambda y: 2 + y[:, 0])
    traj = _traj(np.array([[0.3], [0.6], [0.2]]))
    coef, const = couple.drift_along_trajectory(cert, traj, 1, 2)
    assert coef == pytest.approx(0.7) and const == pytest.approx(2.6)


def test_drift_along_constant():
    cert = certify.DriftCertificate(certify.norm_power(1), 0.5, 1.0)
    coef, const = couple.drift_along_trajectory(cert, _flat_traj(10), 2, 5)
    assert coef == pytest.approx(0.125, rel=1e-14) and const == pytest.approx(1.75, rel=1e-14)


@given(st.integers(0, 10_000), st.integers(0, 10), st.integers(1, 25))
def test_drift_along_matches_naive(seed, l, length):
    rng = np.random.default_rng(seed)
    ys = rng.uniform(0, 1, (40, 1))
    cert = certify.DriftCertificate(certify.norm_power(1), lambda y: 0.2 + 1.5 * y[:, 0],
                                    lambda y: 1 + 3 * y[:, 0])
    k = l + length
    coef, const = couple.drift_along_trajectory(cert, _traj(ys), l, k)
    g, K = 0.2 + 1.5 * ys[:, 0], 1 + 3 * ys[:, 0]
    naive_coef = 1.0
    for r in range(l, k):
        naive_coef *= g[r]
    naive_const = 0.0
    for r in range(l, k):
        term = K[r]
        for i in range(r + 1, k):
            term *= g[i]
        naive_const += term
    assert coef == pytest.approx(naive_coef, rel=1e-12)
    assert const == pytest.approx(naive_const, rel=1e-12)


def test_drift_along_rejects_bad_range():
    cert = certify.DriftCertificate(certify.norm_power(1), 0.5, 1.0)
    with pytest.raises(ValueError):
        couple.drift_along_trajectory(cert, _flat_traj(5), 3, 3)

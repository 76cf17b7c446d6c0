"""Exact computations for finite chains in finite Markov environments.

Everything here works by matrix algebra on the joint (environment, state) or
(environment, state, state) chains and never draws random numbers, so it can
serve as ground truth for the Monte Carlo routines.

Index conventions: the joint chain state (y, x) has index ``y * nx + x``; the
pair chain state (y, a, b) has index ``(y * nx + a) * nx + b``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import check_stochastic


@dataclass(frozen=True)
class FiniteDoeblin:
    """Minorization of a finite kernel on a small set: Q(y,x,.) >= rho(y) kappa(y,.)."""

    beta: np.ndarray  # (n_env,)
    kappa: np.ndarray  # (n_env, nx)
    small: np.ndarray  # (nx,) bool

    @property
    def rho(self):
        return 1.0 - self.beta


def doeblin(table, small=None) -> FiniteDoeblin:
    """Best constant minorization over ``small`` (all states by default)."""
    table = check_stochastic(table, "kernel table")
    n_env, nx, _ = table.shape
    small = np.ones(nx, bool) if small is None else np.asarray(small, bool)
    if not small.any():
        raise ValueError("small set is empty")
    mins = table[:, small, :].min(axis=1)
    rho = mins.sum(axis=1)
    kappa = np.where(rho[:, None] > 0, mins / np.where(rho > 0, rho, 1.0)[:, None], 1.0 / nx)
    return FiniteDoeblin(1.0 - rho, kappa, small)


def joint_transition(P_env, table) -> np.ndarray:
    """Transition matrix of (Y_t, X_t): (y,x) -> (y',x') w.p. P[y,y'] Q[y,x,x']."""
    P_env = np.asarray(P_env, float)
    table = np.asarray(table, float)
    n_env, nx, _ = table.shape
    M = np.einsum("ab,aij->aibj", P_env, table)
    return M.reshape(n_env * nx, n_env * nx)


def joint_initial(env_init, x_law) -> np.ndarray:
    return np.outer(np.asarray(env_init, float), np.asarray(x_law, float)).ravel()


def joint_laws(P_env, env_init, table, x_law, n: int) -> np.ndarray:
    """Laws of (Y_t, X_t) for t = 0..n, shape (n+1, n_env, nx)."""
    M = joint_transition(P_env, table)
    mu = joint_initial(env_init, x_law)
    n_env, nx = len(env_init), len(x_law)
    out = np.empty((n + 1, n_env, nx))
    for t in range(n + 1):
        out[t] = mu.reshape(n_env, nx)
        mu = mu @ M
    return out


def state_marginals(P_env, env_init, table, x_law, n: int) -> np.ndarray:
    """P(X_t = x) for t = 0..n."""
    return joint_laws(P_env, env_init, table, x_law, n).sum(axis=1)


def shared_uniform_joint(pa: np.ndarray, pb: np.ndarray) -> np.ndarray:
    """Joint law of (F_a^{-1}(U), F_b^{-1}(U)) for one shared uniform U."""
    ca, cb = np.cumsum(pa), np.cumsum(pb)
    ca[-1] = cb[-1] = 1.0
    cuts = np.unique(np.concatenate([[0.0], ca, cb]))
    cuts = cuts[cuts <= 1.0]
    J = np.zeros((pa.size, pb.size))
    for s, e in zip(cuts[:-1], cuts[1:]):
        if e <= s:
            continue
        mid = 0.5 * (s + e)
        ia = min(int(np.sum(mid >= ca)), pa.size - 1)
        ib = min(int(np.sum(mid >= cb)), pb.size - 1)
        J[ia, ib] += e - s
    return J


def _accept_ratio(q_row, rho, kappa):
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(q_row > 0, (q_row - rho * kappa) / np.where(q_row > 0, q_row, 1.0), 0.0)
    if np.any(r < -1e-12) or np.any(r > 1 + 1e-12):
        raise ValueError("minorization exceeds the kernel: residual ratio outside [0, 1]")
    return np.clip(r, 0.0, 1.0)


def residual_pair_law(qa, qb, rho, kappa) -> np.ndarray:
    """Joint law of two residual draws by rejection with shared proposals and acceptances."""
    beta = 1.0 - rho
    J = shared_uniform_joint(qa, qb)
    ra, rb = _accept_ratio(qa, rho, kappa), _accept_ratio(qb, rho, kappa)
    RA, RB = ra[:, None], rb[None, :]
    both = J * np.minimum(RA, RB)
    only_a = (J * np.clip(RA - RB, 0, None)).sum(axis=1)
    only_b = (J * np.clip(RB - RA, 0, None)).sum(axis=0)
    none = (J * (1 - np.maximum(RA, RB))).sum()
    ma, mb = qa * ra, qb * rb  # per-round acceptance masses, each summing to beta
    law = both + np.outer(only_a, mb / beta) + np.outer(ma / beta, only_b)
    return law / (1.0 - none)


def pair_tables(table, minor: FiniteDoeblin) -> np.ndarray:
    """Per-environment transition matrices of the coupled pair (a, b) -> (a', b').

    Mirrors the coupling step: a chain inside the small set regenerates on the
    shared event of probability rho(y) and otherwise takes a residual draw; a
    chain outside moves by the base map with the shared base uniform.
    """
    table = np.asarray(table, float)
    n_env, nx, _ = table.shape
    out = np.zeros((n_env, nx * nx, nx * nx))
    for y in range(n_env):
        rho, beta = minor.rho[y], minor.beta[y]
        kap = minor.kappa[y]
        Q = table[y]
        res = {}
        for a in range(nx):
            if minor.small[a] and beta > 0:
                res[a] = Q[a] * _accept_ratio(Q[a], rho, kap) / beta
        for a in range(nx):
            for b in range(nx):
                if a == b:
                    J = np.diag(Q[a])
                else:
                    ia, ib = minor.small[a], minor.small[b]
                    if ia and ib:
                        J = rho * np.diag(kap)
                        if beta > 0:
                            J = J + beta * residual_pair_law(Q[a], Q[b], rho, kap)
                    elif ia:
                        move_a = rho * kap + (beta * res[a] if beta > 0 else 0.0)
                        J = np.outer(move_a, Q[b])
                    elif ib:
                        move_b = rho * kap + (beta * res[b] if beta > 0 else 0.0)
                        J = np.outer(Q[a], move_b)
                    else:
                        J = shared_uniform_joint(Q[a], Q[b])
                out[y, a * nx + b] = J.ravel()
    return out


def _pair_env_transition(P_env, ptabs) -> np.ndarray:
    n_env, m, _ = ptabs.shape
    M = np.einsum("ab,aij->aibj", np.asarray(P_env, float), ptabs)
    return M.reshape(n_env * m, n_env * m)


def _offdiag_mass(mu, n_env, nx):
    v = mu.reshape(n_env, nx, nx)
    return v.sum() - np.einsum("yaa->", v)


def exact_noncoupling(P_env, env_init, table, minor: FiniteDoeblin, x_law, x0: int,
                      j: int, n_max: int) -> np.ndarray:
    """P(Z^{X_j}_{j,j+n} != Z^{x0}_{j,j+n}) for n = 0..n_max (annealed over the environment)."""
    table = np.asarray(table, float)
    n_env, nx, _ = table.shape
    law_j = joint_laws(P_env, env_init, table, x_law, j)[j]  # (n_env, nx)
    mu = np.zeros((n_env, nx, nx))
    mu[:, :, x0] = law_j
    mu = mu.ravel()
    M = _pair_env_transition(P_env, pair_tables(table, minor))
    out = np.empty(n_max + 1)
    for n in range(n_max + 1):
        out[n] = _offdiag_mass(mu, n_env, nx)
        mu = mu @ M
    return out


def exact_b(P_env, env_init, table, minor, x_law, x0, j_window, n_max):
    """sup over j in the window of the exact non-coupling curves; also returns argmax j."""
    curves = np.array([exact_noncoupling(P_env, env_init, table, minor, x_law, x0, j, n_max)
                       for j in j_window])
    idx = curves.argmax(axis=0)
    return curves.max(axis=0), np.asarray(list(j_window))[idx]


def pair_occupation(P_env, env_init, table, minor, x_law, x0, j, n_max):
    """Marginal laws of both coupled paths for n = 0..n_max, shape (2, n_max+1, nx)."""
    table = np.asarray(table, float)
    n_env, nx, _ = table.shape
    law_j = joint_laws(P_env, env_init, table, x_law, j)[j]
    mu = np.zeros((n_env, nx, nx))
    mu[:, :, x0] = law_j
    mu = mu.ravel()
    M = _pair_env_transition(P_env, pair_tables(table, minor))
    out = np.empty((2, n_max + 1, nx))
    for n in range(n_max + 1):
        v = mu.reshape(n_env, nx, nx).sum(axis=0)
        out[0, n], out[1, n] = v.sum(axis=1), v.sum(axis=0)
        mu = mu @ M
    return out


def quenched_noncoupling(table, minor, ys, x1: int, x2: int) -> np.ndarray:
    """Non-coupling probability given a fixed environment path ys (length n) for n=0..len(ys)."""
    table = np.asarray(table, float)
    nx = table.shape[1]
    ptabs = pair_tables(table, minor)
    mu = np.zeros(nx * nx)
    mu[x1 * nx + x2] = 1.0
    diag = np.arange(nx) * (nx + 1)
    out = np.empty(len(ys) + 1)
    out[0] = 1.0 - mu[diag].sum()
    for n, y in enumerate(ys, start=1):
        mu = mu @ ptabs[int(y)]
        out[n] = 1.0 - mu[diag].sum()
    return out


def burn_in_pair_noncoupling(P_env, env_pi, table, minor, x0: int, burn: int, n_max: int):
    """P(tau > n) when the partner starts from the chain run ``burn`` steps from x0."""
    table = np.asarray(table, float)
    n_env, nx, _ = table.shape
    x_law = np.eye(nx)[x0]
    law0 = joint_laws(P_env, env_pi, table, x_law, burn)[burn]  # (Y_0, X*_0)
    mu = np.zeros((n_env, nx, nx))
    mu[:, x0, :] = law0
    mu = mu.ravel()
    M = _pair_env_transition(P_env, pair_tables(table, minor))
    out = np.empty(n_max + 1)
    for n in range(n_max + 1):
        out[n] = _offdiag_mass(mu, n_env, nx)
        mu = mu @ M
    return out


def stationary_tv(P_env, env_pi, table, x0: int, n_max: int) -> np.ndarray:
    """sum_x |P(X_n = x) - pi_X(x)| for the chain from x0, with Y_0 stationary."""
    from .dynamics import stationary_distribution

    M = joint_transition(P_env, table)
    pi = stationary_distribution(M).reshape(len(env_pi), -1).sum(axis=0)
    nx = pi.size
    marg = state_marginals(P_env, env_pi, table, np.eye(nx)[x0], n_max)
    return np.abs(marg - pi).sum(axis=1)


def exact_dl_finite(P_env, env_init, gamma_tab, K_tab, L: int, t_window) -> np.ndarray:
    """d_l = sup_t E[K(Y_t) prod_{i=1}^l gamma(Y_{t+i})] over the window; t = -1 uses K = 1."""
    P = np.asarray(P_env, float)
    g = np.asarray(gamma_tab, float)
    K = np.asarray(K_tab, float)
    G = P * g[None, :]
    best = np.full(L + 1, -np.inf)
    for t in t_window:
        if t == -1:
            w = np.asarray(env_init, float) * g  # K(Y_{-1}) = 1, first factor gamma(Y_0)
            vals = [1.0]
            for _ in range(L):
                vals.append(w.sum())
                w = w @ G
        else:
            law = np.asarray(env_init, float) @ np.linalg.matrix_power(P, t)
            w = law * K
            vals = []
            for _ in range(L + 1):
                vals.append(w.sum())
                w = w @ G
        best = np.maximum(best, vals)
    return best

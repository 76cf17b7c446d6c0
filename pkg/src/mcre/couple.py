"""Split-chain coupling, non-coupling probabilities, random times and forward coupling."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ._common import (Stream, binomial_se, derive_seed, isotonic_nonincreasing, make_rng,
                      run_blocks, states_equal)
from .certify import DriftCertificate, MinorizationCertificate
from .dynamics import RandomMapKernel, Trajectory, block_env, simulate_batch

NEVER = np.iinfo(np.int64).max
MODES = ("split", "shared-noise-only")


@dataclass(frozen=True, eq=False)
class CouplingKernel:
    """A base kernel plus the minorization used to build regenerations."""

    base: RandomMapKernel
    minor: Optional[MinorizationCertificate]
    R: float
    mode: str = "split"
    max_rounds: int = 100_000

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown regeneration mode {self.mode!r}")
        if self.mode == "split":
            if self.minor is None:
                raise ValueError("split coupling needs a minorization certificate")
            if self.base.density is None and self.base.log_density is None:
                raise ValueError("split coupling needs the base kernel density")
            if self.minor.kappa_log_density is None:
                raise ValueError("split coupling needs the kappa density")
            if self.minor.p != self.base.p:
                raise ValueError("kernel and minorization step counts differ")


@dataclass
class CouplingBatch:
    path1: Optional[np.ndarray]
    path2: Optional[np.ndarray]
    coupled_at: np.ndarray  # NEVER when not coupled within the horizon
    regen: np.ndarray  # (N, horizon) bool, step t -> t+1 regenerated both chains
    j: int
    p: int

    def noncoupled(self, horizon: int) -> np.ndarray:
        """(N, horizon+1) indicators of coupled_at > n."""
        n = np.arange(horizon + 1)
        return self.coupled_at[:, None] > n[None, :]

    def run(self, i: int) -> "CouplingRun":
        c = self.coupled_at[i]
        return CouplingRun(self.path1[i], self.path2[i],
                           math.inf if c == NEVER else int(c),
                           [int(t) for t in np.flatnonzero(self.regen[i])], self.j, self.p)


@dataclass
class CouplingRun:
    path1: np.ndarray
    path2: np.ndarray
    coupled_at: float
    regenerations: list
    j: int
    p: int

    def to_dict(self):
        return {"path1": self.path1.tolist(), "path2": self.path2.tolist(),
                "coupled_at": None if math.isinf(self.coupled_at) else self.coupled_at,
                "regenerations": self.regenerations, "j": self.j, "p": self.p}


def _where(mask, a, b):
    if a.ndim > 1:
        mask = mask.reshape((-1,) + (1,) * (a.ndim - 1))
    return np.where(mask, a, b)


def _residual(ck: CouplingKernel, xs, y, needs, rho, seed, t, block):
    """Residual draws by rejection; the two chains of a pair share every round."""
    base, minor, R = ck.base, ck.minor, ck.R
    outs = [x.copy() for x in xs]
    pending = [n.copy() for n in needs]
    if not (pending[0].any() or pending[1].any()):
        return outs
    g = make_rng(seed, Stream.RESIDUAL, block, t)
    k = base.noise_arity
    rounds = 0
    while pending[0].any() or pending[1].any():
        rows = np.flatnonzero(pending[0] | pending[1])
        u = g.random((rows.size, k))
        a = g.random(rows.size)
        for x, out, pend in zip(xs, outs, pending):
            sub = pend[rows]
            if not sub.any():
                continue
            idx = rows[sub]
            prop = base.map(x[idx], y[idx], u[sub])
            lq = base.logq(y[idx], x[idx], prop)
            lk = minor.kappa_log_density(R, y[idx], prop)
            with np.errstate(over="ignore", invalid="ignore"):
                ratio = 1.0 - rho[idx] * np.exp(lk - lq)
            if np.any(~(ratio >= -1e-9)) or np.any(ratio > 1 + 1e-12):
                worst = float(np.nanmin(ratio))
                raise ValueError(f"residual acceptance ratio outside [0, 1] (min {worst:.3g}): "
                                 "minorization certificate is invalid")
            acc = a[sub] < ratio
            out[idx[acc]] = prop[acc]
            pend[idx[acc]] = False
        rounds += 1
        if rounds > ck.max_rounds:
            raise RuntimeError(f"residual rejection exceeded {ck.max_rounds} rounds at t={t}; "
                               f"smallest beta(R,y) among pending rows = "
                               f"{float(np.min(1 - rho[rows])):.3g}")
    return outs


def coupled_step(ck: CouplingKernel, x1, x2, y, seed: int, t: int, block: int = 0):
    """One transition of both chains; returns (x1', x2', regenerated)."""
    base = ck.base
    N = x1.shape[0]
    g = make_rng(seed, Stream.COUPLE, block, t)
    u = g.random((N, base.noise_arity))
    n1, n2 = base.map(x1, y, u), base.map(x2, y, u)
    if ck.mode == "shared-noise-only":
        return n1, n2, np.zeros(N, bool)
    minor = ck.minor
    w = g.random(N)
    uk = g.random((N, minor.kappa_arity))
    beta = minor.beta(ck.R, y)
    if np.any((beta < 0) | (beta > 1)):
        raise ValueError("beta(R, y) outside [0, 1]")
    rho = 1.0 - beta
    in1, in2 = minor.V(x1) <= ck.R, minor.V(x2) <= ck.R
    hit = w < rho
    kap = minor.kappa_sampler(ck.R, y, uk)
    r1, r2 = _residual(ck, (x1, x2), y, (in1 & ~hit, in2 & ~hit), rho, seed, t, block)
    out1 = _where(in1, _where(hit, kap, r1), n1)
    out2 = _where(in2, _where(hit, kap, r2), n2)
    return out1, out2, in1 & in2 & hit


def couple_batch(ck: CouplingKernel, env: np.ndarray, x1, x2, horizon: int, seed: int,
                 t0: int = 0, block: int = 0, record: bool = True) -> CouplingBatch:
    """Couple N pairs; pair r is driven by environment row env[r] (kernel steps).

    Once a pair meets, only the first path is advanced and copied to the second.
    """
    base = ck.base
    env = np.asarray(env)
    N = env.shape[0]
    if horizon < 0:
        raise ValueError("horizon must be >= 0")
    if horizon > env.shape[1]:
        raise ValueError("environment shorter than the horizon")
    shape = (N,) if base.finite else (N, base.state_dim)
    a = base.states(np.broadcast_to(np.asarray(x1), shape)).copy()
    b = base.states(np.broadcast_to(np.asarray(x2), shape)).copy()
    coupled_at = np.where(states_equal(a, b), 0, NEVER).astype(np.int64)
    regen = np.zeros((N, horizon), bool)
    p1 = p2 = None
    if record:
        p1 = np.empty((N, horizon + 1) + a.shape[1:], a.dtype)
        p2 = np.empty_like(p1)
        p1[:, 0], p2[:, 0] = a, b
    for t in range(horizon):
        done = coupled_at <= t
        a, b, r = coupled_step(ck, a, b, env[:, t], seed, t0 + t, block)
        b = _where(done, a, b)
        regen[:, t] = r & ~done
        meet = (~done) & states_equal(a, b)
        coupled_at[meet] = t + 1
        if record:
            p1[:, t + 1], p2[:, t + 1] = a, b
    return CouplingBatch(p1, p2, coupled_at, regen, t0, base.p)


def _env_steps(trajectory: Trajectory, j: int, n: int, p: int, finite: bool) -> np.ndarray:
    vals = trajectory.window(j * p, (j + n) * p) if n > 0 else trajectory.window(j * p, j * p + 1)
    vals = np.asarray(vals)[None] if trajectory.reps is None else np.asarray(vals)
    return block_env(vals, p, finite)


def couple_paths(ck: CouplingKernel, trajectory: Trajectory, x1, x2, j: int, n: int,
                 seed: int) -> CouplingRun:
    """Couple the chains from x1 and x2 started at (block) time j for n steps."""
    if n < 0:
        raise ValueError("horizon must be >= 0")
    env = _env_steps(trajectory, j, n, ck.base.p, ck.base.env_finite)
    return couple_batch(ck, env, x1, x2, n, seed, t0=j).run(0)


# ---------------------------------------------------------------------------
# b(n)
# ---------------------------------------------------------------------------

@dataclass
class BCurve:
    n: np.ndarray
    estimate: np.ndarray
    stderr: np.ndarray
    j_argmax: np.ndarray
    raw: np.ndarray
    per_j: dict
    reps: int

    def rows(self):
        header = ["n", "estimate", "stderr", "j_argmax"]
        return header, [[int(n), e, s, int(j)] for n, e, s, j in
                        zip(self.n, self.estimate, self.stderr, self.j_argmax)]

    def loglinear_fit(self, n_max=None):
        """OLS of log b(n) on n (positive raw values only): slope, intercept, p-value."""
        from scipy.stats import linregress

        sel = self.raw > 0
        if n_max is not None:
            sel &= self.n <= n_max
        res = linregress(self.n[sel].astype(float), np.log(self.raw[sel]))
        return {"slope": res.slope, "intercept": res.intercept, "pvalue": res.pvalue,
                "stderr": res.stderr, "points": int(sel.sum())}


def _initial_states(init, base: RandomMapKernel, n: int, rng):
    if callable(init):
        return base.states(init(rng, n))
    shape = (n,) if base.finite else (n, base.state_dim)
    return base.states(np.broadcast_to(np.asarray(init), shape)).copy()


def estimate_b(ck: CouplingKernel, env, x0, init, p: int, n_grid: Sequence[int],
               j_grid: Sequence[int], reps: int, seed: int, threads: int = 1) -> BCurve:
    """b(n) = sup_j P(Z^{X_jp} != Z^{x0} after n blocks), sup over the finite j_grid.

    ``init`` is a state (point mass for X_0) or ``init(rng, n) -> states``;
    X_{jp} is obtained by simulating the base chain.
    """
    n_grid = np.asarray(sorted(set(int(n) for n in n_grid)))
    j_list = sorted(set(int(j) for j in j_grid))
    if n_grid.size == 0 or not j_list:
        raise ValueError("n_grid and j_grid must be nonempty")
    if p < 1 or ck.base.p != p:
        raise ValueError(f"coupling kernel must be the {p}-step kernel")
    n_max = int(n_grid.max())
    j_max = j_list[-1]
    finite = getattr(env, "finite", False)

    def block(b, start, stop):
        m = stop - start
        vals = np.asarray(env.sample(0, (j_max + n_max) * p - 1,
                                     derive_seed(seed, Stream.ENV, b), reps=m).values)
        vals = block_env(vals, p, finite)
        x_init = _initial_states(init, ck.base, m, make_rng(seed, Stream.INIT, b))
        counts = np.zeros((len(j_list), n_max + 1))
        x = x_init
        done = 0
        for w, j in enumerate(j_list):
            if j > done:
                x = simulate_batch(ck.base, vals[:, done:j], x, seed, j - done, t0=done,
                                   block=b, record=False)
                done = j
            cb = couple_batch(ck, vals[:, j:j + n_max], x, x0, n_max, seed, t0=j, block=b,
                              record=False)
            counts[w] = cb.noncoupled(n_max).sum(axis=0)
        return counts

    counts = sum(run_blocks(block, reps, threads))
    freq = counts / reps  # (J, n_max+1)
    arg = freq[:, n_grid].argmax(axis=0)
    raw = freq[arg, n_grid]
    return BCurve(n_grid, isotonic_nonincreasing(raw), binomial_se(raw, reps),
                  np.asarray(j_list)[arg], raw,
                  {j: freq[w, n_grid] for w, j in enumerate(j_list)}, reps)


# ---------------------------------------------------------------------------
# random times
# ---------------------------------------------------------------------------

@dataclass
class RandomTimes:
    C: float
    beta_bar: float
    R_C: float
    j: int
    horizon: int
    tau_tilde: np.ndarray  # includes tau_tilde_0 = ceil(C) + j
    tau: np.ndarray
    L_curve: np.ndarray  # L(n', j) for n' = 0..horizon
    gamma_sup: np.ndarray = field(repr=False, default=None)
    S: np.ndarray = field(repr=False, default=None)
    beta: np.ndarray = field(repr=False, default=None)

    @property
    def stride(self) -> int:
        return int(math.ceil(self.C))

    @property
    def empty(self) -> bool:
        return self.tau_tilde.size <= 1

    def L(self, n: Optional[int] = None) -> int:
        n = self.horizon if n is None else n
        if not 0 <= n <= self.horizon:
            raise ValueError(f"n must lie in [0, {self.horizon}]")
        return int(self.L_curve[n])


def random_times(trajectory: Trajectory, drift: DriftCertificate, minor: MinorizationCertificate,
                 C: float, beta_bar: float, j: int, n: int, finite_env: bool = None) -> RandomTimes:
    """Environment-measurable times where drift, excursions and minorization are favourable.

    Scans t in (ceil(C)+j, n+j] and keeps those with
    sup_{C<=l<=t-j} gamma_{t-1}...gamma_{t-l} <= 1 - 1/C, S_{t,j} <= C and
    beta_t(4 C^2) <= beta_bar.
    """
    if not C > 1:
        raise ValueError("C must exceed 1")
    if not 0 < beta_bar < 1:
        raise ValueError("beta_bar must lie in (0, 1)")
    p = drift.p
    Ci = int(math.ceil(C))
    R_C = 4.0 * C * C
    T = n + 1  # times j .. n+j
    if finite_env is None:
        finite_env = np.asarray(trajectory.values).dtype.kind in "iu"
    vals = np.asarray(trajectory.window(j * p, (j + T) * p))
    vals = block_env(vals[None], p, finite_env)[0]
    g = np.asarray(drift.gamma(vals), dtype=float)
    K = np.asarray(drift.K(vals), dtype=float)
    beta = np.asarray(minor.beta(R_C, vals), dtype=float)
    if not (np.all(np.isfinite(g)) and np.all(np.isfinite(K))):
        raise ValueError("non-finite gamma or K along the trajectory")
    # cs[i] = sum_{r<i} log gamma_{j+r}; products gamma_{t-1}..gamma_{t-l} = exp(cs[t-j] - cs[t-j-l])
    cs = np.concatenate([[0.0], np.cumsum(np.log(np.maximum(g, 1e-300)))])
    gsup = np.full(T, np.nan)
    S = np.full(T, np.nan)
    running_max_neg = -np.inf  # max over m of -cs[m], m in [0, i - Ci]
    s = 0.0
    for i in range(1, T):
        s = K[i - 1] + (g[i - 1] * s if i > 1 else 0.0)
        S[i] = s
        if i - Ci >= 0:
            running_max_neg = max(running_max_neg, -cs[i - Ci])
            gsup[i] = math.exp(min(cs[i] + running_max_neg, 700.0))
    ok = (gsup <= 1 - 1 / C) & (S <= C) & (beta <= beta_bar)
    idx = np.arange(T)
    qual = idx[(idx > Ci) & ok] + j
    tt = np.concatenate([[Ci + j], qual]).astype(np.int64)
    tau = tt[::Ci]
    L_curve = np.array([max(int(np.sum(tau <= m + j)) - 1, 0) for m in range(n + 1)])
    return RandomTimes(C, beta_bar, R_C, j, n, tt, tau, L_curve, gsup, S, beta)


def quenched_bound(rt: RandomTimes, M: float, rho: float, V1: float, V2: float,
                   n: Optional[int] = None) -> float:
    """min(1, M (1 + V1 + V2) rho^L(n, j)) with fitted constants (M, rho)."""
    if M <= 0 or not 0 < rho < 1:
        raise ValueError("need M > 0 and rho in (0, 1)")
    return float(min(1.0, M * (1 + V1 + V2) * rho ** rt.L(n)))


def calibrate_quenched(L_values, probs, V1: float, V2: float, quantile: float = 0.999):
    """Fit (M, rho) from non-coupling probabilities versus L.

    rho comes from the least-squares slope of log p on L; M is then raised to
    the given quantile of the residuals so that the bound sits above the data.
    The output is an empirical fit, not a certified constant.
    """
    L_values = np.asarray(L_values, float)
    probs = np.asarray(probs, float)
    sel = probs > 0
    if sel.sum() < 3:
        raise ValueError("need at least three positive probabilities to calibrate")
    Lv, lp = L_values[sel], np.log(probs[sel])
    A = np.vstack([np.ones_like(Lv), Lv]).T
    coef, *_ = np.linalg.lstsq(A, lp, rcond=None)
    rho = float(np.clip(np.exp(coef[1]), 1e-6, 1 - 1e-9))
    logM = float(np.quantile(lp - Lv * np.log(rho), quantile)) - math.log(1 + V1 + V2)
    return {"M": math.exp(logM), "rho": rho, "source": "fitted", "quantile": quantile}


# ---------------------------------------------------------------------------
# forward coupling with the stationary solution
# ---------------------------------------------------------------------------

@dataclass
class ForwardReport:
    tau: np.ndarray
    tail: np.ndarray
    tail_se: np.ndarray
    tv: np.ndarray
    burn_in: int
    note: str = "stationary partner approximated by burn-in"

    def rows(self):
        header = ["n", "estimate", "stderr", "j_argmax"]
        return header, [[n, e, s, 0] for n, (e, s) in enumerate(zip(self.tail, self.tail_se))]


def forward_couple_stationary(ck: CouplingKernel, env, x0, burn_in: int, n: int, reps: int,
                              seed: int, threads: int = 1) -> ForwardReport:
    """Couple the chain from x0 at time 0 with a partner started at time -burn_in.

    ``x0 = "burn-in"`` draws the first chain from an independent burn-in as well.
    """
    if not (getattr(env, "stationary", False) and getattr(env, "two_sided", False)):
        raise ValueError("forward coupling needs a stationary two-sided environment")
    if burn_in < 1:
        raise ValueError("burn_in must be >= 1")
    p = ck.base.p
    finite = getattr(env, "finite", False)
    start = x0 if not (isinstance(x0, str) and x0 == "burn-in") else None

    def block(b, lo, hi):
        m = hi - lo
        vals = np.asarray(env.sample(-burn_in * p, n * p - 1, derive_seed(seed, Stream.ENV, b),
                                     reps=m).values)
        vals = block_env(vals, p, finite)
        past, future = vals[:, :burn_in], vals[:, burn_in:]
        seed_state = ck.base.states(np.zeros(1 if ck.base.finite else ck.base.state_dim,
                                             dtype=np.int64 if ck.base.finite else float))
        x_ref = seed_state[0] if start is None else start
        x_star = simulate_batch(ck.base, past, x_ref, seed, burn_in, t0=-burn_in,
                                role=Stream.BURN, block=b, record=False)
        if start is None:
            x_first = simulate_batch(ck.base, past, x_ref, seed, burn_in, t0=-burn_in,
                                     role=Stream.INIT, block=b, record=False)
        else:
            x_first = start
        cb = couple_batch(ck, future, x_first, x_star, n, seed, t0=0, block=b, record=False)
        return cb.coupled_at

    tau = np.concatenate(run_blocks(block, reps, threads))
    tail = (tau[:, None] > np.arange(n + 1)[None, :]).mean(axis=0)
    return ForwardReport(tau, tail, binomial_se(tail, reps), 2 * tail, burn_in)


def drift_along_trajectory(cert: DriftCertificate, trajectory: Trajectory, l: int, k: int):
    """(prod_{r=l}^{k-1} gamma(y_r), sum_{r=l}^{k-1} K(y_r) prod_{i=r+1}^{k-1} gamma(y_i))."""
    if not l < k:
        raise ValueError("need l < k")
    p = cert.p
    vals = np.asarray(trajectory.window(l * p, k * p))
    finite = vals.dtype.kind in "iu"
    vals = block_env(vals[None], p, finite)[0]
    g = np.asarray(cert.gamma(vals), float)
    K = np.asarray(cert.K(vals), float)
    with np.errstate(divide="ignore"):
        lg = np.log(g)
    suffix = np.concatenate([np.cumsum(lg[::-1])[::-1][1:], [0.0]])  # sum_{i>r} log gamma_i
    coef = math.exp(float(np.sum(lg))) if np.all(g > 0) else 0.0
    terms = K * np.exp(suffix)
    return coef, math.fsum(terms.tolist())

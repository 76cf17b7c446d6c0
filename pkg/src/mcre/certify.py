"""Drift and minorization certificates, their Monte Carlo verification, and summability."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import log_ndtr, ndtr

from ._common import (Stream, as_env_fn, binomial_se, const_fn, derive_seed,
                      isotonic_nonincreasing, make_rng, run_blocks)
from .dynamics import (RandomMapKernel, _inverse_cdf_rows, block_env, gaussian_quantile,
                       step_noise)
from .oracle import FiniteDoeblin, doeblin


# ---------------------------------------------------------------------------
# certificates
# ---------------------------------------------------------------------------

def norm_power(s: float = 1.0):
    """V(x) = ||x||^s for states of shape (N, d)."""
    if s <= 0:
        raise ValueError("exponent must be positive")

    def V(x):
        x = np.asarray(x, dtype=float)
        r = np.sqrt(np.sum(x * x, axis=-1)) if x.ndim > 1 else np.abs(x)
        return r ** s

    V.desc = f"norm^{s:g}"
    return V


def finite_V(values):
    values = np.asarray(values, dtype=float)

    def V(x):
        return values[np.asarray(x, dtype=np.int64)]

    V.desc = "table"
    return V


def _clamp_one(K):
    def Kc(y):
        return np.maximum(K(y), 1.0)

    Kc.raw = K
    return Kc


@dataclass(frozen=True, eq=False)
class DriftCertificate:
    """[Q(y)V](x) <= gamma(y) V(x) + K(y); K is clamped below at 1."""

    V: Callable
    gamma: Callable
    K: Callable
    p: int = 1
    s: float = 1.0
    provenance: str = "user"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "gamma", as_env_fn(self.gamma))
        K = as_env_fn(self.K)
        if not hasattr(K, "raw"):
            K = _clamp_one(K)
        object.__setattr__(self, "K", K)

    def bound(self, x, y):
        return self.gamma(y) * self.V(x) + self.K(y)


@dataclass(frozen=True, eq=False)
class MinorizationCertificate:
    """Q(y, x, .) >= (1 - beta(R, y)) kappa_R(y, .) whenever V(x) <= R.

    ``kappa_sampler(R, y, u)`` maps ``kappa_arity`` uniforms per row to a state;
    ``kappa_log_density(R, y, x')`` is w.r.t. the same reference measure as the
    kernel density.
    """

    beta: Callable
    kappa_sampler: Callable
    kappa_arity: int
    V: Callable
    kappa_log_density: Optional[Callable] = None
    p: int = 1
    provenance: str = "user"
    meta: dict = field(default_factory=dict)

    def small_set(self, R: float):
        return lambda x: self.V(x) <= R

    def kappa_density(self, R, y, x):
        if self.kappa_log_density is None:
            raise ValueError("certificate has no kappa density")
        return np.exp(self.kappa_log_density(R, y, x))


def power_transform(cert: DriftCertificate, delta: float) -> DriftCertificate:
    """Certificate for V^delta with (gamma^delta, K^delta)."""
    if not 0 < delta <= 1:
        raise ValueError("delta must lie in (0, 1]")
    if delta == 1:
        return cert
    V, g, K = cert.V, cert.gamma, cert.K

    def Vd(x):
        return V(x) ** delta

    def gd(y):
        return g(y) ** delta

    def Kd(y):
        return K(y) ** delta

    return DriftCertificate(Vd, gd, _clamp_one(Kd), p=cert.p, s=cert.s * delta,
                            provenance=f"power-transformed({delta:g}) of {cert.provenance}",
                            meta=dict(cert.meta))


def rescale_small_set(minor: MinorizationCertificate, delta: float) -> MinorizationCertificate:
    """Same minorization expressed for V^delta: {V^delta <= R} = {V <= R^(1/delta)}."""
    if not 0 < delta <= 1:
        raise ValueError("delta must lie in (0, 1]")
    b, ks, kl, V = minor.beta, minor.kappa_sampler, minor.kappa_log_density, minor.V
    inv = 1.0 / delta
    return MinorizationCertificate(
        beta=lambda R, y: b(R ** inv, y),
        kappa_sampler=lambda R, y, u: ks(R ** inv, y, u),
        kappa_arity=minor.kappa_arity,
        V=lambda x: V(x) ** delta,
        kappa_log_density=None if kl is None else (lambda R, y, x: kl(R ** inv, y, x)),
        p=minor.p, provenance=f"rescaled({delta:g}) of {minor.provenance}", meta=dict(minor.meta))


def finite_minorization(kernel: RandomMapKernel, V=None) -> MinorizationCertificate:
    """Best constant (Doeblin) minorization of a tabulated kernel on {V <= R}."""
    if kernel.table is None:
        raise ValueError("needs a tabulated finite kernel")
    table = kernel.table
    nx = kernel.n_states
    Vv = np.zeros(nx) if V is None else np.asarray(V, dtype=float)
    Vf = finite_V(Vv)
    cache: dict = {}

    def dob(R) -> FiniteDoeblin:
        R = float(R)
        if R not in cache:
            cache[R] = doeblin(table, Vv <= R)
        return cache[R]

    def beta(R, y):
        return dob(R).beta[np.asarray(y, dtype=np.int64)]

    def sampler(R, y, u):
        cum = np.cumsum(dob(R).kappa, axis=1)
        cum[:, -1] = 1.0
        rows = cum[np.asarray(y, dtype=np.int64)]
        return _inverse_cdf_rows(rows, u[:, 0])

    def logk(R, y, x):
        with np.errstate(divide="ignore"):
            return np.log(dob(R).kappa[np.asarray(y, dtype=np.int64), np.asarray(x, dtype=np.int64)])

    return MinorizationCertificate(beta, sampler, 1, Vf, logk, provenance="finite Doeblin",
                                   meta={"doeblin": dob, "V_table": Vv})


def ar1_minorization(a: float, sigma: float, b_env: float = 0.0) -> MinorizationCertificate:
    """Minorization of x' = a x + b y + sigma N(0,1) on {|x| <= R} (V = |x|).

    The lower envelope of the Gaussian densities with means in
    b y + [-|a|R, |a|R] is phi_sigma(|x' - b y| + |a| R); its mass is
    2 Phi(-|a| R / sigma).
    """
    a, sigma, b_env = abs(float(a)), float(sigma), float(b_env)

    def shift(R):
        return a * float(R)

    def beta(R, y):
        n = np.shape(y)[0]
        return np.full(n, 1.0 - 2.0 * ndtr(-shift(R) / sigma))

    def centre(y):
        y = np.asarray(y, dtype=float)
        return b_env * (y[:, 0] if y.ndim > 1 else y)

    def sampler(R, y, u):
        m = shift(R)
        tail = ndtr(-m / sigma)
        w = -sigma * gaussian_quantile(u[:, 0] * tail)  # W >= m, W ~ N(0, sigma^2) | W >= m
        sign = np.where(u[:, 1] < 0.5, -1.0, 1.0)
        return (centre(y) + sign * (w - m))[:, None]

    def logk(R, y, x):
        m = shift(R)
        z = (np.abs(np.asarray(x, dtype=float)[:, 0] - centre(y)) + m) / sigma
        return (-0.5 * z * z - np.log(sigma) - 0.5 * np.log(2 * np.pi)
                - np.log(2.0) - log_ndtr(-m / sigma))

    return MinorizationCertificate(beta, sampler, 2, norm_power(1.0), logk,
                                   provenance="gaussian AR envelope")


# ---------------------------------------------------------------------------
# verification reports
# ---------------------------------------------------------------------------

@dataclass
class ViolationReport:
    estimate: np.ndarray
    stderr: np.ndarray
    bound: np.ndarray
    violated: np.ndarray
    threshold: float
    label: str = "drift"
    meta: dict = field(default_factory=dict)

    @property
    def violation_fraction(self) -> float:
        return float(np.mean(self.violated)) if self.violated.size else 0.0

    @property
    def passed(self) -> bool:
        return not bool(np.any(self.violated))

    def rows(self):
        header = ["index", "estimate", "stderr", "bound", "violated"]
        body = [[i, e, s, b, int(v)] for i, (e, s, b, v) in
                enumerate(zip(self.estimate, self.stderr, self.bound, self.violated))]
        return header, body

    def to_dict(self):
        return {"label": self.label, "threshold": self.threshold,
                "n": int(self.violated.size), "violations": int(np.sum(self.violated)),
                "violation_fraction": self.violation_fraction, **self.meta}


def _check_threshold(threshold):
    if not 2 <= threshold <= 5:
        raise ValueError("violation threshold must lie in [2, 5] standard errors")


def verify_drift_mc(kernel: RandomMapKernel, cert: DriftCertificate, sampler, n_pairs: int,
                    n_noise: int, seed: int, threshold: float = 3.0,
                    chunk: int = 64) -> ViolationReport:
    """Monte Carlo check of [Q(y)V](x) <= gamma(y)V(x) + K(y) at sampled (x, y).

    ``sampler(rng, n)`` returns ``(x, y)`` batches; each pair gets its own
    noise stream keyed by its index.
    """
    if kernel.p != cert.p:
        raise ValueError(f"kernel step count {kernel.p} != certificate step count {cert.p}")
    if n_pairs < 1 or n_noise < 1:
        raise ValueError("n_pairs and n_noise must be >= 1")
    _check_threshold(threshold)
    xs, ys = sampler(make_rng(seed, Stream.SAMPLER), n_pairs)
    xs, ys = np.asarray(xs), np.asarray(ys)
    k = kernel.noise_arity
    est = np.empty(n_pairs)
    se = np.empty(n_pairs)
    for start in range(0, n_pairs, chunk):
        stop = min(start + chunk, n_pairs)
        m = stop - start
        u = np.concatenate([make_rng(seed, Stream.NOISE, i).random((n_noise, k))
                            for i in range(start, stop)])
        xr = np.repeat(xs[start:stop], n_noise, axis=0)
        yr = np.repeat(ys[start:stop], n_noise, axis=0)
        v = cert.V(kernel.map(xr, yr, u)).reshape(m, n_noise)
        if not np.all(np.isfinite(v)):
            raise FloatingPointError("non-finite V encountered")
        est[start:stop] = v.mean(axis=1)
        se[start:stop] = v.std(axis=1, ddof=1) / np.sqrt(n_noise) if n_noise > 1 else 0.0
    bound = cert.bound(xs, ys)
    violated = est > bound + threshold * se
    return ViolationReport(est, se, bound, violated, threshold, "drift",
                           {"n_pairs": n_pairs, "n_noise": n_noise})


def check_one_step_C(kernel, V, C: float, sampler, n_pairs, n_noise, seed,
                     threshold: float = 3.0) -> ViolationReport:
    """Monte Carlo check of [Q(y)V](x) <= C (V(x) + 1)."""
    if not C > 1:
        raise ValueError("C must exceed 1")
    cert = DriftCertificate(V, const_fn(C), const_fn(C), p=kernel.p, provenance="one-step C")
    rep = verify_drift_mc(kernel, cert, sampler, n_pairs, n_noise, seed, threshold)
    rep.label = "one-step-C"
    rep.meta["C"] = C
    return rep


def _in_box(x, lo, hi):
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    return np.all((x >= lo) & (x <= hi), axis=1)


def verify_minorization_mc(kernel: RandomMapKernel, minor: MinorizationCertificate, R: float,
                           events, sampler, n_states: int, n_noise: int, seed: int,
                           threshold: float = 3.0) -> ViolationReport:
    """Check Q(y, x, A) >= (1 - beta(R, y)) kappa_R(y, A) for sampled small-set states.

    ``events`` are boxes ``(lo, hi)`` for continuous states or index sets for
    finite ones. Finite tabulated kernels with a Doeblin certificate are
    checked exactly (pointwise, which covers every event).
    """
    _check_threshold(threshold)
    xs, ys = sampler(make_rng(seed, Stream.SAMPLER), n_states)
    xs, ys = np.asarray(xs), np.asarray(ys)
    Vx = minor.V(xs)
    if np.any(Vx > R):
        raise ValueError("a tested state lies outside the small set {V <= R}")
    betas = minor.beta(R, ys)
    # beta = 1 is a valid (vacuous) certificate; it happens when 1 - beta underflows
    if np.any((betas < 0) | (betas > 1)):
        raise ValueError("beta(R, y) must lie in [0, 1]")

    if kernel.table is not None and "doeblin" in minor.meta:
        dob = minor.meta["doeblin"](R)
        q = kernel.table[ys, xs]  # (n_states, nx)
        lower = (1 - betas)[:, None] * dob.kappa[ys]
        slack = q - lower
        violated = np.any(slack < -1e-12, axis=1)
        return ViolationReport(q.min(axis=1), np.zeros(n_states), lower.max(axis=1), violated,
                               threshold, "minorization-exact", {"R": R})

    k, kk = kernel.noise_arity, minor.kappa_arity
    est, se, bnd, viol = [], [], [], []
    for i in range(n_states):
        u = make_rng(seed, Stream.NOISE, i).random((n_noise, k))
        uk = make_rng(seed, Stream.KAPPA, i).random((n_noise, kk))
        xr = np.repeat(xs[i:i + 1], n_noise, axis=0)
        yr = np.repeat(ys[i:i + 1], n_noise, axis=0)
        x_next = kernel.map(xr, yr, u)
        x_kap = minor.kappa_sampler(R, yr, uk)
        rho = 1.0 - betas[i]
        for ev in events:
            if kernel.finite:
                sel = np.isin(x_next, list(ev))
                selk = np.isin(x_kap, list(ev))
            else:
                lo, hi = (np.asarray(e, dtype=float) for e in ev)
                sel, selk = _in_box(x_next, lo, hi), _in_box(x_kap, lo, hi)
            pq, pk = sel.mean(), selk.mean()
            s = np.sqrt(binomial_se(pq, n_noise) ** 2 + (rho * binomial_se(pk, n_noise)) ** 2)
            est.append(pq)
            se.append(s)
            bnd.append(rho * pk)
            viol.append(pq < rho * pk - threshold * s)
    return ViolationReport(np.array(est), np.array(se), np.array(bnd), np.array(viol),
                           threshold, "minorization", {"R": R, "n_noise": n_noise,
                                                       "n_events": len(events)})


# ---------------------------------------------------------------------------
# summability
# ---------------------------------------------------------------------------

def _fit_decay(d: np.ndarray):
    """Geometric and power fits of d_l on l >= 1; returns the better one by R^2."""
    ell = np.arange(d.size)
    mask = (ell >= 1) & (d > 0)
    if mask.sum() < 3:
        return None
    y = np.log(d[mask])
    best = None
    for form, xv in (("geometric", ell[mask].astype(float)), ("power", np.log(ell[mask]))):
        A = np.vstack([np.ones_like(xv), xv]).T
        coef, *_ = np.linalg.lstsq(A, y, rcond=None)
        resid = y - A @ coef
        ss = np.sum((y - y.mean()) ** 2)
        r2 = 1.0 if ss == 0 else 1 - np.sum(resid ** 2) / ss
        fit = {"form": form, "log_constant": float(coef[0]), "slope": float(coef[1]), "r2": float(r2)}
        if form == "geometric":
            fit["rate"] = float(np.exp(coef[1]))
        else:
            fit["exponent"] = float(-coef[1])
        if best is None or r2 > best["r2"] + 1e-12:
            best = fit
    return best


def _fit_value(fit, ell):
    ell = np.asarray(ell, dtype=float)
    if fit["form"] == "geometric":
        return np.exp(fit["log_constant"] + fit["slope"] * ell)
    return np.exp(fit["log_constant"]) * ell ** (-fit["exponent"])


def _fit_tail(fit, start: int) -> float:
    """sum_{l >= start} of the fitted d_l (inf when the fit does not decay summably)."""
    if fit["form"] == "geometric":
        rho = fit["rate"]
        if rho >= 1:
            return np.inf
        return float(np.exp(fit["log_constant"]) * rho ** start / (1 - rho))
    a = fit["exponent"]
    if a <= 1:
        return np.inf
    c = np.exp(fit["log_constant"])
    return float(c * (start - 0.5) ** (1 - a) / (a - 1))


@dataclass
class SummabilityReport:
    d: np.ndarray
    d_se: np.ndarray
    t_argmax: np.ndarray
    r: np.ndarray
    tail: float
    tail_source: str
    fit: Optional[dict]
    sup_window: tuple
    reps: int

    @property
    def L(self) -> int:
        return self.d.size - 1

    @property
    def r0(self) -> float:
        return float(self.r[0])

    def d_at(self, j: int) -> float:
        if j <= self.L:
            return float(self.d[j])
        if self.fit is None:
            raise ValueError(f"d_{j} beyond L={self.L} and no fit available")
        return float(_fit_value(self.fit, j))

    def r_at(self, i: int) -> float:
        if i <= self.L:
            return float(self.r[i])
        if self.fit is None or not np.isfinite(self.tail):
            raise ValueError(f"r_{i} beyond L={self.L} needs a summable fit")
        return _fit_tail(self.fit, i)

    def rows(self):
        header = ["index", "estimate", "stderr", "bound", "violated"]
        return header, [[l, self.d[l], self.d_se[l], self.r[l], 0] for l in range(self.d.size)]

    def to_dict(self):
        return {"L": self.L, "r0": self.r0, "tail": self.tail, "tail_source": self.tail_source,
                "fit": self.fit, "sup_window": list(self.sup_window), "reps": self.reps}


def _env_values(env, t_min, t_max, seed, reps):
    return np.asarray(env.sample(t_min, t_max, seed, reps=reps).values)


def estimate_dl(cert: DriftCertificate, env, L: int, sup_window: Sequence[int], reps: int,
                seed: int, overflow: float = 1e300, threads: int = 1) -> SummabilityReport:
    """Monte Carlo d_l = sup_t E[K(Y_t) prod_{i=1..l} gamma(Y_{t+i})] over a finite window.

    ``t = -1`` stands for the convention K(Y_{-1}) = 1. For p-step
    certificates t indexes environment blocks.
    """
    if L < 0:
        raise ValueError("L must be >= 0")
    window = tuple(int(t) for t in sup_window)
    if not window or min(window) < -1:
        raise ValueError("sup_window must be nonempty with t >= -1")
    p = cert.p
    t_hi = max(max(window), 0) + L + 1
    finite = getattr(env, "finite", False)

    def block(b, start, stop):
        n = stop - start
        vals = _env_values(env, 0, t_hi * p - 1, derive_seed(seed, Stream.ENV, b), n)
        vals = block_env(vals, p, finite)
        G = np.stack([cert.gamma(vals[:, t]) for t in range(t_hi)], axis=1)
        Kt = np.stack([cert.K(vals[:, t]) for t in range(t_hi)], axis=1)
        s1 = np.zeros((len(window), L + 1))
        s2 = np.zeros((len(window), L + 1))
        for w, t in enumerate(window):
            first = np.ones(n) if t == -1 else Kt[:, t]
            prods = np.cumprod(G[:, t + 1:t + 1 + L], axis=1)
            prod = np.concatenate([first[:, None], first[:, None] * prods], axis=1)
            if np.any(~np.isfinite(prod)) or np.any(prod > overflow):
                raise FloatingPointError("divergent drift products (overflow guard)")
            s1[w] = prod.sum(axis=0)
            s2[w] = (prod * prod).sum(axis=0)
        return s1, s2

    parts = run_blocks(block, reps, threads)
    S1 = sum(p_[0] for p_ in parts)
    S2 = sum(p_[1] for p_ in parts)
    mean = S1 / reps
    var = np.clip(S2 / reps - mean ** 2, 0, None) * reps / max(reps - 1, 1)
    se_all = np.sqrt(var / reps)
    arg = mean.argmax(axis=0)
    cols = np.arange(L + 1)
    d = mean[arg, cols]
    d_se = se_all[arg, cols]
    if np.any(mean > overflow):
        raise FloatingPointError("divergent drift products (overflow guard)")

    fit = _fit_decay(d)
    if np.all(d[1:] == 0) and L >= 1:
        tail, source = 0.0, "exact-zero"
    elif fit is None:
        tail, source = np.inf, "none"
    else:
        tail = _fit_tail(fit, L + 1)
        source = fit["form"] if np.isfinite(tail) else "divergent"
    r = np.empty(L + 1)
    acc = tail
    for l in range(L, -1, -1):
        acc = d[l] + acc
        r[l] = acc
    return SummabilityReport(d, d_se, np.asarray(window)[arg], r, tail, source, fit, window, reps)


@dataclass
class TailCurve:
    beta_grid: np.ndarray
    raw: np.ndarray
    curve: np.ndarray
    stderr: np.ndarray
    holds: bool
    tail_tol: float

    def rows(self):
        header = ["index", "estimate", "stderr", "bound", "violated"]
        return header, [[b, c, s, r, 0] for b, c, s, r in
                        zip(self.beta_grid, self.curve, self.stderr, self.raw)]


def check_A2(minor: MinorizationCertificate, env, R: float, beta_grid, horizon: int, reps: int,
             seed: int, tail_tol: float = 0.05) -> TailCurve:
    """Empirical beta_bar -> sup_t P(beta(R, Y_t) > beta_bar) over t < horizon."""
    grid = np.asarray(beta_grid, dtype=float)
    if grid.size == 0 or np.any(np.diff(grid) <= 0):
        raise ValueError("beta_grid must be nonempty and strictly increasing")
    finite = getattr(env, "finite", False)
    vals = _env_values(env, 0, horizon * minor.p - 1, seed, reps)
    vals = block_env(vals, minor.p, finite)
    B = np.stack([minor.beta(R, vals[:, t]) for t in range(vals.shape[1])], axis=1)  # (reps, T)
    freq = (B[:, :, None] > grid[None, None, :]).mean(axis=0)  # (T, G)
    raw = freq.max(axis=0)
    curve = isotonic_nonincreasing(raw)
    se = binomial_se(raw, reps)
    return TailCurve(grid, raw, curve, se, bool(curve[-1] < tail_tol), tail_tol)


# ---------------------------------------------------------------------------
# closed-form certificates
# ---------------------------------------------------------------------------

def sgld_certificate(L: float, Delta, b, v, lam: float, beta_temp: float, d: int):
    """Drift (V = ||x||^2) and minorization certificates for the SGLD recursion.

    gamma(y) = 3 L^2 lam^2 - 2 lam Delta(y) + 1,
    K(y) = 3 L^2 lam^2 (v(y)^2 + 1) + 2 lam (b(y) + d / beta), clamped at 1,
    1 - beta(R, y) = 2^{-d/2} exp(-beta/(2 lam) (1 + lam L)^2 (1 + sqrt(R) + v(y))^2),
    kappa = law of sqrt(lam / beta) N(0, I_d).
    """
    if lam <= 0 or beta_temp <= 0 or L <= 0:
        raise ValueError("lam, beta_temp and L must be positive")
    Delta, b, v = as_env_fn(Delta), as_env_fn(b), as_env_fn(v)
    c2 = 3 * L * L * lam * lam
    floor = c2 - 2 * L * lam + 1

    def gamma(y):
        g = c2 - 2 * lam * Delta(y) + 1
        if np.any(g < floor - 1e-12) or np.any(g < 2.0 / 3.0 - 1e-12):
            raise ValueError("gamma(y) below 3L^2 lam^2 - 2 L lam + 1; is Delta(y) <= L?")
        return g

    def K(y):
        vy = v(y)
        return c2 * (vy * vy + 1) + 2 * lam * (b(y) + d / beta_temp)

    drift = DriftCertificate(norm_power(2.0), gamma, K, p=1, s=1.0,
                             provenance="sgld closed form",
                             meta={"L": L, "lam": lam, "beta_temp": beta_temp, "d": d})

    scale = np.sqrt(lam / beta_temp)
    expo = beta_temp / (2 * lam) * (1 + lam * L) ** 2

    def log_rho(R, y):
        return -0.5 * d * np.log(2.0) - expo * (1 + np.sqrt(R) + v(y)) ** 2

    def beta(R, y):
        return -np.expm1(log_rho(R, y))

    def sampler(R, y, u):
        return scale * gaussian_quantile(u)

    def logk(R, y, x):
        z = np.asarray(x, dtype=float) / scale
        return -0.5 * np.sum(z * z, axis=-1) - d * (np.log(scale) + 0.5 * np.log(2 * np.pi))

    minor = MinorizationCertificate(beta, sampler, d, norm_power(2.0), logk,
                                    provenance="sgld closed form", meta={"log_rho": log_rho})
    return drift, minor


def spectral_radius(A) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(np.atleast_2d(A)))))


def op_norm(A) -> float:
    return float(np.linalg.norm(np.atleast_2d(A), 2))


def varx_pstep_certificate(A, B, M: float, p: int = 0, eps_mean_norm: Optional[float] = None,
                           p_cap: int = 10_000) -> DriftCertificate:
    """p-step drift certificate for x' = A x + B y + eps with V = ||x||.

    gamma = ||A^p||, K(y_1..y_p) = M^p (p + sum_k ||y_k||). ``p = 0`` picks the
    smallest p with ||A^p|| < 1.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    need = max(op_norm(A), op_norm(B), 1.0, eps_mean_norm or 0.0)
    if M < need - 1e-12:
        raise ValueError(f"M={M} must be at least max(||A||, ||B||, E|eps|, 1) = {need}")
    if spectral_radius(A) >= 1:
        raise ValueError("spectral radius of A is >= 1: no p with ||A^p|| < 1")
    if p < 0:
        raise ValueError("p must be >= 0")
    if p == 0:
        Ap = np.eye(A.shape[0])
        for q in range(1, p_cap + 1):
            Ap = Ap @ A
            if op_norm(Ap) < 1:
                p = q
                break
        else:
            raise ValueError("no p below the cap with ||A^p|| < 1")
    g = op_norm(np.linalg.matrix_power(A, p))
    if g >= 1:
        raise ValueError(f"||A^{p}|| = {g} is not < 1")

    def K(yb):
        yb = np.asarray(yb, dtype=float)
        if p == 1 and yb.ndim == 2:
            yb = yb[:, None, :]
        norms = np.sqrt(np.sum(yb * yb, axis=-1)).sum(axis=-1)
        return M ** p * (p + norms)

    return DriftCertificate(norm_power(1.0), const_fn(g), K, p=p, s=1.0,
                            provenance="varx closed form", meta={"p": p, "gamma": g, "M": M})


# ---------------------------------------------------------------------------
# moments along the chain
# ---------------------------------------------------------------------------

@dataclass
class MomentReport:
    estimate: np.ndarray
    stderr: np.ndarray
    bound: np.ndarray
    uniform_bound: float
    violated: np.ndarray
    summability: SummabilityReport

    @property
    def sup_estimate(self) -> float:
        return float(self.estimate.max())

    @property
    def sup_index(self) -> int:
        return int(self.estimate.argmax())

    def rows(self):
        header = ["index", "estimate", "stderr", "bound", "violated"]
        return header, [[j, e, s, b, int(v)] for j, (e, s, b, v) in
                        enumerate(zip(self.estimate, self.stderr, self.bound, self.violated))]


def moment_bound_check(kernel: RandomMapKernel, cert: DriftCertificate, env, x0, horizon: int,
                       reps: int, seed: int, report: Optional[SummabilityReport] = None,
                       threshold: float = 3.0, threads: int = 1,
                       burn_in: int = 0) -> MomentReport:
    """Track E[V(X_j)] for j <= horizon against d_j V(x0) + r_0.

    With ``burn_in > 0`` the chain starts at x0 at time -burn_in (the
    environment must then be two-sided) and j counts from time 0.
    """
    _check_threshold(threshold)
    if report is None:
        report = estimate_dl(cert, env, min(horizon, 60), (-1, 0), min(reps, 20_000),
                             derive_seed(seed, Stream.MISC))
    if not np.isfinite(report.r0):
        raise ValueError("r_0 is not finite; summability not established")
    finite = getattr(env, "finite", False)
    k = kernel.noise_arity
    t_start = -burn_in

    def block(b, start, stop):
        n = stop - start
        vals = _env_values(env, t_start * kernel.p, horizon * kernel.p - 1,
                           derive_seed(seed, Stream.ENV, b), n)
        vals = block_env(vals, kernel.p, finite)
        x = kernel.states(np.broadcast_to(np.asarray(x0), (n,) if kernel.finite
                                          else (n, kernel.state_dim))).copy()
        s1 = np.zeros(horizon + 1)
        s2 = np.zeros(horizon + 1)
        for t in range(burn_in + horizon + 1):
            j = t - burn_in
            if j >= 0:
                v = cert.V(x)
                s1[j] += v.sum()
                s2[j] += (v * v).sum()
            if t == burn_in + horizon:
                break
            u = step_noise(seed, n, k, t_start + t, Stream.NOISE, b) if k else np.empty((n, 0))
            x = kernel.map(x, vals[:, t], u)
        return s1, s2

    parts = run_blocks(block, reps, threads)
    S1 = sum(p_[0] for p_ in parts)
    S2 = sum(p_[1] for p_ in parts)
    mean = S1 / reps
    se = np.sqrt(np.clip(S2 / reps - mean ** 2, 0, None) / max(reps - 1, 1))
    V0 = float(cert.V(kernel.states(x0))[0])
    dj = np.array([report.d_at(j) for j in range(horizon + 1)])
    bound = dj * V0 + report.r0
    uniform = report.r0 * (1 + V0)
    violated = mean > bound + threshold * se
    return MomentReport(mean, se, bound, uniform, violated, report)

"""Time-series demos: location-scale autoregressions, Nadaraya-Watson regression, misspecified Poisson MLE."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.optimize import minimize
from scipy.special import gammaln
from scipy.stats import norm

from ._common import Stream, derive_seed, make_rng, run_blocks
from .certify import DriftCertificate, norm_power
from .dynamics import RandomMapKernel, Trajectory, gaussian_quantile

# ---------------------------------------------------------------------------
# location-scale model
# ---------------------------------------------------------------------------

NOISES = ("normal", "uniform", "laplace")


def _noise(u, kind):
    if kind == "normal":
        return gaussian_quantile(u)
    if kind == "uniform":
        return math.sqrt(3.0) * (2 * u - 1)
    if kind == "laplace":
        # unit variance: scale 1/sqrt(2)
        return -np.sign(u - 0.5) * np.log1p(-2 * np.abs(u - 0.5)) / math.sqrt(2.0)
    raise ValueError(f"unknown noise {kind!r}")


def _noise_logpdf(e, kind):
    if kind == "normal":
        return -0.5 * e * e - 0.5 * math.log(2 * math.pi)
    if kind == "uniform":
        return np.where(np.abs(e) <= math.sqrt(3.0), -math.log(2 * math.sqrt(3.0)), -np.inf)
    return math.log(math.sqrt(2.0) / 2) - math.sqrt(2.0) * np.abs(e)


@dataclass(frozen=True, eq=False)
class LocationScaleModel:
    """X_t = r(Y_{t-1}, X_{t-1}) + eps_t sigma(Y_{t-1}, X_{t-1}) with envelopes.

    All functions are batched over y of shape (N, m) and x of shape (N,):
    |r(y,x)| <= a(y)|x| + b_env(y) and sigma(y,x) <= c_env(y)|x| + d_env(y).
    """

    r: Callable
    sigma: Callable
    a: Callable
    b_env: Callable
    c_env: Callable
    d_env: Callable
    noise: str = "normal"
    sigma_floor: Optional[float] = None
    name: str = "location-scale"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.noise not in NOISES:
            raise ValueError(f"unknown noise {self.noise!r}")

    def gamma(self, y):
        y = _as_env(y)
        return self.a(y) + self.c_env(y)

    def K(self, y):
        y = _as_env(y)
        return self.b_env(y) + self.d_env(y)

    def check_envelopes(self, y, x, tol=1e-12):
        """Raise if an envelope inequality or the positivity of sigma fails on (y, x)."""
        y, x = _as_env(y), np.asarray(x, dtype=float).reshape(-1)
        s = self.sigma(y, x)
        if np.any(s <= 0):
            raise ValueError("sigma(y, x) <= 0 encountered")
        if self.sigma_floor is not None and np.any(s < self.sigma_floor):
            raise ValueError("sigma(y, x) below the declared floor")
        ax = np.abs(x)
        if np.any(np.abs(self.r(y, x)) > self.a(y) * ax + self.b_env(y) + tol):
            raise AssertionError("|r(y, x)| exceeds a(y)|x| + b(y)")
        if np.any(s > self.c_env(y) * ax + self.d_env(y) + tol):
            raise AssertionError("sigma(y, x) exceeds c(y)|x| + d(y)")


def _as_env(y):
    y = np.asarray(y, dtype=float)
    return y[:, None] if y.ndim == 1 else y


def threshold_ar(a0=0.3, a1=0.4, a2=-0.4, thr=0.0, b0=1.0, b1=0.2, b2=0.1,
                 noise="normal") -> LocationScaleModel:
    """Threshold AR with exogenous covariate and conditional heteroscedasticity (scalar y)."""

    def r(y, x):
        return a0 * y[:, 0] + np.where(x < thr, a1, a2) * x

    def sigma(y, x):
        return np.sqrt(b0 * b0 + b1 * b1 * x * x + b2 * b2 * y[:, 0] ** 2)

    a_c = max(abs(a1), abs(a2))
    return LocationScaleModel(
        r, sigma,
        a=lambda y: np.full(y.shape[0], a_c),
        b_env=lambda y: abs(a0) * np.abs(y[:, 0]),
        c_env=lambda y: np.full(y.shape[0], abs(b1)),
        d_env=lambda y: np.sqrt(b0 * b0 + b2 * b2 * y[:, 0] ** 2),
        noise=noise, sigma_floor=abs(b0) if b0 else None, name="threshold-ar",
        params=dict(a0=a0, a1=a1, a2=a2, thr=thr, b0=b0, b1=b1, b2=b2))


def persistent_ar(sigma0: float = 1.0) -> LocationScaleModel:
    """r(y, x) = (1 - exp(-y)) x for y >= 0: near unit root when y is large."""

    def a(y):
        return np.abs(1 - np.exp(-y[:, 0]))

    return LocationScaleModel(
        lambda y, x: (1 - np.exp(-y[:, 0])) * x, lambda y, x: np.full(x.shape, sigma0),
        a=a, b_env=lambda y: np.zeros(y.shape[0]), c_env=lambda y: np.zeros(y.shape[0]),
        d_env=lambda y: np.full(y.shape[0], sigma0), name="persistent-ar")


def linear_ar(rho: float = 0.5, beta: float = 0.5, sigma0: float = 1.0) -> LocationScaleModel:
    """r(y, x) = rho x + beta y_1 with constant sigma."""
    return LocationScaleModel(
        lambda y, x: rho * x + beta * y[:, 0], lambda y, x: np.full(x.shape, sigma0),
        a=lambda y: np.full(y.shape[0], abs(rho)), b_env=lambda y: abs(beta) * np.abs(y[:, 0]),
        c_env=lambda y: np.zeros(y.shape[0]), d_env=lambda y: np.full(y.shape[0], sigma0),
        name="linear-ar", params=dict(rho=rho, beta=beta, sigma0=sigma0))


def location_scale_kernel(model: LocationScaleModel, env_dim: int = 1) -> RandomMapKernel:
    def fmap(x, y, u):
        xs = x[:, 0]
        yy = _as_env(y)
        out = model.r(yy, xs) + _noise(u[:, 0], model.noise) * model.sigma(yy, xs)
        return out[:, None]

    def logd(y, x, x2):
        xs, yy = x[:, 0], _as_env(y)
        s = model.sigma(yy, xs)
        return _noise_logpdf((x2[:, 0] - model.r(yy, xs)) / s, model.noise) - np.log(s)

    return RandomMapKernel(fmap, 1, state_dim=1, env_dim=env_dim,
                           density=lambda y, x, x2: np.exp(logd(y, x, x2)), log_density=logd,
                           name=model.name)


def location_scale_certificate(model: LocationScaleModel) -> DriftCertificate:
    """V(x) = |x|, gamma = a + c, K = b + d (E|eps| <= 1 by Jensen)."""
    return DriftCertificate(norm_power(1.0), model.gamma, model.K, p=1, s=1.0,
                            provenance="location-scale envelopes")


def simulate_location_scale(model: LocationScaleModel, env, x0, horizon: int, seed: int,
                            t0: int = 0, check: bool = True) -> np.ndarray:
    """Paths X_0 = x0, X_{t+1} = r(y_t, X_t) + eps_{t+1} sigma(y_t, X_t).

    ``env`` is a Trajectory or an array of shape (T, m) / (R, T, m); the
    output is (horizon+1,) or (R, horizon+1). Envelopes are asserted at every step.
    """
    vals = env.values if isinstance(env, Trajectory) else env
    t0 = env.t_min if isinstance(env, Trajectory) else t0
    vals = np.asarray(vals, dtype=float)
    single = vals.ndim <= 2 and not (isinstance(env, Trajectory) and env.reps is not None)
    if vals.ndim == 1:
        vals = vals[:, None]
    if single:
        vals = vals[None]
    if vals.ndim == 2:
        vals = vals[..., None]
    R, T = vals.shape[:2]
    if horizon > T:
        raise ValueError(f"horizon {horizon} exceeds environment length {T}")
    x = np.broadcast_to(np.asarray(x0, dtype=float), (R,)).copy()
    out = np.empty((R, horizon + 1))
    out[:, 0] = x
    for t in range(horizon):
        y = vals[:, t]
        if check:
            model.check_envelopes(y, x)
        s = model.sigma(y, x)
        if np.any(s <= 0):
            raise ValueError(f"sigma <= 0 at step {t + 1}")
        u = make_rng(seed, Stream.NOISE, 0, t0 + t).random(R)
        x = model.r(y, x) + _noise(u, model.noise) * s
        out[:, t + 1] = x
    return out[0] if single else out


# ---------------------------------------------------------------------------
# Nadaraya-Watson
# ---------------------------------------------------------------------------

def _epanechnikov(u):
    return np.where(np.abs(u) <= 1, 0.75 * (1 - u * u), 0.0)


def _triangular(u):
    return np.where(np.abs(u) <= 1, 1 - np.abs(u), 0.0)


KERNELS = {"epanechnikov": _epanechnikov, "triangular": _triangular}


def kernel_integral(name: str, n: int = 200_001) -> float:
    """Numerical integral of the univariate kernel over [-1, 1] (trapezoid)."""
    u = np.linspace(-1, 1, n)
    return float(np.trapezoid(KERNELS[name](u), u))


@dataclass
class NwEstimator:
    kernel: str = "epanechnikov"
    c_h: float = 1.0
    guard: float = 1e-8
    h: Optional[float] = None

    def __post_init__(self):
        if self.kernel not in KERNELS:
            raise ValueError(f"unknown kernel {self.kernel!r}")

    def bandwidth(self, n: int, dim: int) -> float:
        """c_h (log n / n)^{1/(d+5)} with d the environment dimension (dim = d + 1)."""
        if self.h is not None:
            return self.h
        return self.c_h * (math.log(n) / n) ** (1.0 / (dim + 4))


def nw_estimate(kernel: str, h: float, Z, X, grid, guard: float = 1e-8, chunk: int = 64):
    """Ratio estimator on the grid; returns (estimate, valid) with NaN where the guard fails."""
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    X = np.asarray(X, dtype=float)
    grid = np.asarray(grid, dtype=float)
    if grid.ndim == 1:
        grid = grid[:, None]
    kf = KERNELS[kernel]
    n, dim = Z.shape
    thresh = guard * n * h ** dim
    num = np.empty(grid.shape[0])
    den = np.empty(grid.shape[0])
    for s in range(0, grid.shape[0], chunk):
        g = grid[s:s + chunk]
        w = np.ones((g.shape[0], n))
        for k in range(dim):
            w *= kf((g[:, k, None] - Z[None, :, k]) / h)
        num[s:s + chunk] = w @ X
        den[s:s + chunk] = w.sum(axis=1)
    valid = den > thresh
    est = np.where(valid, num / np.where(valid, den, 1.0), np.nan)
    return est, valid


@dataclass
class NwResult:
    grid: np.ndarray
    truth: np.ndarray
    estimate: np.ndarray
    error: np.ndarray
    sup_error: float
    excluded: int
    h: float
    n: int

    def rows(self):
        dim = self.grid.shape[1]
        header = [f"z{k}" for k in range(dim)] + ["truth", "estimate", "error"]
        return header, [list(g) + [t, e, r] for g, t, e, r in
                        zip(self.grid, self.truth, self.estimate, self.error)]


def box_grid(c_rad: float, dim: int, size: int = 21) -> np.ndarray:
    axis = np.linspace(-c_rad, c_rad, size)
    mesh = np.meshgrid(*([axis] * dim), indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def nw_fit_and_error(est: NwEstimator, model: LocationScaleModel, env, n: int, c_rad: float,
                     seed: int, grid_size: int = 21, burn_in: int = 200,
                     x0: float = 0.0) -> NwResult:
    """Simulate n transitions, fit r on |z|_inf <= c_rad, and compare with the true r."""
    if n < 100:
        raise ValueError("n must be >= 100")
    traj = env.sample(0, burn_in + n, derive_seed(seed, Stream.ENV))
    ys = np.asarray(traj.values, dtype=float)
    ys = ys[:, None] if ys.ndim == 1 else ys
    path = simulate_location_scale(model, ys, x0, burn_in + n, derive_seed(seed, Stream.NOISE))
    Xprev = path[burn_in:burn_in + n]
    Xnext = path[burn_in + 1:burn_in + n + 1]
    Yprev = ys[burn_in:burn_in + n]
    Z = np.column_stack([Xprev, Yprev])
    dim = Z.shape[1]
    h = est.bandwidth(n, dim)
    grid = box_grid(c_rad, dim, grid_size)
    fit, valid = nw_estimate(est.kernel, h, Z, Xnext, grid, est.guard)
    if (~valid).mean() > 0.10:
        raise ValueError("denominator below guard on more than 10% of the grid (bandwidth too small)")
    truth = model.r(grid[:, 1:], grid[:, 0])
    err = np.abs(fit - truth)
    return NwResult(grid, truth, fit, err, float(np.nanmax(err[valid])), int((~valid).sum()), h, n)


def nw_rate_check(est: NwEstimator, model: LocationScaleModel, env, n: int, factor: int = 16,
                  seeds: int = 20, seed: int = 0, c_rad: float = 1.0, grid_size: int = 21,
                  threads: int = 1) -> dict:
    """Mean sup-errors at n and factor*n over independent seeds, and the theoretical ratio."""

    def one(b, start, stop):
        out = []
        for s in range(start, stop):
            e1 = nw_fit_and_error(est, model, env, n, c_rad, derive_seed(seed, 1, s), grid_size)
            e2 = nw_fit_and_error(est, model, env, factor * n, c_rad, derive_seed(seed, 2, s),
                                  grid_size)
            out.append((e1.sup_error, e2.sup_error))
        return out

    pairs = np.array([p for blk in run_blocks(one, seeds, threads, size=1) for p in blk])
    d = 1 if getattr(env, "dimension", 1) is None else getattr(env, "dimension", 1)
    expo = 2.0 / (d + 5)

    def rate(m):
        return (math.log(m) / m) ** expo

    observed = float(pairs[:, 0].mean() / pairs[:, 1].mean())
    theory = rate(n) / rate(factor * n)
    return {"n": n, "factor": factor, "seeds": seeds, "mean_err_n": float(pairs[:, 0].mean()),
            "mean_err_factor_n": float(pairs[:, 1].mean()), "observed_ratio": observed,
            "theoretical_ratio": theory, "relative": observed / theory,
            "errors": pairs.tolist()}


# ---------------------------------------------------------------------------
# Poisson MLE harness
# ---------------------------------------------------------------------------

@dataclass
class PoissonDGP:
    """Counts X_t ~ Poisson(eta_1 + eta_2 X_{t-1} + eta_y . Y_{t-1} + eta_z . W_{t-1}).

    Observed covariates Y and hidden ones W are |AR(1)| processes. With no
    hidden covariates the fitted family contains the truth.
    """

    eta1: float = 1.0
    eta2: float = 0.3
    eta_y: tuple = (0.5,)
    eta_z: tuple = ()
    ar: float = 0.5
    burn_in: int = 200

    @property
    def well_specified(self) -> bool:
        return len(self.eta_z) == 0 or all(v == 0 for v in self.eta_z)

    @property
    def theta_true(self) -> Optional[np.ndarray]:
        if not self.well_specified:
            return None
        return np.array([self.eta1, self.eta2, *self.eta_y], dtype=float)

    def simulate(self, n: int, seed: int):
        """(X of length n+1, Y of shape (n+1, m)) after burn-in."""
        rng = make_rng(seed, Stream.ENV)
        my, mz = len(self.eta_y), len(self.eta_z)
        T = self.burn_in + n + 1
        e = rng.standard_normal((T, my + mz))
        W = np.empty((T, my + mz))
        W[0] = e[0] / math.sqrt(1 - self.ar ** 2)
        for t in range(1, T):
            W[t] = self.ar * W[t - 1] + e[t]
        C = np.abs(W)
        lam_cov = C[:, :my] @ np.asarray(self.eta_y, float)
        if mz:
            lam_cov = lam_cov + C[:, my:] @ np.asarray(self.eta_z, float)
        X = np.empty(T)
        X[0] = 0.0
        for t in range(1, T):
            X[t] = rng.poisson(self.eta1 + self.eta2 * X[t - 1] + lam_cov[t - 1])
        return X[self.burn_in:], C[self.burn_in:, :my]


@dataclass
class MleHarness:
    lower: np.ndarray
    upper: np.ndarray
    starts: int = 4
    tol: float = 1e-8
    hac_lag: Optional[int] = None

    @classmethod
    def poisson(cls, m: int = 1, **kw):
        lo = np.array([1e-4, 0.0] + [0.0] * m)
        hi = np.array([50.0, 0.99] + [50.0] * m)
        return cls(lo, hi, **kw)


def _design(X, Y):
    Y = np.asarray(Y, dtype=float)
    Y = Y[:, None] if Y.ndim == 1 else Y
    G = np.column_stack([np.ones(len(X) - 1), X[:-1], Y[:-1]])
    return G, X[1:]


def poisson_loglik(theta, G, x):
    lam = G @ theta
    if np.any(lam <= 0):
        return -np.inf
    return float(np.sum(x * np.log(lam) - lam - gammaln(x + 1)))


def poisson_scores(theta, G, x):
    """Per-observation score vectors (n, k)."""
    lam = G @ theta
    return (x / lam - 1)[:, None] * G


def poisson_hessian(theta, G, x):
    """Average Hessian of h_t."""
    lam = G @ theta
    w = x / (lam * lam)
    return -(G * w[:, None]).T @ G / len(x)


def numerical_gradient(f, theta, step=1e-5):
    theta = np.asarray(theta, dtype=float)
    g = np.empty_like(theta)
    for k in range(theta.size):
        e = np.zeros_like(theta)
        e[k] = step * max(1.0, abs(theta[k]))
        g[k] = (f(theta + e) - f(theta - e)) / (2 * e[k])
    return g


def numerical_hessian(grad, theta, step=1e-5):
    theta = np.asarray(theta, dtype=float)
    k = theta.size
    H = np.empty((k, k))
    for i in range(k):
        e = np.zeros(k)
        e[i] = step * max(1.0, abs(theta[i]))
        H[:, i] = (grad(theta + e) - grad(theta - e)) / (2 * e[i])
    return 0.5 * (H + H.T)


def bartlett_hac(S, lag: int) -> np.ndarray:
    """Newey-West long-run covariance of the rows of S (mean removed)."""
    S = S - S.mean(axis=0)
    n = S.shape[0]
    out = S.T @ S / n
    for l in range(1, lag + 1):
        w = 1 - l / (lag + 1)
        G = S[l:].T @ S[:-l] / n
        out += w * (G + G.T)
    return out


@dataclass
class MleFit:
    theta: np.ndarray
    M: np.ndarray
    N: np.ndarray
    V_outer: np.ndarray
    sandwich: np.ndarray
    loglik: float
    start_values: list
    boundary: bool
    n: int

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.sandwich), 0, None))

    def to_dict(self):
        return {"theta": self.theta.tolist(), "se": self.se.tolist(), "loglik": self.loglik,
                "boundary": self.boundary, "n": self.n, "M": self.M.tolist(),
                "N": self.N.tolist(), "sandwich": self.sandwich.tolist()}


def mle_fit(harness: MleHarness, X, Y, seed: int) -> MleFit:
    """Multi-start bounded maximization of the Poisson log-likelihood with a HAC sandwich."""
    X = np.asarray(X, dtype=float)
    G, x = _design(X, Y)
    n, k = G.shape
    if k != harness.lower.size:
        raise ValueError(f"harness expects {harness.lower.size} parameters, design has {k}")
    rng = make_rng(seed, Stream.MISC)
    lo, hi = harness.lower, harness.upper

    def negll(th):
        lam = G @ th
        if np.any(lam <= 0):
            return np.inf, np.zeros_like(th)
        val = -(np.sum(x * np.log(lam) - lam)) / n
        grad = -((x / lam - 1) @ G) / n
        return val, grad

    mean_x = max(x.mean(), 1e-2)
    starts = [np.clip(np.r_[mean_x, np.zeros(k - 1)], lo, hi)]
    for _ in range(harness.starts - 1):
        starts.append(lo + rng.random(k) * (np.minimum(hi, 2 * mean_x + 1) - lo))
    best, ends = None, []
    for s0 in starts:
        res = minimize(negll, s0, jac=True, method="L-BFGS-B", bounds=list(zip(lo, hi)),
                       options={"ftol": harness.tol * 1e-3, "gtol": harness.tol, "maxiter": 2000})
        val = -res.fun * n - float(np.sum(gammaln(x + 1)))
        ends.append(val)
        if best is None or val > best[1]:
            best = (res.x, val)
    theta, ll = best
    span = hi - lo
    boundary = bool(np.any((theta - lo < 1e-6 * span) | (hi - theta < 1e-6 * span)))
    M = poisson_hessian(theta, G, x)
    if np.linalg.cond(M) > 1e10:
        raise np.linalg.LinAlgError("singular average Hessian (condition number > 1e10)")
    S = poisson_scores(theta, G, x)
    lag = int(n ** (1 / 3)) if harness.hac_lag is None else harness.hac_lag
    N = bartlett_hac(S, lag)
    V = S.T @ S / n
    Minv = np.linalg.inv(M)
    sand = Minv @ N @ Minv / n
    sand = 0.5 * (sand + sand.T)
    return MleFit(theta, M, N, V, sand, ll, ends, boundary, n)


@dataclass
class CoverageReport:
    coverage: np.ndarray
    level: float
    reps: int
    n: int
    pseudo_true: np.ndarray
    pseudo_source: str
    boundary_hits: int
    small_sample: bool
    band: tuple

    def to_dict(self):
        return {"coverage": self.coverage.tolist(), "level": self.level, "reps": self.reps,
                "n": self.n, "pseudo_true": self.pseudo_true.tolist(),
                "pseudo_source": self.pseudo_source, "boundary_hits": self.boundary_hits,
                "small_sample": self.small_sample, "band": list(self.band)}


def pseudo_true_value(harness: MleHarness, dgp: PoissonDGP, n: int, seed: int,
                      factor: int = 10, z_tol: float = 5.0) -> np.ndarray:
    """Fit on one run of length factor*n; the first half must agree within z_tol pooled sigma."""
    X, Y = dgp.simulate(factor * n, derive_seed(seed, Stream.MISC, 77))
    full = mle_fit(harness, X, Y, seed)
    half = mle_fit(harness, X[:factor * n // 2 + 1], Y[:factor * n // 2 + 1], seed)
    pooled = np.sqrt(full.se ** 2 + half.se ** 2)
    if np.any(np.abs(full.theta - half.theta) > z_tol * pooled):
        raise RuntimeError("calibration run failed to stabilize")
    return full.theta


def clt_coverage(harness: MleHarness, dgp: PoissonDGP, n: int, reps: int, level: float,
                 seed: int, pseudo_true=None, threads: int = 1) -> CoverageReport:
    """Per-coordinate coverage of theta_hat +- z se around the (pseudo-)true parameter.

    The truth is used when the model is well specified; otherwise the
    pseudo-true value comes from a long calibration run.
    """
    if reps < 200:
        raise ValueError("reps must be >= 200")
    if pseudo_true is not None:
        target, source = np.asarray(pseudo_true, dtype=float), "given"
    elif dgp.well_specified:
        target, source = dgp.theta_true, "true parameter"
    else:
        target, source = pseudo_true_value(harness, dgp, n, seed), "calibration run"
    z = norm.ppf(0.5 + level / 2)

    def block(b, start, stop):
        hits = np.zeros(target.size)
        bnd = 0
        for r in range(start, stop):
            X, Y = dgp.simulate(n, derive_seed(seed, Stream.ENV, r))
            f = mle_fit(harness, X, Y, derive_seed(seed, Stream.MISC, r))
            hits += np.abs(f.theta - target) <= z * f.se
            bnd += f.boundary
        return hits, bnd

    parts = run_blocks(block, reps, threads, size=25)
    hits = sum(p[0] for p in parts)
    bnd = sum(p[1] for p in parts)
    half = 3 * math.sqrt(level * (1 - level) / reps)
    return CoverageReport(hits / reps, level, reps, n, target, source, int(bnd), n < 500,
                          (level - half, level + half))

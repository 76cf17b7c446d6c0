"""Stochastic gradient Langevin dynamics driven by dependent data, and the online logistic example."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Optional

import numpy as np
from scipy.special import expit

from ._common import Stream, as_env_fn, derive_seed, make_rng
from .certify import (DriftCertificate, MomentReport, SummabilityReport, estimate_dl,
                      moment_bound_check, power_transform, sgld_certificate)
from .couple import BCurve, CouplingKernel, estimate_b
from .dynamics import (RandomMapKernel, Trajectory, gaussian_quantile,
                       stationary_distribution, step_noise)
from .mixing import MixingCurve, empirical_alpha


@dataclass
class SgldConfig:
    """theta' = theta - lam H(theta, y) + sqrt(2 lam / beta_temp) xi.

    ``H`` is batched: (N, d) states and (N, m) environment values to (N, d).
    ``Delta``, ``b_diss`` and ``v`` are batched env functions or constants.
    """

    lam: float
    beta_temp: float
    d: int
    H: Callable[[np.ndarray, np.ndarray], np.ndarray]
    L: float
    Delta: object
    b_diss: object
    v: object
    env_dim: int = 1
    s: float = 0.5
    delta_tilde: Optional[float] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.lam <= 0 or self.beta_temp <= 0:
            raise ValueError("lam and beta_temp must be positive")
        if self.L <= 0:
            raise ValueError("L must be positive")
        if self.d < 1:
            raise ValueError("d must be >= 1")
        if not 0 < self.s < 1:
            raise ValueError("moment exponent s must lie in (0, 1)")

    @property
    def noise_sd(self) -> float:
        return math.sqrt(2 * self.lam / self.beta_temp)


def sgld_kernel(cfg: SgldConfig) -> RandomMapKernel:
    lam, sd, d = cfg.lam, cfg.noise_sd, cfg.d
    H = cfg.H

    def fmap(x, y, u):
        return x - lam * H(x, y) + sd * gaussian_quantile(u)

    def logd(y, x, x2):
        z = (x2 - (x - lam * H(x, y))) / sd
        return -0.5 * np.sum(z * z, axis=-1) - d * (math.log(sd) + 0.5 * math.log(2 * math.pi))

    return RandomMapKernel(fmap, d, state_dim=d, env_dim=cfg.env_dim,
                           density=lambda y, x, x2: np.exp(logd(y, x, x2)), log_density=logd,
                           name="sgld", meta={"lam": lam, "beta_temp": cfg.beta_temp})


def step_admissibility(lam: float, L: float, delta_tilde: float) -> bool:
    """0 < lam < 2 delta_tilde / (3 L^2), strictly."""
    if L <= 0:
        return False
    return bool(0 < lam < 2 * delta_tilde / (3 * L * L))


def sgld_run(cfg: SgldConfig, trajectory: Trajectory, theta0, horizon: int, seed: int,
             override: bool = False) -> np.ndarray:
    """Parameter path of length horizon+1, shape (horizon+1, d).

    Noise for step t comes from the same keyed stream as ``simulate_batch``
    uses for a single chain, so the two agree exactly.
    """
    if trajectory.reps is not None:
        raise ValueError("sgld_run takes a single trajectory")
    env = np.asarray(trajectory.values, dtype=float)
    if env.ndim == 1:
        env = env[:, None]
    if horizon > env.shape[0]:
        raise ValueError(f"horizon {horizon} exceeds trajectory length {env.shape[0]}")
    dt = cfg.delta_tilde
    if dt is None:
        dt = float(np.min(as_env_fn(cfg.Delta)(env[:max(horizon, 1)])))
    admissible = step_admissibility(cfg.lam, cfg.L, dt)
    if not admissible and not override:
        raise ValueError(f"step size {cfg.lam} not admissible (needs < {2 * dt / (3 * cfg.L ** 2)});"
                         " pass override=True to run anyway")
    kern = sgld_kernel(cfg)
    x = np.asarray(theta0, dtype=float).reshape(1, cfg.d)
    path = np.empty((horizon + 1, cfg.d))
    path[0] = x[0]
    t0 = trajectory.t_min
    for t in range(horizon):
        u = step_noise(seed, 1, cfg.d, t0 + t)
        nxt = kern.map(x, env[t:t + 1], u)
        if not np.all(np.isfinite(nxt)):
            raise FloatingPointError(f"non-finite update at step {t + 1} from state {x[0].tolist()}")
        x = nxt
        path[t + 1] = x[0]
    return path


# ---------------------------------------------------------------------------
# logistic regression
# ---------------------------------------------------------------------------

def logistic_update(theta, y, c: float) -> np.ndarray:
    """-(q - sigma(<theta, z>)) z + 2 c theta for one observation y = (q, z)."""
    q, z = y
    if q not in (0, 1):
        raise ValueError("q must be 0 or 1")
    theta = np.asarray(theta, dtype=float)
    z = np.asarray(z, dtype=float)
    return -(q - expit(np.clip(theta @ z, -700, 700))) * z + 2 * c * theta


def logistic_H(c: float):
    """Batched update for environment rows (q, z_1..z_d)."""

    def H(theta, y):
        q, z = y[:, 0], y[:, 1:]
        s = expit(np.clip(np.sum(theta * z, axis=1), -700, 700))
        return -(q - s)[:, None] * z + 2 * c * theta

    return H


def logistic_loss(theta, y, c: float) -> float:
    """Per-sample regularized negative log-likelihood whose gradient is ``logistic_update``."""
    q, z = y
    eta = float(np.dot(theta, z))
    # -log sigma(eta) = log(1 + e^{-eta}), -log(1 - sigma(eta)) = log(1 + e^{eta})
    nll = np.logaddexp(0.0, -eta) if q == 1 else np.logaddexp(0.0, eta)
    return float(nll + c * np.dot(theta, theta))


@dataclass(frozen=True)
class LogisticConstants:
    c: Fraction
    Delta: Fraction
    L: Fraction
    lam_max: Fraction
    lam_star: Fraction
    gamma_star: Fraction

    def gamma(self, lam):
        """gamma(lam) = 3 L^2 lam^2 - 2 Delta lam + 1."""
        return 3 * self.L ** 2 * lam * lam - 2 * self.Delta * lam + 1

    def as_floats(self) -> dict:
        return {k: float(getattr(self, k)) for k in
                ("c", "Delta", "L", "lam_max", "lam_star", "gamma_star")}


def logistic_constants(c) -> LogisticConstants:
    """Exact rational constants of the logistic example (floats are converted exactly)."""
    cf = Fraction(c) if not isinstance(c, str) else Fraction(c)
    if cf <= Fraction(1, 2):
        raise ValueError("c must exceed 1/2 (otherwise Delta <= 0)")
    Delta = 2 * cf - 1
    L = 2 * (cf + 1)
    lam_max = (2 * cf - 1) / (6 * (cf + 1) ** 2)
    lam_star = (2 * cf - 1) / (12 * (cf + 1) ** 2)
    gamma_star = (8 * cf ** 2 + 28 * cf + 11) / (12 * (cf + 1) ** 2)
    out = LogisticConstants(cf, Delta, L, lam_max, lam_star, gamma_star)
    if out.gamma(lam_star) != gamma_star:
        raise AssertionError("gamma(lam_star) differs from the closed form")
    return out


def lambda_star_curve(c_grid) -> np.ndarray:
    c = np.asarray(c_grid, dtype=float)
    return (2 * c - 1) / (12 * (c + 1) ** 2)


def gamma_star_curve(c_grid) -> np.ndarray:
    c = np.asarray(c_grid, dtype=float)
    return (8 * c * c + 28 * c + 11) / (12 * (c + 1) ** 2)


@dataclass
class ConsistencyReport:
    consistent: bool
    delta_ok: np.ndarray
    b_ok: np.ndarray
    discriminant_ok: np.ndarray

    @property
    def discriminant_flagged(self) -> bool:
        return bool(not np.all(self.discriminant_ok))

    def to_dict(self):
        return {"consistent": self.consistent,
                "delta_violations": int((~self.delta_ok).sum()),
                "b_violations": int((~self.b_ok).sum()),
                "discriminant_violations": int((~self.discriminant_ok).sum()),
                "points": int(self.delta_ok.size)}


def dissipativity_consistency(L: float, Delta, b_diss, v, ys) -> ConsistencyReport:
    """Can <x, H> >= Delta |x|^2 - b and |H| <= L(|x| + v + 1) hold together at each y?

    Cauchy-Schwarz forces (L - Delta) s^2 + L (v + 1) s + b >= 0 for all s >= 0,
    which holds iff Delta <= L and b >= 0; that decides ``consistent``. The
    discriminant condition L^2 (v+1)^2 <= 4 b (L - Delta) (nonnegativity for all
    real s) is reported per point as ``discriminant_ok``.
    """
    ys = np.asarray(ys, dtype=float)
    if ys.ndim == 1:
        ys = ys[:, None]
    D = np.broadcast_to(as_env_fn(Delta)(ys), ys.shape[:1])
    b = np.broadcast_to(as_env_fn(b_diss)(ys), ys.shape[:1])
    vv = np.broadcast_to(as_env_fn(v)(ys), ys.shape[:1])
    delta_ok = D <= L
    b_ok = b >= 0
    disc_ok = L * L * (vv + 1) ** 2 <= 4 * b * (L - D)
    return ConsistencyReport(bool(np.all(delta_ok & b_ok)), delta_ok, b_ok, disc_ok)


@dataclass(frozen=True, eq=False)
class LogisticStream:
    """Y_n = (Q_n, Z_n): Z_n = means[regime_n] + sd N(0, I), Q_n ~ Bernoulli(sigma(<theta_true, Z_n>)).

    The regime is a finite Markov chain with transition matrix ``P`` started
    from its stationary law; ``kind="zero"`` gives Z == 0.
    """

    theta_true: np.ndarray
    P: np.ndarray = field(default_factory=lambda: np.array([[0.9, 0.1], [0.1, 0.9]]))
    means: Optional[np.ndarray] = None
    sd: float = 1.0
    kind: str = "markov"
    finite: bool = False
    stationary: bool = True
    two_sided: bool = True
    name: str = "logistic-stream"

    def __post_init__(self):
        if self.kind not in ("markov", "iid", "zero"):
            raise ValueError("kind must be markov, iid or zero")
        th = np.atleast_1d(np.asarray(self.theta_true, dtype=float))
        object.__setattr__(self, "theta_true", th)
        P = np.atleast_2d(np.asarray(self.P, dtype=float))
        object.__setattr__(self, "P", P)
        m = np.zeros((P.shape[0], th.size)) if self.means is None else self.means
        m = np.asarray(m, dtype=float).reshape(P.shape[0], th.size)
        object.__setattr__(self, "means", m)

    @property
    def d(self) -> int:
        return self.theta_true.size

    @property
    def dimension(self) -> int:
        return self.d + 1

    def sample(self, t_min: int, t_max: int, seed: int, reps: Optional[int] = None) -> Trajectory:
        R = 1 if reps is None else int(reps)
        T = t_max - t_min + 1
        rng = make_rng(seed, Stream.ENV, t_min, t_max)
        u = rng.random((R, T, self.d + 2))
        if self.kind == "zero":
            z = np.zeros((R, T, self.d))
        else:
            P = self.P if self.kind == "markov" else np.tile(stationary_distribution(self.P),
                                                             (self.P.shape[0], 1))
            pi = stationary_distribution(self.P)
            cum = np.cumsum(P, axis=1)
            n = P.shape[0]
            reg = np.empty((R, T), dtype=np.int64)
            reg[:, 0] = np.minimum(np.searchsorted(np.cumsum(pi), u[:, 0, 0], side="right"), n - 1)
            for t in range(1, T):
                reg[:, t] = np.minimum((u[:, t, 0, None] >= cum[reg[:, t - 1]]).sum(axis=1), n - 1)
            z = self.means[reg] + self.sd * gaussian_quantile(u[:, :, 2:])
        prob = expit(np.clip(z @ self.theta_true, -700, 700))
        q = (u[:, :, 1] < prob).astype(float)
        vals = np.concatenate([q[..., None], z], axis=2)
        if reps is None:
            vals = vals[0]
        vals.setflags(write=False)
        return Trajectory(vals, t_min, t_max, self.name, seed, reps)


@dataclass
class LogisticModel:
    c: float
    stream: LogisticStream

    def __post_init__(self):
        if not self.c > 0.5:
            raise ValueError("c must exceed 1/2")

    @property
    def d(self) -> int:
        return self.stream.d

    @property
    def constants(self) -> LogisticConstants:
        return logistic_constants(self.c)

    @staticmethod
    def v(y):
        return np.linalg.norm(np.atleast_2d(y), axis=1)

    @staticmethod
    def b(y):
        y = np.atleast_2d(y)
        return np.sum(y * y, axis=1)

    def Delta(self, y):
        return np.full(np.shape(y)[0], 2 * self.c - 1)

    def config(self, lam: float, beta_temp: float = 1.0, s: float = 0.5) -> SgldConfig:
        k = self.constants
        return SgldConfig(lam, beta_temp, self.d, logistic_H(self.c), float(k.L), self.Delta,
                          self.b, self.v, env_dim=self.d + 1, s=s,
                          delta_tilde=float(k.Delta), meta={"c": self.c})

    def certificates(self, lam: float, beta_temp: float = 1.0):
        k = self.constants
        return sgld_certificate(float(k.L), self.Delta, self.b, self.v, lam, beta_temp, self.d)


def estimate_delta_tilde(Delta, env, horizon: int, reps: int, seed: int) -> float:
    """min over t < horizon of the Monte Carlo mean of Delta(Y_t)."""
    vals = np.asarray(env.sample(0, horizon - 1, seed, reps=reps).values, dtype=float)
    f = as_env_fn(Delta)
    means = [float(np.mean(f(vals[:, t]))) for t in range(horizon)]
    return min(means)


def env_moment_sup(env, delta: float, horizon: int, reps: int, seed: int) -> float:
    """sup_t of the Monte Carlo mean of |Y_t|^delta over t < horizon."""
    vals = np.asarray(env.sample(0, horizon - 1, seed, reps=reps).values, dtype=float)
    norms = np.linalg.norm(vals.reshape(reps, horizon, -1), axis=2) ** delta
    return float(norms.mean(axis=0).max())


S_GRID = tuple(2.0 ** -k for k in range(1, 9))


def select_moment_exponent(drift: DriftCertificate, env, L: int, reps: int, seed: int,
                           s_grid=S_GRID, min_r2: float = 0.95):
    """Largest s whose estimated d_l for (V^s, gamma^s, K^s) fits geometric decay."""
    for s in s_grid:
        cert = power_transform(drift, s)
        rep = estimate_dl(cert, env, L, (-1, 0), reps, derive_seed(seed, Stream.MISC, int(1 / s)))
        fit = rep.fit
        if (rep.tail_source in ("geometric", "exact-zero")
                and (fit is None or (fit["rate"] < 1 and fit["r2"] >= min_r2))):
            return s, cert, rep
    return None, None, None


@dataclass
class LogisticBundle:
    constants: dict
    lam: float
    beta_temp: float
    R: float
    admissible: bool
    delta_tilde: float
    env_moment: float
    s: Optional[float]
    summability: Optional[SummabilityReport]
    b_curve: Optional[BCurve]
    b_fit: Optional[dict]
    moments: Optional[MomentReport]
    alpha_diag: Optional[MixingCurve]
    path_stats: dict
    notes: list = field(default_factory=list)

    def summary(self) -> dict:
        out = {"constants": self.constants, "lam": self.lam, "beta_temp": self.beta_temp,
               "R": self.R, "admissible": self.admissible, "delta_tilde": self.delta_tilde,
               "env_moment_sup": self.env_moment, "s": self.s, "path_stats": self.path_stats,
               "notes": self.notes}
        if self.summability is not None:
            out["summability"] = self.summability.to_dict()
        if self.b_fit is not None:
            out["b_fit"] = self.b_fit
        if self.moments is not None:
            out["moment_sup"] = self.moments.sup_estimate
            out["moment_uniform_bound"] = self.moments.uniform_bound
            out["moment_violations"] = int(self.moments.violated.sum())
        return out


def run_logistic_experiment(model: LogisticModel, horizon: int, reps: int, seed: int,
                            lam: Optional[float] = None, beta_temp: float = 1.0,
                            R: Optional[float] = None, n_max: int = 40, j_grid=(0,),
                            moment_horizon: Optional[int] = None, dl_lags: int = 30,
                            env_moment_delta: float = 2.0, theta0=None,
                            threads: int = 1) -> LogisticBundle:
    """Certificates, exponent selection, coupling curve, moment curve and mixing diagnostics.

    ``R`` defaults to a quarter of the stationary variance of the
    Ornstein-Uhlenbeck-like recursion obtained with Z == 0, in squared norm
    units (small set radius half a standard deviation per coordinate).
    """
    k = model.constants
    lam = float(k.lam_star) if lam is None else float(lam)
    stream = model.stream
    cfg = model.config(lam, beta_temp)
    kern = sgld_kernel(cfg)
    d = model.d
    theta0 = np.zeros(d) if theta0 is None else np.asarray(theta0, dtype=float)
    notes = []

    env_mom = env_moment_sup(stream, env_moment_delta, min(horizon, 200), min(reps, 2000),
                             derive_seed(seed, Stream.MISC, 1))
    dtilde = estimate_delta_tilde(model.Delta, stream, min(horizon, 200), min(reps, 2000),
                                  derive_seed(seed, Stream.MISC, 2))
    admissible = step_admissibility(lam, float(k.L), dtilde)
    if not admissible:
        notes.append("step size not admissible; results are simulation-only diagnostics")

    a = 1 - 2 * model.c * lam
    stat_var = cfg.noise_sd ** 2 / (1 - a * a)
    R = d * 0.25 * stat_var if R is None else float(R)

    # one long path for summary statistics and the mixing diagnostic
    long_T = max(horizon, 2000)
    traj = stream.sample(0, long_T - 1, derive_seed(seed, Stream.ENV, 99))
    path = sgld_run(cfg, traj, theta0, long_T, derive_seed(seed, Stream.NOISE, 99),
                    override=True)
    sq = np.sum(path * path, axis=1)
    stats = {"mean_sq_norm": float(sq[len(sq) // 2:].mean()), "max_sq_norm": float(sq.max()),
             "final": path[-1].tolist(), "length": long_T}
    cols = np.concatenate([path[:-1], np.asarray(traj.values)[:, 1:]], axis=1)
    alpha_diag = empirical_alpha(cols, np.arange(1, 11))

    drift, minor = model.certificates(lam, beta_temp)
    s, cert_s, rep = select_moment_exponent(drift, stream, dl_lags, min(reps, 20_000),
                                            derive_seed(seed, Stream.MISC, 3))
    if s is None:
        notes.append("no admissible moment exponent found; bundle is simulation-only")
        return LogisticBundle(k.as_floats(), lam, beta_temp, R, admissible, dtilde, env_mom,
                              None, None, None, None, None, alpha_diag, stats, notes)

    ck = CouplingKernel(kern, minor, R)
    rng0 = derive_seed(seed, Stream.INIT)

    def init(rng, n):
        # partner starts from the chain's own stationary-scale spread
        return math.sqrt(stat_var) * gaussian_quantile(rng.random((n, d)))

    bc = estimate_b(ck, stream, theta0, init, 1, range(0, n_max + 1), j_grid, reps, rng0,
                    threads=threads)
    fit = bc.loglinear_fit(n_max)
    mh = horizon if moment_horizon is None else moment_horizon
    mom = moment_bound_check(kern, cert_s, stream, theta0, mh, reps,
                             derive_seed(seed, Stream.MISC, 4), report=rep, threads=threads)
    return LogisticBundle(k.as_floats(), lam, beta_temp, R, admissible, dtilde, env_mom, s, rep,
                          bc, fit, mom, alpha_diag, stats, notes)

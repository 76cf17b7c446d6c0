"""Environments, random-map kernels and simulation of chains in random environments.

Conventions used throughout the package:

* Kernel maps are batched: ``map(x, y, u)`` with ``x`` of shape ``(N,)`` (finite
  chains, integer states) or ``(N, d)``, ``y`` of shape ``(N,)`` (finite
  environments) or ``(N, m)``, and ``u`` of shape ``(N, k)`` with entries in
  ``[0, 1)``. Argument order is always (state, environment, noise).
* Environment values come as ``(T,)`` / ``(T, m)`` arrays, or ``(R, T)`` /
  ``(R, T, m)`` when several replications are drawn at once.
* Noise at step ``t`` of a simulation is drawn from the stream keyed by
  ``(seed, role, block, t)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.special import ndtri

from ._common import Stream, check_seed, make_rng

ENV_KINDS = ("iid", "finite-markov", "gaussian-ar1", "m-dependent",
             "threshold-modulated", "custom-stream")
RATE_FORMS = ("zero-after-lag", "geometric", "power", "table")
_U_FLOOR = np.finfo(float).tiny


def gaussian_quantile(u):
    """Standard normal quantile, safe at u == 0."""
    return ndtri(np.clip(u, _U_FLOOR, 1.0))


# ---------------------------------------------------------------------------
# mixing-rate descriptors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MixingRateDescriptor:
    """A known decay law for a mixing coefficient, evaluated by calling it on lags."""

    form: str
    c: float = 0.25
    rho: Optional[float] = None
    a: Optional[float] = None
    m: Optional[int] = None
    table: Optional[tuple] = None
    kind: str = "alpha"

    def __post_init__(self):
        if self.form not in RATE_FORMS:
            raise ValueError(f"unknown rate form {self.form!r}")
        if self.c < 0:
            raise ValueError("rate constant must be nonnegative")
        if self.form == "geometric" and not (self.rho is not None and 0 < self.rho < 1):
            raise ValueError("geometric rate needs rho in (0, 1)")
        if self.form == "power" and not (self.a is not None and self.a > 0):
            raise ValueError("power rate needs a > 0")
        if self.form == "zero-after-lag" and not (self.m is not None and self.m >= 0):
            raise ValueError("zero-after-lag rate needs m >= 0")
        if self.form == "table":
            if not self.table:
                raise ValueError("table rate needs values")
            t = np.asarray(self.table, dtype=float)
            if np.any(t < 0):
                raise ValueError("table entries must be nonnegative")
            if np.any(np.diff(t) > 1e-15):
                raise ValueError("table values must be non-increasing in lag")

    def __call__(self, n):
        n_arr = np.asarray(n, dtype=float)
        if np.any(n_arr < 0):
            raise ValueError("lags must be nonnegative")
        with np.errstate(divide="ignore", over="ignore"):
            if self.form == "zero-after-lag":
                v = np.where(n_arr <= self.m, self.c, 0.0)
            elif self.form == "geometric":
                v = self.c * self.rho ** n_arr
            elif self.form == "power":
                v = np.where(n_arr > 0, self.c * np.maximum(n_arr, 1e-300) ** (-self.a), np.inf)
            else:
                t = np.asarray(self.table, dtype=float)
                idx = np.minimum(np.floor(n_arr).astype(int), t.size - 1)
                v = t[idx]
        if self.kind == "alpha":
            v = np.where(n_arr == 0, 0.25, np.minimum(v, 0.25))
        else:
            v = np.where(n_arr == 0, np.maximum(v, 1.0), v)
        return float(v) if np.ndim(v) == 0 else v


# ---------------------------------------------------------------------------
# environments
# ---------------------------------------------------------------------------

def stationary_distribution(P) -> np.ndarray:
    """Stationary law of a finite stochastic matrix (least-squares solve)."""
    P = np.asarray(P, dtype=float)
    n = P.shape[0]
    A = np.vstack([P.T - np.eye(n), np.ones((1, n))])
    rhs = np.zeros(n + 1)
    rhs[-1] = 1.0
    pi, *_ = np.linalg.lstsq(A, rhs, rcond=None)
    pi = np.clip(pi, 0.0, None)
    return pi / pi.sum()


def check_stochastic(P, what="transition matrix", tol=1e-12) -> np.ndarray:
    P = np.asarray(P, dtype=float)
    if P.ndim < 2 or P.shape[-1] != P.shape[-2]:
        raise ValueError(f"{what} must be square")
    if np.any(P < 0):
        raise ValueError(f"{what} has negative entries")
    if np.any(np.abs(P.sum(axis=-1) - 1.0) > tol):
        raise ValueError(f"{what} rows must sum to 1")
    return P


@dataclass(frozen=True, eq=False)
class EnvironmentSpec:
    """Description of the environment process (Y_t).

    ``params`` by kind:

    * ``iid``: ``dist`` in {categorical, bernoulli, normal, uniform, lognormal,
      constant} with ``probs`` / ``p`` / ``mean``, ``std`` / ``low``, ``high`` /
      ``mu``, ``sigma`` / ``value``.
    * ``finite-markov``: ``P`` and optional ``init``.
    * ``gaussian-ar1``: ``a``, ``sigma`` (innovation std), optional ``mean``.
    * ``m-dependent``: ``m``, optional ``weights`` (length m+1), ``std``.
    * ``threshold-modulated``: latent AR(1) ``a``, ``sigma``, ``threshold``;
      emitted ``levels`` (two regime means) plus ``noise_sd``.
    * ``custom-stream``: callables ``init(rng) -> state`` and
      ``step(state, rng) -> (state, value)``; optional ``finite`` flag.
    """

    kind: str
    dimension: int = 1
    params: dict = field(default_factory=dict)
    stationary: bool = True
    two_sided: bool = False
    known_rate: Optional[MixingRateDescriptor] = None
    name: str = ""

    def __post_init__(self):
        if self.kind not in ENV_KINDS:
            raise ValueError(f"unknown environment kind {self.kind!r}")
        if self.dimension < 1:
            raise ValueError("dimension must be positive")
        p = self.params
        if self.kind == "finite-markov":
            P = check_stochastic(p["P"])
            if "init" in p:
                init = np.asarray(p["init"], dtype=float)
                if init.shape != (P.shape[0],) or abs(init.sum() - 1) > 1e-12 or np.any(init < 0):
                    raise ValueError("init must be a probability vector matching P")
        elif self.kind == "gaussian-ar1":
            if self.stationary and not abs(p.get("a", 0.0)) < 1:
                raise ValueError("stationary gaussian-ar1 needs |a| < 1")
        elif self.kind == "m-dependent":
            if int(p.get("m", 0)) < 0:
                raise ValueError("m-dependent needs m >= 0")
        elif self.kind == "threshold-modulated":
            if not abs(p.get("a", 0.0)) < 1:
                raise ValueError("threshold-modulated latent AR needs |a| < 1")
        elif self.kind == "iid":
            dist = p.get("dist", "normal")
            if dist == "categorical":
                probs = np.asarray(p["probs"], dtype=float)
                if np.any(probs < 0) or abs(probs.sum() - 1) > 1e-12:
                    raise ValueError("categorical probs must be a probability vector")

    @property
    def finite(self) -> bool:
        if self.kind == "finite-markov":
            return True
        if self.kind == "iid":
            return self.params.get("dist", "normal") in ("categorical", "bernoulli")
        if self.kind == "custom-stream":
            return bool(self.params.get("finite", False))
        return False

    @property
    def n_states(self) -> Optional[int]:
        if self.kind == "finite-markov":
            return np.asarray(self.params["P"]).shape[0]
        if self.kind == "iid" and self.params.get("dist") == "categorical":
            return len(self.params["probs"])
        if self.kind == "iid" and self.params.get("dist") == "bernoulli":
            return 2
        return self.params.get("n_states") if self.kind == "custom-stream" else None

    def finite_chain(self):
        """(P, initial law) for finite environments, i.i.d. ones included."""
        if self.kind == "finite-markov":
            P = np.asarray(self.params["P"], dtype=float)
            init = self.params.get("init")
            init = stationary_distribution(P) if init is None else np.asarray(init, float)
            return P, init
        if self.kind == "iid" and self.finite:
            if self.params.get("dist") == "bernoulli":
                q = float(self.params["p"])
                probs = np.array([1 - q, q])
            else:
                probs = np.asarray(self.params["probs"], dtype=float)
            return np.tile(probs, (probs.size, 1)), probs
        raise ValueError(f"{self.kind} environment has no finite transition matrix")

    def sample(self, t_min, t_max, seed, reps=None):
        return sample_environment(self, t_min, t_max, seed, reps=reps)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Environment values for t = t_min..t_max (leading replication axis if ``reps``)."""

    values: np.ndarray
    t_min: int
    t_max: int
    spec_id: str
    seed: int
    reps: Optional[int] = None

    def __len__(self):
        return self.t_max - self.t_min + 1

    def index(self, t: int) -> int:
        if not self.t_min <= t <= self.t_max:
            raise IndexError(f"time {t} outside [{self.t_min}, {self.t_max}]")
        return t - self.t_min

    def at(self, t: int):
        i = self.index(t)
        return self.values[:, i] if self.reps is not None else self.values[i]

    def window(self, t0: int, t1: int) -> np.ndarray:
        """Values for t0 <= t < t1."""
        i0, i1 = self.index(t0), self.index(t1 - 1) + 1
        return self.values[:, i0:i1] if self.reps is not None else self.values[i0:i1]

    def batched(self) -> np.ndarray:
        return self.values if self.reps is not None else self.values[None]


def _iid_draw(rng, p, shape, dim):
    dist = p.get("dist", "normal")
    if dist == "categorical":
        probs = np.asarray(p["probs"], dtype=float)
        u = rng.random(shape)
        return np.minimum(np.searchsorted(np.cumsum(probs), u, side="right"), probs.size - 1)
    if dist == "bernoulli":
        return (rng.random(shape) < float(p["p"])).astype(np.int64)
    full = shape + (dim,)
    if dist == "normal":
        return p.get("mean", 0.0) + p.get("std", 1.0) * gaussian_quantile(rng.random(full))
    if dist == "uniform":
        lo, hi = p.get("low", 0.0), p.get("high", 1.0)
        return lo + (hi - lo) * rng.random(full)
    if dist == "lognormal":
        return np.exp(p.get("mu", 0.0) + p.get("sigma", 1.0) * gaussian_quantile(rng.random(full)))
    if dist == "constant":
        return np.broadcast_to(np.asarray(p.get("value", 0.0), dtype=float), full).copy()
    raise ValueError(f"unknown iid distribution {dist!r}")


def sample_environment(spec: EnvironmentSpec, t_min: int, t_max: int, seed: int,
                       reps: Optional[int] = None) -> Trajectory:
    """Draw the environment on t_min..t_max; a pure function of its arguments."""
    if t_min > t_max:
        raise ValueError("t_min must not exceed t_max")
    if t_min < 0 and not spec.two_sided:
        raise ValueError("negative time index on a one-sided environment")
    seed = check_seed(seed)
    R = 1 if reps is None else int(reps)
    if R < 1:
        raise ValueError("reps must be >= 1")
    T = t_max - t_min + 1
    rng = make_rng(seed, Stream.ENV, t_min, t_max)
    p = spec.params
    dim = spec.dimension

    if spec.kind == "iid":
        vals = _iid_draw(rng, p, (R, T), dim)
    elif spec.kind == "finite-markov":
        P, init = spec.finite_chain()
        cum = np.cumsum(P, axis=1)
        n = P.shape[0]
        vals = np.empty((R, T), dtype=np.int64)
        u = rng.random((R, T))
        vals[:, 0] = np.minimum(np.searchsorted(np.cumsum(init), u[:, 0], side="right"), n - 1)
        for t in range(1, T):
            rows = cum[vals[:, t - 1]]
            vals[:, t] = np.minimum((u[:, t, None] >= rows).sum(axis=1), n - 1)
    elif spec.kind == "gaussian-ar1":
        a, sig, mean = float(p.get("a", 0.5)), float(p.get("sigma", 1.0)), float(p.get("mean", 0.0))
        z = gaussian_quantile(rng.random((R, T, dim)))
        vals = np.empty((R, T, dim))
        start = sig / np.sqrt(1 - a * a) if spec.stationary else 0.0
        vals[:, 0] = (p.get("x0", 0.0) if not spec.stationary else 0.0) + start * z[:, 0]
        for t in range(1, T):
            vals[:, t] = a * vals[:, t - 1] + sig * z[:, t]
        vals += mean
    elif spec.kind == "m-dependent":
        m = int(p.get("m", 1))
        w = np.asarray(p.get("weights", np.ones(m + 1) / np.sqrt(m + 1)), dtype=float)
        if w.size != m + 1:
            raise ValueError("m-dependent weights must have length m+1")
        eta = float(p.get("std", 1.0)) * gaussian_quantile(rng.random((R, T + m, dim)))
        vals = np.zeros((R, T, dim))
        for k in range(m + 1):
            vals += w[k] * eta[:, m - k:m - k + T]
    elif spec.kind == "threshold-modulated":
        a, sig = float(p.get("a", 0.8)), float(p.get("sigma", 1.0))
        thr = float(p.get("threshold", 0.0))
        levels = np.asarray(p.get("levels", [-1.0, 1.0]), dtype=float).reshape(2, -1)
        z = gaussian_quantile(rng.random((R, T)))
        g = np.empty((R, T))
        g[:, 0] = sig / np.sqrt(1 - a * a) * z[:, 0]
        for t in range(1, T):
            g[:, t] = a * g[:, t - 1] + sig * z[:, t]
        regime = (g > thr).astype(np.int64)
        noise = float(p.get("noise_sd", 1.0)) * gaussian_quantile(rng.random((R, T, dim)))
        vals = np.broadcast_to(levels[regime], (R, T, dim)) + noise
    else:
        out = []
        for r in range(R):
            g = make_rng(seed, Stream.ENV, t_min, t_max, r)
            state = p["init"](g)
            row = []
            for _ in range(T):
                state, v = p["step"](state, g)
                row.append(v)
            out.append(row)
        vals = np.asarray(out)
        if not spec.finite and vals.ndim == 2:
            vals = vals[..., None]

    vals = np.asarray(vals)
    if reps is None:
        vals = vals[0]
    vals.setflags(write=False)
    return Trajectory(vals, t_min, t_max, spec.name or spec.kind, seed, reps)


def stream_environment(spec: EnvironmentSpec, seed: int):
    """Lazy generator of environment values (custom-stream environments only)."""
    if spec.kind != "custom-stream":
        raise ValueError("streaming is only provided for custom-stream environments")
    g = make_rng(seed, Stream.ENV, 0)
    state = spec.params["init"](g)
    while True:
        state, v = spec.params["step"](state, g)
        yield v


def theoretical_alpha(spec: EnvironmentSpec, n: int) -> float:
    """An upper bound on the strong-mixing coefficient of the environment at lag n."""
    if n < 0:
        raise ValueError("lag must be nonnegative")
    if n == 0:
        return 0.25
    if spec.kind == "iid":
        return 0.0
    if spec.kind == "m-dependent" and n > int(spec.params.get("m", 1)):
        return 0.0
    if spec.kind == "finite-markov":
        from .mixing import exact_alpha_finite

        P, init = spec.finite_chain()
        window = range(0, 1) if spec.stationary else range(0, 50)
        return exact_alpha_finite(P, init, n, window)
    if spec.known_rate is not None:
        return float(spec.known_rate(n))
    if spec.kind == "m-dependent":
        return 0.25
    raise ValueError(f"no known mixing rate for {spec.kind} environment")


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class RandomMapKernel:
    """A parametric kernel realized as a map (state, env value, uniforms) -> state."""

    map: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
    noise_arity: int
    state_dim: int = 1
    n_states: Optional[int] = None
    env_dim: int = 1
    n_env: Optional[int] = None
    density: Optional[Callable] = None
    log_density: Optional[Callable] = None
    p: int = 1
    table: Optional[np.ndarray] = None
    name: str = "kernel"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.noise_arity < 0 or self.p < 1:
            raise ValueError("noise arity must be >= 0 and p >= 1")
        if self.table is not None:
            check_stochastic(self.table, "kernel table")

    @property
    def finite(self) -> bool:
        return self.n_states is not None

    @property
    def env_finite(self) -> bool:
        return self.n_env is not None

    def states(self, x) -> np.ndarray:
        if self.finite:
            return np.asarray(x, dtype=np.int64).reshape(-1)
        return np.asarray(x, dtype=float).reshape(-1, self.state_dim)

    def env(self, y, n: int) -> np.ndarray:
        """Broadcast environment values (one step or one p-block) to a batch of n."""
        if self.env_finite:
            shape = (n,) if self.p == 1 else (n, self.p)
            return np.broadcast_to(np.asarray(y, dtype=np.int64), shape)
        shape = (n, self.env_dim) if self.p == 1 else (n, self.p, self.env_dim)
        return np.broadcast_to(np.asarray(y, dtype=float), shape)

    def step(self, x, y, u) -> np.ndarray:
        return self.map(x, y, u)

    def logq(self, y, x, x2) -> np.ndarray:
        if self.log_density is not None:
            return self.log_density(y, x, x2)
        if self.density is None:
            raise ValueError(f"kernel {self.name} has no density")
        with np.errstate(divide="ignore"):
            return np.log(self.density(y, x, x2))


_BELOW_ONE = np.nextafter(1.0, 0.0)


def _inverse_cdf_rows(cum_rows: np.ndarray, u: np.ndarray) -> np.ndarray:
    n = cum_rows.shape[-1]
    u = np.minimum(u, _BELOW_ONE)  # u = 1 must not land on a zero-mass last state
    return np.minimum((u[:, None] >= cum_rows).sum(axis=1), n - 1)


def finite_kernel(table, name="finite") -> RandomMapKernel:
    """Kernel on {0..n-1} driven by a finite environment; ``table[y, x, x']``."""
    table = np.array(check_stochastic(table, "kernel table"), dtype=float)
    if table.ndim == 2:
        table = table[None]
    cum = np.cumsum(table, axis=2)
    cum[:, :, -1] = 1.0
    n_env, n, _ = table.shape
    table.setflags(write=False)

    def fmap(x, y, u):
        return _inverse_cdf_rows(cum[y, x], u[:, 0])

    def dens(y, x, x2):
        return table[y, x, x2]

    return RandomMapKernel(fmap, 1, n_states=n, n_env=n_env, density=dens,
                           table=table, name=name)


def load_finite_kernel(path) -> RandomMapKernel:
    """Read a finite kernel: one row per line, blank lines separate environment states."""
    blocks, cur = [], []
    with open(path) as fh:
        for line in fh:
            s = line.split("#", 1)[0].strip()
            if not s:
                if cur:
                    blocks.append(cur)
                    cur = []
                continue
            cur.append([float(v) for v in s.split()])
    if cur:
        blocks.append(cur)
    if not blocks:
        raise ValueError(f"no matrix rows in {path}")
    return finite_kernel(np.array(blocks), name=str(path))


def varx_kernel(A, B=None, noise_sd=1.0, env_dim=None, name="varx") -> RandomMapKernel:
    """x' = A x + B y + noise_sd * N(0, I), Gaussian noise from d uniforms."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    d = A.shape[0]
    if B is None:
        B = np.zeros((d, env_dim or 1))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    m = B.shape[1]
    s = float(noise_sd)

    def fmap(x, y, u):
        out = x @ A.T + y @ B.T
        if s:
            out = out + s * gaussian_quantile(u)
        return out

    logd = dens = None
    if s > 0:
        def logd(y, x, x2):
            mean = x @ A.T + y @ B.T
            z = (x2 - mean) / s
            return -0.5 * np.sum(z * z, axis=-1) - d * (np.log(s) + 0.5 * np.log(2 * np.pi))

        def dens(y, x, x2):
            return np.exp(logd(y, x, x2))

    return RandomMapKernel(fmap, d, state_dim=d, env_dim=m, density=dens, log_density=logd,
                           name=name, meta={"A": A, "B": B, "noise_sd": s})


def ar1_kernel(a: float, sigma: float = 1.0) -> RandomMapKernel:
    """Environment-free scalar AR(1): x' = a x + sigma * N(0, 1)."""
    return varx_kernel([[a]], [[0.0]], noise_sd=sigma, name=f"ar1(a={a})")


def deterministic_kernel(fn, state_dim=1, env_dim=1, name="deterministic") -> RandomMapKernel:
    """Kernel with no noise: x' = fn(x, y)."""
    return RandomMapKernel(lambda x, y, u: fn(x, y), 0, state_dim=state_dim, env_dim=env_dim,
                           name=name)


def apply_kernel(kernel: RandomMapKernel, x, y, u):
    """One transition of a single state."""
    u = np.asarray(u, dtype=float).reshape(-1)
    if u.size != kernel.noise_arity:
        raise ValueError(f"expected {kernel.noise_arity} noise coordinates, got {u.size}")
    if np.any((u < 0) | (u > 1)):
        raise ValueError("noise must lie in [0, 1]")
    if kernel.finite:
        xb = np.asarray([x], dtype=np.int64)
        if not 0 <= xb[0] < kernel.n_states:
            raise ValueError("state out of range")
    else:
        xb = np.asarray(x, dtype=float).reshape(1, -1)
        if xb.shape[1] != kernel.state_dim:
            raise ValueError(f"state dimension {xb.shape[1]} != {kernel.state_dim}")
    yb = np.asarray(y)
    if kernel.env_finite:
        want = () if kernel.p == 1 else (kernel.p,)
    else:
        want = (kernel.env_dim,) if kernel.p == 1 else (kernel.p, kernel.env_dim)
        yb = yb.reshape(want) if yb.size == int(np.prod(want)) else yb
    if yb.shape != want:
        raise ValueError(f"environment value shape {yb.shape} != {want}")
    out = kernel.map(xb, yb[None], u[None])
    return int(out[0]) if kernel.finite else out[0]


def compose_kernel(kernel: RandomMapKernel, p: int) -> RandomMapKernel:
    """The p-step kernel on environment blocks (y_1, ..., y_p)."""
    if p < 1:
        raise ValueError("p must be >= 1")
    if p == 1:
        return kernel
    if kernel.p != 1:
        raise ValueError("compose a one-step kernel")
    k = kernel.noise_arity

    def fmap(x, yb, u):
        for i in range(p):
            x = kernel.map(x, yb[:, i], u[:, i * k:(i + 1) * k])
        return x

    return RandomMapKernel(fmap, p * k, state_dim=kernel.state_dim, n_states=kernel.n_states,
                           env_dim=kernel.env_dim, n_env=kernel.n_env, p=p,
                           name=f"{kernel.name}^{p}", meta={"base": kernel})


def block_table(kernel: RandomMapKernel, block) -> np.ndarray:
    """Transition matrix of a finite kernel over an environment block."""
    base = kernel.meta.get("base", kernel)
    if base.table is None:
        raise ValueError("block tables need a finite tabulated kernel")
    out = np.eye(base.n_states)
    for y in np.atleast_1d(block):
        out = out @ base.table[int(y)]
    return out


def compose_p(kernel: RandomMapKernel, p: int, block, x, noise):
    """p sequential transitions of a single state, consuming the block in time order."""
    block = np.asarray(block)
    if block.shape[0] != p:
        raise ValueError(f"block length {block.shape[0]} != p={p}")
    noise = np.asarray(noise, dtype=float).reshape(p, -1)
    for i in range(p):
        x = apply_kernel(kernel, x, block[i], noise[i])
    return x


def block_env(values: np.ndarray, p: int, finite: bool) -> np.ndarray:
    """Group a batched environment (R, T, ...) into p-blocks (R, T//p, p, ...)."""
    if p == 1:
        return values
    R, T = values.shape[:2]
    nb = T // p
    return values[:, :nb * p].reshape((R, nb, p) + values.shape[2:])


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------

def step_noise(seed: int, n: int, k: int, t: int, role=Stream.NOISE, block: int = 0):
    return make_rng(seed, role, block, t).random((n, k))


def simulate_batch(kernel: RandomMapKernel, env: np.ndarray, x0, seed: int, horizon=None,
                   t0: int = 0, role=Stream.NOISE, block: int = 0,
                   record: bool = True, check=None) -> np.ndarray:
    """Simulate N chains, chain r driven by environment row ``env[r]``.

    ``env`` has shape (N, T, ...) in kernel steps (already blocked when p > 1).
    ``t0`` is the absolute time of env[:, 0]; it keys the noise streams.
    Returns the path (N, horizon+1, ...) or only the final state if not ``record``.
    """
    env = np.asarray(env)
    N, T = env.shape[:2]
    horizon = T if horizon is None else int(horizon)
    if horizon > T:
        raise ValueError(f"horizon {horizon} exceeds environment length {T}")
    x = kernel.states(np.broadcast_to(np.asarray(x0), (N,) if kernel.finite else (N, kernel.state_dim)))
    x = x.copy()
    path = np.empty((N, horizon + 1) + x.shape[1:], dtype=x.dtype) if record else None
    if record:
        path[:, 0] = x
    k = kernel.noise_arity
    for t in range(horizon):
        u = step_noise(seed, N, k, t0 + t, role, block) if k else np.empty((N, 0))
        x = kernel.map(x, env[:, t], u)
        if check is not None:
            check(t, x)
        if not kernel.finite and not np.all(np.isfinite(x)):
            bad = int(np.flatnonzero(~np.all(np.isfinite(x), axis=1))[0])
            raise FloatingPointError(f"non-finite state at step {t + 1} (replication {bad})")
        if record:
            path[:, t + 1] = x
    return path if record else x


def simulate_mcre(kernel: RandomMapKernel, trajectory: Trajectory, x0, seed: int,
                  horizon=None):
    """Path X_0 = x0, X_{t+1} = map(X_t, y_t, u_{t+1}) along a single environment path.

    Returns an array of shape (horizon+1,) for finite chains or (horizon+1, d).
    """
    if trajectory.reps is not None:
        raise ValueError("simulate_mcre takes a single trajectory; use simulate_batch")
    env = trajectory.values
    if kernel.p > 1:
        env = block_env(env[None], kernel.p, kernel.env_finite)[0]
    steps = env.shape[0]
    if horizon is not None and horizon > steps:
        raise ValueError(f"horizon {horizon} exceeds trajectory length {steps}")
    path = simulate_batch(kernel, env[None], x0, seed, horizon, t0=trajectory.t_min)
    return path[0]

"""Mixing coefficients (exact for finite Markov chains, empirical diagnostics) and bound calculators."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from ._common import isotonic_nonincreasing, make_rng, Stream
from .dynamics import MixingRateDescriptor, check_stochastic

KINDS = ("alpha", "phi", "psi")
PROVENANCE = ("exact-finite", "empirical-lower-diagnostic", "theoretical-bound")


@dataclass
class MixingCurve:
    lags: np.ndarray
    values: np.ndarray
    kind: str = "alpha"
    provenance: str = "exact-finite"
    metadata: dict = field(default_factory=dict)
    raw: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown mixing kind {self.kind!r}")
        if self.provenance not in PROVENANCE:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        self.lags = np.asarray(self.lags, dtype=np.int64)
        vals = np.asarray(self.values, dtype=float)
        if self.raw is None:
            self.raw = vals
            vals = isotonic_nonincreasing(vals)
        if self.kind == "alpha":
            vals = np.minimum(vals, 0.25)
        self.values = vals

    def __call__(self, lag):
        lag = int(lag)
        if lag == 0:
            return 0.25 if self.kind == "alpha" else 1.0
        hit = np.flatnonzero(self.lags == lag)
        if hit.size:
            return float(self.values[hit[0]])
        below = self.lags[self.lags <= lag]
        if below.size == 0:
            return 0.25 if self.kind == "alpha" else 1.0
        # values are non-increasing, so the value at the nearest smaller lag bounds this lag
        return float(self.values[np.flatnonzero(self.lags == below.max())[0]])

    def rows(self):
        header = ["lag", "value", "kind", "provenance"]
        return header, [[int(l), v, self.kind, self.provenance] for l, v in zip(self.lags, self.values)]


def as_rate(alpha) -> Callable[[int], float]:
    """Normalize a descriptor, curve, callable or array to lag -> value with alpha(0) = 1/4."""
    if isinstance(alpha, (MixingCurve, MixingRateDescriptor)):
        return lambda k: float(alpha(int(k)))
    if callable(alpha):
        return lambda k: 0.25 if int(k) == 0 else float(alpha(int(k)))
    arr = np.asarray(alpha, dtype=float)

    def f(k):
        k = int(k)
        if k == 0:
            return 0.25
        if k >= arr.size:
            raise ValueError(f"alpha undefined at lag {k}")
        return float(arr[k])

    return f


# ---------------------------------------------------------------------------
# exact coefficients for finite Markov chains
# ---------------------------------------------------------------------------

def _laws(T, init, j):
    mu = np.asarray(init, dtype=float)
    for _ in range(j):
        mu = mu @ T
    return mu


def _subset_sup(D: np.ndarray, exhaustive: bool, restarts: int, seed: int):
    """sup over subsets S, T of |sum_{S x T} D| where D has zero row sums."""
    Z = D.shape[0]
    if exhaustive:
        bits = ((np.arange(1 << Z)[:, None] >> np.arange(Z)[None, :]) & 1).astype(float)
        cols = bits @ D  # sum over S of rows
        return float(np.max(np.maximum(np.clip(cols, 0, None).sum(1),
                                       np.clip(-cols, 0, None).sum(1))))
    rng = make_rng(seed, Stream.MISC, Z)
    best = 0.0
    for _ in range(restarts):
        S = rng.random(Z) < 0.5
        for sign in (1.0, -1.0):
            s = S.copy()
            prev = -1.0
            for _ in range(100):
                c = sign * D[s].sum(axis=0)
                t = c > 0
                r = sign * D[:, t].sum(axis=1)
                s = r > 0
                val = sign * D[np.ix_(s, t)].sum()
                if val <= prev + 1e-15:
                    break
                prev = val
            best = max(best, prev)
    return best


def exact_alpha_finite(T, init, n: int, window=range(0, 1), detail: bool = False,
                       exhaustive: Optional[bool] = None, restarts: int = 32, seed: int = 0):
    """sup over j in the window of sup_{S,T} |P(Z_j in S, Z_{j+n} in T) - P(Z_j in S)P(Z_{j+n} in T)|.

    For a Markov chain the past/future sigma-fields reduce to the single-time
    marginals at j and j+n. Exhaustive over subsets when the chain has at most
    12 states; alternating ascent otherwise (then a lower bound).
    """
    T = check_stochastic(T)
    if n < 0:
        raise ValueError("lag must be nonnegative")
    Z = T.shape[0]
    exhaustive = Z <= 12 if exhaustive is None else exhaustive
    Tn = np.linalg.matrix_power(T, n)
    best, arg = 0.0, None
    for j in window:
        mu = _laws(T, init, j)
        D = mu[:, None] * Tn - np.outer(mu, mu @ Tn)
        v = _subset_sup(D, exhaustive, restarts, seed)
        if arg is None or v > best:
            best, arg = v, j
    best = min(best, 0.25)
    if detail:
        return {"value": best, "j_argmax": arg, "exact": exhaustive}
    return best


def exact_phi_finite(T, init, n: int, window=range(0, 1)) -> float:
    """sup_j max_{a: P(Z_j=a)>0} sum_b (P^n(a,b) - P(Z_{j+n}=b))_+."""
    T = check_stochastic(T)
    Tn = np.linalg.matrix_power(T, n)
    best = 0.0
    for j in window:
        mu = _laws(T, init, j)
        nu = mu @ Tn
        rows = mu > 0
        best = max(best, float(np.clip(Tn[rows] - nu, 0, None).sum(axis=1).max()))
    return best


def exact_psi_finite(T, init, n: int, window=range(0, 1)) -> float:
    """sup_j max_{a,b} |P^n(a,b) / P(Z_{j+n}=b) - 1| over charged states."""
    T = check_stochastic(T)
    Tn = np.linalg.matrix_power(T, n)
    best = 0.0
    for j in window:
        mu = _laws(T, init, j)
        nu = mu @ Tn
        rows, cols = mu > 0, nu > 0
        best = max(best, float(np.abs(Tn[np.ix_(rows, cols)] / nu[cols] - 1).max()))
    return best


def exact_alpha_curve(T, init, lags, window=range(0, 1)) -> MixingCurve:
    vals = [exact_alpha_finite(T, init, int(n), window) for n in lags]
    return MixingCurve(lags, vals, "alpha", "exact-finite",
                       {"window": [min(window), max(window)], "states": int(np.shape(T)[0])})


# ---------------------------------------------------------------------------
# empirical diagnostic
# ---------------------------------------------------------------------------

def _indicator_family(block: np.ndarray, thresholds: list, max_events: int = 256):
    """Indicators of products of half-lines {coord <= threshold} over block coordinates."""
    ncoord = block.shape[1]
    options = [[None] + list(range(len(th))) for th in thresholds]
    if np.prod([len(o) for o in options], dtype=float) <= max_events:
        combos = [c for c in itertools.product(*options) if any(v is not None for v in c)]
    else:
        combos = []
        for i in range(ncoord):
            for q in range(len(thresholds[i])):
                c = [None] * ncoord
                c[i] = q
                combos.append(tuple(c))
    ind = np.ones((block.shape[0], len(combos)))
    for e, combo in enumerate(combos):
        for i, q in enumerate(combo):
            if q is not None:
                ind[:, e] *= block[:, i] <= thresholds[i][q]
    return ind


def empirical_alpha(paths, lags, quantiles=(0.25, 0.5, 0.75), w: int = 1) -> MixingCurve:
    """Restricted-family covariance diagnostic; a lower-bound diagnostic, never an estimate of the sup.

    ``paths`` is (T, c) for one path (time averages) or (R, T, c) for an
    ensemble (pooled over replications and times); c columns hold X and Y
    coordinates side by side.
    """
    arr = np.asarray(paths, dtype=float)
    if arr.ndim == 1:
        arr = arr[None, :, None]
    elif arr.ndim == 2:
        arr = arr[None]
    R, T, c = arr.shape
    lags = np.asarray(lags, dtype=np.int64)
    if lags.size == 0 or np.any(lags < 1):
        raise ValueError("lags must be positive")
    usable = R * (T - int(lags.max()) - 2 * (w - 1))
    if usable < 30:
        raise ValueError("path too short: fewer than 30 usable pairs at the largest lag")
    flat = arr.reshape(-1, c)
    thresholds = [list(np.quantile(flat[:, i], quantiles)) for i in range(c)] * w
    # block at time t covers t-w+1..t for the past and t..t+w-1 for the future
    nb = T - w + 1
    blocks = np.concatenate([arr[:, s:s + nb] for s in range(w)], axis=2)  # (R, nb, c*w)
    ind = _indicator_family(blocks.reshape(-1, c * w), thresholds).reshape(R, nb, -1)
    vals, ses = [], []
    for n in lags:
        shift = int(n) + w - 1
        m = nb - shift
        G = ind[:, :m].reshape(-1, ind.shape[2])
        H = ind[:, shift:shift + m].reshape(-1, ind.shape[2])
        N = G.shape[0]
        pG, pH = G.mean(0), H.mean(0)
        cov = (G.T @ H) / N - np.outer(pG, pH)
        a, b = np.unravel_index(np.argmax(np.abs(cov)), cov.shape)
        vals.append(abs(cov[a, b]))
        ses.append(math.sqrt(max(pG[a] * (1 - pG[a]) * pH[b] * (1 - pH[b]), 0.0) / N))
    return MixingCurve(lags, vals, "alpha", "empirical-lower-diagnostic",
                       {"quantiles": list(quantiles), "w": w, "se": ses,
                        "note": "lower-bound diagnostic, not an estimator of the sup"})


# ---------------------------------------------------------------------------
# transfer and main bounds
# ---------------------------------------------------------------------------

def _as_b(b):
    if callable(b):
        return lambda k: float(b(int(k)))
    arr = np.asarray(b, dtype=float)

    def f(k):
        if not 0 <= k < arr.size:
            raise ValueError(f"b undefined at {k}")
        return float(arr[k])

    return f


def transfer_bound(alphaY, b, p: int, n: int, detail: bool = False):
    """min over 0 <= m < floor(n/p) of alpha^Y(m p) + b(floor(n/p) - 1 - m)."""
    if p < 1:
        raise ValueError("p must be >= 1")
    if n < p:
        raise ValueError("n must be >= p")
    a, bf = as_rate(alphaY), _as_b(b)
    N = n // p
    best, arg = math.inf, None
    for m in range(N):
        v = a(m * p) + bf(N - 1 - m)
        if v < best:
            best, arg = v, m
    return (best, arg) if detail else best


@dataclass
class BoundParams:
    r: object  # array indexed from 0, SummabilityReport, or callable i -> r_i
    kappa: float
    c: float
    alphaY: object
    p: int = 1
    r_form: str = "geometric"
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0 < self.kappa < 1:
            raise ValueError("kappa must lie in (0, 1)")
        if self.c <= 0:
            raise ValueError("c must be positive")

    def r_values(self, n: int) -> np.ndarray:
        """r_1..r_n (index 0 unused, set to r_0 when available)."""
        r = self.r
        if hasattr(r, "r_at"):
            return np.array([r.r_at(i) for i in range(n + 1)])
        if callable(r):
            return np.array([float(r(i)) for i in range(n + 1)])
        arr = np.asarray(r, dtype=float)
        if arr.size < n + 1:
            raise ValueError(f"r undefined beyond index {arr.size - 1} (need {n})")
        return arr[:n + 1]


def _alpha_values(params: BoundParams, n: int) -> np.ndarray:
    a = as_rate(params.alphaY)
    return np.array([a(k) for k in range(n + 1)])


def main_bound(params: BoundParams, n: int, variant: str = "theorem"):
    """c * min_{1<=i<=q<=n} (r_i + kappa^{n/q} + alpha^Y(lag)), exhaustive.

    ``variant="theorem"`` uses lag q+1-i; ``"extended"`` uses q-i.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if variant not in ("theorem", "extended"):
        raise ValueError("variant must be 'theorem' or 'extended'")
    r = params.r_values(n)
    shift = 1 if variant == "theorem" else 0
    alpha = _alpha_values(params, n + 1)
    best, arg = math.inf, None
    for q in range(1, n + 1):
        i = np.arange(1, q + 1)
        vals = r[i] + params.kappa ** (n / q) + alpha[q + shift - i]
        k = int(np.argmin(vals))
        if vals[k] < best:
            best, arg = float(vals[k]), (int(i[k]), q)
    return params.c * best, arg


@dataclass
class RateTable:
    n: np.ndarray
    envelope: np.ndarray
    i: np.ndarray
    q: np.ndarray
    case: str

    def rows(self):
        header = ["n", "envelope", "i", "q"]
        return header, [[int(a), e, int(b), int(c)] for a, e, b, c in
                        zip(self.n, self.envelope, self.i, self.q)]


def rate_table(case: str, params: BoundParams, n_grid, a: Optional[float] = None,
               c_q: Optional[float] = None, variant: str = "theorem") -> RateTable:
    """Envelope from the plug-in schedules i = [q/2] with q ~ sqrt(n) (geometric)
    or q ~ c_q n / log n (power a)."""
    if params.r_form != "geometric":
        raise ValueError("the recipes need geometric r (long-term contractivity)")
    if case not in ("geometric", "power"):
        raise ValueError("case must be 'geometric' or 'power'")
    if case == "power":
        if a is None or a <= 0:
            raise ValueError("power case needs a > 0")
        c_q = -math.log(params.kappa) / (a + 1) if c_q is None else c_q
    shift = 1 if variant == "theorem" else 0
    alpha = as_rate(params.alphaY)
    ns = np.asarray(n_grid, dtype=np.int64)
    r_all = params.r_values(int(ns.max()))
    env, iv, qv = [], [], []
    for n in ns:
        n = int(n)
        if case == "geometric":
            q = max(1, int(round(math.sqrt(n))))
        else:
            q = 1 if n < 3 else max(1, min(n, int(c_q * n / math.log(n))))
        i = max(1, q // 2)
        env.append(params.c * (r_all[i] + params.kappa ** (n / q) + alpha(q + shift - i)))
        iv.append(i)
        qv.append(q)
    return RateTable(ns, np.array(env), np.array(iv), np.array(qv), case)


# ---------------------------------------------------------------------------
# products of dependent factors
# ---------------------------------------------------------------------------

def product_bound_theta(kind: str, coeff: float, theta_hat: float,
                        theta_bar: Optional[float] = None, n: int = 1) -> float:
    """Bounds on E[Theta_1 ... Theta_n] under one-step psi, phi or alpha mixing."""
    if kind not in KINDS:
        raise ValueError(f"unknown kind {kind!r}")
    if not theta_hat < 1:
        raise ValueError("theta_hat must be < 1")
    if n < 1:
        raise ValueError("n must be >= 1")
    if kind == "psi":
        return (1 + coeff) ** (n - 1) * theta_hat ** n
    if theta_bar is None or not math.isfinite(theta_bar):
        raise ValueError(f"{kind} bound needs a finite theta_bar")
    if kind == "phi":
        return (coeff * theta_bar + theta_hat) ** (n - 1) * theta_hat
    if not theta_hat < theta_bar:
        raise ValueError("alpha bound needs theta_hat < theta_bar")
    return coeff * theta_bar ** n / (1 - theta_hat / theta_bar) + theta_hat ** n


@dataclass
class BlockBound:
    p: int
    delta: float
    c: float
    kappa: float
    kappa_block: float
    bound: float
    base: float

    def envelope(self, n):
        return self.c * self.kappa ** np.asarray(n, dtype=float)


def block_product_bound(gamma_hat: float, gamma_bar: Optional[float], decay: Callable[[int], float],
                        n: int, kind: str = "psi", p_cap: int = 10_000) -> BlockBound:
    """Bound on sup_j E[(gamma_{j+1} ... gamma_{j+n})^delta] via blocks of stride p.

    With base = phi(p) gamma_bar + gamma_hat (phi) or (1 + psi(p)) gamma_hat (psi)
    and q = floor(n/p), the Hoelder step gives base^{q/2}. Since q >= n/p - 1,
    this is at most c kappa^n with c = base^{-1/2} and kappa = base^{1/(2p)}.
    ``kappa_block`` = base^{1/2} is the contraction per block of p steps.
    """
    if not gamma_hat < 1:
        raise ValueError("gamma_hat must be < 1")
    if kind not in ("phi", "psi"):
        raise ValueError("kind must be 'phi' or 'psi'")
    if kind == "phi" and gamma_bar is None:
        raise ValueError("phi case needs gamma_bar")
    for p in range(2, p_cap + 1):
        base = decay(p) * gamma_bar + gamma_hat if kind == "phi" else (1 + decay(p)) * gamma_hat
        if base < 1:
            break
    else:
        raise ValueError("bound unavailable: no admissible p below the cap")
    q = n // p
    return BlockBound(p, 1.0 / (2 * p - 1), base ** -0.5, base ** (1.0 / (2 * p)),
                      base ** 0.5, base ** (q / 2), base)


def useful_bound(delta: float, ell: float, M: float, n: int) -> float:
    """e^{-delta n ell} + 2 delta sqrt(pi) sqrt(M n) e^{delta^2 M n / 4 - delta n ell}."""
    if delta < 0 or ell <= 0 or M <= 0 or n < 1:
        raise ValueError("need delta >= 0, ell > 0, M > 0, n >= 1")
    return (math.exp(-delta * n * ell)
            + 2 * delta * math.sqrt(math.pi) * math.sqrt(M * n)
            * math.exp(delta * delta * M * n / 4 - delta * n * ell))


def useful_admissible(delta: float, ell: float, M: float) -> bool:
    return 0 < delta < 4 * ell / M


def rio_bound(M: float, v_q: float, q: int, lam: float, Mn: float, alpha_q1: float) -> float:
    """4 exp(-(v_q/(2qM)) log(1 + lam q M / v_q)) + 4 Mn alpha_{q+1} / lam."""
    if q <= 1:
        raise ValueError("q must exceed 1")
    if M <= 0 or v_q <= 0 or lam <= 0:
        raise ValueError("M, v_q and lam must be positive")
    if lam < q * M:
        raise ValueError("lam must be >= q M")
    return (4 * math.exp(-(v_q / (2 * q * M)) * math.log1p(lam * q * M / v_q))
            + 4 * Mn * alpha_q1 / lam)


def sufexp(c1: float, c2: float, n: int, delta: float, q: int, alpha_q1: float) -> float:
    return c1 * (math.exp(-c2 * n * delta / q) + alpha_q1)


def merlevede_bound(C: float, M: float, delta: float, n: int) -> float:
    """exp(-C delta^2 n / (M^2 + M delta log n log log n))."""
    if n < 3:
        raise ValueError("n must be >= 3")
    if C <= 0 or M <= 0 or delta < 0:
        raise ValueError("need C > 0, M > 0, delta >= 0")
    ln = math.log(n)
    return math.exp(-C * delta * delta * n / (M * M + M * delta * ln * math.log(ln)))


@dataclass
class ProductsParams:
    """Inputs for the p_n / d_n / r_n bounds on products of gamma factors.

    p_n route: ``rio`` (needs M, v_per_step, gap, q, alpha), ``merlevede``
    (needs C, M, gap) or ``given`` (needs pn). d_n route: ``exp`` (needs EK,
    L, lam) or ``moment`` (needs L, k, s).
    """

    delta1: float
    route: str = "rio"
    dn_route: str = "exp"
    M: Optional[float] = None
    v_per_step: Optional[float] = None
    gap: Optional[float] = None
    q: int = 2
    alpha: Optional[Callable[[int], float]] = None
    Mn: Optional[Callable[[int], float]] = None
    C: Optional[float] = None
    pn: Optional[Callable[[int], float]] = None
    EK: Optional[float] = None
    L: Optional[float] = None
    lam: Optional[float] = None
    k: Optional[float] = None
    s: float = 1.0
    tail_terms: int = 5000


def _need(params, *names):
    missing = [n for n in names if getattr(params, n) is None]
    if missing:
        raise ValueError(f"missing constants for route: {', '.join(missing)}")


def pn_bound(params: ProductsParams, n: int) -> float:
    if params.route == "given":
        _need(params, "pn")
        return float(params.pn(n))
    if params.route == "rio":
        _need(params, "M", "v_per_step", "gap")
        lam = 2 * n * params.gap / 7
        if lam < params.q * params.M:
            return 1.0
        alpha = 0.0 if params.alpha is None else params.alpha(params.q + 1)
        Mn = n * params.M if params.Mn is None else params.Mn(n)
        return min(1.0, rio_bound(params.M, n * params.v_per_step, params.q, lam, Mn, alpha))
    if params.route == "merlevede":
        _need(params, "C", "M", "gap")
        return 1.0 if n < 3 else min(1.0, merlevede_bound(params.C, params.M, params.gap, n))
    raise ValueError(f"unknown route {params.route!r}")


def dn_bound(params: ProductsParams, n: int, pn: Optional[float] = None) -> float:
    pn = pn_bound(params, n) if pn is None else pn
    if params.dn_route == "exp":
        _need(params, "EK", "L", "lam")
        plogp = pn * math.log(pn) if pn > 0 else 0.0
        return (params.EK * math.exp(-n * params.delta1) - params.L / params.lam * plogp
                + params.L * pn)
    if params.dn_route == "moment":
        _need(params, "L", "k")
        k = params.k
        return params.L ** (1 / k) * (pn ** ((k - 1) / k) + math.exp(-n * params.s * params.delta1))
    raise ValueError(f"unknown d_n route {params.dn_route!r}")


def products_pn_and_dn(params: ProductsParams, n: int):
    """(p_n bound, d_n bound, r_n bound); r_n sums d_m for m = n..n+tail_terms."""
    pn = pn_bound(params, n)
    dn = dn_bound(params, n, pn)
    rn = math.fsum(dn_bound(params, m) for m in range(n, n + params.tail_terms))
    return pn, dn, rn

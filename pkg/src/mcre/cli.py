"""Command-line harness: ``mcre <subcommand> --config <file> [overrides]``.

Configs are INI files. Arrays are comma lists; matrix rows are separated by
``;`` and the environment blocks of a kernel table by ``|``. ``--config``
accepts a path or the name of a bundled config (see ``mcre list-configs``).

Exit codes: 2 parse error, 3 validation error (message names the field),
4 runtime error.
"""
from __future__ import annotations

import argparse
import configparser
import sys
from contextlib import contextmanager
from fractions import Fraction
from importlib import resources
from pathlib import Path

import numpy as np

from . import certify, couple, dynamics, econ, mixing, oracle, sgld
from ._common import Stream, binomial_z, derive_seed, run_blocks
from .io import OutputWriter, config_hash

EXIT_PARSE, EXIT_VALIDATION, EXIT_RUNTIME = 2, 3, 4
NOT_HASHED = {("output", "dir")}


class ParseError(Exception):
    pass


class ConfigError(Exception):
    pass


@contextmanager
def validating(path: str):
    try:
        yield
    except ConfigError:
        raise
    except (ValueError, KeyError, TypeError, IndexError) as e:
        raise ConfigError(f"{path}: {e}") from e


# ---------------------------------------------------------------------------
# config access
# ---------------------------------------------------------------------------

def bundled_configs() -> list:
    root = resources.files("mcre") / "configs"
    return sorted(p.name for p in root.iterdir() if p.name.endswith((".ini", ".txt")))


def resolve_config(name: str) -> Path:
    p = Path(name)
    if p.exists():
        return p
    root = resources.files("mcre") / "configs"
    for cand in (name, f"{name}.ini"):
        q = root / cand
        if q.is_file():
            return Path(str(q))
    raise ParseError(f"config {name!r} not found (bundled: {', '.join(bundled_configs())})")


def load_config(name) -> configparser.ConfigParser:
    cfg = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    if name is None:
        return cfg
    path = resolve_config(name)
    try:
        cfg.read_string(path.read_text(), source=str(path))
    except configparser.Error as e:
        raise ParseError(str(e)) from e
    cfg.base_dir = path.parent  # for relative kernel files
    return cfg


def canonical_text(cfg: configparser.ConfigParser) -> str:
    lines = []
    for sec in sorted(cfg.sections()):
        lines.append(f"[{sec}]")
        for k in sorted(cfg[sec]):
            if (sec, k) not in NOT_HASHED:
                lines.append(f"{k} = {cfg[sec][k].strip()}")
    return "\n".join(lines) + "\n"


def _raw(cfg, sec, key, default):
    if cfg.has_option(sec, key):
        return cfg.get(sec, key).strip()
    if default is _REQ:
        raise ConfigError(f"{sec}.{key}: missing")
    return default


_REQ = object()


def get_str(cfg, sec, key, default=_REQ):
    return _raw(cfg, sec, key, default)


def get_float(cfg, sec, key, default=_REQ):
    v = _raw(cfg, sec, key, default)
    if v is None or isinstance(v, float):
        return v
    try:
        return float(Fraction(v)) if "/" in str(v) else float(v)
    except ValueError as e:
        raise ConfigError(f"{sec}.{key}: not a number ({v!r})") from e


def get_int(cfg, sec, key, default=_REQ):
    v = _raw(cfg, sec, key, default)
    if v is None or isinstance(v, int):
        return v
    try:
        return int(v)
    except ValueError as e:
        raise ConfigError(f"{sec}.{key}: not an integer ({v!r})") from e


def get_bool(cfg, sec, key, default=_REQ):
    v = _raw(cfg, sec, key, default)
    if isinstance(v, bool) or v is None:
        return v
    if v.lower() in ("1", "true", "yes", "on"):
        return True
    if v.lower() in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{sec}.{key}: not a boolean ({v!r})")


def _floats(text, where):
    parts = [p for p in text.replace(",", " ").split()]
    try:
        return [float(Fraction(p)) if "/" in p else float(p) for p in parts]
    except ValueError as e:
        raise ConfigError(f"{where}: bad number list ({text!r})") from e


def get_list(cfg, sec, key, default=_REQ):
    v = _raw(cfg, sec, key, default)
    if not isinstance(v, str):
        return v
    return _floats(v, f"{sec}.{key}")


def get_grid(cfg, sec, key, default=_REQ):
    """Integer grid: comma list, or ``a..b`` for an inclusive range; must be nonempty."""
    v = _raw(cfg, sec, key, default)
    if not isinstance(v, str):
        out = list(v) if v is not None else None
    elif ".." in v:
        a, b = v.split("..", 1)
        try:
            out = list(range(int(a), int(b) + 1))
        except ValueError as e:
            raise ConfigError(f"{sec}.{key}: bad range ({v!r})") from e
    else:
        out = [int(x) for x in _floats(v, f"{sec}.{key}")]
    if out is not None and len(out) == 0:
        raise ConfigError(f"{sec}.{key}: grid is empty")
    return out


def get_matrix(cfg, sec, key, default=_REQ):
    v = _raw(cfg, sec, key, default)
    if not isinstance(v, str):
        return v
    rows = [_floats(r, f"{sec}.{key}") for r in v.split(";") if r.strip()]
    if len({len(r) for r in rows}) != 1:
        raise ConfigError(f"{sec}.{key}: ragged matrix")
    return np.array(rows)


def get_tensor(cfg, sec, key, default=_REQ):
    v = _raw(cfg, sec, key, default)
    if not isinstance(v, str):
        return v
    blocks = []
    for b in v.split("|"):
        rows = [_floats(r, f"{sec}.{key}") for r in b.split(";") if r.strip()]
        blocks.append(rows)
    try:
        return np.array(blocks, dtype=float)
    except ValueError as e:
        raise ConfigError(f"{sec}.{key}: ragged table") from e


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------

def build_env(cfg, sec="env"):
    if not cfg.has_section(sec):
        raise ConfigError(f"{sec}: section missing")
    kind = get_str(cfg, sec, "kind")
    with validating(sec):
        if kind == "logistic-stream":
            return sgld.LogisticStream(
                theta_true=np.array(get_list(cfg, sec, "theta_true", [1.0])),
                P=get_matrix(cfg, sec, "P", np.array([[0.9, 0.1], [0.1, 0.9]])),
                means=get_matrix(cfg, sec, "means", None),
                sd=get_float(cfg, sec, "sd", 1.0),
                kind=get_str(cfg, sec, "stream", "markov"))
        params = {}
        if kind == "finite-markov":
            params["P"] = get_matrix(cfg, sec, "P")
            if cfg.has_option(sec, "init"):
                params["init"] = np.array(get_list(cfg, sec, "init"))
        elif kind == "iid":
            params["dist"] = get_str(cfg, sec, "dist", "normal")
            for k in ("p", "mean", "std", "low", "high", "mu", "sigma", "value"):
                if cfg.has_option(sec, k):
                    params[k] = get_float(cfg, sec, k)
            if cfg.has_option(sec, "probs"):
                params["probs"] = np.array(get_list(cfg, sec, "probs"))
        elif kind in ("gaussian-ar1", "threshold-modulated"):
            for k in ("a", "sigma", "mean", "threshold", "noise_sd"):
                if cfg.has_option(sec, k):
                    params[k] = get_float(cfg, sec, k)
            if cfg.has_option(sec, "levels"):
                params["levels"] = get_list(cfg, sec, "levels")
        elif kind == "m-dependent":
            params["m"] = get_int(cfg, sec, "m", 1)
            if cfg.has_option(sec, "weights"):
                params["weights"] = get_list(cfg, sec, "weights")
            params["std"] = get_float(cfg, sec, "std", 1.0)
        else:
            raise ConfigError(f"{sec}.kind: unknown environment kind {kind!r}")
        return dynamics.EnvironmentSpec(
            kind, get_int(cfg, sec, "dimension", 1), params,
            stationary=get_bool(cfg, sec, "stationary", True),
            two_sided=get_bool(cfg, sec, "two_sided", True), name=get_str(cfg, sec, "name", kind))


def build_kernel(cfg, sec="kernel"):
    if not cfg.has_section(sec):
        raise ConfigError(f"{sec}: section missing")
    kind = get_str(cfg, sec, "kind")
    with validating(sec):
        if kind == "finite":
            if cfg.has_option(sec, "file"):
                path = Path(get_str(cfg, sec, "file"))
                if not path.is_absolute():
                    path = Path(getattr(cfg, "base_dir", ".")) / path
                return dynamics.load_finite_kernel(path)
            return dynamics.finite_kernel(get_tensor(cfg, sec, "table"))
        if kind == "ar1":
            return dynamics.ar1_kernel(get_float(cfg, sec, "a"), get_float(cfg, sec, "sigma", 1.0))
        if kind == "varx":
            return dynamics.varx_kernel(get_matrix(cfg, sec, "A"), get_matrix(cfg, sec, "B", None),
                                        get_float(cfg, sec, "noise_sd", 1.0))
        if kind in ("threshold-ar", "persistent-ar", "linear-ar"):
            return econ.location_scale_kernel(build_model(cfg, sec))
        raise ConfigError(f"{sec}.kind: unknown kernel kind {kind!r}")


def build_model(cfg, sec="model"):
    kind = get_str(cfg, sec, "kind")
    with validating(sec):
        if kind == "threshold-ar":
            keys = ("a0", "a1", "a2", "thr", "b0", "b1", "b2")
            kw = {k: get_float(cfg, sec, k) for k in keys if cfg.has_option(sec, k)}
            return econ.threshold_ar(noise=get_str(cfg, sec, "noise", "normal"), **kw)
        if kind == "persistent-ar":
            return econ.persistent_ar(get_float(cfg, sec, "sigma0", 1.0))
        if kind == "linear-ar":
            return econ.linear_ar(get_float(cfg, sec, "rho", 0.5), get_float(cfg, sec, "beta", 0.5),
                                  get_float(cfg, sec, "sigma0", 1.0))
        raise ConfigError(f"{sec}.kind: unknown model kind {kind!r}")


def _run(cfg, key, default=_REQ, kind="int"):
    getter = {"int": get_int, "float": get_float, "grid": get_grid, "list": get_list,
              "str": get_str}[kind]
    return getter(cfg, "run", key, default)


def _seed(cfg):
    s = _run(cfg, "seed", 0)
    if not 0 <= s < 2 ** 64:
        raise ConfigError("run.seed: must be a 64-bit unsigned integer")
    return s


def _positive(cfg, key, default=_REQ):
    v = _run(cfg, key, default)
    if v is not None and v < 1:
        raise ConfigError(f"run.{key}: must be >= 1")
    return v


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------

def exp_simulate(cfg, w: OutputWriter, threads: int):
    env = build_env(cfg)
    kern = build_kernel(cfg)
    seed, reps, horizon = _seed(cfg), _positive(cfg, "reps", 100), _positive(cfg, "horizon", 100)
    keep = min(reps, _run(cfg, "paths_out", 5))
    x0 = get_list(cfg, "run", "x0", [0.0])
    x0 = int(x0[0]) if kern.finite else np.array(x0)
    finite_env = getattr(env, "finite", False)

    def block(b, start, stop):
        vals = np.asarray(env.sample(0, horizon * kern.p - 1, derive_seed(seed, Stream.ENV, b),
                                     reps=stop - start).values)
        vals = dynamics.block_env(vals, kern.p, finite_env)
        return dynamics.simulate_batch(kern, vals, x0, seed, horizon, block=b)

    paths = np.concatenate(run_blocks(block, reps, threads), axis=0)
    rows = []
    for r in range(keep):
        for t in range(horizon + 1):
            xv = paths[r, t]
            rows.append([r, t] + (list(np.atleast_1d(xv))))
    dim = 1 if kern.finite else kern.state_dim
    w.csv("paths.csv", ["rep", "t"] + [f"x{k}" for k in range(dim)], rows)
    summary = {"reps": reps, "horizon": horizon, "kernel": kern.name}
    if kern.finite:
        counts = np.stack([(paths == s).mean(axis=0) for s in range(kern.n_states)], axis=1)
        se = np.sqrt(counts * (1 - counts) / reps)
        occ_rows = []
        exact = None
        if finite_env:
            P, init = env.finite_chain()
            exact = oracle.state_marginals(P, init, kern.table, np.eye(kern.n_states)[x0], horizon)
        for t in range(horizon + 1):
            for s in range(kern.n_states):
                ex = exact[t, s] if exact is not None else np.nan
                occ_rows.append([t, s, counts[t, s], se[t, s], ex])
        w.csv("occupation.csv", ["t", "state", "empirical", "stderr", "exact"], occ_rows)
        if exact is not None:
            z = np.abs(counts - exact) / np.where(se > 0, se, np.inf)
            summary["max_abs_z"] = float(np.max(z))
    else:
        summary["mean_final"] = np.mean(paths[:, -1], axis=0).tolist()
    w.json("summary.json", summary)


def _finite_parts(cfg, env, kern):
    if not (kern.finite and getattr(env, "finite", False)):
        raise ConfigError("kernel.kind: oracle experiments need a finite kernel and environment")
    small = get_list(cfg, "run", "V", None)
    minor = certify.finite_minorization(kern, small)
    P, init = env.finite_chain()
    return minor, P, init


def exp_couple(cfg, w: OutputWriter, threads: int):
    env = build_env(cfg)
    kern = build_kernel(cfg)
    seed, reps = _seed(cfg), _positive(cfg, "reps", 10_000)
    n_grid = _run(cfg, "n_grid", list(range(0, 21)), "grid")
    j_grid = _run(cfg, "j_grid", [0], "grid")
    R = _run(cfg, "R", 1.0, "float")
    if kern.finite:
        x0 = _run(cfg, "x0", 0)
        x_init = _run(cfg, "x_init", 0)
        minor, P, init = _finite_parts(cfg, env, kern)
        ck = couple.CouplingKernel(kern, minor, R)
        bc = couple.estimate_b(ck, env, x0, x_init, 1, n_grid, j_grid, reps, seed, threads)
        dob = minor.meta["doeblin"](R)
        x_law = np.eye(kern.n_states)[x_init]
        n_max = max(n_grid)
        curves = {j: oracle.exact_noncoupling(P, init, kern.table, dob, x_law, x0, j, n_max)
                  for j in sorted(set(j_grid))}
        exact = np.max(np.stack([curves[j] for j in curves]), axis=0)[bc.n]
        jarg = np.array(sorted(curves))[np.argmax(np.stack([curves[j] for j in sorted(curves)]),
                                                  axis=0)][bc.n]
        w.csv("b_curve.csv", *bc.rows())
        w.csv("exact_b.csv", ["n", "estimate", "stderr", "j_argmax"],
              [[int(n), e, 0.0, int(j)] for n, e, j in zip(bc.n, exact, jarg)])
        zs = [binomial_z(bc.per_j[j], curves[j][bc.n], reps) for j in curves]
        zmax = float(np.max(np.stack(zs)))
        w.json("summary.json", {"reps": reps, "R": R, "max_abs_z_per_j": zmax,
                                "agree_3sigma": bool(zmax <= 3.0)})
    else:
        x0 = np.array(get_list(cfg, "run", "x0", [0.0]))
        a, sigma = kern.meta["A"][0, 0], kern.meta["noise_sd"]
        minor = certify.ar1_minorization(a, sigma, kern.meta["B"][0, 0])
        ck = couple.CouplingKernel(kern, minor, R)
        spread = get_float(cfg, "run", "init_sd", 2.0)

        def init(rng, n):
            return spread * dynamics.gaussian_quantile(rng.random((n, 1)))

        bc = couple.estimate_b(ck, env, x0, init, 1, n_grid, j_grid, reps, seed, threads)
        w.csv("b_curve.csv", *bc.rows())
        w.json("summary.json", {"reps": reps, "R": R, "loglinear_fit": bc.loglinear_fit()})


def exp_oracle(cfg, w: OutputWriter, threads: int):
    env = build_env(cfg)
    kern = build_kernel(cfg)
    minor, P, init = _finite_parts(cfg, env, kern)
    R = _run(cfg, "R", 1.0, "float")
    x0, x_init = _run(cfg, "x0", 0), _run(cfg, "x_init", 0)
    n_max = max(_run(cfg, "n_grid", list(range(0, 21)), "grid"))
    window = _run(cfg, "j_grid", list(range(0, 11)), "grid")
    dob = minor.meta["doeblin"](R)
    x_law = np.eye(kern.n_states)[x_init]
    b, jarg = oracle.exact_b(P, init, kern.table, dob, x_law, x0, window, n_max)
    w.csv("exact_b.csv", ["n", "estimate", "stderr", "j_argmax"],
          [[n, b[n], 0.0, int(jarg[n])] for n in range(n_max + 1)])
    J = oracle.joint_transition(P, kern.table)
    jinit = oracle.joint_initial(init, x_law)
    lags = list(range(1, n_max + 1))
    axy = mixing.exact_alpha_curve(J, jinit, lags, window)
    ay = mixing.exact_alpha_curve(P, init, lags, window)
    w.csv("alpha_xy.csv", *axy.rows())
    w.csv("alpha_y.csv", *ay.rows())
    rows = []
    for n in lags:
        tb = mixing.transfer_bound(ay, b, 1, n)
        rows.append([n, tb, axy.raw[n - 1], bool(tb + 1e-12 >= axy.raw[n - 1])])
    w.csv("transfer.csv", ["n", "transfer_bound", "exact_alpha_xy", "dominates"], rows)
    tv = oracle.stationary_tv(P, dynamics.stationary_distribution(P), kern.table, x0, n_max)
    w.csv("stationary_tv.csv", ["n", "tv"], [[n, v] for n, v in enumerate(tv)])
    w.json("summary.json", {"R": R, "window": window, "all_dominated": all(r[3] for r in rows)})


def _alpha_descriptor(cfg, sec):
    form = get_str(cfg, sec, "alpha_form", "zero-after-lag")
    with validating(f"{sec}.alpha_form"):
        if form == "geometric":
            return dynamics.MixingRateDescriptor("geometric", c=get_float(cfg, sec, "alpha_c", 0.25),
                                                 rho=get_float(cfg, sec, "alpha_rho"))
        if form == "power":
            return dynamics.MixingRateDescriptor("power", c=get_float(cfg, sec, "alpha_c", 0.25),
                                                 a=get_float(cfg, sec, "alpha_a"))
        if form == "zero-after-lag":
            return dynamics.MixingRateDescriptor("zero-after-lag", m=get_int(cfg, sec, "alpha_m", 0))
        raise ConfigError(f"{sec}.alpha_form: unknown form {form!r}")


def _bound_params(cfg, sec="bounds", n_max=1000):
    rr = get_float(cfg, sec, "r_rate", 0.5)
    rc = get_float(cfg, sec, "r_const", 1.0)
    with validating(sec):
        r = rc * rr ** np.arange(n_max + 2)
        return mixing.BoundParams(r, get_float(cfg, sec, "kappa", 0.5), get_float(cfg, sec, "c", 1.0),
                                  _alpha_descriptor(cfg, sec), p=get_int(cfg, sec, "p", 1))


def exp_mixing_bounds(cfg, w: OutputWriter, threads: int):
    n_grid = get_grid(cfg, "bounds", "n_grid", list(range(1, 201)))
    variant = get_str(cfg, "bounds", "variant", "theorem")
    params = _bound_params(cfg, n_max=max(n_grid))
    rows = []
    with validating("bounds.variant"):
        for n in n_grid:
            v, (i, q) = mixing.main_bound(params, n, variant)
            rows.append([n, v, i, q])
    w.csv("main_bound.csv", ["n", "value", "i", "q"], rows)
    case = get_str(cfg, "bounds", "case", "geometric")
    with validating("bounds.case"):
        tab = mixing.rate_table(case, params, n_grid, a=get_float(cfg, "bounds", "a", None),
                                variant=variant)
    w.csv("rate_table.csv", *tab.rows())
    w.json("bounds.json", {"kappa": params.kappa, "c": params.c, "variant": variant, "case": case,
                           "r_rate": get_float(cfg, "bounds", "r_rate", 0.5),
                           "alpha": repr(params.alphaY), "constants": "inputs, not certified"})


def exp_certify(cfg, w: OutputWriter, threads: int):
    env = build_env(cfg)
    kern = build_kernel(cfg)
    seed = _seed(cfg)
    n_pairs, n_noise = _run(cfg, "n_pairs", 200), _run(cfg, "n_noise", 2000)
    L = _run(cfg, "L", 20)
    reps = _positive(cfg, "reps", 10_000)
    summary = {}
    if kern.finite:
        minor, P, init = _finite_parts(cfg, env, kern)
        R = _run(cfg, "R", 1.0, "float")
        small = np.flatnonzero(minor.V(np.arange(kern.n_states)) <= R)

        def sampler(rng, n):
            return small[rng.integers(0, small.size, n)], rng.integers(0, kern.n_env, n)

        rep = certify.verify_minorization_mc(kern, minor, R, [], sampler, n_pairs, 1, seed)
        w.csv("minorization.csv", *rep.rows())
        summary["minorization"] = rep.to_dict()
        if cfg.has_option("certificate", "gamma"):
            cert = certify.DriftCertificate(minor.V, get_list(cfg, "certificate", "gamma"),
                                            get_list(cfg, "certificate", "K"))
    else:
        model_kind = get_str(cfg, "kernel", "kind")
        if model_kind in ("threshold-ar", "persistent-ar", "linear-ar"):
            cert = econ.location_scale_certificate(build_model(cfg, "kernel"))
        else:
            A, B = kern.meta["A"], kern.meta["B"]
            M = get_float(cfg, "certificate", "M", max(certify.op_norm(A), certify.op_norm(B), 1.0))
            with validating("certificate"):
                cert = certify.varx_pstep_certificate(A, B, M, get_int(cfg, "certificate", "p", 0),
                                                      eps_mean_norm=kern.meta["noise_sd"])
            kern = dynamics.compose_kernel(kern, cert.p)
        box = get_float(cfg, "run", "x_box", 5.0)
        dim = kern.state_dim

        def sampler(rng, n):
            x = rng.uniform(-box, box, (n, dim))
            vals = np.asarray(env.sample(0, kern.p - 1, int(rng.integers(2 ** 63)), reps=n).values)
            vals = dynamics.block_env(vals, kern.p, False)[:, 0]
            return x, vals

        rep = certify.verify_drift_mc(kern, cert, sampler, n_pairs, n_noise, seed)
        w.csv("drift_check.csv", *rep.rows())
        summary["drift"] = rep.to_dict()
    if kern.finite and not cfg.has_option("certificate", "gamma"):
        w.json("summary.json", summary)
        return
    with validating("certificate"):
        dl = certify.estimate_dl(cert, env, L, tuple(_run(cfg, "sup_window", [-1, 0], "grid")),
                                 reps, derive_seed(seed, Stream.MISC), threads=threads)
    w.csv("dl.csv", *dl.rows())
    summary["summability"] = dl.to_dict()
    w.json("summary.json", summary)


def exp_sgld(cfg, w: OutputWriter, threads: int, args):
    c = args.c if args.c is not None else get_float(cfg, "sgld", "c", 2.0)
    with validating("sgld.c"):
        consts = sgld.logistic_constants(Fraction(str(c)))
    if args.lam is not None:
        lam_exact = Fraction(str(args.lam))
    elif args.lambda_star or not cfg.has_option("sgld", "lambda"):
        lam_exact = consts.lam_star
    else:
        lam_exact = Fraction(get_str(cfg, "sgld", "lambda"))
    beta = args.beta if args.beta is not None else get_float(cfg, "sgld", "beta", 1.0)
    dim = args.dim if args.dim is not None else get_int(cfg, "sgld", "dim", 1)
    horizon = _positive(cfg, "horizon", 200)
    reps = _positive(cfg, "reps", 2000)
    seed = _seed(cfg)
    n_max = args.n_max if args.n_max is not None else _run(cfg, "n_max", 40)
    if args.env:
        env_cfg = load_config(args.env)
        stream = build_env(env_cfg)
    elif cfg.has_section("env"):
        stream = build_env(cfg)
    else:
        stream = sgld.LogisticStream(theta_true=np.ones(dim), means=np.array([[-1.0] * dim,
                                                                              [1.0] * dim]))
    if not isinstance(stream, sgld.LogisticStream):
        raise ConfigError("env.kind: the sgld experiment needs a logistic-stream environment")
    if stream.d != dim:
        raise ConfigError(f"sgld.dim: {dim} differs from the stream dimension {stream.d}")
    R = args.R if args.R is not None else get_float(cfg, "sgld", "R", None)
    model = sgld.LogisticModel(float(consts.c), stream)
    w.meta.update({"lambda": float(lam_exact), "lambda_exact": str(lam_exact), "c": float(consts.c),
                   "beta_temp": beta, "dim": dim})
    bundle = sgld.run_logistic_experiment(model, horizon, reps, seed, lam=float(lam_exact),
                                          beta_temp=beta, R=R, n_max=n_max, threads=threads)
    summary = bundle.summary()
    summary["lambda_exact"] = str(lam_exact)
    w.json("summary.json", summary)
    if bundle.b_curve is not None:
        w.csv("b_curve.csv", *bundle.b_curve.rows())
        w.csv("dl.csv", *bundle.summability.rows())
        w.csv("moments.csv", *bundle.moments.rows())
    if bundle.alpha_diag is not None:
        w.csv("alpha_diag.csv", *bundle.alpha_diag.rows())


def exp_econ_simulate(cfg, w, threads):
    env = build_env(cfg)
    model = build_model(cfg)
    seed, reps, horizon = _seed(cfg), _positive(cfg, "reps", 5), _positive(cfg, "horizon", 500)
    x0 = _run(cfg, "x0", 0.0, "float")
    traj = env.sample(0, horizon - 1, derive_seed(seed, Stream.ENV), reps=reps)
    paths = econ.simulate_location_scale(model, traj, x0, horizon, derive_seed(seed, Stream.NOISE))
    ys = np.asarray(traj.values, dtype=float).reshape(reps, horizon, -1)
    rows = [[r, t, paths[r, t], ys[r, t, 0] if t < horizon else np.nan]
            for r in range(reps) for t in range(horizon + 1)]
    w.csv("paths.csv", ["rep", "t", "x", "y"], rows)
    ac = [float(np.corrcoef(p[1:-1], p[2:])[0, 1]) for p in paths]
    w.json("summary.json", {"lag1_autocorrelation": ac, "model": model.name})


def exp_econ_nw(cfg, w, threads):
    env = build_env(cfg)
    model = build_model(cfg)
    seed, n = _seed(cfg), _positive(cfg, "n", 2000)
    est = econ.NwEstimator(get_str(cfg, "nw", "kernel", "epanechnikov"),
                           get_float(cfg, "nw", "c_h", 1.0))
    c_rad = get_float(cfg, "nw", "c_rad", 1.0)
    gs = get_int(cfg, "nw", "grid_size", 21)
    res = econ.nw_fit_and_error(est, model, env, n, c_rad, seed, gs)
    w.csv("nw_grid.csv", *res.rows())
    summary = {"n": n, "h": res.h, "sup_error": res.sup_error, "excluded": res.excluded}
    seeds = get_int(cfg, "nw", "rate_seeds", 0)
    if seeds:
        summary["rate_check"] = econ.nw_rate_check(est, model, env, n, get_int(cfg, "nw", "factor", 16),
                                                   seeds, seed, c_rad, gs, threads)
    w.json("summary.json", summary)


def _dgp(cfg):
    with validating("dgp"):
        return econ.PoissonDGP(get_float(cfg, "dgp", "eta1", 1.0), get_float(cfg, "dgp", "eta2", 0.3),
                               tuple(get_list(cfg, "dgp", "eta_y", [0.5])),
                               tuple(get_list(cfg, "dgp", "eta_z", [])),
                               get_float(cfg, "dgp", "ar", 0.5))


def exp_econ_mle(cfg, w, threads):
    dgp = _dgp(cfg)
    seed, n = _seed(cfg), _positive(cfg, "n", 10_000)
    harness = econ.MleHarness.poisson(len(dgp.eta_y))
    X, Y = dgp.simulate(n, derive_seed(seed, Stream.ENV))
    fit = econ.mle_fit(harness, X, Y, seed)
    names = ["theta1", "theta2"] + [f"theta3_{k}" for k in range(len(dgp.eta_y))]
    truth = dgp.theta_true
    w.csv("theta.csv", ["parameter", "estimate", "stderr", "truth"],
          [[nm, t, s, truth[k] if truth is not None else np.nan]
           for k, (nm, t, s) in enumerate(zip(names, fit.theta, fit.se))])
    w.json("fit.json", {**fit.to_dict(), "well_specified": dgp.well_specified})


def exp_econ_clt(cfg, w, threads):
    dgp = _dgp(cfg)
    seed, n = _seed(cfg), _positive(cfg, "n", 10_000)
    reps = _positive(cfg, "reps", 500)
    level = _run(cfg, "level", 0.95, "float")
    harness = econ.MleHarness.poisson(len(dgp.eta_y))
    with validating("run.reps"):
        rep = econ.clt_coverage(harness, dgp, n, reps, level, seed, threads=threads)
    w.csv("coverage.csv", ["parameter", "coverage", "level"],
          [[k, c, level] for k, c in enumerate(rep.coverage)])
    w.json("summary.json", rep.to_dict())


def emit_rate_figures(w: OutputWriter, c_grid=None, params=None, n_grid=None) -> list:
    """lambda*(c), gamma*(c) curves and bound-vs-n envelopes; nothing when inputs are empty."""
    written = []
    if c_grid is not None and len(c_grid):
        c = np.asarray(c_grid, dtype=float)
        w.csv("lambda_star.csv", ["c", "lambda_star"], [[a, b] for a, b in
                                                        zip(c, sgld.lambda_star_curve(c))])
        w.csv("gamma_star.csv", ["c", "gamma_star"], [[a, b] for a, b in
                                                      zip(c, sgld.gamma_star_curve(c))])
        written += ["lambda_star.csv", "gamma_star.csv"]
    if params is not None and n_grid:
        rows = []
        tab = mixing.rate_table("geometric", params, n_grid)
        for n, env_v in zip(tab.n, tab.envelope):
            rows.append([int(n), mixing.main_bound(params, int(n))[0], env_v])
        w.csv("envelopes.csv", ["n", "main_bound", "envelope"], rows)
        written.append("envelopes.csv")
    return written


def exp_figures(cfg, w, threads, args):
    if args.c_grid is not None:
        c_grid = _floats(args.c_grid, "--c-grid") if args.c_grid.strip() else []
    else:
        step = get_float(cfg, "figures", "c_step", 0.01)
        c_grid = np.round(np.arange(0.5 + step, 10 + step / 2, step), 12)
    params, n_grid = None, None
    if cfg.has_section("bounds"):
        n_grid = get_grid(cfg, "bounds", "n_grid", list(range(1, 201)))
        params = _bound_params(cfg, n_max=max(n_grid))
    return emit_rate_figures(w, c_grid, params, n_grid)


EXPERIMENTS = {
    "simulate": exp_simulate, "couple": exp_couple, "oracle": exp_oracle,
    "mixing-bounds": exp_mixing_bounds, "certify": exp_certify,
    "econ-simulate": exp_econ_simulate, "econ-nw": exp_econ_nw, "econ-mle": exp_econ_mle,
    "econ-clt": exp_econ_clt,
}


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, config_required=False):
    p.add_argument("--config", required=config_required, help="config path or bundled name")
    p.add_argument("--seed", type=int)
    p.add_argument("--reps", type=int)
    p.add_argument("--horizon", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--threads", type=int, default=1, help="worker threads (speed only)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mcre", description="Markov chains in random environments")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("simulate", "certify", "couple", "mixing-bounds", "oracle"):
        _common(sub.add_parser(name), config_required=True)
    sp = sub.add_parser("sgld")
    _common(sp)
    sp.add_argument("--c", type=float)
    g = sp.add_mutually_exclusive_group()
    g.add_argument("--lambda", dest="lam", type=str)
    g.add_argument("--lambda-star", action="store_true")
    sp.add_argument("--beta", type=float)
    sp.add_argument("--dim", type=int)
    sp.add_argument("--env", help="config holding a logistic-stream [env] section")
    sp.add_argument("--R", type=float)
    sp.add_argument("--n-max", type=int)
    ep = sub.add_parser("econ")
    esub = ep.add_subparsers(dest="econ_command", required=True)
    for name in ("simulate", "nw", "mle", "clt"):
        _common(esub.add_parser(name), config_required=True)
    fp = sub.add_parser("figures")
    _common(fp)
    fp.add_argument("--c-grid", help="comma list of c values (empty for none)")
    sub.add_parser("list-configs")
    return ap


def run_experiment(args) -> int:
    if args.command == "list-configs":
        print("\n".join(bundled_configs()))
        return 0
    if args.command == "sgld" and args.config is None:
        args.config = "logistic"
    cfg = load_config(args.config)
    for key in ("seed", "reps", "horizon"):
        v = getattr(args, key, None)
        if v is not None:
            if not cfg.has_section("run"):
                cfg.add_section("run")
            cfg.set("run", key, str(v))
    name = args.command if args.command != "econ" else f"econ-{args.econ_command}"
    if args.command == "sgld":
        if not cfg.has_section("sgld"):
            cfg.add_section("sgld")
        for key, val in (("c", args.c), ("beta", args.beta), ("dim", args.dim), ("R", args.R),
                         ("lambda", args.lam), ("env", args.env)):
            if val is not None:
                cfg.set("sgld", key, str(val))
        if args.lambda_star:
            cfg.set("sgld", "lambda", "star")
    if args.command == "figures" and args.c_grid is not None:
        if not cfg.has_section("figures"):
            cfg.add_section("figures")
        cfg.set("figures", "c_grid", args.c_grid)
    declared = get_str(cfg, "experiment", "name", None) if cfg.has_section("experiment") else None
    # figures only reads the [bounds] section, so it accepts any config that has one
    if declared is not None and declared != name and name != "figures":
        raise ConfigError(f"experiment.name: config is for {declared!r}, not {name!r}")
    out = args.out or (get_str(cfg, "output", "dir", None) if cfg.has_section("output") else None)
    out = out or f"mcre_out/{name}"
    h = config_hash(canonical_text(cfg))
    w = OutputWriter(out, h, {"experiment": name})
    try:
        if name == "sgld":
            exp_sgld(cfg, w, args.threads, args)
        elif name == "figures":
            written = exp_figures(cfg, w, args.threads, args)
            if not written:
                return 0
        else:
            EXPERIMENTS[name](cfg, w, args.threads)
    except (ConfigError, ParseError):
        raise
    except Exception as e:  # simulation/runtime failure
        raise RuntimeError(f"{name}: {type(e).__name__}: {e}") from e
    w.finalize()
    print(str(w.dir))
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else EXIT_PARSE
    try:
        return run_experiment(args)
    except ParseError as e:
        print(f"parse error: {e}", file=sys.stderr)
        return EXIT_PARSE
    except ConfigError as e:
        print(f"validation error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except RuntimeError as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

"""Shared plumbing: keyed RNG streams, replication blocks, small numeric helpers."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from enum import IntEnum
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import isotonic_regression

BLOCK_SIZE = 4096
SEED_MAX = 2**64


class Stream(IntEnum):
    """Roles of random streams. Each role gets its own key space."""

    ENV = 1
    NOISE = 2
    INIT = 3
    COUPLE = 4
    RESIDUAL = 5
    BURN = 6
    SAMPLER = 7
    KAPPA = 8
    MISC = 9


def _zigzag(k: int) -> int:
    k = int(k)
    return 2 * k if k >= 0 else -2 * k - 1


def check_seed(seed) -> int:
    seed = int(seed)
    if not 0 <= seed < SEED_MAX:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    return seed


def make_rng(seed: int, *key: int) -> np.random.Generator:
    """Generator for the stream identified by ``(seed, *key)``.

    Keys may be negative (two-sided time indices); they are zigzag-encoded.
    """
    ss = np.random.SeedSequence(check_seed(seed), spawn_key=tuple(_zigzag(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


def rep_blocks(reps: int, size: int = BLOCK_SIZE):
    """Split ``reps`` replications into fixed-size blocks ``(index, start, stop)``."""
    if reps < 1:
        raise ValueError("reps must be >= 1")
    return [(b, s, min(s + size, reps)) for b, s in enumerate(range(0, reps, size))]


def run_blocks(fn: Callable[[int, int, int], object], reps: int, threads: int = 1,
               size: int = BLOCK_SIZE) -> list:
    """Evaluate ``fn(block, start, stop)`` over replication blocks.

    Blocks are keyed by index, never by worker, so results do not depend on
    ``threads``. Output order is block order.
    """
    blocks = rep_blocks(reps, size)
    if threads <= 1 or len(blocks) == 1:
        return [fn(*b) for b in blocks]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(lambda b: fn(*b), blocks))


def isotonic_nonincreasing(values: Sequence[float], weights=None) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return values.copy()
    return isotonic_regression(values, weights=weights, increasing=False).x


def mean_and_se(samples: np.ndarray, axis: int = 0):
    samples = np.asarray(samples, dtype=float)
    n = samples.shape[axis]
    mean = samples.mean(axis=axis)
    if n < 2:
        return mean, np.zeros_like(mean)
    return mean, samples.std(axis=axis, ddof=1) / np.sqrt(n)


def binomial_se(p, n):
    p = np.asarray(p, dtype=float)
    return np.sqrt(np.clip(p * (1 - p), 0.0, None) / n)


def binomial_z(freq, p, n):
    """|freq - p| in standard errors of a Binomial(n, p) frequency.

    The standard error is floored at the one-count resolution 1/n, so a
    single event against a vanishing exact probability is not read as a
    many-sigma miss.
    """
    freq, p = np.asarray(freq, dtype=float), np.asarray(p, dtype=float)
    se = np.maximum(binomial_se(p, n), 1.0 / n)
    return np.abs(freq - p) / se


def as_batch_states(x, finite: bool, dim: int) -> np.ndarray:
    """Coerce a batch of states to (N,) int for finite chains or (N, d) float."""
    if finite:
        return np.asarray(x, dtype=np.int64).reshape(-1)
    x = np.asarray(x, dtype=float)
    return x.reshape(-1, dim)


def states_equal(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim == 1:
        return a == b
    return np.all(a == b, axis=tuple(range(1, a.ndim)))


def derive_seed(seed: int, *key: int) -> int:
    """A 64-bit seed for a sub-task, derived from ``(seed, *key)``."""
    ss = np.random.SeedSequence(check_seed(seed), spawn_key=tuple(_zigzag(k) for k in key))
    lo, hi = ss.generate_state(2, np.uint32)
    return int(lo) | (int(hi) << 32)


def const_fn(value: float):
    """Batched constant function of an environment batch."""
    value = float(value)

    def f(y):
        return np.full(np.shape(y)[0], value)

    f.constant = value
    return f


def table_fn(values):
    """Batched lookup y -> values[y] for finite environments."""
    values = np.asarray(values, dtype=float)

    def f(y):
        return values[np.asarray(y, dtype=np.int64)]

    f.table = values
    return f


def as_env_fn(f):
    return f if callable(f) else const_fn(f)

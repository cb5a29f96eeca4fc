"""Alternative channel selectors, the exhaustive oracle and the comparison harness."""
from __future__ import annotations

import csv
import io
import itertools
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from prunekit.errors import CombinatorialGuardError
from prunekit.lasso import channel_responses, select_for_sparsity
from prunekit.reconstruction import lsq_error
from prunekit.sampler import SampleSet

LASSO = "lasso"
FIRST_K = "first_k"
MAX_RESPONSE = "max_response"
BRUTE_FORCE = "brute_force"
STRATEGIES = (LASSO, FIRST_K, MAX_RESPONSE, BRUTE_FORCE)
CSV_COLUMNS = ("strategy", "c", "c_prime", "relative_mse", "wall_ms")
SUBSET_GUARD = 10 ** 6


@dataclass
class StrategyOutcome:
    strategy: str
    c: int
    c_prime: int
    active: tuple
    relative_mse: float
    wall_ms: float = 0.0

    def row(self) -> dict:
        return {"strategy": self.strategy, "c": self.c, "c_prime": self.c_prime,
                "relative_mse": self.relative_mse, "wall_ms": self.wall_ms}


def select_first_k(c: int, c_prime: int) -> list:
    if c_prime > c:
        raise ValueError(f"c_prime={c_prime} exceeds c={c}")
    return list(range(c_prime))


def select_max_response(W, c_prime: int) -> list:
    """Channels with the largest absolute filter-weight sum; ties go to lower indices."""
    W = np.asarray(W, dtype=np.float64)
    if c_prime > W.shape[1]:
        raise ValueError(f"c_prime={c_prime} exceeds c={W.shape[1]}")
    score = np.abs(W).sum(axis=(0, 2, 3))
    order = np.argsort(-score, kind="stable")
    return sorted(int(i) for i in order[:c_prime])


def select_lasso(samples, W, c_prime: int, **solver) -> list:
    sel = select_for_sparsity(channel_responses(samples, W), c_prime, **solver)
    return list(sel.active)


def brute_force_select(samples, W, c_prime: int, guard: int = SUBSET_GUARD, recheck: int = 5) -> StrategyOutcome:
    """Global best subset of size c' under exact least-squares refit.

    Every subset is scored through the shared Gram matrix; the ``recheck``
    best candidates are re-scored with the regular reconstruction path and the
    lowest error wins (lexicographically smallest subset on ties).
    """
    c = samples.c
    if c_prime > c or c_prime < 0:
        raise ValueError(f"c_prime={c_prime} outside [0, {c}]")
    total = math.comb(c, c_prime)
    if total > guard:
        raise CombinatorialGuardError(f"C({c},{c_prime}) = {total} subsets exceeds the guard of {guard}")
    t0 = time.perf_counter()
    X, Y = samples.X, samples.Y
    G = X.T @ X
    R = X.T @ Y
    yy = float(np.sum(Y * Y))
    scored = []
    for subset in itertools.combinations(range(c), c_prime):
        cols = samples.channel_columns(subset)
        if len(cols) == 0:
            scored.append((yy, subset))
            continue
        Gs, Rs = G[np.ix_(cols, cols)], R[cols]
        try:
            coef = cho_solve(cho_factor(Gs, lower=True, check_finite=False), Rs, check_finite=False)
        except LinAlgError:
            coef = np.linalg.lstsq(Gs, Rs, rcond=None)[0]
        scored.append((yy - float(np.sum(Rs * coef)), subset))
    scored.sort(key=lambda t: (t[0], t[1]))
    finalists = sorted(((lsq_error(samples, list(s)), s) for _, s in scored[:recheck]))
    err, best = finalists[0]
    return StrategyOutcome(BRUTE_FORCE, c, c_prime, tuple(best), err, (time.perf_counter() - t0) * 1e3)


def run_strategy(strategy: str, samples, W, c_prime: int, **solver) -> StrategyOutcome:
    t0 = time.perf_counter()
    if strategy == BRUTE_FORCE:
        return brute_force_select(samples, W, c_prime)
    if strategy == LASSO:
        active = select_lasso(samples, W, c_prime, **solver)
    elif strategy == FIRST_K:
        active = select_first_k(samples.c, c_prime)
    elif strategy == MAX_RESPONSE:
        active = select_max_response(W, c_prime)
    else:
        raise ValueError(f"unknown strategy {strategy!r}")
    err = lsq_error(samples, active)
    return StrategyOutcome(strategy, samples.c, c_prime, tuple(active), err, (time.perf_counter() - t0) * 1e3)


def keep_count(c: int, ratio: float) -> int:
    return max(1, min(c, int(round(ratio * c))))


def compare_strategies(samples, W, c_prime_list, strategies=STRATEGIES, guard: int = SUBSET_GUARD,
                       **solver) -> list:
    """Rows for every (c', strategy) pair, all refit by the same least squares.

    Brute force is skipped for a c' whose subset count exceeds ``guard``.
    """
    rows = []
    for c_prime in c_prime_list:
        for strategy in strategies:
            if strategy == BRUTE_FORCE and math.comb(samples.c, c_prime) > guard:
                continue
            rows.append(run_strategy(strategy, samples, W, int(c_prime), **solver))
    return rows


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        d = r.row() if isinstance(r, StrategyOutcome) else r
        writer.writerow({k: d[k] for k in CSV_COLUMNS})
    return buf.getvalue()


@dataclass
class SyntheticLayer:
    samples: SampleSet
    weight: np.ndarray
    notes: dict = field(default_factory=dict)


def synthetic_layer(seed: int, c: int = 8, n: int = 8, kernel=(3, 3), num_samples: int = 400,
                    rho: float = 0.5, activation_range=(0.3, 3.0), weight_range=(0.5, 2.0),
                    noise: float = 0.05) -> SyntheticLayer:
    """A layer with correlated input channels of uneven activation energy.

    The second half of the channels are each mixed with one channel of the
    first half (correlation ``rho``). Activation scales are log-uniform over
    ``activation_range`` and independent of the filter-weight scales, so a
    channel's weight magnitude says little about its contribution.
    """
    rng = np.random.default_rng(seed)
    k = kernel[0] * kernel[1]
    half = c // 2
    chans = rng.standard_normal((num_samples, c, k))
    src = rng.integers(0, max(half, 1), size=c - half)
    for t, s in enumerate(src):
        chans[:, half + t] = rho * chans[:, s] + math.sqrt(1 - rho ** 2) * chans[:, half + t]
    lo, hi = activation_range
    act = np.exp(rng.uniform(math.log(lo), math.log(hi), size=c))
    chans *= act[None, :, None]
    W = rng.standard_normal((n, c, k)) * rng.uniform(*weight_range, size=c)[None, :, None]
    perm = rng.permutation(c)
    chans, W = chans[:, perm], W[:, perm]
    X = chans.reshape(num_samples, c * k)
    Y = X @ W.reshape(n, -1).T
    Y += noise * float(np.std(Y)) * rng.standard_normal(Y.shape)
    positions = np.zeros((num_samples, 3), dtype=np.int64)
    positions[:, 0] = np.arange(num_samples)
    samples = SampleSet(X=X, Y=Y, c=c, n=n, kh=kernel[0], kw=kernel[1], positions=positions,
                        meta={"layer": "synthetic", "mode": "synthetic", "seed": seed})
    return SyntheticLayer(samples=samples, weight=W.reshape(n, c, *kernel),
                          notes={"permutation": perm.tolist(), "activation_scale": act[perm].tolist()})

"""Channel-selection LASSO over per-channel response matrices.

Each channel ``i`` contributes a response ``Z_i = X_i W_i^T`` (N x n).  The
problem ``min (1/2N)||Y - sum_i beta_i Z_i||_F^2 + lam ||beta||_1`` is a
c-variable vector LASSO once every ``Z_i`` is flattened, so it is solved by
cyclic coordinate descent on the c x c Gram matrix.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from prunekit.errors import NumericError, ShapeError

log = logging.getLogger(__name__)

# relative threshold below which a channel response counts as dead
_DEAD = 1e-14


@dataclass
class ChannelResponses:
    Z: np.ndarray  # c x N x n
    y: np.ndarray  # N x n

    def __post_init__(self):
        self.Z = np.asarray(self.Z, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.y.ndim == 1:
            self.y = self.y[:, None]
        if self.Z.ndim == 2:
            self.Z = self.Z[:, :, None]
        if self.Z.shape[1:] != self.y.shape:
            raise ShapeError(f"responses {self.Z.shape[1:]} do not match target {self.y.shape}")
        if not (np.all(np.isfinite(self.Z)) and np.all(np.isfinite(self.y))):
            raise NumericError("non-finite values in LASSO inputs")
        flat = self.Z.reshape(self.c, -1)
        yf = self.y.reshape(-1)
        self.gram = flat @ flat.T / self.N
        self.corr = flat @ yf / self.N
        self.yy = float(yf @ yf) / self.N
        diag = np.diag(self.gram)
        self.dead = diag <= _DEAD * max(float(diag.max(initial=0.0)), np.finfo(float).tiny)

    @property
    def c(self) -> int:
        return self.Z.shape[0]

    @property
    def N(self) -> int:
        return self.y.shape[0]


def channel_responses(samples, weight) -> ChannelResponses:
    """Build ``Z_i = X_i W_i^T`` from a SampleSet and an n x c x kh x kw weight."""
    w = np.asarray(weight, dtype=np.float64)
    n, c = w.shape[:2]
    if c != samples.c or n != samples.n:
        raise ShapeError(f"weight {w.shape} does not match samples (c={samples.c}, n={samples.n})")
    k = samples.block
    Xb = samples.X.reshape(samples.num_samples, c, k)
    Z = np.einsum("sck,nck->csn", Xb, w.reshape(n, c, k), optimize=True)
    return ChannelResponses(Z=Z, y=samples.Y)


@dataclass
class SelectionResult:
    beta: np.ndarray
    active: tuple
    lam: float
    objective: float
    iterations: int
    trace: list = field(default_factory=list)  # [(lam, nnz)]
    gap: int = 0  # c' - |active| when the exact count was not reachable

    @property
    def nnz(self) -> int:
        return len(self.active)


def lambda_max(resp: ChannelResponses) -> float:
    """Smallest penalty at which beta = 0 is optimal."""
    live = np.abs(resp.corr[~resp.dead])
    return float(live.max()) if live.size else 0.0


def objective(resp: ChannelResponses, beta, lam: float) -> float:
    beta = np.asarray(beta, dtype=np.float64)
    r = resp.y - np.tensordot(beta, resp.Z, axes=(0, 0))
    return float(np.sum(r * r)) / (2 * resp.N) + lam * float(np.abs(beta).sum())


def kkt_residuals(resp: ChannelResponses, beta, lam: float) -> np.ndarray:
    """Per-coordinate violation of the LASSO optimality conditions."""
    beta = np.asarray(beta, dtype=np.float64)
    r = resp.y - np.tensordot(beta, resp.Z, axes=(0, 0))
    g = np.tensordot(resp.Z, r, axes=([1, 2], [0, 1])) / resp.N
    viol = np.where(beta == 0, np.maximum(np.abs(g) - lam, 0.0), np.abs(g - lam * np.sign(beta)))
    viol[resp.dead] = 0.0
    return viol


def _soft(v: float, t: float) -> float:
    if v > t:
        return v - t
    if v < -t:
        return v + t
    return 0.0


def lasso_solve(resp: ChannelResponses, lam: float, warm_start=None, tol: float = 1e-10,
                max_passes: int = 100_000) -> SelectionResult:
    """Cyclic coordinate descent at a fixed penalty.

    Stops when the largest curvature-scaled coordinate move ``G_ii |d beta_i|``
    falls below ``tol * max(1, max_i |<Z_i, Y>|/N)``.
    """
    if lam < 0 or not np.isfinite(lam):
        raise ValueError(f"penalty must be a finite nonnegative number, got {lam}")
    c = resp.c
    G, b = resp.gram, resp.corr
    beta = np.zeros(c) if warm_start is None else np.array(warm_start, dtype=np.float64)
    if beta.shape != (c,):
        raise ShapeError(f"warm start has shape {beta.shape}, expected ({c},)")
    beta[resp.dead] = 0.0
    live = [i for i in range(c) if not resp.dead[i]]
    diag = np.diag(G)
    Gb = G @ beta
    thresh = tol * max(1.0, float(np.abs(b).max(initial=0.0)))
    passes = 0
    for passes in range(1, max_passes + 1):
        biggest = 0.0
        for i in live:
            old = beta[i]
            rho = b[i] - Gb[i] + diag[i] * old
            new = _soft(rho, lam) / diag[i]
            if new != old:
                delta = new - old
                beta[i] = new
                Gb += G[:, i] * delta
                biggest = max(biggest, diag[i] * abs(delta))
        if biggest <= thresh:
            break
    else:
        log.warning("lasso_solve hit max_passes=%d at lam=%g", max_passes, lam)
    if not np.all(np.isfinite(beta)):
        raise NumericError("coordinate descent diverged")
    active = tuple(int(i) for i in np.flatnonzero(beta))
    return SelectionResult(beta=beta, active=active, lam=float(lam),
                           objective=objective(resp, beta, lam), iterations=passes)


def select_for_sparsity(resp: ChannelResponses, c_prime: int, factor: float = 1.3,
                        max_steps: int = 200, tol: float = 1e-10, bisect_steps: int = 20,
                        max_passes: int = 100_000) -> SelectionResult:
    """Raise the penalty until at most ``c_prime`` channels stay active.

    Starts unpenalised, ramps geometrically from ``1e-4 * lambda_max`` with
    warm starts, then bisects the final bracket aiming for exactly ``c_prime``.
    """
    c = resp.c
    if c_prime > c or c_prime < 0:
        raise ValueError(f"c_prime={c_prime} outside [0, {c}]")
    if factor <= 1:
        raise ValueError("ramp factor must exceed 1")
    lmax = lambda_max(resp)
    if c_prime == 0:
        zero = np.zeros(c)
        return SelectionResult(beta=zero, active=(), lam=lmax, objective=objective(resp, zero, lmax),
                               iterations=0, trace=[(lmax, 0)])

    trace = []

    def solve(lam, warm):
        res = lasso_solve(resp, lam, warm_start=warm, tol=tol, max_passes=max_passes)
        trace.append((res.lam, res.nnz))
        return res

    lo = solve(0.0, None)
    if lo.nnz <= c_prime:
        lo.trace = trace
        lo.gap = c_prime - lo.nnz
        return lo
    hi = None
    lam = 1e-4 * lmax
    for _ in range(max_steps):
        if lam >= lmax:
            break
        res = solve(lam, lo.beta)
        if res.nnz <= c_prime:
            hi = res
            break
        lo = res
        lam *= factor
    if hi is None:
        hi = solve(lmax, lo.beta)
    best = hi
    if hi.nnz != c_prime:
        a, bnd = lo, hi
        for _ in range(bisect_steps):
            mid = solve(0.5 * (a.lam + bnd.lam), a.beta)
            if mid.nnz > c_prime:
                a = mid
            else:
                bnd = mid
                if mid.nnz > best.nnz:
                    best = mid
                if mid.nnz == c_prime:
                    break
    best.trace = trace
    best.gap = c_prime - best.nnz
    if best.gap:
        log.info("sparsity jumped past c'=%d; keeping %d channels", c_prime, best.nnz)
    return best

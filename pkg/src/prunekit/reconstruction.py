"""Least-squares refit of the kept channels and the beta/W renormalisation."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from prunekit.errors import NumericError, ShapeError

log = logging.getLogger(__name__)

FALLBACK_RIDGE = 1e-8
# pivot^2 / max(diag G) below this is treated as a singular Gram
_SINGULAR = 1e-13


@dataclass
class ReconstructedWeights:
    W_prime: np.ndarray  # n x (c*kh*kw), zero outside active channel blocks
    residual_rel: float
    ridge_used: float
    fallback: bool = False


def relative_error(Y, pred) -> float:
    """||Y - pred||_F^2 / ||Y||_F^2, defined as 0 when Y is zero."""
    Y = np.asarray(Y, dtype=np.float64)
    den = float(np.sum(Y * Y))
    if den == 0.0:
        return 0.0
    d = Y - pred
    return float(np.sum(d * d)) / den


def _factor(G, ridge):
    k = G.shape[0]
    damp = ridge * float(np.trace(G)) / k if k else 0.0
    A = G + damp * np.eye(k)
    fac = cho_factor(A, lower=True, check_finite=False)
    piv = np.diag(fac[0])
    scale = max(float(np.max(np.diag(A))), np.finfo(float).tiny)
    if float(np.min(piv)) ** 2 <= _SINGULAR * scale:
        raise LinAlgError("numerically singular Gram")
    return fac


def solve_normal_equations(Xa, Y, ridge: float = 0.0) -> tuple:
    """Damped normal-equations solve shared across all output columns.

    Returns ``(coef, ridge_used, fallback)`` with ``coef`` shaped (k, n).
    """
    G = Xa.T @ Xa
    rhs = Xa.T @ Y
    try:
        fac = _factor(G, ridge)
        used, fell_back = ridge, False
    except LinAlgError:
        if ridge > 0:
            raise NumericError(f"damped Gram is not positive definite (ridge={ridge})") from None
        log.info("singular Gram; retrying with ridge %g", FALLBACK_RIDGE)
        try:
            fac = cho_factor(G + FALLBACK_RIDGE * float(np.trace(G)) / G.shape[0] * np.eye(G.shape[0]),
                             lower=True, check_finite=False)
        except LinAlgError:
            raise NumericError("Gram is singular even after ridge fallback") from None
        used, fell_back = FALLBACK_RIDGE, True
    coef = cho_solve(fac, rhs, check_finite=False)
    if not np.all(np.isfinite(coef)):
        raise NumericError("least-squares solve produced non-finite weights")
    return coef, used, fell_back


def reconstruct(samples, beta, active, ridge: float = 0.0) -> ReconstructedWeights:
    """Refit weights on the beta-scaled active channel blocks.

    Minimises ``||Y - X' W'^T||_F^2`` with ``X' = [beta_1 X_1 ... beta_c X_c]``
    restricted to ``active``.
    """
    if ridge < 0:
        raise ValueError("ridge must be nonnegative")
    beta = np.asarray(beta, dtype=np.float64)
    active = sorted(int(i) for i in active)
    if beta.shape != (samples.c,):
        raise ShapeError(f"beta has shape {beta.shape}, expected ({samples.c},)")
    if any(i < 0 or i >= samples.c for i in active):
        raise ValueError("active channel index out of range")
    if any(beta[i] == 0 for i in active):
        raise ValueError("active channels must have nonzero beta")
    W = np.zeros((samples.n, samples.X.shape[1]))
    Y = samples.Y
    if not active:
        rel = 1.0 if np.any(Y) else 0.0
        return ReconstructedWeights(W_prime=W, residual_rel=rel, ridge_used=ridge)
    cols = samples.channel_columns(active)
    Xa = samples.X[:, cols] * np.repeat(beta[active], samples.block)
    coef, used, fell_back = solve_normal_equations(Xa, Y, ridge)
    W[:, cols] = coef.T
    return ReconstructedWeights(W_prime=W, residual_rel=relative_error(Y, Xa @ coef),
                                ridge_used=used, fallback=fell_back)


def _as_channels(W, c):
    W = np.asarray(W, dtype=np.float64)
    if W.ndim == 2:
        W = W.reshape(W.shape[0], c, -1)
    if W.shape[1] != c:
        raise ShapeError(f"weight has {W.shape[1]} channels, beta has {c}")
    return W


def renormalize(beta, W) -> tuple:
    """Move each channel's weight norm into beta so every ``||W_i||_F = 1``."""
    beta = np.array(beta, dtype=np.float64)
    shape = np.shape(W)
    Wc = _as_channels(W, len(beta)).copy()
    n = Wc.shape[0]
    norms = np.sqrt(np.sum(Wc.reshape(n, len(beta), -1) ** 2, axis=(0, 2)))
    for i, nrm in enumerate(norms):
        if nrm > 0:
            beta[i] *= nrm
            Wc[:, i] /= nrm
        else:
            beta[i] = 0.0
    return beta, Wc.reshape(shape)


def fold_final_weights(beta, W) -> tuple:
    """Collapse ``beta_i * W_i`` and drop channels with ``beta_i == 0``.

    Returns the shrunk n x c' x kh x kw weight and the retained channel indices.
    """
    beta = np.asarray(beta, dtype=np.float64)
    Wc = _as_channels(W, len(beta))
    keep = [int(i) for i in np.flatnonzero(beta)]
    out = Wc[:, keep] * beta[keep][None, :, None, None] if Wc.ndim == 4 else \
        Wc[:, keep] * beta[keep][None, :, None]
    return out, keep


def lsq_error(samples, channels, ridge: float = 0.0) -> float:
    """Relative error of the exact LSQ refit over a channel subset (unit beta)."""
    beta = np.ones(samples.c)
    return reconstruct(samples, beta, channels, ridge).residual_rel

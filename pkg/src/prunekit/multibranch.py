"""Residual-block variants: sampled first layer, compensated last layer, filter-wise selection."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from prunekit.core import ModelGraph
from prunekit.errors import UnsupportedStructureError
from prunekit.lasso import ChannelResponses, select_for_sparsity
from prunekit.pruner import PruneConfig, prune_layer
from prunekit.reconstruction import reconstruct, relative_error
from prunekit.sampler import (
    ORIGINAL_MODEL,
    SamplePlan,
    SampleSet,
    residual_first_conv,
    residual_last_conv,
    sample_layer,
    sample_residual_last,
)
from prunekit.surgery import input_producer


def prune_block_first_layer(model_current: ModelGraph, model_original: ModelGraph, block: str,
                            c_prime: int, cfg: PruneConfig, inputs, plan: SamplePlan = None):
    """Prune the first branch conv behind a channel sampler; the shared input is untouched."""
    first = residual_first_conv(model_current, block)
    prod = input_producer(model_current, first)
    if prod.kind == "conv":
        raise UnsupportedStructureError(f"block {block!r}: first conv does not read the shared block input")
    return prune_layer(model_current, model_original, first, c_prime, cfg, inputs=inputs, plan=plan)


def prune_block_last_layer(model_current: ModelGraph, model_original: ModelGraph, block: str,
                           c_prime: int, cfg: PruneConfig, inputs, plan: SamplePlan = None,
                           compensate: bool = True):
    """Prune the last branch conv so that the block output (shortcut + branch) is recovered.

    With ``compensate`` the target is ``Y1 - Y1' + Y2``: the shortcut's drift
    from upstream pruning is absorbed by this layer.
    """
    last = residual_last_conv(model_current, block)
    plan = plan or cfg.plan
    if compensate:
        samples = sample_residual_last(model_current, model_original, block, inputs, plan)
    else:
        samples = sample_layer(model_current, model_original, last, inputs, plan, ORIGINAL_MODEL)
    return prune_layer(model_current, model_original, last, c_prime, cfg, samples=samples)


@dataclass
class FilterWiseSelection:
    active: list  # per filter: sorted channel indices
    betas: list  # per filter: length-c beta vector
    weight: np.ndarray  # dense n x c x kh x kw with unselected channel slices zeroed
    residual_rel: float

    @property
    def irregular(self) -> bool:
        return len({tuple(a) for a in self.active}) > 1


def filter_wise_select(samples, W, c_prime: int, cfg: PruneConfig = None) -> FilterWiseSelection:
    """Each output filter picks its own c' input channels and is refit alone."""
    kw = cfg.solver_kwargs() if cfg is not None else {}
    ridge = cfg.ridge if cfg is not None else 0.0
    W = np.asarray(W, dtype=np.float64)
    n, c = W.shape[:2]
    k = samples.block
    Xb = samples.X.reshape(samples.num_samples, c, k)
    dense = np.zeros((n, c * k))
    actives, betas = [], []
    for j in range(n):
        Zj = np.einsum("sck,ck->cs", Xb, W[j].reshape(c, k))
        resp = ChannelResponses(Z=Zj, y=samples.Y[:, j])
        sel = select_for_sparsity(resp, c_prime, **kw)
        beta = sel.beta
        if sel.nnz == 0:
            beta = np.zeros(c)
            beta[np.argsort(-np.abs(resp.corr), kind="stable")[:max(c_prime, 1)]] = 1.0
        active = [int(i) for i in np.flatnonzero(beta)]
        single = _single_output(samples, j)
        rec = reconstruct(single, beta, active, ridge)
        scale = np.repeat(beta, k)
        dense[j] = rec.W_prime[0] * scale
        actives.append(active)
        betas.append(beta.copy())
    pred = samples.X @ dense.T
    return FilterWiseSelection(active=actives, betas=betas, weight=dense.reshape(W.shape),
                               residual_rel=relative_error(samples.Y, pred))


def _single_output(samples, j):
    return SampleSet(X=samples.X, Y=samples.Y[:, j:j + 1], c=samples.c, n=1, kh=samples.kh,
                     kw=samples.kw, positions=samples.positions, meta=samples.meta)

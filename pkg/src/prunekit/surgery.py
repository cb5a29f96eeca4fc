"""Graph edits that remove input channels of a conv.

Dropping input channel ``i`` of a conv also drops filter ``i`` of the conv that
produces it, provided only channel-wise nodes (ReLU, pooling, BN) sit in
between. When the producing edge is shared (a residual begin/add) or is the
model input, a ChannelSampler is placed in front of the conv instead.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from prunekit.core.graph import (
    AvgPool,
    BatchNorm,
    ChannelSampler,
    Conv,
    MaxPool,
    ModelGraph,
    ReLU,
)

_CHANNELWISE = (ReLU, MaxPool, AvgPool, BatchNorm)


@dataclass
class Producer:
    kind: str  # "conv", "sampler" or "blocked"
    name: Optional[str]
    between: list  # channel-wise node names between producer and consumer
    reason: str = ""


def input_producer(model: ModelGraph, layer: str) -> Producer:
    idx = model.index(layer)
    between = []
    for j in range(idx - 1, -1, -1):
        nd = model.nodes[j]
        if isinstance(nd, _CHANNELWISE):
            between.append(nd.name)
            continue
        if isinstance(nd, Conv):
            return Producer("conv", nd.name, between)
        if isinstance(nd, ChannelSampler):
            return Producer("sampler", nd.name, between)
        return Producer("blocked", None, between, reason=f"input shared through {nd.name!r}")
    return Producer("blocked", None, between, reason="input is the model input")


def _unique_name(model: ModelGraph, base: str) -> str:
    names = set(model.names())
    if base not in names:
        return base
    k = 1
    while f"{base}_{k}" in names:
        k += 1
    return f"{base}_{k}"


def keep_input_channels(model: ModelGraph, layer: str, keep, new_weight=None) -> str:
    """Restrict ``layer`` to input channels ``keep`` (in place).

    ``new_weight`` (n x len(keep) x kh x kw) replaces the conv weight; without it
    the existing weight is sliced. Returns a short description of the upstream
    change for reports.
    """
    keep = [int(i) for i in keep]
    conv = model.conv(layer)
    c = conv.c
    if not keep or any(b <= a for a, b in zip(keep, keep[1:])) or keep[0] < 0 or keep[-1] >= c:
        raise ValueError(f"{layer}: keep list must be strictly increasing within [0, {c})")
    if new_weight is None:
        new_weight = conv.weight[:, keep]
    new_weight = np.asarray(new_weight, dtype=np.float32)
    if new_weight.shape != (conv.n, len(keep)) + conv.kernel:
        raise ValueError(f"{layer}: replacement weight has shape {new_weight.shape}")
    conv.weight = np.ascontiguousarray(new_weight)
    if len(keep) == c:
        return "none"
    prod = input_producer(model, layer)
    for name in prod.between:
        nd = model.node(name)
        if isinstance(nd, BatchNorm):
            for attr in ("gamma", "beta", "mean", "var"):
                setattr(nd, attr, getattr(nd, attr)[keep].copy())
    if prod.kind == "conv":
        p = model.conv(prod.name)
        p.weight = np.ascontiguousarray(p.weight[keep])
        if p.bias is not None:
            p.bias = p.bias[keep].copy()
        return f"filters:{prod.name}"
    if prod.kind == "sampler":
        s = model.node(prod.name)
        s.indices = [s.indices[i] for i in keep]
        return f"sampler:{prod.name}"
    name = _unique_name(model, f"{layer}_sampler")
    model.nodes.insert(model.index(layer), ChannelSampler(name, keep))
    return f"sampler:{name}"


def effective_producers(model: ModelGraph) -> dict:
    """Map consumer conv -> producer conv whose filters shrink with it."""
    out = {}
    for name in model.conv_names():
        prod = input_producer(model, name)
        if prod.kind == "conv":
            out[name] = prod.name
    return out


def shrink_to_budget(model: ModelGraph, budgets: dict) -> ModelGraph:
    """Shape-only pruning: keep the first c' input channels of every budgeted conv."""
    out = model.copy()
    for name in model.conv_names():
        c_prime = budgets.get(name)
        if c_prime is None or c_prime >= out.conv(name).c:
            continue
        keep_input_channels(out, name, list(range(int(c_prime))))
    out.validate()
    return out

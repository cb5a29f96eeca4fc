"""Multiply-accumulate accounting (batch size 1)."""
from __future__ import annotations

from dataclasses import dataclass, field

from prunekit.core.graph import ChannelSampler, Conv, ModelGraph, infer_shapes


@dataclass
class FlopsReport:
    per_node: list = field(default_factory=list)  # [(name, macs)]
    total: int = 0

    def as_dict(self) -> dict:
        return dict(self.per_node)


def conv_macs(n: int, c: int, kh: int, kw: int, ho: int, wo: int) -> int:
    return int(n) * int(c) * int(kh) * int(kw) * int(ho) * int(wo)


def count_flops(model: ModelGraph) -> FlopsReport:
    """MACs per conv node; channel samplers are listed at zero cost."""
    shapes = infer_shapes(model)
    per_node = []
    for nd in model.nodes:
        if isinstance(nd, Conv):
            _, (n, ho, wo) = shapes[nd.name]
            per_node.append((nd.name, conv_macs(n, nd.c, nd.kernel[0], nd.kernel[1], ho, wo)))
        elif isinstance(nd, ChannelSampler):
            per_node.append((nd.name, 0))
    return FlopsReport(per_node=per_node, total=sum(m for _, m in per_node))

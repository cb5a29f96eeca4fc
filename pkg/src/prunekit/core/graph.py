"""Network graph: an ordered list of tagged nodes.

Residual blocks are delimited by a ``ResidualBegin`` / ``ResidualAdd`` pair.
The shortcut always carries the ``ResidualBegin`` input unchanged.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from prunekit.errors import ShapeError, UnsupportedStructureError


@dataclass
class Conv:
    name: str
    weight: np.ndarray  # n x c x kh x kw, float32
    bias: Optional[np.ndarray] = None
    stride: tuple = (1, 1)
    pad: tuple = (0, 0)

    def __post_init__(self):
        self.weight = np.ascontiguousarray(self.weight, dtype=np.float32)
        if self.weight.ndim != 4:
            raise ShapeError(f"{self.name}: conv weight must be rank 4, got {self.weight.shape}")
        if self.bias is not None:
            self.bias = np.ascontiguousarray(self.bias, dtype=np.float32).reshape(-1)
            if self.bias.shape[0] != self.weight.shape[0]:
                raise ShapeError(f"{self.name}: bias length {self.bias.shape[0]} != n {self.weight.shape[0]}")
        self.stride = tuple(int(s) for s in self.stride)
        self.pad = tuple(int(p) for p in self.pad)
        if min(self.stride) < 1 or min(self.pad) < 0:
            raise ShapeError(f"{self.name}: invalid stride {self.stride} / pad {self.pad}")

    @property
    def n(self) -> int:
        return self.weight.shape[0]

    @property
    def c(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel(self) -> tuple:
        return self.weight.shape[2], self.weight.shape[3]


@dataclass
class ReLU:
    name: str


@dataclass
class MaxPool:
    name: str
    kernel: tuple = (2, 2)
    stride: tuple = (2, 2)


@dataclass
class AvgPool:
    name: str
    kernel: tuple = (2, 2)
    stride: tuple = (2, 2)


@dataclass
class BatchNorm:
    name: str
    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        for attr in ("gamma", "beta", "mean", "var"):
            setattr(self, attr, np.ascontiguousarray(getattr(self, attr), dtype=np.float32).reshape(-1))
        if not (len(self.gamma) == len(self.beta) == len(self.mean) == len(self.var)):
            raise ShapeError(f"{self.name}: batchnorm parameter lengths differ")


@dataclass
class ChannelSampler:
    """Zero-cost gather of the listed input channels."""

    name: str
    indices: list = field(default_factory=list)

    def __post_init__(self):
        self.indices = [int(i) for i in self.indices]
        if not self.indices:
            raise ShapeError(f"{self.name}: channel sampler needs at least one index")
        if any(b <= a for a, b in zip(self.indices, self.indices[1:])) or self.indices[0] < 0:
            raise ShapeError(f"{self.name}: sampler indices must be strictly increasing and >= 0")


@dataclass
class ResidualBegin:
    name: str  # the block name


@dataclass
class ResidualAdd:
    name: str
    block: str


Node = Union[Conv, ReLU, MaxPool, AvgPool, BatchNorm, ChannelSampler, ResidualBegin, ResidualAdd]

NODE_TYPES = {
    Conv: "conv",
    ReLU: "relu",
    MaxPool: "maxpool",
    AvgPool: "avgpool",
    BatchNorm: "batchnorm",
    ChannelSampler: "channel_sampler",
    ResidualBegin: "residual_begin",
    ResidualAdd: "residual_add",
}


def node_type(node) -> str:
    return NODE_TYPES[type(node)]


def _pool_out(size: int, k: int, s: int) -> int:
    return (size - k) // s + 1


def conv_out_hw(h: int, w: int, kernel, stride, pad) -> tuple:
    kh, kw = kernel
    ho = (h + 2 * pad[0] - kh) // stride[0] + 1
    wo = (w + 2 * pad[1] - kw) // stride[1] + 1
    return ho, wo


@dataclass
class ModelGraph:
    nodes: list
    input_shape: tuple  # (C, H, W)

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)

    def copy(self) -> "ModelGraph":
        return copy.deepcopy(self)

    def names(self) -> list:
        return [nd.name for nd in self.nodes]

    def index(self, name: str) -> int:
        for i, nd in enumerate(self.nodes):
            if nd.name == name:
                return i
        raise KeyError(f"no node named {name!r}")

    def node(self, name: str):
        return self.nodes[self.index(name)]

    def conv(self, name: str) -> Conv:
        nd = self.node(name)
        if not isinstance(nd, Conv):
            raise UnsupportedStructureError(f"{name!r} is a {node_type(nd)}, not a conv")
        return nd

    def conv_names(self) -> list:
        return [nd.name for nd in self.nodes if isinstance(nd, Conv)]

    def block_span(self, block: str) -> tuple:
        """Indices of the ``ResidualBegin`` and matching ``ResidualAdd`` of a block."""
        try:
            begin = self.index(block)
        except KeyError:
            raise KeyError(f"no residual block named {block!r}") from None
        if not isinstance(self.nodes[begin], ResidualBegin):
            raise UnsupportedStructureError(f"{block!r} is a {node_type(self.nodes[begin])}, not a residual block")
        for j in range(begin + 1, len(self.nodes)):
            nd = self.nodes[j]
            if isinstance(nd, ResidualAdd) and nd.block == block:
                return begin, j
        raise UnsupportedStructureError(f"residual block {block!r} has no matching add")

    def block_names(self) -> list:
        return [nd.name for nd in self.nodes if isinstance(nd, ResidualBegin)]

    def block_convs(self, block: str) -> list:
        begin, end = self.block_span(block)
        return [nd.name for nd in self.nodes[begin + 1:end] if isinstance(nd, Conv)]

    def enclosing_block(self, name: str) -> Optional[str]:
        """Innermost residual block whose branch contains the named node."""
        idx = self.index(name)
        stack = []
        for nd in self.nodes[:idx]:
            if isinstance(nd, ResidualBegin):
                stack.append(nd.name)
            elif isinstance(nd, ResidualAdd) and stack:
                stack.pop()
        return stack[-1] if stack else None

    def shapes(self) -> dict:
        """Map node name -> (input CHW, output CHW); validates the graph on the way."""
        return infer_shapes(self)

    def validate(self) -> None:
        infer_shapes(self)


def infer_shapes(model: ModelGraph) -> dict:
    shape = model.input_shape
    stack = []
    seen = set()
    out = {}
    for nd in model.nodes:
        if nd.name in seen:
            raise UnsupportedStructureError(f"duplicate node name {nd.name!r}")
        seen.add(nd.name)
        c, h, w = shape
        if isinstance(nd, Conv):
            if nd.c != c:
                raise ShapeError(f"{nd.name}: expects {nd.c} input channels, edge carries {c}")
            ho, wo = conv_out_hw(h, w, nd.kernel, nd.stride, nd.pad)
            if ho < 1 or wo < 1:
                raise ShapeError(f"{nd.name}: kernel {nd.kernel} larger than padded input {h}x{w}")
            new = (nd.n, ho, wo)
        elif isinstance(nd, (MaxPool, AvgPool)):
            ho, wo = _pool_out(h, nd.kernel[0], nd.stride[0]), _pool_out(w, nd.kernel[1], nd.stride[1])
            if ho < 1 or wo < 1:
                raise ShapeError(f"{nd.name}: pool window larger than input {h}x{w}")
            new = (c, ho, wo)
        elif isinstance(nd, BatchNorm):
            if len(nd.gamma) != c:
                raise ShapeError(f"{nd.name}: batchnorm over {len(nd.gamma)} channels, edge carries {c}")
            new = shape
        elif isinstance(nd, ChannelSampler):
            if nd.indices[-1] >= c:
                raise ShapeError(f"{nd.name}: sampler index {nd.indices[-1]} out of range for {c} channels")
            new = (len(nd.indices), h, w)
        elif isinstance(nd, ResidualBegin):
            stack.append((nd.name, shape))
            new = shape
        elif isinstance(nd, ResidualAdd):
            if not stack or stack[-1][0] != nd.block:
                raise UnsupportedStructureError(f"{nd.name}: add for block {nd.block!r} does not close the open block")
            _, short = stack.pop()
            if short != shape:
                raise ShapeError(f"{nd.name}: shortcut shape {short} != branch shape {shape}")
            new = shape
        elif isinstance(nd, ReLU):
            new = shape
        else:
            raise UnsupportedStructureError(f"unknown node {nd!r}")
        out[nd.name] = (shape, new)
        shape = new
    if stack:
        raise UnsupportedStructureError(f"residual block {stack[-1][0]!r} is never closed")
    return out

from prunekit.core.flops import FlopsReport, count_flops
from prunekit.core.graph import (
    AvgPool,
    BatchNorm,
    ChannelSampler,
    Conv,
    MaxPool,
    ModelGraph,
    ReLU,
    ResidualAdd,
    ResidualBegin,
    infer_shapes,
)
from prunekit.core.ops import conv_forward, forward, im2col, merge_batchnorm, patches_at, run
from prunekit.core.tensorio import load_model, load_tensor, save_model, save_tensor

__all__ = [
    "AvgPool", "BatchNorm", "ChannelSampler", "Conv", "FlopsReport", "MaxPool", "ModelGraph",
    "ReLU", "ResidualAdd", "ResidualBegin", "conv_forward", "count_flops", "forward", "im2col",
    "infer_shapes", "load_model", "load_tensor", "merge_batchnorm", "patches_at", "run",
    "save_model", "save_tensor",
]

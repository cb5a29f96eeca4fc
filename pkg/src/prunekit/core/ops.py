"""Forward execution: im2col + GEMM convolution, pooling, residual adds, BN folding."""
from __future__ import annotations

import numpy as np

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
    conv_out_hw,
    node_type,
)
from prunekit.errors import NumericError, ShapeError, UnsupportedStructureError

# rows x cols budget per GEMM chunk (float64 elements)
_CHUNK_ELEMS = 1 << 22


def _as_tensor4(x) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(f"expected a rank-4 tensor, got shape {x.shape}")
    return x


def im2col(x, kernel, stride=(1, 1), pad=(0, 0)) -> np.ndarray:
    """Patch matrix with one row per (image, oy, ox).

    Row layout is channel-major, then kernel row, then kernel column, so the
    columns ``[i*kh*kw, (i+1)*kh*kw)`` hold channel ``i`` alone.
    """
    x = _as_tensor4(x)
    kh, kw = kernel
    sh, sw = stride
    ph, pw = pad
    n, c, h, w = x.shape
    ho, wo = conv_out_hw(h, w, (kh, kw), (sh, sw), (ph, pw))
    if ho < 1 or wo < 1:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h + 2 * ph}x{w + 2 * pw}")
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * sh + 1 : sh, : (wo - 1) * sw + 1 : sw]
    # (N, C, Ho, Wo, kh, kw) -> (N, Ho, Wo, C, kh, kw)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)


def patches_at(x, kernel, stride, pad, positions) -> np.ndarray:
    """im2col rows for selected ``(image, oy, ox)`` output positions only."""
    x = _as_tensor4(x)
    kh, kw = kernel
    sh, sw = stride
    ph, pw = pad
    positions = np.asarray(positions, dtype=np.int64).reshape(-1, 3)
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    c = x.shape[1]
    img = positions[:, 0][:, None, None, None]
    ys = (positions[:, 1] * sh)[:, None, None, None] + np.arange(kh)[None, None, :, None]
    xs = (positions[:, 2] * sw)[:, None, None, None] + np.arange(kw)[None, None, None, :]
    ch = np.arange(c)[None, :, None, None]
    return x[img, ch, ys, xs].reshape(len(positions), c * kh * kw)


def conv_forward(node: Conv, x) -> np.ndarray:
    x = _as_tensor4(x)
    if x.shape[1] != node.c:
        raise ShapeError(f"{node.name}: input has {x.shape[1]} channels, conv expects {node.c}")
    n_img, _, h, w = x.shape
    ho, wo = conv_out_hw(h, w, node.kernel, node.stride, node.pad)
    wmat = node.weight.reshape(node.n, -1).astype(np.float64).T
    bias = None if node.bias is None else node.bias.astype(np.float64)
    out = np.empty((n_img, ho, wo, node.n), dtype=np.float32)
    per_img = max(1, ho * wo * wmat.shape[0])
    step = max(1, _CHUNK_ELEMS // per_img)
    for lo in range(0, n_img, step):
        hi = min(n_img, lo + step)
        cols = im2col(x[lo:hi], node.kernel, node.stride, node.pad).astype(np.float64)
        y = cols @ wmat
        if bias is not None:
            y += bias
        out[lo:hi] = y.reshape(hi - lo, ho, wo, node.n)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _pool(x, kernel, stride, reduce):
    win = np.lib.stride_tricks.sliding_window_view(x, tuple(kernel), axis=(2, 3))
    win = win[:, :, :: stride[0], :: stride[1]]
    ho = (x.shape[2] - kernel[0]) // stride[0] + 1
    wo = (x.shape[3] - kernel[1]) // stride[1] + 1
    win = win[:, :, :ho, :wo]
    if reduce == "max":
        return win.max(axis=(4, 5))
    return win.astype(np.float64).mean(axis=(4, 5)).astype(np.float32)


def batchnorm_forward(node: BatchNorm, x) -> np.ndarray:
    scale = node.gamma.astype(np.float64) / np.sqrt(node.var.astype(np.float64) + node.eps)
    shift = node.beta.astype(np.float64) - node.mean.astype(np.float64) * scale
    y = x.astype(np.float64) * scale[None, :, None, None] + shift[None, :, None, None]
    return y.astype(np.float32)


def apply_node(node, x):
    if isinstance(node, Conv):
        return conv_forward(node, x)
    if isinstance(node, ReLU):
        return np.maximum(x, 0, dtype=np.float32)
    if isinstance(node, MaxPool):
        return _pool(x, node.kernel, node.stride, "max")
    if isinstance(node, AvgPool):
        return _pool(x, node.kernel, node.stride, "mean")
    if isinstance(node, BatchNorm):
        return batchnorm_forward(node, x)
    if isinstance(node, ChannelSampler):
        if node.indices[-1] >= x.shape[1]:
            raise ShapeError(f"{node.name}: sampler index out of range for {x.shape[1]} channels")
        return np.ascontiguousarray(x[:, node.indices])
    raise UnsupportedStructureError(f"cannot apply {node_type(node)} in isolation")


def run(model: ModelGraph, x, capture=(), stop_early=True) -> tuple:
    """Execute ``model`` and capture node inputs/outputs.

    ``capture`` is a collection of node names; the returned dict maps each name
    to ``(input, output)`` of that node. With ``stop_early`` execution halts
    once every captured node has run, in which case the returned output is
    ``None``.
    """
    x = _as_tensor4(x)
    if tuple(x.shape[1:]) != tuple(model.input_shape):
        raise ShapeError(f"input shape {tuple(x.shape[1:])} != model input shape {model.input_shape}")
    x = np.ascontiguousarray(x, dtype=np.float32)
    wanted = set(capture)
    missing = wanted - set(model.names())
    if missing:
        raise KeyError(f"unknown tap name(s): {sorted(missing)}")
    taps = {}
    shortcuts = []
    for nd in model.nodes:
        if isinstance(nd, ResidualBegin):
            shortcuts.append((nd.name, x))
            y = x
        elif isinstance(nd, ResidualAdd):
            block, short = shortcuts.pop()
            if block != nd.block:
                raise UnsupportedStructureError(f"{nd.name}: add does not close block {block!r}")
            if short.shape != x.shape:
                raise ShapeError(f"{nd.name}: shortcut {short.shape} != branch {x.shape}")
            y = (short.astype(np.float64) + x.astype(np.float64)).astype(np.float32)
        else:
            y = apply_node(nd, x)
        if nd.name in wanted:
            taps[nd.name] = (x, y)
            if stop_early and len(taps) == len(wanted):
                return None, taps
        x = y
    if not np.all(np.isfinite(x)):
        raise NumericError("forward produced non-finite values")
    return x, taps


def forward(model: ModelGraph, x, tap=None):
    """Run the model; with ``tap`` also return that node's output feature map."""
    if tap is None:
        out, _ = run(model, x)
        return out
    out, taps = run(model, x, capture=(tap,), stop_early=False)
    return out, taps[tap][1]


def merge_batchnorm(model: ModelGraph) -> ModelGraph:
    """Fold every BatchNorm into the conv immediately preceding it."""
    merged = []
    for nd in model.copy().nodes:
        if not isinstance(nd, BatchNorm):
            merged.append(nd)
            continue
        prev = merged[-1] if merged else None
        if not isinstance(prev, Conv):
            raise UnsupportedStructureError(f"{nd.name}: batchnorm is not directly preceded by a conv")
        if len(nd.gamma) != prev.n:
            raise ShapeError(f"{nd.name}: batchnorm width {len(nd.gamma)} != conv filters {prev.n}")
        scale = nd.gamma.astype(np.float64) / np.sqrt(nd.var.astype(np.float64) + nd.eps)
        bias = np.zeros(prev.n) if prev.bias is None else prev.bias.astype(np.float64)
        merged[-1] = Conv(
            name=prev.name,
            weight=prev.weight.astype(np.float64) * scale[:, None, None, None],
            bias=(bias - nd.mean.astype(np.float64)) * scale + nd.beta.astype(np.float64),
            stride=prev.stride,
            pad=prev.pad,
        )
    out = ModelGraph(nodes=merged, input_shape=model.input_shape)
    out.validate()
    return out

"""Extract (X, Y) sample matrices for one conv layer from feature maps."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from prunekit.core import ModelGraph, ResidualAdd, patches_at, run
from prunekit.core.graph import Conv
from prunekit.core.tensorio import load_tensor, save_tensor
from prunekit.errors import ShapeError, UnsupportedStructureError

SAME_LAYER = "same_layer"
ORIGINAL_MODEL = "original_model"
RESIDUAL_LAST = "residual_last"
TARGET_MODES = (SAME_LAYER, ORIGINAL_MODEL)


@dataclass(frozen=True)
class SamplePlan:
    images: int = 5000
    samples_per_image: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.images < 1 or self.samples_per_image < 1:
            raise ValueError("a sample plan needs images >= 1 and samples_per_image >= 1")


# 5000 images x 10 positions per image
DEFAULT_PLAN = SamplePlan(images=5000, samples_per_image=10, seed=0)


@dataclass
class SampleSet:
    X: np.ndarray  # N_s x (c*kh*kw), float64
    Y: np.ndarray  # N_s x n, float64
    c: int
    n: int
    kh: int
    kw: int
    positions: np.ndarray  # N_s x 3: (image, oy, ox)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        rows = self.X.shape[0]
        if self.Y.shape[0] != rows or len(self.positions) != rows:
            raise ShapeError("X, Y and positions must have the same number of rows")
        if self.X.shape[1] != self.c * self.kh * self.kw or self.Y.shape[1] != self.n:
            raise ShapeError("sample matrix widths do not match (c, n, kh, kw)")

    @property
    def num_samples(self) -> int:
        return self.X.shape[0]

    @property
    def block(self) -> int:
        return self.kh * self.kw

    def channel(self, i: int) -> np.ndarray:
        """The N_s x kh*kw column block read from input channel ``i``."""
        k = self.block
        return self.X[:, i * k:(i + 1) * k]

    def channel_columns(self, channels) -> np.ndarray:
        k = self.block
        return np.concatenate([np.arange(i * k, (i + 1) * k) for i in channels]).astype(np.int64) \
            if len(channels) else np.zeros(0, dtype=np.int64)


def draw_positions(num_images: int, ho: int, wo: int, plan: SamplePlan) -> np.ndarray:
    """Uniform output positions per image, without replacement within an image."""
    rng = np.random.default_rng(plan.seed)
    total = ho * wo
    k = min(plan.samples_per_image, total)
    rows = []
    for img in range(num_images):
        flat = rng.choice(total, size=k, replace=False)
        rows.append(np.stack([np.full(k, img), flat // wo, flat % wo], axis=1))
    return np.concatenate(rows).astype(np.int64)


def _check_conv(model: ModelGraph, layer: str) -> Conv:
    return model.conv(layer)


def _gather_outputs(fm, positions) -> np.ndarray:
    return fm[positions[:, 0], :, positions[:, 1], positions[:, 2]].astype(np.float64)


def _bias(conv: Conv) -> np.ndarray:
    return np.zeros(conv.n) if conv.bias is None else conv.bias.astype(np.float64)


def sample_layer(model_current: ModelGraph, model_original: ModelGraph, layer: str, inputs,
                 plan: SamplePlan, target_mode: str = ORIGINAL_MODEL) -> SampleSet:
    if target_mode not in TARGET_MODES:
        raise ValueError(f"unknown target mode {target_mode!r}")
    conv = _check_conv(model_current, layer)
    inputs = np.asarray(inputs)[: plan.images]
    _, taps = run(model_current, inputs, capture=(layer,))
    fm_in, fm_out = taps[layer]
    if target_mode == ORIGINAL_MODEL:
        _check_conv(model_original, layer)
        _, otaps = run(model_original, inputs, capture=(layer,))
        target = otaps[layer][1]
        if target.shape[0] != fm_out.shape[0] or target.shape[2:] != fm_out.shape[2:]:
            raise ShapeError(f"{layer}: output maps differ between current and original model")
        if target.shape[1] != conv.n:
            raise ShapeError(f"{layer}: original layer has {target.shape[1]} filters, current {conv.n}")
    else:
        target = fm_out
    positions = draw_positions(inputs.shape[0], fm_out.shape[2], fm_out.shape[3], plan)
    X = patches_at(fm_in, conv.kernel, conv.stride, conv.pad, positions).astype(np.float64)
    Y = _gather_outputs(target, positions) - _bias(conv)
    return SampleSet(X=X, Y=Y, c=conv.c, n=conv.n, kh=conv.kernel[0], kw=conv.kernel[1],
                     positions=positions,
                     meta={"layer": layer, "mode": target_mode, "seed": plan.seed})


def residual_last_conv(model: ModelGraph, block: str) -> str:
    begin, end = model.block_span(block)
    last = model.nodes[end - 1]
    if not isinstance(last, Conv) or end - 1 == begin:
        raise UnsupportedStructureError(f"block {block!r}: branch must end with a conv feeding the add")
    return last.name


def residual_first_conv(model: ModelGraph, block: str) -> str:
    convs = model.block_convs(block)
    if not convs:
        raise UnsupportedStructureError(f"block {block!r} has no conv on its branch")
    return convs[0]


def sample_residual_last(model_current: ModelGraph, model_original: ModelGraph, block: str, inputs,
                         plan: SamplePlan) -> SampleSet:
    """Samples whose target is shortcut-compensated: Y1 - Y1' + Y2."""
    last = residual_last_conv(model_current, block)
    if residual_last_conv(model_original, block) != last:
        raise UnsupportedStructureError(f"block {block!r}: last conv differs between models")
    conv = model_current.conv(last)
    add_cur = model_current.nodes[model_current.block_span(block)[1]]
    assert isinstance(add_cur, ResidualAdd)
    inputs = np.asarray(inputs)[: plan.images]
    _, taps = run(model_current, inputs, capture=(block, last))
    short_cur = taps[block][0]
    fm_in, fm_out = taps[last]
    _, otaps = run(model_original, inputs, capture=(block, last))
    short_orig = otaps[block][0]
    branch_orig = otaps[last][1]
    if not (short_cur.shape == short_orig.shape == branch_orig.shape == fm_out.shape):
        raise ShapeError(f"block {block!r}: shortcut/branch maps differ in shape")
    positions = draw_positions(inputs.shape[0], fm_out.shape[2], fm_out.shape[3], plan)
    X = patches_at(fm_in, conv.kernel, conv.stride, conv.pad, positions).astype(np.float64)
    Y = (_gather_outputs(short_orig, positions) - _gather_outputs(short_cur, positions)
         + _gather_outputs(branch_orig, positions) - _bias(conv))
    return SampleSet(X=X, Y=Y, c=conv.c, n=conv.n, kh=conv.kernel[0], kw=conv.kernel[1],
                     positions=positions,
                     meta={"layer": last, "block": block, "mode": RESIDUAL_LAST, "seed": plan.seed})


def save_samples(samples: SampleSet, prefix) -> None:
    """Write ``<prefix>.X.pkt``, ``<prefix>.Y.pkt`` and a ``<prefix>.json`` sidecar."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    save_tensor(f"{prefix}.X.pkt", samples.X)
    save_tensor(f"{prefix}.Y.pkt", samples.Y)
    side = {
        "c": samples.c, "n": samples.n, "kh": samples.kh, "kw": samples.kw,
        "positions": samples.positions.tolist(),
        "layer": samples.meta.get("layer"),
        "mode": samples.meta.get("mode"),
        "seed": samples.meta.get("seed"),
    }
    if "block" in samples.meta:
        side["block"] = samples.meta["block"]
    Path(f"{prefix}.json").write_text(json.dumps(side, sort_keys=True) + "\n")


def load_samples(prefix) -> SampleSet:
    side = json.loads(Path(f"{prefix}.json").read_text())
    meta = {k: side[k] for k in ("layer", "mode", "seed", "block") if k in side}
    return SampleSet(
        X=load_tensor(f"{prefix}.X.pkt").astype(np.float64),
        Y=load_tensor(f"{prefix}.Y.pkt").astype(np.float64),
        c=side["c"], n=side["n"], kh=side["kh"], kw=side["kw"],
        positions=np.asarray(side["positions"], dtype=np.int64).reshape(-1, 3),
        meta=meta,
    )

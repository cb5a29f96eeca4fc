"""Toy architectures, seeded initialisation and synthetic calibration batches."""
from __future__ import annotations

import copy
import math

import numpy as np

from prunekit.core import (
    AvgPool,
    BatchNorm,
    Conv,
    MaxPool,
    ModelGraph,
    ReLU,
    ResidualAdd,
    ResidualBegin,
)
from prunekit.errors import FormatError


def _conv(name, out, kernel=3, pad=None, stride=1):
    return {"type": "conv", "name": name, "out": out, "kernel": kernel,
            "pad": kernel // 2 if pad is None else pad, "stride": stride}


def _vgg_layers():
    return [
        _conv("conv1_1", 16), {"type": "relu", "name": "relu1_1"},
        _conv("conv1_2", 16), {"type": "relu", "name": "relu1_2"},
        {"type": "maxpool", "name": "pool1", "kernel": 2, "stride": 2},
        _conv("conv2_1", 32), {"type": "relu", "name": "relu2_1"},
        _conv("conv2_2", 32), {"type": "relu", "name": "relu2_2"},
        {"type": "maxpool", "name": "pool2", "kernel": 4, "stride": 4},
        _conv("conv3_1", 64), {"type": "relu", "name": "relu3_1"},
        _conv("conv3_2", 64), {"type": "relu", "name": "relu3_2"},
    ]


def _resnet_layers(blocks=3, width=32, bottleneck=16):
    layers = [_conv("conv1", width), {"type": "relu", "name": "conv1_relu"}]
    for b in range(1, blocks + 1):
        name = f"res{b}"
        layers.append({"type": "residual", "name": name, "branch": [
            _conv(f"{name}_branch2a", bottleneck, kernel=1), {"type": "relu", "name": f"{name}_branch2a_relu"},
            _conv(f"{name}_branch2b", bottleneck, kernel=3), {"type": "relu", "name": f"{name}_branch2b_relu"},
            _conv(f"{name}_branch2c", width, kernel=1, ),
        ], "branch_scale": 0.5})
        layers.append({"type": "relu", "name": f"{name}_relu"})
    return layers


def _plain5_layers():
    out = []
    for i, w in enumerate((16, 24, 24, 32, 32), start=1):
        out += [_conv(f"conv{i}", w), {"type": "relu", "name": f"relu{i}"}]
    return out


PRESETS = {
    "toy-vgg": {"input_shape": [3, 32, 32], "layers": _vgg_layers(),
                "frozen": ["conv3_1", "conv3_2"]},
    "toy-resnet": {"input_shape": [3, 16, 16], "layers": _resnet_layers(), "frozen": []},
    "toy-plain5": {"input_shape": [3, 16, 16], "layers": _plain5_layers(), "frozen": []},
}

DEFAULT_SEED = 42
DEFAULT_INIT = {"scheme": "he_normal", "scale": 1.0, "bias_std": 0.05}


def preset_spec(name: str, seed: int = DEFAULT_SEED) -> dict:
    if name not in PRESETS:
        raise FormatError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    spec = copy.deepcopy(PRESETS[name])
    spec.update(name=name, seed=seed, init=dict(DEFAULT_INIT))
    return spec


def preset_frozen(name: str) -> list:
    """Layers a preset leaves unpruned (its last tier), if any."""
    return list(PRESETS[name]["frozen"]) if name in PRESETS else []


class _Builder:
    def __init__(self, rng, init):
        self.rng = rng
        self.scheme = init.get("scheme", "he_normal")
        self.scale = float(init.get("scale", 1.0))
        self.bias_std = float(init.get("bias_std", 0.0))
        if self.scheme not in ("he_normal", "normal"):
            raise FormatError(f"unknown init scheme {self.scheme!r}")
        self.counter = 0
        self.names = set()

    def name(self, entry, kind):
        self.counter += 1
        name = entry.get("name") or f"{kind}{self.counter}"
        if name in self.names:
            raise FormatError(f"duplicate layer name {name!r}")
        self.names.add(name)
        return name

    def build(self, layers, shape, where="layers", branch_scale=1.0):
        nodes = []
        for i, e in enumerate(layers):
            loc = f"{where}[{i}]"
            if not isinstance(e, dict) or "type" not in e:
                raise FormatError(f"{loc}: each layer needs a 'type'")
            kind = e["type"]
            c, h, w = shape
            if kind == "conv":
                if "out" not in e:
                    raise FormatError(f"{loc}: conv needs 'out'")
                k = int(e.get("kernel", 3))
                pad, stride = int(e.get("pad", k // 2)), int(e.get("stride", 1))
                n = int(e["out"])
                fan_in = c * k * k
                std = math.sqrt(2.0 / fan_in) if self.scheme == "he_normal" else 1.0
                is_last = i == len(layers) - 1
                std *= self.scale * (branch_scale if is_last else 1.0)
                weight = self.rng.standard_normal((n, c, k, k)) * std
                bias = self.rng.standard_normal(n) * self.bias_std if e.get("bias", True) else None
                nodes.append(Conv(self.name(e, "conv"), weight, bias, (stride, stride), (pad, pad)))
                shape = (n, (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1)
            elif kind == "relu":
                nodes.append(ReLU(self.name(e, "relu")))
            elif kind in ("maxpool", "avgpool"):
                k, s = int(e.get("kernel", 2)), int(e.get("stride", e.get("kernel", 2)))
                cls = MaxPool if kind == "maxpool" else AvgPool
                nodes.append(cls(self.name(e, kind), (k, k), (s, s)))
                shape = (c, (h - k) // s + 1, (w - k) // s + 1)
            elif kind == "batchnorm":
                r = self.rng
                nodes.append(BatchNorm(self.name(e, "bn"), gamma=r.uniform(0.5, 1.5, c),
                                       beta=r.normal(0, 0.1, c), mean=r.normal(0, 0.1, c),
                                       var=r.uniform(0.5, 1.5, c), eps=float(e.get("eps", 1e-5))))
            elif kind == "residual":
                name = self.name(e, "res")
                branch = e.get("branch")
                if not isinstance(branch, list) or not branch:
                    raise FormatError(f"{loc}: residual needs a non-empty 'branch' list")
                inner, out_shape = self.build(branch, shape, f"{loc}.branch", float(e.get("branch_scale", 1.0)))
                if out_shape != shape:
                    raise FormatError(f"{loc}: branch output {out_shape} != block input {shape}")
                add = name + "_add"
                self.names.add(add)
                nodes += [ResidualBegin(name)] + inner + [ResidualAdd(add, name)]
            else:
                raise FormatError(f"{loc}: unknown layer type {kind!r}")
            if min(shape) < 1:
                raise FormatError(f"{loc}: feature map collapsed to {shape}")
        return nodes, shape


def build_model(spec: dict, seed=None) -> ModelGraph:
    """Instantiate a model from a spec dict (a preset reference or explicit layers)."""
    if "preset" in spec:
        extra = set(spec) - {"preset", "seed"}
        if extra:
            raise FormatError(f"preset specs only accept 'seed', got {sorted(extra)}")
        spec = preset_spec(spec["preset"], int(spec.get("seed", DEFAULT_SEED)))
    if "input_shape" not in spec or "layers" not in spec:
        raise FormatError("model spec needs 'input_shape' and 'layers' (or 'preset')")
    seed = int(spec.get("seed", DEFAULT_SEED)) if seed is None else int(seed)
    init = dict(DEFAULT_INIT)
    init.update(spec.get("init", {}))
    builder = _Builder(np.random.default_rng(seed), init)
    nodes, _ = builder.build(spec["layers"], tuple(spec["input_shape"]))
    model = ModelGraph(nodes=nodes, input_shape=tuple(spec["input_shape"]))
    model.validate()
    return model


def preset_model(name: str, seed: int = DEFAULT_SEED) -> ModelGraph:
    return build_model(preset_spec(name, seed))


def make_inputs(input_shape, count: int, seed: int = 0) -> np.ndarray:
    """Standard-normal calibration images with a per-image, per-channel offset."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((count,) + tuple(input_shape))
    x += 0.5 * rng.standard_normal((count, input_shape[0], 1, 1))
    return x.astype(np.float32)

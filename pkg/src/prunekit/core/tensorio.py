"""PKT1 tensor blobs and on-disk model directories.

Blob layout: magic ``PKT1``, u32 rank, rank x u64 dims, little-endian f32
payload in row-major order.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

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
    node_type,
)
from prunekit.errors import FormatError

MAGIC = b"PKT1"
GRAPH_FILE = "graph.json"
GRAPH_FORMAT = "prunekit-graph"
GRAPH_VERSION = 1


def encode_tensor(arr) -> bytes:
    arr = np.array(arr, dtype="<f4", order="C")  # keeps rank 0, unlike ascontiguousarray
    head = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes(order="C")


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise FormatError("not a PKT1 tensor (bad magic)")
    (rank,) = struct.unpack_from("<I", buf, 4)
    off = 8 + 8 * rank
    if len(buf) < off:
        raise FormatError("truncated PKT1 header")
    dims = struct.unpack_from(f"<{rank}Q", buf, 8)
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(buf) != off + 4 * count:
        raise FormatError(f"PKT1 payload is {len(buf) - off} bytes, dims {dims} need {4 * count}")
    return np.frombuffer(buf, dtype="<f4", offset=off).reshape(dims).astype(np.float32)


def save_tensor(path, arr) -> None:
    Path(path).write_bytes(encode_tensor(arr))


def load_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def _pair(v) -> list:
    return [int(v[0]), int(v[1])]


def model_to_json(model: ModelGraph) -> tuple:
    """Graph document plus a ``{filename: array}`` map of the tensors it references."""
    nodes = []
    tensors = {}

    def ref(node_name, param, arr):
        fname = f"{node_name}.{param}.pkt"
        tensors[fname] = arr
        return fname

    for nd in model.nodes:
        entry = {"name": nd.name, "type": node_type(nd)}
        if isinstance(nd, Conv):
            entry.update(
                stride=_pair(nd.stride),
                pad=_pair(nd.pad),
                weight=ref(nd.name, "weight", nd.weight),
                bias=None if nd.bias is None else ref(nd.name, "bias", nd.bias),
            )
        elif isinstance(nd, (MaxPool, AvgPool)):
            entry.update(kernel=_pair(nd.kernel), stride=_pair(nd.stride))
        elif isinstance(nd, BatchNorm):
            entry.update(eps=float(nd.eps))
            for p in ("gamma", "beta", "mean", "var"):
                entry[p] = ref(nd.name, p, getattr(nd, p))
        elif isinstance(nd, ChannelSampler):
            entry.update(indices=list(nd.indices))
        elif isinstance(nd, ResidualAdd):
            entry.update(block=nd.block)
        nodes.append(entry)
    doc = {
        "format": GRAPH_FORMAT,
        "version": GRAPH_VERSION,
        "input_shape": list(model.input_shape),
        "nodes": nodes,
    }
    return doc, tensors


def save_model(model: ModelGraph, path) -> Path:
    """Write ``graph.json`` and one PKT1 blob per tensor into directory ``path``."""
    model.validate()
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    doc, tensors = model_to_json(model)
    for stale in path.glob("*.pkt"):
        if stale.name not in tensors:
            stale.unlink()
    for fname, arr in tensors.items():
        save_tensor(path / fname, arr)
    (path / GRAPH_FILE).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path


def _get(entry, key, where):
    try:
        return entry[key]
    except (KeyError, TypeError):
        raise FormatError(f"{where}: missing field {key!r}") from None


def load_model(path) -> ModelGraph:
    path = Path(path)
    gfile = path / GRAPH_FILE if path.is_dir() else path
    root = gfile.parent
    try:
        doc = json.loads(gfile.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{gfile}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    if doc.get("format") != GRAPH_FORMAT:
        raise FormatError(f"{gfile}: not a {GRAPH_FORMAT} document")
    nodes = []
    for i, e in enumerate(_get(doc, "nodes", gfile)):
        where = f"{gfile} node #{i}"
        name, kind = _get(e, "name", where), _get(e, "type", where)
        if kind == "conv":
            bias = e.get("bias")
            nodes.append(Conv(
                name=name,
                weight=load_tensor(root / _get(e, "weight", where)),
                bias=None if bias is None else load_tensor(root / bias),
                stride=tuple(e.get("stride", (1, 1))),
                pad=tuple(e.get("pad", (0, 0))),
            ))
        elif kind == "relu":
            nodes.append(ReLU(name))
        elif kind in ("maxpool", "avgpool"):
            cls = MaxPool if kind == "maxpool" else AvgPool
            nodes.append(cls(name, tuple(e.get("kernel", (2, 2))), tuple(e.get("stride", (2, 2)))))
        elif kind == "batchnorm":
            params = {p: load_tensor(root / _get(e, p, where)) for p in ("gamma", "beta", "mean", "var")}
            nodes.append(BatchNorm(name=name, eps=float(e.get("eps", 1e-5)), **params))
        elif kind == "channel_sampler":
            nodes.append(ChannelSampler(name, list(_get(e, "indices", where))))
        elif kind == "residual_begin":
            nodes.append(ResidualBegin(name))
        elif kind == "residual_add":
            nodes.append(ResidualAdd(name, _get(e, "block", where)))
        else:
            raise FormatError(f"{where}: unknown node type {kind!r}")
    model = ModelGraph(nodes=nodes, input_shape=tuple(_get(doc, "input_shape", gfile)))
    model.validate()
    return model

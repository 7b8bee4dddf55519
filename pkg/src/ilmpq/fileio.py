"""Model checkpoint format and atomic file writes.

Layout of a ``.ilmpq`` file::

    b"ILMPQMDL"  u32 version  u32 reserved  u64 manifest length   (little endian)
    manifest     UTF-8 JSON, sorted keys
    blob         raw little-endian tensors; manifest entries give byte offsets

Quantized files carry one signed byte per weight code (4-bit codes are not
packed) plus float64 per-row scales next to the latent float weights.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .assignment import RowAssignment
from .errors import ConfigError
from .model import AvgPool2d, Conv2d, Dense, Flatten, MaxPool2d, Model, ReLU

MAGIC = b"ILMPQMDL"
VERSION = 1
_HEADER = struct.Struct("<8sIIQ")


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temp file in the same directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


class _Blob:
    def __init__(self):
        self.parts: list[bytes] = []
        self.size = 0

    def add(self, arr: np.ndarray, dtype: str) -> dict:
        raw = np.ascontiguousarray(arr, dtype=np.dtype(dtype)).tobytes()
        entry = {"dtype": dtype, "shape": list(arr.shape), "offset": self.size, "nbytes": len(raw)}
        self.parts.append(raw)
        self.size += len(raw)
        return entry


def encode_model(model: Model, quantized: dict | None = None, meta: dict | None = None) -> bytes:
    """Serialize ``model``; ``quantized`` maps layer index -> ``(codes, row_scales)``."""
    blob = _Blob()
    layers = []
    for i, layer in enumerate(model.layers):
        entry = {"kind": layer.kind}
        if layer.kind in ("dense", "conv2d"):
            entry["weight"] = blob.add(layer.weight, "<f8")
            entry["bias"] = blob.add(layer.bias, "<f8")
            entry["assignment"] = layer.assignment.to_list() if layer.assignment is not None else None
            if layer.kind == "conv2d":
                entry["stride"], entry["padding"] = layer.stride, layer.padding
            if quantized is not None and i in quantized:
                codes, scales = quantized[i]
                entry["codes"] = blob.add(codes, "i1")
                entry["row_scales"] = blob.add(scales, "<f8")
        elif layer.kind in ("maxpool", "avgpool"):
            entry["size"] = layer.size
        layers.append(entry)
    manifest = {
        "format": "ilmpq-model",
        "version": VERSION,
        "input_shape": list(model.input_shape),
        "act_bits": model.act_bits,
        "act_clip": model.act_clip,
        "quantized": quantized is not None,
        "layers": layers,
        "meta": meta or {},
    }
    head = canonical_json(manifest).encode()
    return _HEADER.pack(MAGIC, VERSION, 0, len(head)) + head + b"".join(blob.parts)


def decode_model(data: bytes):
    """Inverse of :func:`encode_model`: returns ``(model, quantized or None, meta)``."""
    if len(data) < _HEADER.size:
        raise ConfigError("model file truncated")
    magic, version, _, mlen = _HEADER.unpack_from(data)
    if magic != MAGIC or version != VERSION:
        raise ConfigError("not an ilmpq model file (bad magic or version)")
    manifest = json.loads(data[_HEADER.size:_HEADER.size + mlen])
    base = _HEADER.size + mlen

    def tensor(e):
        end = base + e["offset"] + e["nbytes"]
        if end > len(data):
            raise ConfigError("tensor extends past end of file")
        arr = np.frombuffer(data, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"])),
                            offset=base + e["offset"])
        return arr.reshape(e["shape"]).astype(np.float64 if e["dtype"] == "<f8" else np.int64)

    layers, quantized = [], {} if manifest["quantized"] else None
    for i, e in enumerate(manifest["layers"]):
        kind = e["kind"]
        if kind in ("dense", "conv2d"):
            w, b = tensor(e["weight"]), tensor(e["bias"])
            a = RowAssignment(tuple(e["assignment"])) if e["assignment"] is not None else None
            if kind == "dense":
                layers.append(Dense(w, b, a))
            else:
                layers.append(Conv2d(w, b, e["stride"], e["padding"], a))
            if quantized is not None and "codes" in e:
                quantized[i] = (tensor(e["codes"]), tensor(e["row_scales"]))
        elif kind == "relu":
            layers.append(ReLU())
        elif kind == "maxpool":
            layers.append(MaxPool2d(e["size"]))
        elif kind == "avgpool":
            layers.append(AvgPool2d(e["size"]))
        elif kind == "flatten":
            layers.append(Flatten())
        else:
            raise ConfigError(f"unknown layer kind {kind!r} in model file")
    model = Model(layers, tuple(manifest["input_shape"]), manifest["act_bits"], manifest["act_clip"])
    return model, quantized, manifest["meta"]


def write_model(path, model: Model, quantized: dict | None = None, meta: dict | None = None) -> None:
    atomic_write_bytes(path, encode_model(model, quantized, meta))


def read_model(path):
    return decode_model(Path(path).read_bytes())

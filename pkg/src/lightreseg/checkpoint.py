"""Binary checkpoint format.

Layout::

    b"LRSG" | version: u32 LE | header length: u32 LE | header (UTF-8 JSON) | payload

The header holds the model config and a manifest of ``{name, shape, dtype,
offset, nbytes}`` entries. The payload is every parameter and batch-norm buffer
as raw little-endian scalars, concatenated in manifest order. Serialisation is
canonical (sorted keys, fixed separators), so save -> load -> save is
byte-identical.
"""
from __future__ import annotations

import json
import os
import struct
from collections import OrderedDict

import numpy as np

from .config import ModelConfig
from .errors import CheckpointError
from .model import LightReSeg, build

MAGIC = b"LRSG"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sII")
_DTYPES = {"float32": "<f4", "float64": "<f8"}


def state_tensors(model: LightReSeg) -> "OrderedDict[str, np.ndarray]":
    """Parameters followed by buffers, each group in registration order."""
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    for name, p in model.named_parameters():
        out[name] = p.data
    for name, buf in model.named_buffers():
        out[name] = buf
    return out


def to_bytes(model: LightReSeg, extra: dict | None = None) -> bytes:
    manifest = []
    chunks = []
    offset = 0
    for name, arr in state_tensors(model).items():
        key = np.dtype(arr.dtype).name
        if key not in _DTYPES:
            raise CheckpointError(f"cannot serialise {name} with dtype {key}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[key]).tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": key,
                         "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {"config": model.cfg.to_dict(), "manifest": manifest, "extra": extra or {}}
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, FORMAT_VERSION, len(blob)) + blob + b"".join(chunks)


def save_checkpoint(model: LightReSeg, path, extra: dict | None = None) -> None:
    """Write ``model`` to ``path`` atomically (temp file + rename)."""
    data = to_bytes(model, extra)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def read_header(data: bytes) -> tuple[dict, int]:
    """Parse the prefix and header; returns ``(header, payload_start)``."""
    if len(data) < _PREFIX.size:
        raise CheckpointError("file too short for a checkpoint prefix")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (this build reads {FORMAT_VERSION})")
    start = _PREFIX.size + hlen
    if len(data) < start:
        raise CheckpointError("header length exceeds file size")
    try:
        header = json.loads(data[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable header: {exc}") from None
    return header, start


def from_bytes(data: bytes) -> LightReSeg:
    header, start = read_header(data)
    cfg = ModelConfig.from_dict(header["config"])
    manifest = header["manifest"]
    payload = memoryview(data)[start:]
    expected = sum(e["nbytes"] for e in manifest)
    if len(payload) != expected:
        raise CheckpointError(f"payload is {len(payload)} bytes, manifest describes {expected}")

    dtypes = {e["dtype"] for e in manifest}
    dtype = np.float64 if dtypes == {"float64"} else np.float32
    model = build(cfg, 0).astype(dtype)
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    seen = set()
    for e in manifest:
        name = e["name"]
        if name in params:
            target = params[name].data
        elif name in buffers:
            target = buffers[name]
        else:
            raise CheckpointError(f"unknown tensor name {name!r} in checkpoint")
        if list(target.shape) != list(e["shape"]):
            raise CheckpointError(f"{name}: stored shape {e['shape']} != model shape {list(target.shape)}")
        if e["dtype"] not in _DTYPES:
            raise CheckpointError(f"{name}: unsupported dtype {e['dtype']}")
        arr = np.frombuffer(payload[e["offset"]:e["offset"] + e["nbytes"]], dtype=_DTYPES[e["dtype"]])
        if arr.size != target.size:
            raise CheckpointError(f"{name}: {arr.size} stored values, expected {target.size}")
        arr = arr.reshape(target.shape).astype(e["dtype"])
        if name in params:
            params[name].data = arr
            params[name].grad = np.zeros_like(arr)
        else:
            model.set_buffer(name, arr)
        seen.add(name)
    missing = (set(params) | set(buffers)) - seen
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors: {sorted(missing)[:5]}")
    return model


def load_checkpoint(path) -> LightReSeg:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    return from_bytes(data)


def checkpoint_extra(path) -> dict:
    """The free-form ``extra`` record stored alongside the weights."""
    with open(path, "rb") as fh:
        header, _ = read_header(fh.read())
    return header.get("extra", {})

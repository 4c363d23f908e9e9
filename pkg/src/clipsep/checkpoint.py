"""Versioned binary container for model parameters and training state.

Layout (little-endian)::

    b"CLIPSEPK" | u32 version | u64 header_len | header JSON | tensor data

The header holds the model config, free-form metadata and a tensor table
``[{name, shape, dtype, offset, nbytes}]`` with offsets into the data block.
"""

import json
import struct

import numpy as np
import torch

from .errors import FormatError
from .model import SeparatorConfig, build_model

MAGIC = b"CLIPSEPK"
VERSION = 1
_DTYPES = {"f32": "<f4", "f64": "<f8", "i64": "<i8", "u8": "u1"}
_NAMES = {np.dtype(v): k for k, v in _DTYPES.items()}


def write_container(path, header, tensors):
    table, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _NAMES.get(arr.dtype.newbyteorder("<") if arr.dtype.itemsize > 1 else arr.dtype)
        if code is None:
            raise TypeError(f"unsupported dtype {arr.dtype} for {name}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        table.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": code,
            "offset": offset,
            "nbytes": len(raw),
        })
        blobs.append(raw)
        offset += len(raw)
    header = dict(header, tensors=table)
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<IQ", VERSION, len(head)) + head)
        for raw in blobs:
            fh.write(raw)


def read_container(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)", offset=0)
    if len(data) < 20:
        raise FormatError(f"{path}: truncated header", offset=len(data))
    version, head_len = struct.unpack_from("<IQ", data, 8)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}", offset=8)
    start = 20 + head_len
    try:
        header = json.loads(data[20:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise FormatError(f"{path}: unreadable header", offset=20) from None
    tensors = {}
    for rec in header["tensors"]:
        lo = start + rec["offset"]
        if lo + rec["nbytes"] > len(data):
            raise FormatError(f"{path}: tensor {rec['name']} truncated", offset=lo)
        arr = np.frombuffer(data, dtype=_DTYPES[rec["dtype"]], count=int(np.prod(rec["shape"], dtype=np.int64)), offset=lo)
        tensors[rec["name"]] = arr.reshape(rec["shape"]).copy()
    return header, tensors


def _to_numpy(t):
    t = t.detach().cpu()
    if t.is_floating_point():
        t = t.float()
    return t.numpy()


def model_tensors(model):
    return {f"model/{k}": _to_numpy(v) for k, v in model.state_dict().items()}


def save_model(path, model, meta=None, extra=None):
    tensors = model_tensors(model)
    if extra:
        tensors.update(extra)
    header = {"config": model.config.to_dict(), "meta": meta or {}}
    write_container(path, header, tensors)


def load_state_into(model, tensors):
    """Copy ``model/*`` tensors into ``model``, validating names and shapes."""
    state = model.state_dict()
    loaded = {k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")}
    missing = sorted(set(state) - set(loaded))
    unexpected = sorted(set(loaded) - set(state))
    if missing or unexpected:
        raise FormatError(f"checkpoint/config mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
    new_state = {}
    for name, ref in state.items():
        arr = loaded[name]
        if tuple(arr.shape) != tuple(ref.shape):
            raise FormatError(f"shape mismatch for {name}: {arr.shape} vs {tuple(ref.shape)}")
        new_state[name] = torch.from_numpy(arr).to(ref.dtype)
    model.load_state_dict(new_state)


def load_model(path):
    header, tensors = read_container(path)
    model = build_model(SeparatorConfig.from_dict(header["config"]))
    load_state_into(model, tensors)
    return model, header, tensors

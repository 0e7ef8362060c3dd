"""Checkpoint directories: ``manifest.txt`` plus ``arrays.bin``.

The manifest is ``key=value`` text, one entry per line, in this order::

    format_version=1
    dtype=float32
    byte_order=little
    config.<field>=<value>          # every ModelConfig field
    state.<key>=<value>             # optional training state (JSON values)
    array.<i>=<name>;<d0,d1,...>;<offset>;<nbytes>

``arrays.bin`` is the concatenation of every array as little-endian raw
bytes at the listed offsets: model parameters, then batch-norm running
statistics, then any extra arrays (optimizer state, prefixed ``opt.``).
"""
from __future__ import annotations

import json
import os

import numpy as np

from .model import ModelConfig, PoseModel

FORMAT_VERSION = 1


def _format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_config(items):
    cfg = ModelConfig()
    out = {}
    for key, raw in items.items():
        default = getattr(cfg, key, None)
        if isinstance(default, bool):
            out[key] = raw == "true"
        elif isinstance(default, int):
            out[key] = int(raw)
        elif isinstance(default, float):
            out[key] = float(raw)
        else:
            out[key] = raw
    return ModelConfig.from_dict(out)


def save_checkpoint(path, model, extra_arrays=None, state=None):
    """Write ``model`` (and optional optimizer arrays / JSON-able state) to ``path``."""
    os.makedirs(path, exist_ok=True)
    dtype = np.dtype(model.cfg.dtype).newbyteorder("<")
    arrays = list(model.state_arrays().items())
    for name, arr in (extra_arrays or {}).items():
        arrays.append((name, arr))
    lines = [f"format_version={FORMAT_VERSION}", f"dtype={model.cfg.dtype}", "byte_order=little"]
    for key, value in model.cfg.to_dict().items():
        lines.append(f"config.{key}={_format_value(value)}")
    for key, value in (state or {}).items():
        lines.append(f"state.{key}={json.dumps(value, sort_keys=True)}")
    offset = 0
    blobs = []
    for i, (name, arr) in enumerate(arrays):
        raw = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        shape = ",".join(str(d) for d in np.shape(arr))
        lines.append(f"array.{i}={name};{shape};{offset};{len(raw)}")
        blobs.append(raw)
        offset += len(raw)
    with open(os.path.join(path, "manifest.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(os.path.join(path, "arrays.bin"), "wb") as fh:
        for raw in blobs:
            fh.write(raw)
    return path


def read_checkpoint(path):
    """Returns ``(config, arrays dict in manifest order, state dict)``."""
    with open(os.path.join(path, "manifest.txt")) as fh:
        entries = [line.rstrip("\n").split("=", 1) for line in fh if line.strip()]
    header = {k: v for k, v in entries if not k.startswith(("config.", "state.", "array."))}
    if int(header.get("format_version", -1)) != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {header.get('format_version')}")
    if header.get("byte_order") != "little":
        raise ValueError("checkpoint byte order must be little")
    dtype = np.dtype(header["dtype"]).newbyteorder("<")
    cfg = _parse_config({k[7:]: v for k, v in entries if k.startswith("config.")})
    state = {k[6:]: json.loads(v) for k, v in entries if k.startswith("state.")}
    with open(os.path.join(path, "arrays.bin"), "rb") as fh:
        blob = fh.read()
    arrays = {}
    for k, v in entries:
        if not k.startswith("array."):
            continue
        name, shape, offset, nbytes = v.split(";")
        shape = tuple(int(d) for d in shape.split(",")) if shape else ()
        offset, nbytes = int(offset), int(nbytes)
        if offset + nbytes > len(blob):
            raise ValueError(f"array {name} extends past the end of arrays.bin")
        arr = np.frombuffer(blob, dtype=dtype, count=nbytes // dtype.itemsize, offset=offset)
        arrays[name] = arr.reshape(shape).astype(np.dtype(header["dtype"]))
    return cfg, arrays, state


def load_into(model, arrays):
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    for name, p in params.items():
        if name not in arrays:
            raise ValueError(f"checkpoint lacks parameter {name}")
        if arrays[name].shape != p.shape:
            raise ValueError(f"shape mismatch for {name}: {arrays[name].shape} vs {p.shape}")
        p.data[...] = arrays[name]
    for name, b in buffers.items():
        if name not in arrays:
            raise ValueError(f"checkpoint lacks buffer {name}")
        b[...] = arrays[name]


def load_checkpoint(path):
    """Returns ``(model, extra_arrays, state)``; extras are non-model arrays."""
    cfg, arrays, state = read_checkpoint(path)
    model = PoseModel(cfg)
    load_into(model, arrays)
    known = set(dict(model.named_parameters())) | set(dict(model.named_buffers()))
    extra = {k: v for k, v in arrays.items() if k not in known}
    return model, extra, state

"""Versioned binary checkpoint container with a textual manifest.

The format is a pure function of config and parameter values: a zip-based
container (npz) would embed archive timestamps and break bit-identical
re-saves. Layout: magic, version, config JSON, then per-tensor records of
name, shape and raw little-endian float64 data in a fixed traversal order.
The manifest lists every tensor with shape and sha256 so a checkpoint can
be audited without parsing the binary."""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict

import numpy as np

from .model import ModelConfig, ModelParams, init_params
from .tensor import named_tensors

MAGIC = b"MGNTCKPT"
VERSION = 1


def _config_bytes(config: ModelConfig) -> bytes:
    return json.dumps(asdict(config), sort_keys=True).encode("utf-8")


def save_checkpoint(path: str, config: ModelConfig, params: ModelParams) -> None:
    named = named_tensors(params)
    blob = io.BytesIO()
    blob.write(MAGIC)
    blob.write(struct.pack("<I", VERSION))
    cfg = _config_bytes(config)
    blob.write(struct.pack("<I", len(cfg)))
    blob.write(cfg)
    blob.write(struct.pack("<I", len(named)))
    lines = [f"config sha256:{hashlib.sha256(cfg).hexdigest()}"]
    for name, p in named:
        data = np.ascontiguousarray(p.data, dtype="<f8")
        encoded = name.encode("utf-8")
        blob.write(struct.pack("<H", len(encoded)))
        blob.write(encoded)
        blob.write(struct.pack("<B", data.ndim))
        for dim in data.shape:
            blob.write(struct.pack("<Q", dim))
        raw = data.tobytes()
        blob.write(raw)
        shape = "x".join(map(str, data.shape)) or "scalar"
        lines.append(f"{name} {shape} sha256:{hashlib.sha256(raw).hexdigest()}")
    with open(path, "wb") as fh:
        fh.write(blob.getvalue())
    with open(path + ".manifest.txt", "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_checkpoint(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    """Low-level read: (config dict, name -> array)."""
    with open(path, "rb") as fh:
        buf = fh.read()
    view = io.BytesIO(buf)

    def take(fmt):
        size = struct.calcsize(fmt)
        chunk = view.read(size)
        if len(chunk) != size:
            raise ValueError(f"{path}: truncated checkpoint")
        return struct.unpack(fmt, chunk)

    if view.read(len(MAGIC)) != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (version,) = take("<I")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (cfg_len,) = take("<I")
    config = json.loads(view.read(cfg_len).decode("utf-8"))
    (count,) = take("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = take("<H")
        name = view.read(name_len).decode("utf-8")
        (ndim,) = take("<B")
        shape = tuple(take("<Q")[0] for _ in range(ndim))
        n_items = int(np.prod(shape)) if shape else 1
        raw = view.read(n_items * 8)
        if len(raw) != n_items * 8:
            raise ValueError(f"{path}: truncated tensor {name}")
        tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    return config, tensors


def load_checkpoint(
    path: str, expected_config: ModelConfig | None = None
) -> tuple[ModelConfig, ModelParams]:
    """Rehydrate config and parameters; refuses a config mismatch.

    Passing expected_config asserts the checkpoint was produced by an
    identical configuration (resume safety).
    """
    cfg_dict, tensors = read_checkpoint(path)
    config = ModelConfig(**cfg_dict)
    if expected_config is not None and asdict(expected_config) != cfg_dict:
        raise ValueError(
            f"{path}: checkpoint config does not match the requested one; "
            "refusing to resume"
        )
    params = init_params(config)
    named = dict(named_tensors(params))
    if set(named) != set(tensors):
        missing = sorted(set(named) ^ set(tensors))
        raise ValueError(f"{path}: tensor name mismatch near {missing[:3]}")
    for name, arr in tensors.items():
        if named[name].data.shape != arr.shape:
            raise ValueError(
                f"{path}: {name} has shape {arr.shape}, "
                f"expected {named[name].data.shape}"
            )
        named[name].data = arr
    return config, params

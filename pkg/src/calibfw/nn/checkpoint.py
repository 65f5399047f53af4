"""Checkpoint files: ``CFW1`` magic, a length-prefixed JSON header, then
little-endian float32 blobs in header order (parameters, then momentum)."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .network import ArchConfig, Network
from .optim import OptimizerState

MAGIC = b"CFW1"
SCHEMA_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    net: Network
    state: OptimizerState
    rng_state: dict | None = None
    extra: dict = field(default_factory=dict)


def _blob_entries(names_shapes):
    return [{"name": n, "shape": list(s)} for n, s in names_shapes]


def save_checkpoint(net: Network, state: OptimizerState, path, rng_state=None, extra=None) -> Path:
    path = Path(path)
    params = [(k, v.data) for k, v in net.params.items()]
    velocity = [(k, state.velocity[k]) for k in net.params if k in state.velocity]
    header = {
        "schema_version": SCHEMA_VERSION,
        "arch": net.config.to_dict(),
        "params": _blob_entries((k, a.shape) for k, a in params),
        "velocity": _blob_entries((k, a.shape) for k, a in velocity),
        "optimizer": state.to_dict(),
        "rng_state": rng_state,
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(hbytes)))
        fh.write(hbytes)
        for _, a in params + velocity:
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return path


def read_header(path) -> dict:
    return _read(path)[0]


def _read(path):
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic bytes)")
    if len(raw) < 8:
        raise CheckpointError(f"{path}: truncated file")
    (hlen,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + hlen:
        raise CheckpointError(f"{path}: truncated file")
    try:
        header = json.loads(raw[8:8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    if header.get("schema_version") != SCHEMA_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint schema version {header.get('schema_version')} != {SCHEMA_VERSION}"
        )
    return header, raw, 8 + hlen


def load_checkpoint(path, net: Network | None = None) -> Checkpoint:
    """Load a checkpoint; with ``net`` given, parameters must match its shapes."""
    header, raw, offset = _read(path)
    arrays = {}
    for section in ("params", "velocity"):
        arrays[section] = {}
        for entry in header[section]:
            shape = tuple(entry["shape"])
            nbytes = 4 * int(np.prod(shape, dtype=np.int64))
            if offset + nbytes > len(raw):
                raise CheckpointError(f"{path}: truncated file")
            arrays[section][entry["name"]] = np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=offset).reshape(shape)
            offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes")

    arch = ArchConfig.from_dict(header["arch"])
    if net is None:
        net = Network(arch, dtype=np.float32)
    else:
        have = {k: v.shape for k, v in net.params.items()}
        want = {k: a.shape for k, a in arrays["params"].items()}
        if have != want:
            raise CheckpointError(f"{path}: shape disagreement between checkpoint and network ({arch.name})")
    try:
        net.load_state_dict(arrays["params"])
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: shape disagreement: {exc}") from exc
    state = OptimizerState.from_dict(header["optimizer"])
    state.velocity = {k: a.astype(net.dtype) for k, a in arrays["velocity"].items()}
    return Checkpoint(net, state, header.get("rng_state"), header.get("extra", {}))

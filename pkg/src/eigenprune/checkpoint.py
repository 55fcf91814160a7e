"""EPCK binary checkpoints.

Layout (all integers little-endian)::

    b"EPCK" | u32 version | u32 len | config JSON | u32 n | n x tensor
    [version 2 only] u32 m | m x tensor        (token-indexed bias deltas)

    tensor := u32 name_len | UTF-8 name | u32 ndim | ndim x u64 dim | f64 data
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from io import BytesIO
from pathlib import Path

import numpy as np
import torch

from .model import ModelConfig, PrunedModel, TransformerModel

MAGIC = b"EPCK"
VERSION_MODEL = 1
VERSION_PRUNED = 2


class CheckpointError(ValueError):
    pass


def _write_tensor(buf: BytesIO, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    arr = np.ascontiguousarray(arr, dtype="<f8")
    buf.write(struct.pack("<I", len(raw)) + raw)
    buf.write(struct.pack("<I", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    buf.write(arr.tobytes())


def _read_exact(buf: BytesIO, n: int) -> bytes:
    data = buf.read(n)
    if len(data) != n:
        raise CheckpointError("truncated checkpoint")
    return data


def _read_u32(buf: BytesIO) -> int:
    return struct.unpack("<I", _read_exact(buf, 4))[0]


def _read_tensor(buf: BytesIO) -> tuple[str, np.ndarray]:
    name = _read_exact(buf, _read_u32(buf)).decode("utf-8")
    ndim = _read_u32(buf)
    shape = struct.unpack(f"<{ndim}Q", _read_exact(buf, 8 * ndim))
    count = int(np.prod(shape)) if ndim else 1
    arr = np.frombuffer(_read_exact(buf, 8 * count), dtype="<f8").reshape(shape)
    return name, arr.astype(np.float64)


def _tensors(buf: BytesIO, items: dict[str, np.ndarray]) -> None:
    buf.write(struct.pack("<I", len(items)))
    for name, arr in items.items():
        _write_tensor(buf, name, arr)


def dumps(model: TransformerModel | PrunedModel) -> bytes:
    pruned = isinstance(model, PrunedModel)
    base = model.model if pruned else model
    buf = BytesIO()
    buf.write(MAGIC + struct.pack("<I", VERSION_PRUNED if pruned else VERSION_MODEL))
    cfg = json.dumps(asdict(base.config), sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(cfg)) + cfg)
    _tensors(buf, {k: v.detach().numpy() for k, v in base.state_dict().items()})
    if pruned:
        _tensors(buf, dict(model.delta_bias))
    return buf.getvalue()


def loads(data: bytes, source: str = "<bytes>") -> TransformerModel | PrunedModel:
    buf = BytesIO(data)
    if buf.read(4) != MAGIC:
        raise CheckpointError(f"{source}: not an EPCK checkpoint")
    version = _read_u32(buf)
    if version not in (VERSION_MODEL, VERSION_PRUNED):
        raise CheckpointError(f"{source}: unsupported EPCK version {version}")
    config = ModelConfig(**json.loads(_read_exact(buf, _read_u32(buf)).decode("utf-8")))
    model = TransformerModel(config)
    state = dict(_read_tensor(buf) for _ in range(_read_u32(buf)))
    expected = model.state_dict()
    if set(state) != set(expected):
        raise CheckpointError(f"{source}: tensor names do not match the model layout")
    model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in state.items()})
    model.eval()
    if version == VERSION_MODEL:
        return model
    deltas = dict(_read_tensor(buf) for _ in range(_read_u32(buf)))
    unknown = set(deltas) - set(model.affines())
    if unknown:
        raise CheckpointError(f"{source}: bias deltas for unknown matrices {sorted(unknown)}")
    return PrunedModel(model=model, delta_bias=deltas)


def save(model: TransformerModel | PrunedModel, path) -> None:
    try:
        Path(path).write_bytes(dumps(model))
    except OSError as e:
        raise OSError(f"cannot write checkpoint {path}: {e}") from e


def load(path) -> TransformerModel | PrunedModel:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise OSError(f"cannot read checkpoint {path}: {e}") from e
    return loads(data, str(path))

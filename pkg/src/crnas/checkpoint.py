"""Binary container for model weights.

Layout (little-endian)::

    magic      4 bytes   b"CRNA" (supernet) or b"CRNS" (surrogate)
    version    uint16
    meta_len   uint32, followed by that many bytes of UTF-8 JSON
    count      uint32
    shape table, per tensor: name_len uint16, name, ndim uint8, ndim x uint32
    data       float32 arrays in table order
"""
from __future__ import annotations

import io
import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch

FORMAT_VERSION = 1
SUPERNET_MAGIC = b"CRNA"
SURROGATE_MAGIC = b"CRNS"


class CheckpointError(ValueError):
    pass


def dumps(state: dict[str, torch.Tensor], magic: bytes, meta: dict) -> bytes:
    buf = io.BytesIO()
    buf.write(magic)
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    buf.write(struct.pack("<HI", FORMAT_VERSION, len(meta_bytes)))
    buf.write(meta_bytes)
    buf.write(struct.pack("<I", len(state)))
    arrays = []
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy().astype("<f4")
        raw = name.encode()
        buf.write(struct.pack("<HB", len(raw), arr.ndim))
        buf.write(raw)
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        arrays.append(arr)
    for arr in arrays:
        buf.write(np.ascontiguousarray(arr).tobytes())
    return buf.getvalue()


def loads(data: bytes, magic: bytes) -> tuple["OrderedDict[str, torch.Tensor]", dict]:
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated checkpoint at byte {pos}")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    found = bytes(take(4))
    if found != magic:
        raise CheckpointError(f"bad magic {found!r}, expected {magic!r}")
    version, meta_len = struct.unpack("<HI", take(6))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {version}")
    meta = json.loads(bytes(take(meta_len)))
    (count,) = struct.unpack("<I", take(4))
    table = []
    for _ in range(count):
        name_len, ndim = struct.unpack("<HB", take(3))
        name = bytes(take(name_len)).decode()
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        table.append((name, shape))
    state: OrderedDict[str, torch.Tensor] = OrderedDict()
    for name, shape in table:
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape)
        state[name] = torch.from_numpy(arr.astype(np.float32))
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes")
    return state, meta


def save(path: str | Path, state: dict[str, torch.Tensor], magic: bytes, meta: dict) -> None:
    Path(path).write_bytes(dumps(state, magic, meta))


def load(path: str | Path, magic: bytes) -> tuple["OrderedDict[str, torch.Tensor]", dict]:
    return loads(Path(path).read_bytes(), magic)


def restore(module: torch.nn.Module, state: dict[str, torch.Tensor]) -> None:
    """Load float32 arrays into ``module``, casting to each target's dtype."""
    target = module.state_dict()
    missing = set(target) ^ set(state)
    if missing:
        raise CheckpointError(f"state keys differ: {sorted(missing)[:5]}")
    module.load_state_dict({k: v.to(target[k].dtype) for k, v in state.items()})

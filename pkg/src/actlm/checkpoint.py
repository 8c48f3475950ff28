"""Binary checkpoint container: little-endian, length-prefixed named-tensor
records with a whole-file checksum. Round trips are bitwise exact."""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import asdict

import numpy as np

from .autodiff import Tensor
from .config import ArchConfig
from .model import ModelState

MAGIC = b"ALMC"
FORMAT_VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class CheckpointError(Exception):
    pass


def save_checkpoint(state: ModelState, path, stage: str = "", step: int = 0,
                    rng_state=None) -> None:
    """Atomic write (temp file + rename) of every parameter group."""
    header = {
        "arch": asdict(state.cfg),
        "stage": stage,
        "step": int(step),
        "rng_state": rng_state,
        "groups": sorted(state.groups),
    }
    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    hbytes = json.dumps(header, sort_keys=True).encode()
    chunks.append(struct.pack("<I", len(hbytes)))
    chunks.append(hbytes)
    records = []
    for group in sorted(state.groups):
        for name in sorted(state.groups[group]):
            records.append((f"{group}/{name}", state.groups[group][name].data))
    chunks.append(struct.pack("<I", len(records)))
    for name, data in records:
        nb = name.encode()
        le_dtype = np.dtype("<f4") if data.dtype == np.float32 else np.dtype("<f8")
        arr = np.ascontiguousarray(data).astype(le_dtype, copy=False)
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<B", _DTYPE_CODES[le_dtype]))
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    body = b"".join(chunks)
    digest = hashlib.sha256(body).digest()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(body + digest)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Returns (ModelState, meta dict with stage/step/rng_state)."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 32 + 12:
        raise CheckpointError("truncated checkpoint file")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checksum mismatch: corrupt or truncated checkpoint")
    off = 0
    if body[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file")
    off = 4
    (version,) = struct.unpack_from("<I", body, off)
    off += 4
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {version} != supported {FORMAT_VERSION}")
    (hlen,) = struct.unpack_from("<I", body, off)
    off += 4
    header = json.loads(body[off:off + hlen])
    off += hlen
    (n_records,) = struct.unpack_from("<I", body, off)
    off += 4
    cfg = ArchConfig(**header["arch"])
    groups: dict[str, dict[str, Tensor]] = {g: {} for g in header["groups"]}
    for _ in range(n_records):
        (nlen,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off:off + nlen].decode()
        off += nlen
        code, ndim = struct.unpack_from("<BB", body, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", body, off)
        off += 4 * ndim
        dtype = _CODE_DTYPES.get(code)
        if dtype is None:
            raise CheckpointError(f"unknown dtype code {code}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize if ndim else dtype.itemsize
        arr = np.frombuffer(body[off:off + nbytes], dtype=dtype).reshape(shape).copy()
        off += nbytes
        group, _, tname = name.partition("/")
        if group not in groups:
            raise CheckpointError(f"tensor {name!r} outside declared groups")
        t = Tensor.__new__(Tensor)
        t.data, t.parents, t._backward = arr, (), None
        groups[group][tname] = t
    state = ModelState(cfg, groups)
    meta = {"stage": header["stage"], "step": header["step"],
            "rng_state": header["rng_state"]}
    return state, meta

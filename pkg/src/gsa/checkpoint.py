"""Binary checkpoint container.

Layout (all integers little-endian)::

    "GSA1" | version u32 | manifest_len u64 | manifest (UTF-8 JSON) | payload

The manifest is a JSON array of ``{name, dtype, shape, byteOffset}``.  Offsets
are relative to the payload start, strictly increasing and 64-byte aligned;
the manifest is space-padded so the payload itself starts on a 64-byte
boundary.  Arrays are stored raw in little-endian row-major order.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

MAGIC = b"GSA1"
VERSION = 1
ALIGN = 64
_HEADER = struct.Struct("<4sIQ")
_DTYPES = {"f32": "<f4", "f64": "<f8", "i64": "<i8", "u8": "u1"}


class CheckpointError(ValueError):
    """The file is not a readable checkpoint."""


def _align(n: int) -> int:
    return -(-n // ALIGN) * ALIGN


def _dtype_tag(a: np.ndarray) -> str:
    for tag, dt in _DTYPES.items():
        if a.dtype == np.dtype(dt):
            return tag
    raise CheckpointError(f"cannot store dtype {a.dtype}")


def save(path, tensors: dict[str, np.ndarray]) -> None:
    """Write ``tensors`` atomically (temp file + rename)."""
    manifest, offset = [], 0
    arrays = []
    for name, a in tensors.items():
        a = np.asarray(a)
        tag = _dtype_tag(a)
        manifest.append({"name": name, "dtype": tag, "shape": list(a.shape), "byteOffset": offset})
        arrays.append((offset, np.ascontiguousarray(a, dtype=_DTYPES[tag])))
        # empty tensors still take one aligned slot so offsets stay strictly increasing
        offset = _align(offset + max(a.nbytes, 1))
    text = json.dumps(manifest).encode()
    text += b" " * (_align(_HEADER.size + len(text)) - _HEADER.size - len(text))
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, len(text)))
        f.write(text)
        pos = 0
        for off, a in arrays:
            f.write(b"\0" * (off - pos))
            f.write(a.tobytes())
            pos = off + a.nbytes
    os.replace(tmp, path)


def load(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < _HEADER.size:
        raise CheckpointError("truncated header")
    magic, version, mlen = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = _HEADER.size + mlen
    if len(blob) < start:
        raise CheckpointError("truncated manifest")
    try:
        manifest = json.loads(blob[_HEADER.size:start].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable manifest: {exc}") from None
    payload = memoryview(blob)[start:]
    out, expect = {}, 0
    for entry in manifest:
        name, tag, shape, off = entry["name"], entry["dtype"], entry["shape"], entry["byteOffset"]
        if name in out:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        if tag not in _DTYPES:
            raise CheckpointError(f"unknown dtype {tag!r} for {name!r}")
        dt = np.dtype(_DTYPES[tag])
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        # every tensor starts exactly where the previous one's aligned slot ends
        if off % ALIGN or off != expect:
            raise CheckpointError(f"bad offset {off} for {name!r}: shapes and offsets disagree (expected {expect})")
        expect = _align(off + max(nbytes, 1))
        if off + nbytes > len(payload):
            raise CheckpointError(f"payload too short for {name!r} with shape {shape}")
        a = np.frombuffer(payload[off:off + nbytes], dtype=dt).reshape(shape)
        out[name] = a.astype(dt.newbyteorder("="), copy=True)
    if manifest:
        e = manifest[-1]
        end = e["byteOffset"] + int(np.prod(e["shape"], dtype=np.int64)) * np.dtype(_DTYPES[e["dtype"]]).itemsize
        if len(payload) != end:
            raise CheckpointError(f"payload is {len(payload)} bytes, manifest describes {end}")
    elif len(payload):
        raise CheckpointError("payload present but manifest is empty")
    return out


def encode_json(obj) -> np.ndarray:
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode(), dtype=np.uint8).copy()


def decode_json(a: np.ndarray):
    return json.loads(a.tobytes().decode())

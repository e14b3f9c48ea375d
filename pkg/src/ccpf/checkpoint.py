"""
Versioned binary container for named numeric arrays plus a JSON metadata block.

Layout (all integers little-endian)::

    b"CCPF" | u32 version | u32 meta_len | meta (UTF-8 JSON, sorted keys)
    | u32 n_arrays | per array, in name order:
      u16 name_len | name | 2-byte dtype tag | u8 ndim | u64 * ndim shape | payload

The metadata records every array's shape, and loading checks the array
headers against it.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"CCPF"
VERSION = 1
_TAGS = {b"f8": np.dtype("<f8"), b"i8": np.dtype("<i8")}


def _tag(arr: np.ndarray) -> tuple[bytes, np.ndarray]:
    if arr.dtype.kind == "f":
        return b"f8", arr.astype("<f8")
    if arr.dtype.kind in "iub":
        return b"i8", arr.astype("<i8")
    raise CheckpointError(f"unsupported array dtype {arr.dtype}")


def encode(meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    arrays = {k: np.asarray(v) for k, v in arrays.items()}
    meta = dict(meta)
    meta["_shapes"] = {k: list(v.shape) for k, v in arrays.items()}
    text = json.dumps(meta, sort_keys=True, separators=(",", ":"), allow_nan=True).encode("utf-8")
    out = [MAGIC, struct.pack("<II", VERSION, len(text)), text, struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        tag, arr = _tag(arrays[name])
        bname = name.encode("utf-8")
        out.append(struct.pack("<H", len(bname)) + bname + tag + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint is truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(buf: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic bytes)")
    version, meta_len = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"checkpoint format version {version}, expected {VERSION}")
    try:
        meta = json.loads(r.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt metadata block: {exc}") from None
    shapes = meta.pop("_shapes", {})
    (count,) = r.unpack("<I")
    arrays = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        tag = r.take(2)
        if tag not in _TAGS:
            raise CheckpointError(f"array {name!r}: unknown dtype tag {tag!r}")
        (ndim,) = r.unpack("<B")
        shape = tuple(r.unpack(f"<{ndim}Q")) if ndim else ()
        if name not in shapes or tuple(shapes[name]) != shape:
            raise CheckpointError(f"array {name!r}: shape {shape} does not match recorded shape {shapes.get(name)}")
        dtype = _TAGS[tag]
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        arrays[name] = np.frombuffer(r.take(n * dtype.itemsize), dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    if r.pos != len(buf):
        raise CheckpointError("trailing bytes after the last array")
    if set(arrays) != set(shapes):
        raise CheckpointError("array table does not match the metadata")
    return meta, arrays


def save_checkpoint(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    """Write atomically: a temporary sibling file is renamed over ``path``."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(meta, arrays))
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from exc
    return decode(buf)

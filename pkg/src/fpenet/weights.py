"""Binary weight file.

Layout (little-endian): ``b"FPEW"``, u32 version, u32 tensor count, then per
tensor u16 name length, UTF-8 name, u8 rank, u32 per dim, float32 data; a
trailing u64 holds the byte sum of everything before it, modulo 2**64.
"""
from __future__ import annotations

import io
import os
import struct
from collections import OrderedDict

import numpy as np

from .errors import (
    CorruptWeightsError,
    MagicMismatchError,
    MissingTensorError,
    ShapeMismatchError,
    UnexpectedTensorError,
    VersionMismatchError,
)

MAGIC = b"FPEW"
VERSION = 1


def _checksum(buf):
    return int(np.frombuffer(buf, dtype=np.uint8).sum(dtype=np.uint64)) % (1 << 64)


def encode_tensors(arrays):
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<II", VERSION, len(arrays)))
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        out.write(struct.pack("<H", len(raw)))
        out.write(raw)
        out.write(struct.pack("<B", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = out.getvalue()
    return body + struct.pack("<Q", _checksum(body))


def decode_tensors(buf):
    buf = bytes(buf)
    if len(buf) >= 4 and buf[:4] != MAGIC:
        raise MagicMismatchError(f"bad magic {bytes(buf[:4])!r}, expected {MAGIC!r}")
    if len(buf) < 12 + 8:
        raise CorruptWeightsError(f"weight file truncated: {len(buf)} bytes")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise VersionMismatchError(f"weight file version {version}, expected {VERSION}")
    body, tail = buf[:-8], buf[-8:]
    (stored,) = struct.unpack("<Q", tail)
    pos = 12
    arrays = OrderedDict()
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            if pos + nlen > len(body):
                raise struct.error("name runs past end")
            name = bytes(body[pos : pos + nlen]).decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", body, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            nbytes = 4 * int(np.prod(dims, dtype=np.int64))
            if pos + nbytes > len(body):
                raise struct.error("tensor data runs past end")
            arrays[name] = np.frombuffer(body, dtype="<f4", count=nbytes // 4, offset=pos).reshape(dims).astype(np.float32)
            pos += nbytes
    except (struct.error, UnicodeDecodeError) as exc:
        raise CorruptWeightsError(f"weight file corrupt or truncated: {exc}") from None
    if pos != len(body):
        raise CorruptWeightsError(f"weight file has {len(body) - pos} unexplained trailing bytes")
    if _checksum(body) != stored:
        raise CorruptWeightsError("weight file checksum mismatch")
    return arrays


def save_weights(g, sink):
    data = encode_tensors(g.state_arrays())
    if isinstance(sink, (str, os.PathLike)):
        tmp = f"{os.fspath(sink)}.tmp"
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, sink)
    else:
        sink.write(data)
    return len(data)


def load_weights(g, source):
    """Load into ``g``; on any error ``g`` is left untouched."""
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            buf = fh.read()
    elif isinstance(source, (bytes, bytearray, memoryview)):
        buf = bytes(source)
    else:
        buf = source.read()
    arrays = decode_tensors(buf)
    expected = g.state_arrays()
    for name in arrays:
        if name not in expected:
            raise UnexpectedTensorError(f"unexpected tensor {name!r} in weight file")
    for name, ref in expected.items():
        if name not in arrays:
            raise MissingTensorError(f"weight file lacks tensor {name!r}")
        if arrays[name].shape != ref.shape:
            raise ShapeMismatchError(f"tensor {name!r} has shape {arrays[name].shape}, graph expects {ref.shape}")
    g.load_state_arrays(arrays)

"""Binary blob container used for frames, features, embeddings and checkpoints.

Layout: 16-byte header followed by the payload::

    magic   4s   b"RFVB"
    version u32  little-endian
    dtype   u32  0=u8, 1=f32, 2=f64
    nbytes  u64  payload length
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .errors import CorruptManifest, FormatVersionMismatch

MAGIC = b"RFVB"
VERSION = 1
HEADER = struct.Struct("<4sIIQ")

DTYPES = {0: np.dtype("<u1"), 1: np.dtype("<f4"), 2: np.dtype("<f8")}
CODES = {v: k for k, v in DTYPES.items()}


def encode_blob(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr)
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    if dt not in CODES:
        raise TypeError(f"unsupported blob dtype {arr.dtype}")
    payload = arr.astype(dt, copy=False).tobytes()
    return HEADER.pack(MAGIC, VERSION, CODES[dt], len(payload)) + payload


def decode_blob(data: bytes, where: str = "<blob>") -> np.ndarray:
    """Return the flat payload array. Raises on bad magic, version or length."""
    if len(data) < HEADER.size:
        raise CorruptManifest(f"{where}: truncated header")
    magic, version, code, nbytes = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CorruptManifest(f"{where}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatVersionMismatch(f"{where}: blob version {version}, expected {VERSION}")
    if code not in DTYPES:
        raise CorruptManifest(f"{where}: unknown dtype code {code}")
    payload = data[HEADER.size:]
    if len(payload) != nbytes:
        raise CorruptManifest(f"{where}: payload is {len(payload)} bytes, header says {nbytes}")
    dt = DTYPES[code]
    if nbytes % dt.itemsize:
        raise CorruptManifest(f"{where}: payload not a multiple of {dt.itemsize}")
    return np.frombuffer(payload, dtype=dt).copy()


def write_blob(path: str | os.PathLike, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_blob(arr))


def read_blob(path: str | os.PathLike, line: int | None = None) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except FileNotFoundError as exc:
        raise CorruptManifest(f"missing blob {os.fspath(path)}", line) from exc
    try:
        return decode_blob(data, os.fspath(path))
    except CorruptManifest as exc:
        if line is not None:
            raise CorruptManifest(str(exc), line) from exc
        raise

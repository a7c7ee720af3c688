"""Versioned binary container for named float64/int64 arrays.

Layout: magic ``PWB1\\n``, one line of canonical JSON header (kind, version,
metadata, array table), a blank line, the arrays as little-endian bytes in
table order, then a little-endian CRC32 of everything before it.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"PWB1\n"
_DTYPES = {"f8": "<f8", "i8": "<i8"}


class BlobError(ValueError):
    pass


def pack(kind: str, arrays: dict[str, np.ndarray], meta: dict | None = None, version: int = 1) -> bytes:
    table = []
    payload = []
    for name, arr in arrays.items():
        a = np.asarray(arr)
        code = "i8" if np.issubdtype(a.dtype, np.integer) or a.dtype == np.bool_ else "f8"
        a = np.ascontiguousarray(a, dtype=_DTYPES[code])
        table.append({"name": name, "dtype": code, "shape": list(a.shape)})
        payload.append(a.tobytes())
    header = {"kind": kind, "version": version, "meta": meta or {}, "arrays": table}
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = MAGIC + head + b"\n\n" + b"".join(payload)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def unpack(data: bytes, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    if not data.startswith(MAGIC):
        raise BlobError("bad magic")
    end = data.find(b"\n\n", len(MAGIC))
    if end < 0:
        raise BlobError("unterminated header")
    header = json.loads(data[len(MAGIC):end].decode("utf-8"))
    if kind is not None and header.get("kind") != kind:
        raise BlobError(f"expected blob kind {kind!r}, got {header.get('kind')!r}")
    if len(data) < 4 or struct.unpack("<I", data[-4:])[0] != (zlib.crc32(data[:-4]) & 0xFFFFFFFF):
        raise BlobError("crc mismatch")
    pos = end + 2
    arrays = {}
    for spec in header["arrays"]:
        count = int(np.prod(spec["shape"], dtype=np.int64))
        nbytes = 8 * count
        if pos + nbytes > len(data) - 4:
            raise BlobError("truncated payload")
        arrays[spec["name"]] = np.frombuffer(data[pos:pos + nbytes], dtype=_DTYPES[spec["dtype"]]) \
            .reshape(spec["shape"]).copy()
        pos += nbytes
    if pos != len(data) - 4:
        raise BlobError("trailing bytes after payload")
    return header, arrays


def save(path, kind: str, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    Path(path).write_bytes(pack(kind, arrays, meta))


def load(path, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    return unpack(Path(path).read_bytes(), kind)

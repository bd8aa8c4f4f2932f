"""Binary checkpoint container.

Layout (all integers little-endian)::

    magic        8 bytes  b"VCTCKPT\\0"
    version      u32
    header_len   u32
    header       header_len bytes of UTF-8 JSON (model config, metadata, array count)
    records      repeated: u32 name_len, name (UTF-8), u32 ndim, ndim x u32 dims,
                 float32 data in C order
    crc32        u32 over every preceding byte

The whole file is parsed and verified before anything is returned, so a
truncated or corrupted file never yields partial state.
"""
from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path
from typing import Any

import numpy as np

from .errors import CorruptFileError, MissingFileError, VersionMismatchError

MAGIC = b"VCTCKPT\x00"
VERSION = 1
_U32 = struct.Struct("<I")


def write_container(path, header: dict[str, Any], arrays: dict[str, np.ndarray]) -> None:
    header = dict(header, array_count=len(arrays))
    hdr = json.dumps(header, sort_keys=True).encode("utf-8")
    chunks = [MAGIC, _U32.pack(VERSION), _U32.pack(len(hdr)), hdr]
    for name, arr in arrays.items():
        a = np.asarray(arr, dtype="<f4", order="C")
        nm = name.encode("utf-8")
        chunks += [_U32.pack(len(nm)), nm, _U32.pack(a.ndim)]
        chunks += [_U32.pack(d) for d in a.shape]
        chunks.append(a.tobytes())
    body = b"".join(chunks)
    body += _U32.pack(zlib.crc32(body) & 0xFFFFFFFF)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(body)
    os.replace(tmp, path)


def read_container(path) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"missing checkpoint: {path}")
    raw = path.read_bytes()
    if len(raw) < len(MAGIC) + 12 or raw[:len(MAGIC)] != MAGIC:
        raise CorruptFileError(f"{path}: not a checkpoint (bad magic or truncated)")
    (version,) = _U32.unpack_from(raw, len(MAGIC))
    if version != VERSION:
        raise VersionMismatchError(f"{path}: checkpoint version {version}, expected {VERSION}")
    (crc,) = _U32.unpack_from(raw, len(raw) - 4)
    if zlib.crc32(raw[:-4]) & 0xFFFFFFFF != crc:
        raise CorruptFileError(f"{path}: checksum mismatch (truncated or corrupted)")
    pos = len(MAGIC) + 4
    (hlen,) = _U32.unpack_from(raw, pos)
    pos += 4
    header = json.loads(raw[pos:pos + hlen].decode("utf-8"))
    pos += hlen
    arrays: dict[str, np.ndarray] = {}
    end = len(raw) - 4
    try:
        for _ in range(int(header["array_count"])):
            (nlen,) = _U32.unpack_from(raw, pos)
            name = raw[pos + 4:pos + 4 + nlen].decode("utf-8")
            pos += 4 + nlen
            (ndim,) = _U32.unpack_from(raw, pos)
            shape = struct.unpack_from(f"<{ndim}I", raw, pos + 4)
            pos += 4 + 4 * ndim
            nbytes = 4 * int(np.prod(shape, dtype=np.int64))
            if pos + nbytes > end:
                raise CorruptFileError(f"{path}: record {name!r} runs past end of file")
            arrays[name] = np.frombuffer(raw, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape).copy()
            pos += nbytes
    except struct.error as exc:
        raise CorruptFileError(f"{path}: malformed record table") from exc
    if pos != end:
        raise CorruptFileError(f"{path}: {end - pos} trailing bytes after records")
    return header, arrays

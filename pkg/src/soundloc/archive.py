"""Versioned binary container of named arrays plus a JSON header.

Layout::

    b"SLARCH"            6-byte magic
    uint16  version      little endian
    uint64  header_len
    header_len bytes     UTF-8 JSON: {"meta": ..., "tensors": [...], "sha256": ...}
    payload              concatenated raw little-endian array bytes

The payload hash lets ``read_archive`` reject truncated or bit-flipped files.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import CorruptFileError, VersionMismatchError

MAGIC = b"SLARCH"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<6sHQ")


def write_archive(path, tensors: dict, meta: dict | None = None) -> None:
    entries = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], order="C")
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = json.dumps({"meta": meta or {}, "tensors": entries,
                         "sha256": hashlib.sha256(payload).hexdigest()},
                        sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)))
        fh.write(header)
        fh.write(payload)


def read_archive(path) -> tuple[dict, dict]:
    """Return ``(tensors, meta)``; raises on any structural problem."""
    data = Path(path).read_bytes()
    if len(data) < _PREFIX.size:
        raise CorruptFileError(f"{path}: file too short for an archive header")
    magic, version, header_len = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CorruptFileError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: archive version {version}, expected {FORMAT_VERSION}")
    start = _PREFIX.size
    if len(data) < start + header_len:
        raise CorruptFileError(f"{path}: truncated header")
    try:
        header = json.loads(data[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFileError(f"{path}: unreadable header ({exc})") from exc
    payload = data[start + header_len:]
    expected = sum(e["nbytes"] for e in header["tensors"])
    if len(payload) != expected:
        raise CorruptFileError(f"{path}: payload has {len(payload)} bytes, expected {expected}")
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise CorruptFileError(f"{path}: payload checksum mismatch")
    tensors = {}
    for e in header["tensors"]:
        buf = payload[e["offset"]:e["offset"] + e["nbytes"]]
        tensors[e["name"]] = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return tensors, header["meta"]

"""Binary container: a JSON header followed by little-endian float64 arrays.

Layout (all integers little-endian)::

    offset 0   8 bytes   magic  b"TVCNTR01"
    offset 8   8 bytes   uint64 header length H (bytes of UTF-8 JSON)
    offset 16  H bytes   header JSON (sorted keys, compact separators)
    ...        0-7 bytes zero padding to the next multiple of 8
    data       float64 '<f8' arrays, C order, concatenated

The header carries an ``arrays`` directory: a list of
``{"name", "shape", "offset", "count"}`` records where ``offset`` is the
element offset (in float64 units) from the start of the data section.
Identical inputs always produce identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"TVCNTR01"


class ContainerError(ValueError):
    pass


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def encode(header: dict, arrays: dict[str, np.ndarray]) -> bytes:
    directory = []
    chunks = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        chunks.append(arr.tobytes(order="C"))
        offset += arr.size
    full = dict(header)
    full["arrays"] = directory
    blob = canonical_json(full).encode("utf-8")
    pad = (-(16 + len(blob))) % 8
    return b"".join([MAGIC, struct.pack("<Q", len(blob)), blob, b"\0" * pad, *chunks])


def decode(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if data[:8] != MAGIC:
        raise ContainerError("bad magic")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    start = 16 + hlen
    start += (-start) % 8
    body = np.frombuffer(data, dtype="<f8", offset=start)
    arrays = {}
    for rec in header.pop("arrays"):
        a = body[rec["offset"] : rec["offset"] + rec["count"]]
        if a.size != rec["count"]:
            raise ContainerError(f"truncated array {rec['name']!r}")
        arrays[rec["name"]] = a.reshape(rec["shape"]).astype(np.float64)
    return header, arrays


def write(path: str | os.PathLike, header: dict, arrays: dict[str, np.ndarray]) -> str:
    """Write atomically; return the sha256 hex digest of the bytes written."""
    data = encode(header, arrays)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return hashlib.sha256(data).hexdigest()


def read(path: str | os.PathLike) -> tuple[dict, dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes())


def file_digest(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()

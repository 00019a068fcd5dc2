"""Binary container used by checkpoint, sketch and posterior files.

Layout::

    8 bytes   magic (ASCII, identifies the file kind)
    8 bytes   header length L, unsigned little-endian
    L bytes   UTF-8 JSON header
    rest      little-endian IEEE-754 float64 payload

The header records ``format_version`` and, under ``"arrays"``, the name and
shape of every payload array in storage order (all row-major).
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


def write_container(path, magic: bytes, header: dict, arrays: dict[str, np.ndarray]) -> None:
    if len(magic) != 8:
        raise ValueError("magic must be exactly 8 bytes")
    header = dict(header)
    header["format_version"] = FORMAT_VERSION
    header["arrays"] = [[name, list(np.shape(a))] for name, a in arrays.items()]
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for a in arrays.values():
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def read_container(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != magic:
        raise ValueError(f"{path}: bad magic {raw[:8]!r}, expected {magic!r}")
    if len(raw) < 16:
        raise ValueError(f"{path}: truncated header")
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + n].decode("utf-8"))
    if header.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {header.get('format_version')}")
    offset = 16 + n
    arrays = {}
    for name, shape in header["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        nbytes = 8 * count
        if offset + nbytes > len(raw):
            raise ValueError(f"{path}: payload truncated while reading {name!r}")
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=count,
                                     offset=offset).reshape(shape).astype(float)
        offset += nbytes
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes")
    return header, arrays


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()

"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    8 bytes   magic  b"CFUSECKP"
    u32       format version
    u32       header length in bytes
    header    UTF-8 JSON: config hash, config, dims, variant, array table
    payload   arrays back to back as little-endian float64, in table order
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"CFUSECKP"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sII")


class CheckpointError(ValueError):
    """The file is not a readable checkpoint of a supported version."""


def write_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    table = [{"name": k, "shape": list(np.shape(v))} for k, v in arrays.items()]
    header = json.dumps({**meta, "arrays": table}, sort_keys=True, separators=(",", ":")).encode()
    with open(Path(path), "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)))
        fh.write(header)
        for v in arrays.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    blob = Path(path).read_bytes()
    if len(blob) < _PREFIX.size:
        raise CheckpointError(f"{path}: truncated checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = _PREFIX.size
    try:
        meta = json.loads(blob[start:start + hlen])
    except (json.JSONDecodeError, UnicodeDecodeError) as err:
        raise CheckpointError(f"{path}: corrupt header") from err
    offset = start + hlen
    arrays = {}
    for entry in meta.pop("arrays"):
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + 8 * count
        if end > len(blob):
            raise CheckpointError(f"{path}: payload ends inside array {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(blob[offset:end], dtype="<f8").reshape(shape).astype(np.float64)
        offset = end
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes")
    return arrays, meta

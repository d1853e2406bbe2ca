"""Binary named-tensor container used for checkpoints and tensor dumps.

Layout (all integers little-endian)::

    magic            8 bytes   b"ENSDIVT\\n"
    format version   uint32
    header length    uint32    byte length of the JSON header
    header           UTF-8 JSON: {"kind", "meta", "tensors": [{"name", "shape"}]}
    payload          float64 little-endian, tensors in header order, row-major

The file size is therefore ``16 + header length + 8 * total element count``.
"""

import json
import struct
from pathlib import Path

import numpy as np

from .exceptions import CheckpointError, VersionMismatchError

MAGIC = b"ENSDIVT\n"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sII")


def encode(tensors, kind, meta=None):
    entries = [{"name": name, "shape": list(np.shape(t))} for name, t in tensors.items()]
    header = json.dumps(
        {"kind": kind, "meta": meta or {}, "tensors": entries}, sort_keys=True
    ).encode("utf-8")
    chunks = [_PREFIX.pack(MAGIC, FORMAT_VERSION, len(header)), header]
    for t in tensors.values():
        chunks.append(np.ascontiguousarray(t, dtype="<f8").tobytes())
    return b"".join(chunks)


def decode(blob, kind=None):
    if len(blob) < _PREFIX.size:
        raise CheckpointError("truncated file: missing header")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise VersionMismatchError(f"unrecognized magic bytes {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(
            f"format version {version} not supported (expected {FORMAT_VERSION})"
        )
    start = _PREFIX.size + hlen
    if len(blob) < start:
        raise CheckpointError("truncated file: header incomplete")
    try:
        header = json.loads(blob[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt header: {exc}") from None
    if kind is not None and header.get("kind") != kind:
        raise CheckpointError(f"expected a {kind!r} file, found {header.get('kind')!r}")
    tensors = {}
    offset = start
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + 8 * count
        if end > len(blob):
            raise CheckpointError(f"truncated file while reading {entry['name']!r}")
        tensors[entry["name"]] = (
            np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
            .astype(np.float64)
            .reshape(shape)
        )
        offset = end
    if offset != len(blob):
        raise CheckpointError(f"{len(blob) - offset} trailing bytes after payload")
    return tensors, header.get("meta", {}), header.get("kind")


def write_tensors(path, tensors, kind="tensors", meta=None):
    Path(path).write_bytes(encode(tensors, kind, meta))


def read_tensors(path, kind=None):
    """Return ``(tensors, meta)`` from a file written by :func:`write_tensors`."""
    tensors, meta, _ = decode(Path(path).read_bytes(), kind)
    return tensors, meta

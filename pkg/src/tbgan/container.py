"""Directory containers: a ``meta.json`` sidecar plus raw little-endian arrays.

Every array is written row-major with an explicit dtype and a SHA-256
checksum recorded in the sidecar, so a read either reproduces the written
arrays bit-exactly or raises a specific :class:`BundleIOError`.
"""
import hashlib
import json
import os
from pathlib import Path

import numpy as np

from .errors import (ChecksumError, ContainerParseError, FormatVersionError,
                     TruncatedFileError)

META_NAME = "meta.json"


def dump_json(obj, path):
    """Write JSON deterministically (sorted keys, trailing newline), atomically."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _raw_bytes(array, dtype):
    arr = np.ascontiguousarray(array, dtype=np.dtype(dtype).newbyteorder("<"))
    return arr.tobytes(order="C")


def write_array(directory, name, array, dtype):
    """Write ``array`` to ``directory/name`` and return its sidecar entry."""
    data = _raw_bytes(array, dtype)
    path = Path(directory) / name
    with open(path, "wb") as fh:
        fh.write(data)
    return {
        "file": name,
        "dtype": np.dtype(dtype).name,
        "shape": [int(s) for s in np.shape(array)],
        "nbytes": len(data),
        "sha256": hashlib.sha256(data).hexdigest(),
    }


def read_array(directory, entry, field):
    """Read one array described by a sidecar ``entry``."""
    for key in ("file", "dtype", "shape", "sha256"):
        if key not in entry:
            raise ContainerParseError(f"missing '{key}' in entry '{field}'", field=f"{field}.{key}")
    dtype = np.dtype(entry["dtype"]).newbyteorder("<")
    shape = tuple(int(s) for s in entry["shape"])
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    path = Path(directory) / entry["file"]
    if not path.exists():
        raise TruncatedFileError(f"{path} is missing")
    data = path.read_bytes()
    if len(data) != expected:
        raise TruncatedFileError(
            f"{path}: expected {expected} bytes, found {len(data)}")
    if hashlib.sha256(data).hexdigest() != entry["sha256"]:
        raise ChecksumError(f"{path}: checksum mismatch")
    arr = np.frombuffer(data, dtype=dtype).reshape(shape)
    return arr.astype(dtype.newbyteorder("="), copy=True)


def read_meta(directory, kind, version):
    """Load and sanity-check ``meta.json`` for a container of ``kind``."""
    path = Path(directory) / META_NAME
    if not path.exists():
        raise TruncatedFileError(f"{path} is missing")
    try:
        meta = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ContainerParseError(f"{path}: invalid JSON ({exc})", field=None) from exc
    if not isinstance(meta, dict):
        raise ContainerParseError(f"{path}: top level must be an object")
    for key in ("kind", "format_version"):
        if key not in meta:
            raise ContainerParseError(f"{path}: missing field '{key}'", field=key)
    if meta["kind"] != kind:
        raise ContainerParseError(
            f"{path}: expected kind '{kind}', found '{meta['kind']}'", field="kind")
    if meta["format_version"] != version:
        raise FormatVersionError(
            f"{path}: format version {meta['format_version']} != supported {version}")
    return meta


def require(meta, key, where="meta.json"):
    if key not in meta:
        raise ContainerParseError(f"{where}: missing field '{key}'", field=key)
    return meta[key]

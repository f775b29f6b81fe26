"""Single-file tensor checkpoints.

Layout::

    uint64 little-endian  header length in bytes
    header                UTF-8 JSON: format_version, metadata, tensors[]
    payload               concatenated little-endian float64 buffers

Each ``tensors[]`` entry holds ``name``, ``shape``, ``offset`` and
``nbytes``; offsets are relative to the start of the payload.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from .errors import FormatError

FORMAT_VERSION = 1
_LEN = struct.Struct("<Q")


def save_checkpoint(path, tensors, metadata=None):
    """Write ``{name: array-like}`` atomically to ``path``."""
    entries, blobs, offset = [], [], 0
    for name, value in tensors.items():
        arr = np.ascontiguousarray(getattr(value, "data", value), dtype="<f8")
        blob = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps(
        {"format_version": FORMAT_VERSION, "metadata": metadata or {}, "tensors": entries},
        sort_keys=True,
    ).encode("utf-8")

    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".ckpt-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(_LEN.pack(len(header)))
            fh.write(header)
            for blob in blobs:
                fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path):
    """Return ``(tensors, metadata)`` with tensors as float64 numpy arrays."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _LEN.size:
        raise FormatError(f"{path}: truncated checkpoint")
    (hlen,) = _LEN.unpack_from(raw)
    try:
        header = json.loads(raw[_LEN.size : _LEN.size + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable checkpoint header") from exc
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: checkpoint format {version!r}, expected {FORMAT_VERSION}")
    payload = memoryview(raw)[_LEN.size + hlen :]
    tensors = {}
    for entry in header["tensors"]:
        start, n = entry["offset"], entry["nbytes"]
        if start + n > len(payload):
            raise FormatError(f"{path}: tensor {entry['name']!r} runs past end of file")
        arr = np.frombuffer(payload[start : start + n], dtype="<f8").astype(np.float64)
        tensors[entry["name"]] = arr.reshape(entry["shape"])
    return tensors, header.get("metadata", {})

"""Binary tensor container: JSON manifest + little-endian float32 blobs.

Layout::

    [8 bytes]  uint64 LE manifest byte length
    [manifest] UTF-8 JSON, sorted keys
    [blobs]    concatenated float32 tensors, little endian

The manifest carries a format version, free-form ``meta``, a tensor table
(name -> shape/offset/nbytes, offsets relative to the blob region), and a
crc32 checksum over the whole blob region. Writes are deterministic:
identical tensors and meta produce identical bytes.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


class FormatVersionError(ValueError):
    """File declares a format version this code does not read."""


class ChecksumError(ValueError):
    """Blob region fails its crc32 check or is truncated."""


class ShapeError(ValueError):
    """Declared tensor shape disagrees with its byte length."""


def write_tensors(path: str | Path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named float32 tensors plus JSON-serializable ``meta``.

    Tensors are laid out in sorted-name order. Non-float32 inputs are cast.
    """
    names = sorted(tensors)
    table: dict[str, dict] = {}
    blobs: list[bytes] = []
    offset = 0
    for name in names:
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        raw = arr.tobytes()
        table[name] = {"shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        blobs.append(raw)
        offset += len(raw)
    blob = b"".join(blobs)
    manifest = {
        "format_version": FORMAT_VERSION,
        "meta": meta or {},
        "tensors": table,
        "crc32": zlib.crc32(blob) & 0xFFFFFFFF,
    }
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(head)))
        f.write(head)
        f.write(blob)


def read_tensors(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a container written by :func:`write_tensors`.

    Returns:
        (tensors, meta) with float32 arrays.

    Raises:
        FormatVersionError: unknown ``format_version``.
        ChecksumError: crc mismatch or truncated blob region.
        ShapeError: tensor table inconsistent with declared shapes.
    """
    with open(path, "rb") as f:
        head_len_raw = f.read(8)
        if len(head_len_raw) != 8:
            raise ChecksumError(f"{path}: truncated header")
        (head_len,) = struct.unpack("<Q", head_len_raw)
        head = f.read(head_len)
        if len(head) != head_len:
            raise ChecksumError(f"{path}: truncated manifest")
        manifest = json.loads(head.decode("utf-8"))
        blob = f.read()
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatVersionError(f"{path}: format version {version!r}, expected {FORMAT_VERSION}")
    declared = sum(entry["nbytes"] for entry in manifest["tensors"].values())
    if len(blob) < declared:
        raise ChecksumError(f"{path}: blob region truncated ({len(blob)} < {declared} bytes)")
    if (zlib.crc32(blob) & 0xFFFFFFFF) != manifest["crc32"]:
        raise ChecksumError(f"{path}: crc32 mismatch")
    tensors: dict[str, np.ndarray] = {}
    for name, entry in manifest["tensors"].items():
        shape = tuple(entry["shape"])
        nbytes = entry["nbytes"]
        if int(np.prod(shape)) * 4 != nbytes:
            raise ShapeError(f"{path}: tensor {name!r} shape {shape} != {nbytes} bytes")
        start = entry["offset"]
        arr = np.frombuffer(blob[start : start + nbytes], dtype="<f4").reshape(shape)
        tensors[name] = arr.copy()  # writable, native layout
    return tensors, manifest["meta"]

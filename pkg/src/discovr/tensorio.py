"""Deterministic single-file array container.

Used for checkpoints, synthetic video storage and embedding caches. The
format is a fixed header, a canonical JSON index, raw little-endian
C-order array payloads, and a trailing SHA-256 over everything before
it. Writing the same arrays and metadata twice produces byte-identical
files, and any flipped bit is caught on load.

Layout:
    magic   4 bytes  b"DSCT"
    version u32 LE
    hlen    u64 LE   length of the JSON header
    header  JSON     {"meta": {...}, "arrays": {name: {dtype, shape, offset}}}
    payload          arrays concatenated in sorted-name order
    digest  32 bytes SHA-256 of all preceding bytes
"""

from __future__ import annotations

import hashlib
import json
import struct
from typing import Any, Mapping

import numpy as np

MAGIC = b"DSCT"
FORMAT_VERSION = 1
_DIGEST_LEN = 32


class ContainerError(RuntimeError):
    """Malformed, truncated or checksum-failing container file."""


class VersionError(ContainerError):
    """Container written by an incompatible format version."""


def _canonical_meta(meta: Mapping[str, Any]) -> str:
    # sort_keys + fixed separators so identical content serializes identically
    return json.dumps(meta, sort_keys=True, separators=(",", ":"), allow_nan=False)


def _check_dtype(name: str, arr: np.ndarray) -> np.ndarray:
    if arr.dtype.hasobject:
        raise ContainerError(f"array {name!r} has object dtype")
    # force little-endian, C-contiguous
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    return np.ascontiguousarray(arr, dtype=dt)


def save_arrays(path, arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> None:
    """Write arrays plus JSON-serializable metadata to a container file."""
    meta = dict(meta or {})
    prepared = {}
    index = {}
    offset = 0
    for name in sorted(arrays):
        arr = _check_dtype(name, np.asarray(arrays[name]))
        prepared[name] = arr
        index[name] = {"dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset}
        offset += arr.nbytes

    header = json.dumps({"meta": meta, "arrays": index}, sort_keys=True,
                        separators=(",", ":"), allow_nan=False).encode("utf-8")
    digest = hashlib.sha256()
    with open(path, "wb") as fh:
        for chunk in (MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<Q", len(header)), header):
            digest.update(chunk)
            fh.write(chunk)
        for name in sorted(prepared):
            buf = prepared[name].tobytes(order="C")
            digest.update(buf)
            fh.write(buf)
        fh.write(digest.digest())


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    """Read a container file back; verifies checksum and version."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 4 + 8 + _DIGEST_LEN:
        raise ContainerError(f"{path}: file too short to be a container")
    if blob[:4] != MAGIC:
        raise ContainerError(f"{path}: bad magic {blob[:4]!r}")
    body, digest = blob[:-_DIGEST_LEN], blob[-_DIGEST_LEN:]
    if hashlib.sha256(body).digest() != digest:
        raise ContainerError(f"{path}: checksum mismatch, file is corrupt")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    header_end = 16 + hlen
    if header_end > len(body):
        raise ContainerError(f"{path}: header length exceeds file size")
    try:
        header = json.loads(blob[16:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"{path}: unreadable header ({exc})") from exc

    payload = blob[header_end:-_DIGEST_LEN]
    arrays = {}
    for name, entry in header["arrays"].items():
        dt = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        nbytes = dt.itemsize * int(np.prod(shape, dtype=np.int64)) if shape else dt.itemsize
        start = entry["offset"]
        if start + nbytes > len(payload):
            raise ContainerError(f"{path}: array {name!r} extends past payload")
        arrays[name] = np.frombuffer(payload[start:start + nbytes], dtype=dt).reshape(shape).copy()
    return arrays, header["meta"]

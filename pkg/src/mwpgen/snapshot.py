"""Versioned binary container for named float64 arrays.

Layout: 8-byte magic, little-endian uint32 header length, UTF-8 JSON
header, then the raw payload. The header records the format version, a
SHA-256 checksum of the payload, the entry list (name and shape, in
payload order) and an arbitrary JSON `meta` dict. Payload values are
little-endian float64, entries concatenated in header order.

Parameter snapshots, pretrained node-embedding tables, fitted topic
models and training checkpoints all use this one container.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

MAGIC = b"MWPSNAP\x00"
FORMAT_VERSION = 1


class SnapshotError(ValueError):
    """Malformed, truncated or corrupted snapshot file."""


def save_arrays(path, arrays, meta=None):
    """Write an ordered {name: array} mapping plus a JSON-able meta dict."""
    if not arrays:
        raise SnapshotError("refusing to write a snapshot with no arrays")
    entries = []
    chunks = []
    for name, arr in arrays.items():
        # asarray keeps 0-d shapes; ascontiguousarray would promote them to 1-d
        a = np.asarray(arr, dtype=np.float64, order="C")
        if not np.all(np.isfinite(a)):
            raise SnapshotError(f"array {name!r} contains non-finite values")
        entries.append({"name": name, "shape": list(a.shape)})
        chunks.append(a.tobytes())  # numpy is little-endian on all supported hosts
    payload = b"".join(chunks)
    header = {
        "version": FORMAT_VERSION,
        "checksum": "sha256:" + hashlib.sha256(payload).hexdigest(),
        "entries": entries,
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(hbytes)))
        fh.write(hbytes)
        fh.write(payload)


def load_arrays(path):
    """Read a container; returns ({name: array}, meta). Verifies the checksum."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 4 or blob[: len(MAGIC)] != MAGIC:
        raise SnapshotError(f"{path}: not a snapshot container")
    (hlen,) = struct.unpack_from("<I", blob, len(MAGIC))
    hstart = len(MAGIC) + 4
    try:
        header = json.loads(blob[hstart:hstart + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SnapshotError(f"{path}: corrupt header ({exc})") from None
    if header.get("version") != FORMAT_VERSION:
        raise SnapshotError(f"{path}: unsupported format version {header.get('version')!r}")
    payload = blob[hstart + hlen:]
    digest = "sha256:" + hashlib.sha256(payload).hexdigest()
    if digest != header.get("checksum"):
        raise SnapshotError(f"{path}: checksum mismatch, file is corrupted")

    arrays = {}
    offset = 0
    for entry in header["entries"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(payload):
            raise SnapshotError(f"{path}: payload truncated at entry {entry['name']!r}")
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=offset).reshape(shape)
        arrays[entry["name"]] = arr.copy()
        offset += nbytes
    if offset != len(payload):
        raise SnapshotError(f"{path}: {len(payload) - offset} trailing payload bytes")
    return arrays, header.get("meta", {})

"""Single-file parameter checkpoints: a JSON manifest followed by a float64 payload.

Layout::

    b"CORELLA\\0" | uint64 LE manifest length | manifest JSON (utf-8) | payload

Every array is stored as contiguous little-endian float64 at the byte offset
recorded in the manifest. ``content_sha256`` hashes the payload, so two
checkpoints with equal hashes hold bitwise-equal parameters.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from datetime import datetime, timezone
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"CORELLA\0"
FORMAT_VERSION = 1
_DTYPE = np.dtype("<f8")


class CheckpointError(Exception):
    pass


class CorruptCheckpoint(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


def collect(*modules) -> dict[str, np.ndarray]:
    """Merge the prefixed parameter dictionaries of several modules."""
    out: dict[str, np.ndarray] = {}
    for m in modules:
        for k, v in m.state().items():
            if k in out:
                raise CheckpointError(f"duplicate parameter name {k}")
            out[k] = v
    return out


def save_checkpoint(path, arrays: Mapping[str, np.ndarray], seed: int | None = None,
                    meta: dict | None = None, created: str | None = None) -> dict:
    """Write ``arrays`` to ``path`` atomically and return the manifest."""
    index = {}
    chunks = []
    offset = 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(np.asarray(arrays[name], dtype=_DTYPE))
        raw = a.tobytes()
        index[name] = {"dtype": "float64", "shape": list(a.shape), "offset": offset,
                       "length": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    manifest = {
        "format_version": FORMAT_VERSION,
        "created": created or datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "seed": seed,
        "arrays": index,
        "content_sha256": hashlib.sha256(payload).hexdigest(),
        "meta": meta or {},
    }
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        fh.write(payload)
    os.replace(tmp, path)
    return manifest


def read_manifest(path) -> tuple[dict, int]:
    """Manifest and the byte position where the payload starts."""
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CorruptCheckpoint(f"{path}: bad magic")
        raw_len = fh.read(8)
        if len(raw_len) != 8:
            raise CorruptCheckpoint(f"{path}: truncated header")
        (n,) = struct.unpack("<Q", raw_len)
        head = fh.read(n)
        if len(head) != n:
            raise CorruptCheckpoint(f"{path}: truncated manifest")
    try:
        manifest = json.loads(head.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptCheckpoint(f"{path}: unreadable manifest ({e})") from e
    if manifest.get("format_version") != FORMAT_VERSION:
        raise VersionMismatch(
            f"{path}: format_version {manifest.get('format_version')} != {FORMAT_VERSION}")
    return manifest, len(MAGIC) + 8 + n


def load_checkpoint(path, prefix: str | None = None) -> tuple[dict[str, np.ndarray], dict]:
    """Read and verify a checkpoint. With ``prefix`` only matching arrays are returned.

    The whole payload is checked against the manifest before anything is
    returned, so a failed load never yields partial state.
    """
    manifest, start = read_manifest(path)
    with open(path, "rb") as fh:
        fh.seek(start)
        payload = fh.read()
    index = manifest["arrays"]
    expected = sum(e["length"] for e in index.values())
    if len(payload) != expected:
        raise CorruptCheckpoint(f"{path}: payload is {len(payload)} bytes, manifest says {expected}")
    if hashlib.sha256(payload).hexdigest() != manifest["content_sha256"]:
        raise CorruptCheckpoint(f"{path}: payload hash mismatch")
    out = {}
    for name, e in index.items():
        if prefix is not None and not name.startswith(prefix):
            continue
        shape = tuple(e["shape"])
        if e["dtype"] != "float64" or e["length"] != 8 * int(np.prod(shape, dtype=np.int64)):
            raise CorruptCheckpoint(f"{path}: entry {name} has inconsistent length")
        if e["offset"] < 0 or e["offset"] + e["length"] > len(payload):
            raise CorruptCheckpoint(f"{path}: entry {name} lies outside the payload")
        buf = payload[e["offset"]:e["offset"] + e["length"]]
        out[name] = np.frombuffer(buf, dtype=_DTYPE).reshape(shape).astype(np.float64)
    return out, manifest

"""Self-describing binary container used by checkpoints and window caches.

Byte layout, stable across versions:

    bytes 0..7    magic ``b"HARPEFT1"``
    bytes 8..15   manifest length N as little-endian uint64
    bytes 16..16+N  manifest, UTF-8 JSON
    remainder     payload

The manifest carries ``format_version``, a ``kind`` string and a list of
``entries``; each entry names a payload slice by byte ``offset`` and
``nbytes`` plus its dtype and shape. All numeric payloads are little-endian.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

MAGIC = b"HARPEFT1"
FORMAT_VERSION = 1

_DTYPES = {
    "f64": np.dtype("<f8"),
    "f32": np.dtype("<f4"),
    "u8": np.dtype("<u1"),
    "i64": np.dtype("<i8"),
}


class ContainerError(ValueError):
    """Malformed or mismatched container file."""


class PayloadWriter:
    """Accumulates named arrays and renders manifest entries with offsets."""

    def __init__(self):
        self.chunks: list[bytes] = []
        self.entries: list[dict] = []
        self._offset = 0

    def add(self, name: str, array: np.ndarray, dtype_tag: str, **extra) -> None:
        dtype = _DTYPES[dtype_tag]
        raw = np.ascontiguousarray(array, dtype=dtype).tobytes()
        entry = {"name": name, "dtype": dtype_tag, "shape": list(array.shape),
                 "offset": self._offset, "nbytes": len(raw)}
        entry.update(extra)
        self.entries.append(entry)
        self.chunks.append(raw)
        self._offset += len(raw)


def write_container(path, kind: str, meta: dict, writer: PayloadWriter) -> None:
    manifest = {"magic": "harpeft", "format_version": FORMAT_VERSION, "kind": kind,
                "meta": meta, "entries": writer.entries}
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        for chunk in writer.chunks:
            fh.write(chunk)


def read_container(path, expect_kind: str | None = None):
    """Returns ``(manifest, payload_bytes)``; entries index into the payload."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ContainerError(f"{path}: bad magic, not a harpeft container")
    n = int.from_bytes(raw[8:16], "little")
    manifest = json.loads(raw[16:16 + n].decode("utf-8"))
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ContainerError(f"{path}: unsupported format version")
    if expect_kind is not None and manifest.get("kind") != expect_kind:
        raise ContainerError(
            f"{path}: expected kind {expect_kind!r}, found {manifest.get('kind')!r}")
    return manifest, raw[16 + n:]


def read_entry(entry: dict, payload: bytes) -> np.ndarray:
    dtype = _DTYPES[entry["dtype"]]
    start, nbytes = entry["offset"], entry["nbytes"]
    if start + nbytes > len(payload):
        raise ContainerError(f"entry {entry['name']}: payload truncated")
    arr = np.frombuffer(payload[start:start + nbytes], dtype=dtype)
    return arr.reshape(entry["shape"]).copy()

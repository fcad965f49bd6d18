"""Self-describing binary container for arrays plus a JSON header.

Layout (all integers little-endian)::

    b"PVAE" | u32 version (=1) | u64 header_len | header (UTF-8 JSON) | payload

The header holds caller metadata plus an ``arrays`` directory mapping each
array name to ``{dtype, shape, byte_offset, byte_length}``; offsets are
relative to the start of the payload.  Arrays are stored raw in C order, so a
reader can memory-map them without copying.  The header is serialised with
sorted keys and no whitespace, which makes files a pure function of their
content.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import ContainerFormatError, TruncatedContainerError, UnsupportedVersionError

MAGIC = b"PVAE"
VERSION = 1
PREFIX = struct.Struct("<4sIQ")
ALLOWED_DTYPES = ("<u1", "<u2", "<u4", "<i8", "<f4", "<f8", "<c8", "<c16")


def _le(dtype) -> np.dtype:
    dt = np.dtype(dtype)
    return dt.newbyteorder("<") if dt.byteorder == ">" else dt


def _dtype_tag(dt: np.dtype) -> str:
    tag = _le(dt).str
    if tag == "|u1":
        tag = "<u1"
    if tag not in ALLOWED_DTYPES:
        raise ContainerFormatError(f"dtype {dt} cannot be stored (allowed: {', '.join(ALLOWED_DTYPES)})")
    return tag


def encode_header(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False,
                      allow_nan=False).encode("utf-8")


def write_container(path, header: dict, arrays: dict) -> None:
    """Write ``arrays`` (name -> ndarray) and ``header`` atomically, fsync'd."""
    if "arrays" in header:
        raise ContainerFormatError("header key 'arrays' is reserved for the array directory")
    directory, blobs, offset = {}, [], 0
    for name in sorted(arrays):
        a = np.asarray(arrays[name])
        tag = _dtype_tag(a.dtype)
        raw = np.ascontiguousarray(a, dtype=np.dtype(tag)).tobytes()
        directory[name] = {"dtype": tag, "shape": list(a.shape), "byte_offset": offset,
                           "byte_length": len(raw)}
        blobs.append(raw)
        offset += len(raw)
    head = encode_header({**header, "arrays": directory})
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(PREFIX.pack(MAGIC, VERSION, len(head)))
        fh.write(head)
        for raw in blobs:
            fh.write(raw)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


class Container:
    """Validated read-only view of a container file; arrays load lazily."""

    def __init__(self, path):
        self.path = Path(path)
        size = self.path.stat().st_size
        with open(self.path, "rb") as fh:
            prefix = fh.read(PREFIX.size)
            if len(prefix) < PREFIX.size:
                raise ContainerFormatError(f"{self.path}: file too short for a container prefix")
            magic, version, hlen = PREFIX.unpack(prefix)
            if magic != MAGIC:
                raise ContainerFormatError(f"{self.path}: bad magic {magic!r}, expected {MAGIC!r}")
            if version != VERSION:
                raise UnsupportedVersionError(f"{self.path}: unsupported version {version} (reader supports {VERSION})")
            if PREFIX.size + hlen > size:
                raise TruncatedContainerError(f"{self.path}: header of {hlen} bytes extends past end of file")
            try:
                header = json.loads(fh.read(hlen).decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                raise ContainerFormatError(f"{self.path}: header is not valid JSON: {exc}") from None
        if not isinstance(header, dict) or not isinstance(header.get("arrays"), dict):
            raise ContainerFormatError(f"{self.path}: header lacks an array directory")
        self.payload_offset = PREFIX.size + hlen
        self.payload_size = size - self.payload_offset
        self.directory = header.pop("arrays")
        self.header = header
        self._validate()

    def _validate(self) -> None:
        spans = []
        for name, e in self.directory.items():
            try:
                dt = np.dtype(e["dtype"])
                shape = tuple(int(s) for s in e["shape"])
                off, length = int(e["byte_offset"]), int(e["byte_length"])
            except (KeyError, TypeError, ValueError) as exc:
                raise ContainerFormatError(f"{self.path}: malformed directory entry for {name!r}: {exc}") from None
            if e["dtype"] not in ALLOWED_DTYPES:
                raise ContainerFormatError(f"{self.path}: array {name!r} has unsupported dtype {e['dtype']}")
            if off < 0 or any(s < 0 for s in shape) or length != dt.itemsize * int(np.prod(shape, dtype=np.int64)):
                raise ContainerFormatError(f"{self.path}: array {name!r} has inconsistent shape/length")
            if off + length > self.payload_size:
                raise TruncatedContainerError(
                    f"{self.path}: array {name!r} needs bytes {off}..{off + length} "
                    f"but the payload holds {self.payload_size}")
            if length:
                spans.append((off, off + length, name))
        spans.sort()
        for (a0, a1, an), (b0, b1, bn) in zip(spans, spans[1:]):
            if b0 < a1:
                raise ContainerFormatError(f"{self.path}: arrays {an!r} and {bn!r} overlap")

    def names(self) -> list:
        return sorted(self.directory)

    def __contains__(self, name) -> bool:
        return name in self.directory

    def shape(self, name) -> tuple:
        return tuple(self.directory[name]["shape"])

    def array(self, name) -> np.ndarray:
        """Read-only memory map of one array (an empty array for zero-size entries)."""
        e = self.directory[name]
        shape = tuple(e["shape"])
        if e["byte_length"] == 0:
            return np.zeros(shape, dtype=e["dtype"])
        return np.memmap(self.path, dtype=e["dtype"], mode="r", shape=shape,
                         offset=self.payload_offset + e["byte_offset"])

    __getitem__ = array

    def load(self, name) -> np.ndarray:
        return np.array(self.array(name))

    def load_all(self) -> dict:
        return {k: self.load(k) for k in self.names()}


def read_container(path) -> Container:
    return Container(path)

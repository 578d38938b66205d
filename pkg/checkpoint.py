"""
Versioned on-disk snapshot of parameters + configuration.

File layout::

    [8 bytes]  little-endian unsigned header length H
    [H bytes]  UTF-8 JSON header, sorted keys, compact separators
    [rest]     payload: raw little-endian tensor values, in manifest order

The header holds ``format_version``, the model ``kind`` ("teacher" or
"nmt"), the model configuration, the tensor manifest
``[{name, dtype, shape, byte_offset, byte_length}]`` and free-form
training metadata.
"""

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Union

import numpy as np

from errors import CheckpointError

FORMAT_VERSION = 1
_HEADER_LEN = struct.Struct("<Q")
_DTYPES = {"float32": "<f4", "float64": "<f8"}


def _header_bytes(header: Dict[str, Any]) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


@dataclass
class Checkpoint:
    kind: str
    config: Dict[str, Any]
    tensors: Dict[str, np.ndarray]
    metadata: Dict[str, Any] = field(default_factory=dict)

    def manifest(self) -> List[Dict[str, Any]]:
        entries = []
        offset = 0
        for name in sorted(self.tensors):
            array = np.asarray(self.tensors[name])
            dtype = array.dtype.name
            if dtype not in _DTYPES:
                raise CheckpointError(f"tensor {name} has unsupported dtype {dtype}")
            length = array.size * array.dtype.itemsize
            entries.append({"name": name, "dtype": dtype, "shape": list(array.shape),
                            "byte_offset": offset, "byte_length": length})
            offset += length
        return entries

    def header(self) -> Dict[str, Any]:
        return {
            "format_version": FORMAT_VERSION,
            "kind": self.kind,
            "config": self.config,
            "manifest": self.manifest(),
            "metadata": self.metadata,
        }

    def to_bytes(self) -> bytes:
        try:
            header = _header_bytes(self.header())
        except TypeError as exc:
            raise CheckpointError(f"checkpoint header is not JSON-serialisable: {exc}") from exc
        chunks = [_HEADER_LEN.pack(len(header)), header]
        for name in sorted(self.tensors):
            array = np.asarray(self.tensors[name])
            chunks.append(np.ascontiguousarray(array, dtype=_DTYPES[array.dtype.name]).tobytes())
        return b"".join(chunks)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        if len(blob) < _HEADER_LEN.size:
            raise CheckpointError("file is too short to be a checkpoint")
        (header_len,) = _HEADER_LEN.unpack_from(blob, 0)
        start = _HEADER_LEN.size
        if start + header_len > len(blob):
            raise CheckpointError("header length exceeds file size")
        try:
            header = json.loads(blob[start:start + header_len].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"unreadable checkpoint header: {exc}") from exc
        version = header.get("format_version")
        if version != FORMAT_VERSION:
            raise CheckpointError(f"checkpoint format_version {version} is not supported (expected {FORMAT_VERSION})")
        payload = memoryview(blob)[start + header_len:]
        tensors = {}
        cursor = 0
        for entry in header.get("manifest", []):
            dtype = _DTYPES.get(entry["dtype"])
            if dtype is None:
                raise CheckpointError(f"tensor {entry['name']} has unsupported dtype {entry['dtype']}")
            offset, length = entry["byte_offset"], entry["byte_length"]
            shape = tuple(entry["shape"])
            if offset < cursor:
                raise CheckpointError(f"tensor {entry['name']} overlaps the previous tensor")
            if offset + length > len(payload):
                raise CheckpointError(f"tensor {entry['name']} extends past the payload")
            if length != int(np.prod(shape, dtype=np.int64)) * np.dtype(dtype).itemsize:
                raise CheckpointError(f"tensor {entry['name']} byte length does not match its shape")
            values = np.frombuffer(payload[offset:offset + length], dtype=dtype).reshape(shape)
            tensors[entry["name"]] = values.astype(entry["dtype"])
            cursor = offset + length
        return cls(kind=header["kind"], config=header["config"], tensors=tensors,
                   metadata=header.get("metadata", {}))

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Checkpoint":
        path = Path(path)
        if not path.exists():
            raise CheckpointError(f"checkpoint not found: {path}")
        return cls.from_bytes(path.read_bytes())

    def checksum(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

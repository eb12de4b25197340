"""Named parameter storage and the binary container used for checkpoints.

Container layout (all integers little-endian)::

    8 bytes   magic  b"BODYNET\\0"
    4 bytes   uint32 schema_version
    8 bytes   uint64 header length H
    H bytes   UTF-8 JSON header (sorted keys, compact separators)
    N bytes   float64 little-endian values, entries concatenated row-major
    32 bytes  SHA-256 of everything above

The header holds ``schema_version``, a free-form ``meta`` object and an
``entries`` list of ``{name, shape, kind, offset, count}`` records, where
``offset``/``count`` are measured in float64 elements.
"""

from __future__ import annotations

import hashlib
import json
import struct
from typing import Iterator

import numpy as np

from .tensor import DTYPE, Tensor

MAGIC = b"BODYNET\x00"
SCHEMA_VERSION = 1


class CheckpointError(ValueError):
    """A container could not be decoded (truncated, corrupted, wrong magic)."""


class SchemaVersionError(CheckpointError):
    def __init__(self, found: int, expected: int = SCHEMA_VERSION):
        super().__init__(f"checkpoint schema_version {found} is not supported (expected {expected})")
        self.found = found
        self.expected = expected


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


class ParameterSet:
    """Ordered map from hierarchical names (``enc.glb.0.block0.conv.w``) to tensors.

    Trainable parameters and non-trainable buffers (batch-norm running
    statistics) live side by side; only the former are touched by optimizers.
    """

    schema_version = SCHEMA_VERSION

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}
        self._buffers: set[str] = set()

    def add(self, name: str, value, trainable: bool = True) -> Tensor:
        if name in self._tensors:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=DTYPE), requires_grad=trainable, name=name)
        self._tensors[name] = t
        if not trainable:
            self._buffers.add(name)
        return t

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._tensors[name]
        except KeyError:
            raise KeyError(f"no parameter named {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self):
        return self._tensors.items()

    def is_buffer(self, name: str) -> bool:
        return name in self._buffers

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self._tensors.items() if n not in self._buffers]

    def with_prefix(self, prefix: str) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self.trainable() if n.startswith(prefix)]

    def num_values(self, trainable_only: bool = True) -> int:
        items = self.trainable() if trainable_only else self._tensors.items()
        return sum(t.size for _, t in items)

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def copy(self) -> ParameterSet:
        out = ParameterSet()
        for n, t in self._tensors.items():
            out.add(n, t.data.copy(), trainable=n not in self._buffers)
        return out

    def assign(self, other: ParameterSet) -> None:
        """Copy values from ``other`` in place; names and shapes must match."""
        if list(other) != list(self):
            raise KeyError("parameter names differ")
        for n, t in self._tensors.items():
            src = other[n].data
            if src.shape != t.shape:
                raise ValueError(f"{n}: shape {src.shape} != {t.shape}")
            t.data[...] = src

    def signature(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(n, t.shape) for n, t in self._tensors.items()]

    # -- serialization -----------------------------------------------------
    def to_bytes(self, meta: dict | None = None) -> bytes:
        entries = []
        blobs = []
        offset = 0
        for n, t in self._tensors.items():
            count = int(t.size)
            entries.append(
                {
                    "name": n,
                    "shape": list(t.shape),
                    "kind": "buffer" if n in self._buffers else "param",
                    "offset": offset,
                    "count": count,
                }
            )
            blobs.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
            offset += count
        header = canonical_json(
            {"schema_version": SCHEMA_VERSION, "meta": meta or {}, "entries": entries}
        ).encode("utf-8")
        body = MAGIC + struct.pack("<IQ", SCHEMA_VERSION, len(header)) + header + b"".join(blobs)
        return body + hashlib.sha256(body).digest()

    @classmethod
    def from_bytes(cls, blob: bytes) -> tuple[ParameterSet, dict]:
        fixed = len(MAGIC) + 12
        if len(blob) < fixed + 32:
            raise CheckpointError(f"container truncated: {len(blob)} bytes")
        if blob[: len(MAGIC)] != MAGIC:
            raise CheckpointError("bad magic bytes; not a bodynet container")
        version, hlen = struct.unpack("<IQ", blob[len(MAGIC) : fixed])
        if version != SCHEMA_VERSION:
            raise SchemaVersionError(version)
        body, digest = blob[:-32], blob[-32:]
        if hashlib.sha256(body).digest() != digest:
            raise CheckpointError("checksum mismatch; container truncated or corrupted")
        try:
            header = json.loads(body[fixed : fixed + hlen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"unreadable header: {exc}") from exc
        if header.get("schema_version") != SCHEMA_VERSION:
            raise SchemaVersionError(header.get("schema_version"))
        values = np.frombuffer(body[fixed + hlen :], dtype="<f8")
        out = cls()
        for e in header["entries"]:
            end = e["offset"] + e["count"]
            if end > values.size:
                raise CheckpointError(f"entry {e['name']!r} runs past end of data")
            arr = values[e["offset"] : end].astype(DTYPE).reshape(e["shape"])
            out.add(e["name"], arr, trainable=e["kind"] == "param")
        return out, header["meta"]

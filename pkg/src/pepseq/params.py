"""Parameter partitions and checkpoint serialization.

Parameters live in three named partitions: "enc" (spectrum encoder), "at"
(autoregressive decoder, including the segment embeddings of the augmented
cross-attention context), and "nat" (non-autoregressive decoder). Freezing
a partition drops requires_grad on its tensors so the optimizer and the
graph both leave them untouched.

Checkpoint layout (little-endian):

    magic   4 bytes  b"NVCK"
    version u32      currently 1
    count   u32      number of arrays
    per array:
        name_len u16, name utf-8 ("partition/name"), rank u8,
        dims u32 * rank, payload float64 row-major
    blob_len u32, blob utf-8 JSON (model config, vocabulary, frozen flags,
    training counters)

Round trips are bit-exact because payloads are raw float64 bytes.
"""

from __future__ import annotations

import json
import struct
from typing import Iterator

import numpy as np

from .autodiff import Tensor

__all__ = [
    "PARTITIONS",
    "ParameterStore",
    "CheckpointError",
    "BadMagicError",
    "VersionMismatchError",
    "TruncatedCheckpointError",
    "UnknownPartitionError",
    "save_checkpoint",
    "load_checkpoint",
]

PARTITIONS = ("enc", "at", "nat")

MAGIC = b"NVCK"
VERSION = 1


class CheckpointError(ValueError):
    """Base class for malformed checkpoint files."""


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class UnknownPartitionError(CheckpointError):
    pass


class ParameterStore:
    """Named, partitioned trainable tensors with deterministic order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._frozen: dict[str, bool] = {p: False for p in PARTITIONS}

    @staticmethod
    def _key(partition: str, name: str) -> str:
        if partition not in PARTITIONS:
            raise UnknownPartitionError(
                f"unknown partition {partition!r}; expected one of {PARTITIONS}"
            )
        return f"{partition}/{name}"

    def add(self, partition: str, name: str, values: np.ndarray) -> Tensor:
        key = self._key(partition, name)
        if key in self._params:
            raise ValueError(f"parameter {key!r} already registered")
        t = Tensor(values, requires_grad=not self._frozen[partition])
        self._params[key] = t
        return t

    def get(self, partition: str, name: str) -> Tensor:
        key = self._key(partition, name)
        try:
            return self._params[key]
        except KeyError:
            raise KeyError(f"no parameter {key!r}") from None

    def items(self) -> Iterator[tuple[str, Tensor]]:
        """(key, tensor) pairs in insertion order."""
        return iter(self._params.items())

    def partition_items(self, partition: str) -> list[tuple[str, Tensor]]:
        prefix = partition + "/"
        self._key(partition, "")
        return [(k, t) for k, t in self._params.items() if k.startswith(prefix)]

    def freeze(self, partition: str) -> None:
        self._key(partition, "")
        self._frozen[partition] = True
        for _, t in self.partition_items(partition):
            t.requires_grad = False
            t.grad = None

    def unfreeze(self, partition: str) -> None:
        self._key(partition, "")
        self._frozen[partition] = False
        for _, t in self.partition_items(partition):
            t.requires_grad = True

    def is_frozen(self, partition: str) -> bool:
        self._key(partition, "")
        return self._frozen[partition]

    @property
    def frozen_flags(self) -> dict[str, bool]:
        return dict(self._frozen)

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.grad = None

    def n_parameters(self) -> int:
        return sum(t.size for t in self._params.values())

    def snapshot(self, partition: str | None = None) -> dict[str, np.ndarray]:
        """Copies of current values, for bit-identity assertions in tests."""
        items = self.items() if partition is None else self.partition_items(partition)
        return {k: t.values.copy() for k, t in items}


def save_checkpoint(path: str, store: ParameterStore, config_blob: dict) -> None:
    """Write the store plus a JSON metadata blob; see module docstring."""
    blob = dict(config_blob)
    blob["frozen"] = store.frozen_flags
    encoded_blob = json.dumps(blob, sort_keys=True).encode("utf-8")

    chunks: list[bytes] = [MAGIC, struct.pack("<II", VERSION, len(store._params))]
    for key, t in store.items():
        name = key.encode("utf-8")
        # note: ascontiguousarray would silently promote 0-d arrays to 1-d;
        # tobytes(order="C") already serializes row-major for any layout.
        vals = np.asarray(t.values, dtype=np.float64)
        chunks.append(struct.pack("<H", len(name)))
        chunks.append(name)
        chunks.append(struct.pack("<B", vals.ndim))
        chunks.append(struct.pack(f"<{vals.ndim}I", *vals.shape) if vals.ndim else b"")
        chunks.append(vals.tobytes(order="C"))
    chunks.append(struct.pack("<I", len(encoded_blob)))
    chunks.append(encoded_blob)

    with open(path, "wb") as f:
        f.write(b"".join(chunks))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(
                f"checkpoint truncated while reading {what} "
                f"(need {n} bytes at offset {self.pos}, have {len(self.data) - self.pos})"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path: str) -> tuple[ParameterStore, dict]:
    """Read a checkpoint; returns (store, metadata blob).

    The blob is exactly what was passed to :func:`save_checkpoint` plus the
    "frozen" flags, which are re-applied to the returned store.
    """
    with open(path, "rb") as f:
        data = f.read()
    r = _Reader(data)

    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise BadMagicError(f"not a checkpoint file: magic {magic!r} != {MAGIC!r}")
    (version, count) = r.unpack("<II", "header")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, expected {VERSION}")

    store = ParameterStore()
    for i in range(count):
        (name_len,) = r.unpack("<H", f"array {i} name length")
        key = r.take(name_len, f"array {i} name").decode("utf-8")
        if "/" not in key:
            raise UnknownPartitionError(f"array name {key!r} has no partition prefix")
        partition, name = key.split("/", 1)
        (rank,) = r.unpack("<B", f"array {key} rank")
        shape = r.unpack(f"<{rank}I", f"array {key} dims") if rank else ()
        n = int(np.prod(shape)) if shape else 1
        payload = r.take(8 * n, f"array {key} payload")
        values = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
        store.add(partition, name, values)

    (blob_len,) = r.unpack("<I", "metadata length")
    blob = json.loads(r.take(blob_len, "metadata").decode("utf-8"))
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after metadata")

    for partition, frozen in blob.get("frozen", {}).items():
        if frozen:
            store.freeze(partition)
    return store, blob

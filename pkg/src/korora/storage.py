"""Chunked virtual disk, I/O redirection to a replacement device, read
popularity, dirty-block tracking and the KDIF diff container."""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import _kernels

DEFAULT_CHUNK_SIZE = 4096

DIFF_MAGIC = b"KDIF"
DIFF_VERSION = 1

ORIGINAL = "original"
REPLACEMENT = "replacement"
MERGED = "merged"
_SERVED = {
    _kernels.SERVED_ORIGINAL: ORIGINAL,
    _kernels.SERVED_REPLACEMENT: REPLACEMENT,
    _kernels.SERVED_MERGED: MERGED,
}

VM = "vm"
MIGRATION = "migration"


class StorageError(ValueError):
    pass


class DiffError(StorageError):
    pass


def _is_pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


@dataclass
class VirtualDisk:
    disk_id: str
    chunks: np.ndarray  # (count, chunk_size) uint8

    def __post_init__(self):
        self.chunks = np.asarray(self.chunks, dtype=np.uint8)
        if self.chunks.ndim != 2:
            raise StorageError("chunks must be a 2-D array")
        if not _is_pow2(self.chunk_size):
            raise StorageError(f"chunk_size {self.chunk_size} is not a power of two")

    @classmethod
    def zeros(cls, disk_id: str, chunk_count: int, chunk_size: int = DEFAULT_CHUNK_SIZE):
        return cls(disk_id, np.zeros((chunk_count, chunk_size), dtype=np.uint8))

    @classmethod
    def random(cls, disk_id: str, chunk_count: int, chunk_size: int, rng: np.random.Generator):
        return cls(disk_id, rng.integers(0, 256, (chunk_count, chunk_size), dtype=np.uint8))

    @property
    def chunk_size(self) -> int:
        return self.chunks.shape[1]

    @property
    def chunk_count(self) -> int:
        return self.chunks.shape[0]

    @property
    def size(self) -> int:
        return self.chunks.size

    def copy(self, disk_id: str = None) -> "VirtualDisk":
        return VirtualDisk(disk_id or self.disk_id, self.chunks.copy())

    def chunk(self, index: int) -> bytes:
        return self.chunks[index].tobytes()


@dataclass
class ReplacementDevice:
    origin: str
    chunk_size: int
    blocks: dict = field(default_factory=dict)

    def __contains__(self, index) -> bool:
        return index in self.blocks

    def put(self, index: int, data: bytes):
        if len(data) != self.chunk_size:
            raise StorageError(f"block must be {self.chunk_size} bytes, got {len(data)}")
        self.blocks[index] = bytes(data)


@dataclass
class PopularityTracker:
    chunk_count: int
    threshold: float = 3  # math.inf disables outsourcing
    read_counts: np.ndarray = None

    def __post_init__(self):
        if not self.threshold >= 1:
            raise StorageError("popularity threshold must be >= 1")
        if self.read_counts is None:
            self.read_counts = np.zeros(self.chunk_count, dtype=np.int64)

    def record(self, index: int) -> bool:
        """Count one VM read; True when the chunk has just become popular."""
        self.read_counts[index] += 1
        return self.read_counts[index] >= self.threshold

    def reset(self):
        self.read_counts[:] = 0

    @property
    def kernel_threshold(self) -> int:
        return np.iinfo(np.int64).max if math.isinf(self.threshold) else int(self.threshold)


@dataclass
class DirtyBlockTracker:
    chunk_count: int
    dirty: set = field(default_factory=set)
    round: int = 0
    history: list = field(default_factory=list)

    def mark(self, index: int):
        if not 0 <= index < self.chunk_count:
            raise StorageError(f"chunk index {index} out of range")
        self.dirty.add(index)


def dbt_drain(tracker: DirtyBlockTracker) -> frozenset:
    """Return this round's dirty set and start the next round."""
    drained = frozenset(tracker.dirty)
    tracker.history.append(drained)
    tracker.dirty = set()
    tracker.round += 1
    return drained


class IORouter:
    """Write redirection and popularity-driven read outsourcing over one disk.

    The original disk is never written. VM writes land on the replacement
    device and mark the chunk dirty; VM reads count toward popularity and a
    chunk whose count reaches the threshold is copied to the replacement
    device. Migration reads neither count nor copy.
    """

    def __init__(self, disk: VirtualDisk, threshold: float = 3):
        self.disk = disk
        self.replacement = ReplacementDevice(disk.disk_id, disk.chunk_size)
        self.popularity = PopularityTracker(disk.chunk_count, threshold)
        self.dbt = DirtyBlockTracker(disk.chunk_count)
        self.served = {ORIGINAL: 0, REPLACEMENT: 0, MERGED: 0}

    def _check(self, index: int):
        if not 0 <= index < self.disk.chunk_count:
            raise StorageError(f"chunk index {index} out of range")

    def io_write(self, index: int, data: bytes):
        self._check(index)
        if len(data) != self.disk.chunk_size:
            raise StorageError(f"write must be {self.disk.chunk_size} bytes, got {len(data)}")
        self.replacement.put(index, data)
        self.dbt.mark(index)

    def io_read(self, index: int, requester: str = VM):
        """Returns ``(data, served_by)``."""
        self._check(index)
        if index in self.replacement:
            if requester == VM:
                self.popularity.read_counts[index] += 1
            served = REPLACEMENT
            data = self.replacement.blocks[index]
        else:
            data = self.disk.chunk(index)
            served = ORIGINAL
            if requester == VM and self.popularity.record(index):
                self.replacement.put(index, data)
                served = MERGED
        self.served[served] += 1
        return data, served

    def vm_read_many(self, indices) -> list:
        """Route a burst of VM reads through the batch kernel.

        Equivalent to calling :meth:`io_read` for each index in order; returns
        the ``served_by`` labels.
        """
        indices = np.asarray(indices, dtype=np.int64)
        if indices.size and (indices.min() < 0 or indices.max() >= self.disk.chunk_count):
            raise StorageError("chunk index out of range")
        present = np.zeros(self.disk.chunk_count, dtype=np.bool_)
        present[list(self.replacement.blocks)] = True
        before = present.copy()
        codes = _kernels.route_reads(
            indices, self.popularity.read_counts, present, self.popularity.kernel_threshold
        )
        for i in np.flatnonzero(present & ~before):
            self.replacement.put(int(i), self.disk.chunk(int(i)))
        labels = [_SERVED[int(c)] for c in codes]
        for lab in labels:
            self.served[lab] += 1
        return labels

    def view(self) -> np.ndarray:
        """Merged view: the original overlaid with replacement blocks."""
        out = self.disk.chunks.copy()
        for i, block in self.replacement.blocks.items():
            out[i] = np.frombuffer(block, dtype=np.uint8)
        return out


# -- diff container ---------------------------------------------------------

_HEADER = struct.Struct("<4sBI")


@dataclass(frozen=True)
class DiffFile:
    chunk_size: int
    disk_id: str
    records: tuple  # ((index, payload), ...) ascending by index

    def to_bytes(self) -> bytes:
        did = self.disk_id.encode()
        parts = [
            _HEADER.pack(DIFF_MAGIC, DIFF_VERSION, self.chunk_size),
            struct.pack("<H", len(did)),
            did,
            struct.pack("<I", len(self.records)),
        ]
        for idx, payload in self.records:
            parts.append(struct.pack("<Q", idx))
            parts.append(payload)
        body = b"".join(parts)
        return body + hashlib.sha256(body).digest()

    @classmethod
    def from_bytes(cls, data: bytes) -> "DiffFile":
        if len(data) < _HEADER.size + 2 + 4 + 32:
            raise DiffError("diff too short")
        body, trailer = data[:-32], data[-32:]
        if hashlib.sha256(body).digest() != trailer:
            raise DiffError("trailer digest mismatch")
        magic, version, chunk_size = _HEADER.unpack_from(body)
        if magic != DIFF_MAGIC:
            raise DiffError("bad magic")
        if version != DIFF_VERSION:
            raise DiffError(f"unknown diff version {version}")
        pos = _HEADER.size
        (n,) = struct.unpack_from("<H", body, pos)
        pos += 2
        try:
            disk_id = body[pos : pos + n].decode()
        except UnicodeDecodeError:
            raise DiffError("bad disk id") from None
        pos += n
        (count,) = struct.unpack_from("<I", body, pos)
        pos += 4
        if len(body) - pos != count * (8 + chunk_size):
            raise DiffError("record section length mismatch")
        records = []
        last = -1
        for _ in range(count):
            (idx,) = struct.unpack_from("<Q", body, pos)
            pos += 8
            if idx <= last:
                raise DiffError("records not strictly ascending")
            records.append((idx, body[pos : pos + chunk_size]))
            pos += chunk_size
            last = idx
        return cls(chunk_size, disk_id, tuple(records))


def _as_array(view) -> np.ndarray:
    if isinstance(view, VirtualDisk):
        return view.chunks
    if isinstance(view, IORouter):
        return view.view()
    return np.asarray(view, dtype=np.uint8)


def diff_encode(view, indices, disk_id: str) -> DiffFile:
    arr = _as_array(view)
    idx = sorted(set(int(i) for i in indices))
    if idx and (idx[0] < 0 or idx[-1] >= arr.shape[0]):
        raise DiffError("chunk index out of range")
    return DiffFile(arr.shape[1], disk_id, tuple((i, arr[i].tobytes()) for i in idx))


def diff_apply(disk: VirtualDisk, diff, in_place: bool = False) -> VirtualDisk:
    """Write the diff's records into ``disk``.

    ``diff`` may be raw bytes (fully validated) or a DiffFile.
    """
    if isinstance(diff, (bytes, bytearray)):
        diff = DiffFile.from_bytes(bytes(diff))
    if diff.chunk_size != disk.chunk_size:
        raise DiffError(f"chunk_size {diff.chunk_size} does not match disk {disk.chunk_size}")
    out = disk if in_place else disk.copy()
    for idx, payload in diff.records:
        if idx >= out.chunk_count:
            raise DiffError(f"record index {idx} beyond disk")
        out.chunks[idx] = np.frombuffer(payload, dtype=np.uint8)
    return out


@dataclass(frozen=True)
class DiskManifest:
    chunk_digests: tuple
    root: bytes


def disk_manifest(view) -> DiskManifest:
    arr = _as_array(view)
    digests = tuple(hashlib.sha256(row.tobytes()).digest() for row in arr)
    return DiskManifest(digests, hashlib.sha256(b"".join(digests)).digest())


def changed_chunks(a, b) -> np.ndarray:
    """Indices of chunks that differ between two equally shaped views."""
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise StorageError(f"shape mismatch {a.shape} vs {b.shape}")
    return np.flatnonzero(_kernels.changed_chunks(a, b))

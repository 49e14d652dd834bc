"""Persistent element streams in spill files.

A stream is a byte range ``(path, offset, size)`` of a raw little-endian
element array.  Run files carry no header; the spill directory keeps a JSON
manifest describing every named stream.
"""

import itertools
import json
import os
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .elements import KINDS
from .instrument import METER, Holding
from .iterators import ElementIterator, RandomAccessIterator


class StorageError(OSError):
    pass


class BudgetError(MemoryError):
    pass


@dataclass(frozen=True)
class PersistentStream:
    path: str
    offset: int
    size: int
    kind: object

    def __post_init__(self):
        if self.offset < 0 or self.size < 0:
            raise ValueError("negative offset or size")
        if self.size % self.kind.size:
            raise ValueError(f"size {self.size} not a multiple of {self.kind.size}")

    @property
    def count(self):
        return self.size // self.kind.size

    def describe(self):
        return {"path": str(self.path), "offset": self.offset,
                "size": self.size, "elem_kind": self.kind.name}

    @classmethod
    def from_dict(cls, d):
        return cls(d["path"], d["offset"], d["size"], KINDS[d["elem_kind"]])

    @classmethod
    def whole_file(cls, path, kind):
        size = os.path.getsize(path)
        if size % kind.size:
            raise ValueError(f"{path}: length {size} not a multiple of {kind.size}")
        return cls(str(path), 0, size, kind)

    def retype(self, kind):
        """Reinterpret the same bytes as another element kind."""
        return PersistentStream(self.path, self.offset, self.size, kind)


class SpillDirectory:
    """Holds the run files of one build.

    Creating it wipes leftover runs from a previous build in the same
    directory so reruns start clean.
    """

    def __init__(self, root, retain=False):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        for stale in self.root.glob("*.run"):
            stale.unlink()
        self.retain = retain
        self._counter = itertools.count()
        self._lock = threading.Lock()
        self._named = {}
        self._files = set()

    def new_path(self, phase, box=0, worker=0):
        with self._lock:
            n = next(self._counter)
        path = self.root / f"{phase}-{box}-{worker}-{n:06d}.run"
        with self._lock:
            self._files.add(path)
        return path

    def record(self, name, stream):
        with self._lock:
            self._named[name] = stream.describe()

    def discard(self, streams):
        """Delete the files behind ``streams`` unless runs are retained."""
        if self.retain:
            return
        for s in streams:
            p = Path(s.path)
            with self._lock:
                if p not in self._files:
                    continue
                self._files.discard(p)
            try:
                p.unlink()
            except FileNotFoundError:
                pass

    def write_manifest(self, name="manifest.json"):
        with self._lock:
            data = dict(sorted(self._named.items()))
        with open(self.root / name, "w") as f:
            json.dump(data, f, indent=1)

    def cleanup(self):
        if self.retain:
            return
        with self._lock:
            files, self._files = list(self._files), set()
        for p in files:
            try:
                p.unlink()
            except FileNotFoundError:
                pass


def store(it, spill, phase="store", box=0, worker=0, path=None):
    """Persist the full scan of ``it`` into a new run file."""
    path = Path(path) if path is not None else spill.new_path(phase, box, worker)
    size = 0
    try:
        with open(path, "wb") as f:
            for blk in it.blocks():
                f.write(memoryview(np.ascontiguousarray(blk)).cast("B"))
                size += blk.nbytes
    except OSError as e:
        raise StorageError(f"cannot write {path}: {e}") from e
    finally:
        it.clean()
    return PersistentStream(str(path), 0, size, it.kind)


def store_array(arr, kind, spill, phase="store", box=0, worker=0):
    path = spill.new_path(phase, box, worker)
    try:
        with open(path, "wb") as f:
            f.write(memoryview(np.ascontiguousarray(arr)).cast("B"))
    except OSError as e:
        raise StorageError(f"cannot write {path}: {e}") from e
    return PersistentStream(str(path), 0, arr.nbytes, kind)


def _read(s, offset, nbytes):
    try:
        with open(s.path, "rb") as f:
            f.seek(s.offset + offset)
            data = f.read(nbytes)
    except OSError as e:
        raise StorageError(f"cannot read {s.path}: {e}") from e
    if len(data) != nbytes:
        raise StorageError(f"{s.path}: short read at {s.offset + offset}")
    return data


class LoadedStream(RandomAccessIterator):
    def __init__(self, arr, kind, holding):
        super().__init__(arr, kind)
        self._holding = holding

    def _release(self):
        super()._release()
        self._holding.release()


def load(s, budget=None):
    """Read a whole stream into memory as a random-access iterator."""
    if budget is not None and s.size > budget:
        raise BudgetError(f"stream of {s.size} bytes exceeds budget {budget}; split it first")
    holding = Holding(METER, s.size, "sort")
    arr = np.frombuffer(bytearray(_read(s, 0, s.size)), dtype=s.kind.dtype)
    return LoadedStream(arr, s.kind, holding)


def split(s, chunk_bytes):
    if chunk_bytes <= 0 or chunk_bytes % s.kind.size:
        raise ValueError(f"chunk size {chunk_bytes} not a positive multiple of {s.kind.size}")
    if s.size == 0:
        return [s]
    return [PersistentStream(s.path, s.offset + off, min(chunk_bytes, s.size - off), s.kind)
            for off in range(0, s.size, chunk_bytes)]


def tile(s, parts):
    """Split into ``parts`` contiguous streams whose element counts differ by at most one."""
    n = s.count
    q, r = divmod(n, parts)
    out, off = [], s.offset
    for i in range(parts):
        cnt = q + (1 if i < r else 0)
        out.append(PersistentStream(s.path, off, cnt * s.kind.size, s.kind))
        off += cnt * s.kind.size
    return out


class EmStreamIter(ElementIterator):
    """Scans a persistent stream one block of ``blk_sz`` bytes at a time.

    Only the current block is resident; crossing a block boundary drops it
    and reads the next.  The last block may be short.
    """

    def __init__(self, s, blk_sz):
        super().__init__(s.kind)
        if blk_sz <= 0 or blk_sz % s.kind.size:
            raise ValueError(f"blk_sz {blk_sz} not a positive multiple of {s.kind.size}")
        self.stream = s
        self.blk_sz = blk_sz
        self.curr_blk = -1
        self.activations = 0
        self.resident = 0
        self.peak_resident = 0
        self._holding = None

    def _pull(self):
        nxt = self.curr_blk + 1
        off = nxt * self.blk_sz
        if off >= self.stream.size:
            self._unmap()
            return None
        self._unmap()
        nbytes = min(self.blk_sz, self.stream.size - off)
        data = _read(self.stream, off, nbytes)
        self.curr_blk = nxt
        self.activations += 1
        self.resident = nbytes
        self.peak_resident = max(self.peak_resident, nbytes)
        self._holding = Holding(METER, nbytes, "block")
        return np.frombuffer(data, dtype=self.kind.dtype)

    def _unmap(self):
        if self._holding is not None:
            self._holding.release()
            self._holding = None
        self.resident = 0

    def _release(self):
        self._unmap()


def em_stream_iter(s, blk_sz):
    return EmStreamIter(s, blk_sz)


def _sort_chunk(arr, key):
    """Stable in-place sort of a loaded chunk by ``key``."""
    if arr.dtype.names is None:
        aux = Holding(METER, arr.nbytes, "sort")  # radix sort scratch
        arr.sort(kind="stable")
        aux.release()
        return arr
    keys = key(arr)
    perm_hold = Holding(METER, len(arr) * 8, "sort")
    perm = np.argsort(keys, kind="stable")
    tmp_hold = Holding(METER, len(arr) * 8, "sort")
    for name in arr.dtype.names:
        arr[name] = arr[name][perm]
    tmp_hold.release()
    perm_hold.release()
    return arr


def chunk_sort_spill(s, mmc, key, spill, phase="sort", box=0, worker=0):
    """Cut ``s`` into chunks of at most ``mmc`` bytes, sort each in memory by
    ``key`` (stable) and persist it as a run.  Returns the runs in input order."""
    esz = s.kind.size
    if mmc < esz:
        raise ValueError(f"mmc {mmc} below element size {esz}")
    runs = []
    if s.size == 0:
        return runs
    for chunk in split(s, mmc - mmc % esz):
        loaded = load(chunk)
        arr = loaded.array
        _sort_chunk(arr, key)
        runs.append(store_array(arr, s.kind, spill, phase, box, worker))
        loaded.clean()
    return runs

"""Service arrangements: how client threads reach a composed stack.

Four modes:

    DIRECT  pass-through calls from a single client thread
    LOCKED  mutual exclusion around the stack; any number of threads
    QUEUED  per-client descriptor ring pairs drained by service thread(s)
    SHM     cross-process shared-memory segment with a server-side drainer

Descriptor lifecycle in QUEUED and SHM: the client allocates an index from
the free ring, the service executes and frees it. Completion records carry
(tag, status) inline, so an index can be recycled the moment its
completion is pushed.

Shared segment layout (little-endian, offsets fixed by this version):

    0     header: magic "CMNC" (4 bytes), version u32, ring_order u32,
          desc_count u32, data_region_offset u64, data_region_size u64
    32    attach count u32 (internal, not part of the published header)
    64    free ring        u64 index records
    .     submission ring  u64 index records
    .     completion ring  {tag u64, status i32, pad} 16-byte records
    .     descriptor pool  desc_count x 64-byte records
    .     data region      4096-aligned shared buffer arena

Ring slots carry a per-slot sequence tag ahead of the record (see rings);
pool records are stamped with a generation word tied to the submission
ring position, so the server accepts a descriptor only once the write
that produced it is visible. Both guards exist because a second process
may transiently observe a stale view of shared pages; every stale read
degrades to a retry, never to a torn or duplicated record.

Pool record: op u32, status i32, lba u64, block_count u32, generation u32,
data_offset u64, tag u64, padded to 64 bytes. data_offset addresses the
segment's data region; payloads never leave the mapping, the server hands
the mapped memory straight to the device stack.
"""

from __future__ import annotations

import ctypes
import itertools
import mmap
import os
import struct
import tempfile
import threading
import time
from collections import deque
from enum import Enum

from .blockdev import IoDescriptor, IoOp, IoStatus
from .component import ComponentRef
from .errors import (
    AlreadyExists,
    BadMode,
    ContractViolation,
    IncompatibleDependency,
    InvalidIndex,
    NotFound,
    OutOfMemory,
    SpawnFailure,
    VersionMismatch,
)
from .interfaces import IBLOCK_DEVICE_IID
from .memory import ExternalRegion
from .rings import SpscRing, ring_bytes

SHM_MAGIC = b"CMNC"
SHM_VERSION = 1
SHM_DIR_ENV = "COMANCHE_SHM_DIR"

_SHM_HEADER = struct.Struct("<4sIIIQQ")
_ATTACH_COUNT = struct.Struct("<I")
_ATTACH_OFFSET = 32
_HEADER_SPAN = 64

_DESC_RECORD = struct.Struct("<IiQIIQQ24x")
_COMP_RECORD = struct.Struct("<Qi4x")
_INDEX_RECORD = struct.Struct("<Q")

DESC_RECORD_SIZE = 64
COMP_RECORD_SIZE = 16

# Idle policy: bounded spin, then yield the GIL. A Python loop iteration is
# ~1us and holds the interpreter lock, so the spin budget is sized to keep
# the busy-wait window in the tens of microseconds; waiting clients yield
# almost immediately since they cannot make progress without the service.
SERVICE_IDLE_SPINS = 64
CLIENT_WAIT_SPINS = 2

_get_ident = threading.get_ident


class ServiceMode(str, Enum):
    DIRECT = "DIRECT"
    LOCKED = "LOCKED"
    QUEUED = "QUEUED"
    SHM = "SHM"


def _align(value: int, alignment: int) -> int:
    return (value + alignment - 1) & ~(alignment - 1)


def _resolve_root(stack_root):
    """Accept a ComponentRef or a bare device; returns (instance, owned_view)."""
    if isinstance(stack_root, ComponentRef):
        view = stack_root.query_interface(IBLOCK_DEVICE_IID)
        if view is None:
            raise IncompatibleDependency("stack root does not expose the block-device interface")
        return view.target, view
    return stack_root, None


class _PortBase:
    """Common sync wrappers over a port's async submit/poll pair."""

    _sync_tags = itertools.count(1 << 61)

    def _submit_wait(self, desc: IoDescriptor) -> int:
        spins = 0
        while not self.async_submit(desc):
            if desc.status != IoStatus.PENDING:
                return desc.status
            spins += 1
            if spins > CLIENT_WAIT_SPINS:
                spins = 0
                time.sleep(0)
        while True:
            found = None
            for tag, status in self.poll_completions(16):
                if tag == desc.tag:
                    found = status
                else:
                    self._stray.append((tag, status))
            if found is not None:
                return found
            spins += 1
            if spins > CLIENT_WAIT_SPINS:
                spins = 0
                time.sleep(0)

    def read_sync(self, lba: int, block_count: int, buf, buffer_offset: int = 0) -> int:
        desc = IoDescriptor(IoOp.READ, lba, block_count, buf, buffer_offset,
                            next(self._sync_tags))
        return self._submit_wait(desc)

    def write_sync(self, lba: int, block_count: int, buf, buffer_offset: int = 0) -> int:
        desc = IoDescriptor(IoOp.WRITE, lba, block_count, buf, buffer_offset,
                            next(self._sync_tags))
        return self._submit_wait(desc)

    def flush_sync(self) -> int:
        desc = IoDescriptor(IoOp.FLUSH, 0, 0, None, 0, next(self._sync_tags))
        return self._submit_wait(desc)


class DirectPort(_PortBase):
    """Pass-through calls on the caller's thread; owner-thread checked.

    The owner check is inline (one compare on the fast path) so the mode
    keeps its defining property: no synchronization cost at all.
    """

    def __init__(self, root):
        self._root = root
        self._owner = 0  # bound to the first calling thread
        self._stray: deque = deque()

    def _adopt_or_fail(self):
        if self._owner == 0:
            self._owner = threading.get_ident()
            return
        raise ContractViolation("DIRECT service used from a second thread")

    def get_info(self):
        return self._root.get_info()

    def async_submit(self, desc: IoDescriptor) -> bool:
        if _get_ident() != self._owner:
            self._adopt_or_fail()
        return self._root.async_submit(desc)

    def poll_completions(self, max_results: int = 64):
        if _get_ident() != self._owner:
            self._adopt_or_fail()
        if self._stray:
            out = []
            while self._stray and len(out) < max_results:
                out.append(self._stray.popleft())
            return out
        return self._root.poll_completions(max_results)

    def read_sync(self, lba, block_count, buf, buffer_offset=0):
        if _get_ident() != self._owner:
            self._adopt_or_fail()
        return self._root.read_sync(lba, block_count, buf, buffer_offset)

    def write_sync(self, lba, block_count, buf, buffer_offset=0):
        if _get_ident() != self._owner:
            self._adopt_or_fail()
        return self._root.write_sync(lba, block_count, buf, buffer_offset)

    def flush_sync(self):
        if _get_ident() != self._owner:
            self._adopt_or_fail()
        return self._root.flush_sync()

    def allocate_io_buffer(self, size, alignment=4096, numa_node=-1):
        return self._root.allocate_io_buffer(size, alignment, numa_node)

    def free_io_buffer(self, buf):
        self._root.free_io_buffer(buf)

    def close(self):
        pass


class LockedPort(_PortBase):
    """Every stack call wrapped in one shared mutex."""

    def __init__(self, root, lock: threading.Lock):
        self._root = root
        self._lock = lock
        self._stray: deque = deque()

    def get_info(self):
        with self._lock:
            return self._root.get_info()

    def async_submit(self, desc: IoDescriptor) -> bool:
        with self._lock:
            return self._root.async_submit(desc)

    def poll_completions(self, max_results: int = 64):
        with self._lock:
            if self._stray:
                out = []
                while self._stray and len(out) < max_results:
                    out.append(self._stray.popleft())
                return out
            return self._root.poll_completions(max_results)

    def read_sync(self, lba, block_count, buf, buffer_offset=0):
        with self._lock:
            return self._root.read_sync(lba, block_count, buf, buffer_offset)

    def write_sync(self, lba, block_count, buf, buffer_offset=0):
        with self._lock:
            return self._root.write_sync(lba, block_count, buf, buffer_offset)

    def flush_sync(self):
        with self._lock:
            return self._root.flush_sync()

    def allocate_io_buffer(self, size, alignment=4096, numa_node=-1):
        with self._lock:
            return self._root.allocate_io_buffer(size, alignment, numa_node)

    def free_io_buffer(self, buf):
        with self._lock:
            self._root.free_io_buffer(buf)

    def close(self):
        pass


class _QueuedChannel:
    """One client's ring pair plus descriptor pool (in-process)."""

    def __init__(self, depth: int):
        order = max(1, (depth - 1).bit_length())
        self.depth = depth
        self.free = _heap_index_ring(order)
        self.submission = _heap_index_ring(order)
        self.completion = _heap_comp_ring(order)
        self.pool: list[IoDescriptor | None] = [None] * depth
        for idx in range(depth):
            self.free.try_push(_INDEX_RECORD.pack(idx))
        self.owed_completions: deque[bytes] = deque()
        self.owed_free: deque[bytes] = deque()
        self.closed = False


def _heap_index_ring(order: int) -> SpscRing:
    storage = memoryview(bytearray(ring_bytes(order, 8)))
    return SpscRing(storage, 0, order, 8, init=True)


def _heap_comp_ring(order: int) -> SpscRing:
    storage = memoryview(bytearray(ring_bytes(order, COMP_RECORD_SIZE)))
    return SpscRing(storage, 0, order, COMP_RECORD_SIZE, init=True)


class QueuedPort(_PortBase):
    """Client end of an in-process descriptor queue."""

    def __init__(self, channel: _QueuedChannel, root_info, root):
        self._channel = channel
        self._info = root_info
        self._root = root
        self._stray: deque = deque()

    def get_info(self):
        return self._info

    def async_submit(self, desc: IoDescriptor) -> bool:
        channel = self._channel
        raw = channel.free.try_pop()
        if raw is None:
            return False  # no free descriptors; caller retries
        idx = _INDEX_RECORD.unpack(raw)[0]
        channel.pool[idx] = desc
        if desc.buffer is not None:
            desc.buffer.inflight_inc()
        # sized to the pool, so fullness is a transient view; never drop
        while not channel.submission.try_push(raw):
            time.sleep(0)
        return True

    def poll_completions(self, max_results: int = 64):
        out = []
        while self._stray and len(out) < max_results:
            out.append(self._stray.popleft())
        for raw in self._channel.completion.pop_many(max_results - len(out)):
            tag, status = _COMP_RECORD.unpack(raw)
            out.append((tag, status))
        return out

    def allocate_io_buffer(self, size, alignment=4096, numa_node=-1):
        return self._root.allocate_io_buffer(size, alignment, numa_node)

    def free_io_buffer(self, buf):
        self._root.free_io_buffer(buf)

    def close(self):
        self._channel.closed = True


class QueuedService:
    """Service thread(s) draining per-client rings against the stack root."""

    def __init__(self, root, owned_view, queue_depth: int, service_threads: int):
        self._root = root
        self._view = owned_view
        self._depth = queue_depth
        self._channels: list[list[_QueuedChannel]] = [[] for _ in range(service_threads)]
        self._channel_lock = threading.Lock()
        self._next_thread = 0
        self._stop = threading.Event()
        self._root_lock = threading.Lock() if service_threads > 1 else None
        self._threads = []
        try:
            for i in range(service_threads):
                t = threading.Thread(target=self._serve, args=(i,),
                                     name=f"comanche-svc-{i}", daemon=True)
                t.start()
                self._threads.append(t)
        except RuntimeError as exc:
            raise SpawnFailure(str(exc)) from exc

    def client(self) -> QueuedPort:
        channel = _QueuedChannel(self._depth)
        with self._channel_lock:
            lane = self._next_thread % len(self._channels)
            self._next_thread += 1
            self._channels[lane].append(channel)
        return QueuedPort(channel, self._root.get_info(), self._root)

    port = client

    def _execute(self, desc: IoDescriptor) -> int:
        root = self._root
        spins = 0
        while not root.async_submit(desc):
            if desc.status != IoStatus.PENDING:
                return desc.status
            root.poll_completions(64)
            spins += 1
            if spins > CLIENT_WAIT_SPINS:
                spins = 0
                time.sleep(0)
        root.poll_completions(64)  # drain the inline completion
        return desc.status

    def _serve(self, lane: int) -> None:
        channels = self._channels[lane]
        lock = self._root_lock
        idle = 0
        while not self._stop.is_set():
            busy = False
            for channel in channels:
                if channel.closed:
                    continue
                # completions and recycles owed from earlier sweeps go first;
                # they are bounded by the pool and must never be dropped
                while channel.owed_completions:
                    if not channel.completion.try_push(channel.owed_completions[0]):
                        break
                    channel.owed_completions.popleft()
                    busy = True
                while channel.owed_free:
                    if not channel.free.try_push(channel.owed_free[0]):
                        break
                    channel.owed_free.popleft()
                    busy = True
                if channel.owed_completions:
                    continue  # client is not reaping; take no new work
                for raw in channel.submission.pop_many(64):
                    busy = True
                    idx = _INDEX_RECORD.unpack(raw)[0]
                    desc = channel.pool[idx]
                    channel.pool[idx] = None
                    if lock is not None:
                        with lock:
                            status = self._execute(desc)
                    else:
                        status = self._execute(desc)
                    if desc.buffer is not None:
                        desc.buffer.inflight_dec()
                    record = _COMP_RECORD.pack(desc.tag, status)
                    if not channel.completion.try_push(record):
                        channel.owed_completions.append(record)
                    if not channel.free.try_push(raw):
                        channel.owed_free.append(raw)
            if busy:
                idle = 0
            else:
                idle += 1
                if idle > SERVICE_IDLE_SPINS:
                    idle = 0
                    time.sleep(0)

    def close(self):
        self._stop.set()
        for t in self._threads:
            t.join(timeout=5)
        if self._view is not None:
            self._view.release()
            self._view = None


class DirectService:
    def __init__(self, root, owned_view):
        self._root = root
        self._view = owned_view
        self._port: DirectPort | None = None

    def client(self) -> DirectPort:
        if self._port is not None:
            raise ContractViolation("DIRECT service supports exactly one client")
        self._port = DirectPort(self._root)
        return self._port

    port = client

    def close(self):
        if self._view is not None:
            self._view.release()
            self._view = None


class LockedService:
    def __init__(self, root, owned_view):
        self._root = root
        self._view = owned_view
        self._lock = threading.Lock()

    def client(self) -> LockedPort:
        return LockedPort(self._root, self._lock)

    port = client

    def close(self):
        if self._view is not None:
            self._view.release()
            self._view = None


# -- shared-memory segment ------------------------------------------------------


def shm_directory() -> str:
    return os.environ.get(SHM_DIR_ENV) or os.path.join(tempfile.gettempdir(), "comanche-shm")


class ShmSegment:
    """Mapped segment holding the rings, descriptor pool, and data region."""

    def __init__(self, name: str, path: str, mm: mmap.mmap):
        self.name = name
        self.path = path
        self._mm = mm
        self.mv = memoryview(mm)
        self.base_address = ctypes.addressof(
            (ctypes.c_char * len(mm)).from_buffer(mm))
        magic, version, ring_order, desc_count, data_off, data_size = \
            _SHM_HEADER.unpack_from(self.mv, 0)
        if magic != SHM_MAGIC or version != SHM_VERSION:
            raise VersionMismatch(
                f"{path}: magic={magic!r} version={version}, "
                f"expected {SHM_MAGIC!r} v{SHM_VERSION}")
        self.ring_order = ring_order
        self.desc_count = desc_count
        self.data_region_offset = data_off
        self.data_region_size = data_size
        offsets = segment_offsets(ring_order, desc_count, data_size)
        self._pool_offset = offsets["pool"]
        self.free_ring = SpscRing(self.mv, offsets["free"], ring_order, 8)
        self.submission_ring = SpscRing(self.mv, offsets["submission"], ring_order, 8)
        self.completion_ring = SpscRing(self.mv, offsets["completion"],
                                        ring_order, COMP_RECORD_SIZE)
        self._closed = False

    # header as published (the first 32 bytes)
    def header_fields(self) -> dict:
        magic, version, ring_order, desc_count, data_off, data_size = \
            _SHM_HEADER.unpack_from(self.mv, 0)
        return {"magic": magic, "version": version, "ring_order": ring_order,
                "desc_count": desc_count, "data_region_offset": data_off,
                "data_region_size": data_size}

    def header_bytes(self) -> bytes:
        return bytes(self.mv[0:_SHM_HEADER.size])

    # descriptor pool

    def write_descriptor(self, index: int, op: int, lba: int, block_count: int,
                         data_offset: int, tag: int) -> None:
        if index < 0 or index >= self.desc_count:
            raise InvalidIndex(str(index))
        off = self._pool_offset + index * DESC_RECORD_SIZE
        _DESC_RECORD.pack_into(self.mv, off, op, IoStatus.PENDING, lba,
                               block_count, 0, data_offset, tag)

    def read_descriptor(self, index: int):
        if index < 0 or index >= self.desc_count:
            raise InvalidIndex(str(index))
        off = self._pool_offset + index * DESC_RECORD_SIZE
        op, status, lba, block_count, _, data_offset, tag = \
            _DESC_RECORD.unpack_from(self.mv, off)
        return op, status, lba, block_count, data_offset, tag

    # generation word at offset 16+4 of the record (the u32 after block_count)
    def _write_generation(self, index: int, generation: int) -> None:
        off = self._pool_offset + index * DESC_RECORD_SIZE + 20
        struct.pack_into("<I", self.mv, off, generation & 0xFFFFFFFF)

    def _read_generation(self, index: int) -> int:
        off = self._pool_offset + index * DESC_RECORD_SIZE + 20
        return struct.unpack_from("<I", self.mv, off)[0]

    # data region

    def data_view(self) -> memoryview:
        off = self.data_region_offset
        return self.mv[off:off + self.data_region_size]

    def data_address(self) -> int:
        return self.base_address + self.data_region_offset

    def write_data(self, offset: int, payload: bytes) -> None:
        off = self.data_region_offset + offset
        self.mv[off:off + len(payload)] = payload

    def read_data(self, offset: int, length: int) -> bytes:
        off = self.data_region_offset + offset
        return bytes(self.mv[off:off + length])

    def _adjust_attach(self, delta: int) -> int:
        (count,) = _ATTACH_COUNT.unpack_from(self.mv, _ATTACH_OFFSET)
        count += delta
        _ATTACH_COUNT.pack_into(self.mv, _ATTACH_OFFSET, max(count, 0))
        return count

    def close(self) -> None:
        """Detach; the backing file is removed when the last attach closes."""
        if self._closed:
            return
        self._closed = True
        remaining = self._adjust_attach(-1)
        self.mv.release()
        self._mm.close()
        if remaining <= 0:
            try:
                os.unlink(self.path)
            except OSError:
                pass


def segment_offsets(ring_order: int, desc_count: int, data_size: int) -> dict:
    index_ring = ring_bytes(ring_order, 8)
    comp_ring = ring_bytes(ring_order, COMP_RECORD_SIZE)
    free = _HEADER_SPAN
    submission = _align(free + index_ring, 64)
    completion = _align(submission + index_ring, 64)
    pool = _align(completion + comp_ring, 64)
    data = _align(pool + desc_count * DESC_RECORD_SIZE, 4096)
    total = data + data_size
    return {"free": free, "submission": submission, "completion": completion,
            "pool": pool, "data": data, "total": total}


def shm_create(name: str, ring_order: int, desc_count: int, data_size: int,
               directory: str | None = None) -> ShmSegment:
    """Create and initialize a segment; the free ring starts full."""
    if desc_count > (1 << ring_order):
        raise ValueError("desc_count exceeds ring capacity")
    directory = directory or shm_directory()
    os.makedirs(directory, exist_ok=True)
    path = os.path.join(directory, name)
    offsets = segment_offsets(ring_order, desc_count, data_size)
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_RDWR, 0o600)
    except FileExistsError as exc:
        raise AlreadyExists(path) from exc
    try:
        os.ftruncate(fd, offsets["total"])
        mm = mmap.mmap(fd, offsets["total"])
    finally:
        os.close(fd)
    mv = memoryview(mm)
    _SHM_HEADER.pack_into(mv, 0, SHM_MAGIC, SHM_VERSION, ring_order, desc_count,
                          offsets["data"], data_size)
    _ATTACH_COUNT.pack_into(mv, _ATTACH_OFFSET, 1)
    for offset, rs in ((offsets["free"], 8), (offsets["submission"], 8),
                       (offsets["completion"], COMP_RECORD_SIZE)):
        SpscRing(mv, offset, ring_order, rs, init=True)
    mv.release()
    segment = ShmSegment(name, path, mm)
    for idx in range(desc_count):
        pushed = segment.free_ring.try_push(_INDEX_RECORD.pack(idx))
        assert pushed  # freshly formatted ring, capacity >= desc_count
    return segment


def shm_attach(name: str, directory: str | None = None) -> ShmSegment:
    directory = directory or shm_directory()
    path = os.path.join(directory, name)
    try:
        fd = os.open(path, os.O_RDWR)
    except FileNotFoundError as exc:
        raise NotFound(path) from exc
    try:
        size = os.fstat(fd).st_size
        mm = mmap.mmap(fd, size)
    finally:
        os.close(fd)
    segment = ShmSegment(name, path, mm)
    segment._adjust_attach(+1)
    return segment


class ShmClient:
    """Application end of a shared segment: alloc, submit, reap.

    Single client per segment: the client side of each ring is
    single-producer/single-consumer.
    """

    def __init__(self, segment: ShmSegment):
        self.segment = segment

    def desc_alloc(self) -> int | None:
        """Pop a descriptor index; None means backpressure (no free descriptors)."""
        raw = self.segment.free_ring.try_pop()
        if raw is None:
            return None
        return _INDEX_RECORD.unpack(raw)[0]

    def submit(self, index: int) -> bool:
        """Queue a prepared descriptor. The pool record is stamped with the
        ring position it will occupy, which is what lets the server wait out
        stale views of the pool page. Fullness here is always transient (the
        pool bounds in-flight indices), so the push retries internally; False
        only after a long stall, meaning the service side is gone."""
        segment = self.segment
        if index < 0 or index >= segment.desc_count:
            raise InvalidIndex(str(index))
        ring = segment.submission_ring
        segment._write_generation(index, ring._head_pos + 1)
        record = _INDEX_RECORD.pack(index)
        spins = 0
        while not ring.try_push(record):
            spins += 1
            if spins > 100_000:
                return False
            time.sleep(0)
        return True

    def submit_io(self, index: int, op: int, lba: int, block_count: int,
                  data_offset: int, tag: int) -> bool:
        self.segment.write_descriptor(index, op, lba, block_count, data_offset, tag)
        return self.submit(index)

    def reap(self, max_results: int = 64) -> list[tuple[int, int]]:
        out = []
        for raw in self.segment.completion_ring.pop_many(max_results):
            tag, status = _COMP_RECORD.unpack(raw)
            out.append((tag, status))
        return out


class ShmPort(_PortBase):
    """Uniform port over a segment client for in-process use (bench, tests).

    Buffers are carved from the segment's data region by a bump allocator,
    so submitted payloads already live in the shared arena and the server
    hands them to the stack without copies. free_io_buffer only recycles
    the most recent allocation (bump discipline).
    """

    def __init__(self, client: ShmClient, info):
        self._client = client
        self._info = info
        self._stray: deque = deque()
        self._cursor = 0
        self._block_size = info.block_size

    def get_info(self):
        return self._info

    def allocate_io_buffer(self, size: int, alignment: int = 4096, numa_node: int = -1):
        segment = self._client.segment
        start = _align(self._cursor, alignment)
        if start + size > segment.data_region_size:
            raise OutOfMemory(f"segment data region exhausted ({size} bytes)")
        view = segment.data_view()[start:start + size]
        region = ExternalRegion(view, segment.data_address() + start)
        region.data_offset = start
        self._cursor = start + size
        return region

    def free_io_buffer(self, region) -> None:
        if region.data_offset + region.size == self._cursor:
            self._cursor = region.data_offset
        region.view.release()

    def async_submit(self, desc: IoDescriptor) -> bool:
        buf = desc.buffer
        offset = getattr(buf, "data_offset", None)
        if desc.op != IoOp.FLUSH:
            if offset is None:
                desc.status = IoStatus.E_ACCESS  # not shared-arena memory
                return False
            nbytes = desc.block_count * self._block_size
            if desc.buffer_offset < 0 or desc.buffer_offset + nbytes > buf.size:
                desc.status = IoStatus.E_BOUNDS
                return False
        index = self._client.desc_alloc()
        if index is None:
            return False  # backpressure, status stays PENDING
        data_offset = 0 if desc.op == IoOp.FLUSH else offset + desc.buffer_offset
        return self._client.submit_io(index, desc.op, desc.lba,
                                      desc.block_count, data_offset, desc.tag)

    def poll_completions(self, max_results: int = 64):
        out = []
        while self._stray and len(out) < max_results:
            out.append(self._stray.popleft())
        if len(out) < max_results:
            out += self._client.reap(max_results - len(out))
        return out

    def close(self) -> None:
        pass


class ShmService:
    """Server side: owns the segment, drains submissions against the stack."""

    def __init__(self, root, owned_view, segment: ShmSegment):
        self._root = root
        self._view = owned_view
        self.segment = segment
        self._region = ExternalRegion(segment.data_view(), segment.data_address())
        root.register_buffer(self._region)
        self._block_size = root.get_info().block_size
        self._stop = threading.Event()
        self.fatal: BaseException | None = None
        try:
            self._thread = threading.Thread(target=self._serve_guarded,
                                            name="comanche-shm-svc", daemon=True)
            self._thread.start()
        except RuntimeError as exc:
            raise SpawnFailure(str(exc)) from exc

    def _serve_guarded(self) -> None:
        try:
            self._serve()
        except BaseException as exc:  # a dead service must not die silently
            self.fatal = exc

    def client(self) -> ShmClient:
        return ShmClient(self.segment)

    def port(self) -> ShmPort:
        """Uniform port for in-process callers; one per segment."""
        return ShmPort(ShmClient(self.segment), self._root.get_info())

    def _serve(self) -> None:
        segment = self.segment
        region = self._region
        bs = self._block_size
        data_size = segment.data_region_size
        subm = segment.submission_ring
        owed_completions: deque[bytes] = deque()
        owed_free: deque[bytes] = deque()
        idle = 0
        while not self._stop.is_set():
            busy = False
            while owed_completions:
                if not segment.completion_ring.try_push(owed_completions[0]):
                    break
                owed_completions.popleft()
                busy = True
            while owed_free:
                if not segment.free_ring.try_push(owed_free[0]):
                    break
                owed_free.popleft()
                busy = True
            raws = [] if owed_completions else subm.pop_many(64)
            if not raws:
                if busy:
                    idle = 0
                    continue
                idle += 1
                if idle > SERVICE_IDLE_SPINS:
                    idle = 0
                    time.sleep(0)
                continue
            idle = 0
            position = subm._tail_pos - len(raws)  # ring position of raws[0]
            for i, raw in enumerate(raws):
                idx = _INDEX_RECORD.unpack(raw)[0]
                if idx >= segment.desc_count:
                    continue  # corrupt submission; nothing to complete
                # wait until the pool record stamped for this ring position
                # is visible (guards against stale views of the pool page)
                expected = (position + i + 1) & 0xFFFFFFFF
                spins = 0
                while segment._read_generation(idx) != expected:
                    spins += 1
                    if spins > 1_000_000:
                        raise RuntimeError(
                            f"descriptor {idx} never reached generation {expected}")
                    if spins > CLIENT_WAIT_SPINS:
                        time.sleep(0)
                op, _, lba, block_count, data_offset, tag = segment.read_descriptor(idx)
                nbytes = block_count * bs
                if op != IoOp.FLUSH and (data_offset + nbytes > data_size):
                    status = IoStatus.E_BOUNDS
                else:
                    desc = IoDescriptor(op, lba, block_count,
                                        None if op == IoOp.FLUSH else region,
                                        data_offset, tag)
                    status = self._execute(desc)
                record = _COMP_RECORD.pack(tag, status)
                if not segment.completion_ring.try_push(record):
                    owed_completions.append(record)
                if not segment.free_ring.try_push(raw):
                    owed_free.append(raw)

    def _execute(self, desc: IoDescriptor) -> int:
        root = self._root
        spins = 0
        while not root.async_submit(desc):
            if desc.status != IoStatus.PENDING:
                return desc.status
            root.poll_completions(64)
            spins += 1
            if spins > CLIENT_WAIT_SPINS:
                spins = 0
                time.sleep(0)
        root.poll_completions(64)
        return desc.status

    def close(self):
        self._stop.set()
        self._thread.join(timeout=5)
        if self._view is not None:
            self._view.release()
            self._view = None
        self._region.view.release()  # drop the data-region export before unmap
        self.segment.close()


def service_create(stack_root, mode, *, queue_depth: int = 256,
                   service_threads: int = 1, coalesce: bool = False,
                   shm: dict | None = None):
    """Build the requested arrangement over a stack root.

    stack_root may be a ComponentRef (a block-device view is queried and
    held until close) or a bare device instance.
    """
    try:
        mode = ServiceMode(mode.upper() if isinstance(mode, str) else mode)
    except ValueError as exc:
        raise BadMode(str(mode)) from exc
    root, view = _resolve_root(stack_root)
    if mode is ServiceMode.DIRECT:
        return DirectService(root, view)
    if mode is ServiceMode.LOCKED:
        return LockedService(root, view)
    if mode is ServiceMode.QUEUED:
        return QueuedService(root, view, queue_depth, max(1, service_threads))
    shm = dict(shm or {})
    name = shm.get("name") or f"comanche-{os.getpid()}-{os.urandom(4).hex()}"
    segment = shm_create(
        name,
        ring_order=int(shm.get("ring_order", max(1, (queue_depth - 1).bit_length()))),
        desc_count=int(shm.get("desc_count", queue_depth)),
        data_size=int(shm.get("data_size", queue_depth * 65536)),
        directory=shm.get("directory"),
    )
    return ShmService(root, view, segment)


class CoalescedPoller:
    """One thread round-robining poll_completions across many devices."""

    def __init__(self, devices, batch: int = 64):
        self._devices = list(devices)
        self._batch = batch
        self._queues = [deque() for _ in self._devices]
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run,
                                        name="comanche-poller", daemon=True)
        self._thread.start()

    def _run(self) -> None:
        idle = 0
        while not self._stop.is_set():
            busy = False
            for device, queue in zip(self._devices, self._queues):
                for item in device.poll_completions(self._batch):
                    queue.append(item)
                    busy = True
            if busy:
                idle = 0
            else:
                idle += 1
                if idle > SERVICE_IDLE_SPINS:
                    idle = 0
                    time.sleep(0)

    def take(self, device_index: int, max_results: int = 64) -> list[tuple[int, int]]:
        queue = self._queues[device_index]
        out = []
        while queue and len(out) < max_results:
            out.append(queue.popleft())
        return out

    def stop(self) -> None:
        self._stop.set()
        self._thread.join(timeout=5)


def poller_coalesce(devices, batch: int = 64) -> CoalescedPoller:
    return CoalescedPoller(devices, batch)

"""Asynchronous block-device interface with RAM and file backends.

Submission is asynchronous in shape but backends execute inline and report
through poll_completions, so every service arrangement exercises the same
submit/poll path. Completion order across tags is unspecified; callers
correlate by tag.

The two-party contract: async_submit may be called by one submitter thread
while one poller thread calls poll_completions. Anything wider is the
service layer's job.
"""

from __future__ import annotations

import itertools
import os
from collections import deque
from dataclasses import dataclass
from enum import IntEnum

from .component import Component
from .errors import DeviceIoError, DeviceNotOpen
from .interfaces import IBASE_IID, IBLOCK_DEVICE_IID, IZEROCOPY_MEMORY_IID
from .memory import DEFAULT_ALIGNMENT, Arena

DEFAULT_BLOCK_SIZE = 4096
DEFAULT_QUEUE_DEPTH = 256

_device_ids = itertools.count(1)


class IoOp(IntEnum):
    READ = 1
    WRITE = 2
    FLUSH = 3


class IoStatus(IntEnum):
    PENDING = 0
    OK = 1
    E_BOUNDS = 2
    E_ACCESS = 3
    E_IO = 4


@dataclass(frozen=True)
class DeviceInfo:
    block_size: int
    block_count: int
    device_id: int
    supports_flush: bool
    direct_io: bool = False


class IoDescriptor:
    """One IO request crossing queue boundaries.

    status moves PENDING -> exactly one terminal value, once. The buffer
    reference is (IoBuffer, byte offset); FLUSH needs no buffer.
    """

    __slots__ = ("op", "lba", "block_count", "buffer", "buffer_offset", "tag", "status")

    def __init__(self, op: int, lba: int = 0, block_count: int = 0,
                 buffer=None, buffer_offset: int = 0, tag: int = 0):
        self.op = op
        self.lba = lba
        self.block_count = block_count
        self.buffer = buffer
        self.buffer_offset = buffer_offset
        self.tag = tag
        self.status = IoStatus.PENDING


class BlockDeviceBase(Component):
    """Common submit/poll machinery; subclasses implement _execute_io."""

    INTERFACES = frozenset({IBASE_IID, IBLOCK_DEVICE_IID, IZEROCOPY_MEMORY_IID})

    def __init__(self, arena: Arena | None = None):
        super().__init__()
        self.device_id = next(_device_ids)
        self.arena = arena if arena is not None else Arena()
        self.queue_depth = DEFAULT_QUEUE_DEPTH
        self._opened = False
        self._completions: deque[tuple[int, int]] = deque()
        self._stash: deque[tuple[int, int]] = deque()
        self._sync_tags = itertools.count(1 << 62)
        self._audit: list[tuple[int, int, int, int]] | None = None
        self._cached_info: DeviceInfo | None = None
        self._read_faults: set[int] = set()
        self._write_faults: set[int] = set()
        self.stats = {"reads": 0, "writes": 0, "flushes": 0,
                      "bytes_read": 0, "bytes_written": 0}

    # -- memory interface --------------------------------------------------

    def allocate_io_buffer(self, size: int, alignment: int = DEFAULT_ALIGNMENT,
                           numa_node: int = -1):
        """DMA-style buffer, auto-registered with this device (and children)."""
        buf = self.arena.allocate(size, alignment, numa_node)
        self.register_buffer(buf)
        return buf

    def realloc_io_buffer(self, buf, size: int, alignment: int) -> None:
        self.arena.realloc(buf, size, alignment)

    def free_io_buffer(self, buf) -> None:
        self.arena.free(buf)

    def register_buffer(self, buf) -> None:
        """Composite devices override to forward registration to children."""
        self.arena.register(buf, self.device_id)

    def check_access(self, base: int, size: int) -> bool:
        return self.arena.check_access(self.device_id, base, size)

    # -- info ---------------------------------------------------------------

    def get_info(self) -> DeviceInfo:
        if not self._opened:
            raise DeviceNotOpen(type(self).__name__)
        return self._info()

    def _info(self) -> DeviceInfo:
        # geometry is fixed for the device lifetime; build once
        info = self._cached_info
        if info is None:
            info = self._cached_info = self._build_info()
        return info

    def _build_info(self) -> DeviceInfo:
        raise NotImplementedError

    # -- fault injection (media-error emulation for tests and drills) -------

    def inject_read_fault(self, lba: int) -> None:
        self._read_faults.add(lba)

    def inject_write_fault(self, lba: int) -> None:
        self._write_faults.add(lba)

    def clear_faults(self) -> None:
        self._read_faults.clear()
        self._write_faults.clear()

    # -- no-copy audit -------------------------------------------------------

    def audit_start(self) -> None:
        self._audit = []

    def audit_take(self) -> list[tuple[int, int, int, int]]:
        """(device_id, op, base_address, nbytes) per executed transfer."""
        records = self._audit if self._audit is not None else []
        self._audit = []
        return records

    def audit_stop(self) -> None:
        self._audit = None

    # -- data plane -----------------------------------------------------------

    def async_submit(self, desc: IoDescriptor) -> bool:
        """Validate and enqueue one descriptor.

        Returns False without enqueueing when rejected; desc.status then
        carries the reason, except backpressure which leaves it PENDING for
        the caller to retry.
        """
        if not self._opened:
            raise DeviceNotOpen(type(self).__name__)
        info = self._info()
        op = desc.op
        if op == IoOp.READ or op == IoOp.WRITE:
            if desc.block_count < 1 or desc.lba < 0 or \
                    desc.lba + desc.block_count > info.block_count:
                desc.status = IoStatus.E_BOUNDS
                return False
            buf = desc.buffer
            nbytes = desc.block_count * info.block_size
            if buf is None or self.device_id not in buf.registered_devices:
                desc.status = IoStatus.E_ACCESS
                return False
            if desc.buffer_offset < 0 or desc.buffer_offset + nbytes > buf.size:
                desc.status = IoStatus.E_BOUNDS
                return False
        elif op != IoOp.FLUSH:
            desc.status = IoStatus.E_BOUNDS
            return False
        if len(self._completions) >= self.queue_depth:
            return False  # backpressure, caller retries
        self._execute(desc)
        self._completions.append((desc.tag, desc.status))
        return True

    def _execute(self, desc: IoDescriptor) -> None:
        buf = desc.buffer
        if buf is not None:
            buf.inflight_inc()
        try:
            status = self._execute_io(desc)
        finally:
            if buf is not None:
                buf.inflight_dec()
        desc.status = status

    def _execute_io(self, desc: IoDescriptor) -> int:
        raise NotImplementedError

    def _fault_hit(self, faults: set[int], lba: int, count: int) -> bool:
        if not faults:
            return False
        return any(b in faults for b in range(lba, lba + count))

    def poll_completions(self, max_results: int = 64) -> list[tuple[int, int]]:
        """Up to max_results (tag, status) pairs, each delivered exactly once."""
        out = []
        stash = self._stash
        completions = self._completions
        while len(out) < max_results and stash:
            out.append(stash.popleft())
        while len(out) < max_results:
            try:
                out.append(completions.popleft())
            except IndexError:
                break
        return out

    # -- sync convenience (submit + poll until terminal) -----------------------

    def _sync_op(self, op: int, lba: int, block_count: int, buf, buffer_offset: int) -> int:
        desc = IoDescriptor(op, lba, block_count, buf, buffer_offset,
                            tag=next(self._sync_tags))
        while not self.async_submit(desc):
            if desc.status != IoStatus.PENDING:
                return desc.status
            # completion queue full: drain into the stash and retry
            self._stash.append(self._completions.popleft())
        while True:
            tag, status = self._completions.popleft()
            if tag == desc.tag:
                return status
            self._stash.append((tag, status))

    def read_sync(self, lba: int, block_count: int, buf, buffer_offset: int = 0) -> int:
        return self._sync_op(IoOp.READ, lba, block_count, buf, buffer_offset)

    def write_sync(self, lba: int, block_count: int, buf, buffer_offset: int = 0) -> int:
        return self._sync_op(IoOp.WRITE, lba, block_count, buf, buffer_offset)

    def flush_sync(self) -> int:
        return self._sync_op(IoOp.FLUSH, 0, 0, None, 0)

    def read_bytes(self, lba: int, block_count: int) -> bytes:
        """Debug helper: read through a scratch registered buffer."""
        info = self.get_info()
        buf = self.allocate_io_buffer(block_count * info.block_size)
        try:
            status = self.read_sync(lba, block_count, buf)
            if status != IoStatus.OK:
                raise DeviceIoError(f"read lba={lba} status={IoStatus(status).name}")
            return bytes(buf.view)
        finally:
            self.free_io_buffer(buf)

    def write_bytes(self, lba: int, data: bytes) -> None:
        info = self.get_info()
        count = -(-len(data) // info.block_size)
        buf = self.allocate_io_buffer(count * info.block_size)
        try:
            buf.view[0:len(data)] = data
            status = self.write_sync(lba, count, buf)
            if status != IoStatus.OK:
                raise DeviceIoError(f"write lba={lba} status={IoStatus(status).name}")
        finally:
            self.free_io_buffer(buf)


class RamBlockDevice(BlockDeviceBase):
    """Volatile backing store; config {size_blocks, block_size?}."""

    def __init__(self, arena: Arena | None = None):
        super().__init__(arena)
        self._mem: memoryview | None = None
        self._block_size = DEFAULT_BLOCK_SIZE
        self._block_count = 0

    def open(self, config: dict | None = None) -> None:
        config = config or {}
        self._block_size = int(config.get("block_size", DEFAULT_BLOCK_SIZE))
        self._block_count = int(config["size_blocks"])
        if self._block_count < 1:
            raise ValueError("size_blocks must be >= 1")
        self.queue_depth = int(config.get("queue_depth", DEFAULT_QUEUE_DEPTH))
        self._mem = memoryview(bytearray(self._block_count * self._block_size))
        self._opened = True

    def _build_info(self) -> DeviceInfo:
        return DeviceInfo(self._block_size, self._block_count, self.device_id,
                          supports_flush=True, direct_io=False)

    def _execute_io(self, desc: IoDescriptor) -> int:
        if desc.op == IoOp.FLUSH:
            self.stats["flushes"] += 1
            return IoStatus.OK
        bs = self._block_size
        start = desc.lba * bs
        nbytes = desc.block_count * bs
        boff = desc.buffer_offset
        view = desc.buffer.view
        if desc.op == IoOp.READ:
            if self._fault_hit(self._read_faults, desc.lba, desc.block_count):
                return IoStatus.E_IO
            view[boff:boff + nbytes] = self._mem[start:start + nbytes]
            self.stats["reads"] += 1
            self.stats["bytes_read"] += nbytes
        else:
            if self._fault_hit(self._write_faults, desc.lba, desc.block_count):
                return IoStatus.E_IO
            self._mem[start:start + nbytes] = view[boff:boff + nbytes]
            self.stats["writes"] += 1
            self.stats["bytes_written"] += nbytes
        if self._audit is not None:
            self._audit.append((self.device_id, desc.op,
                                desc.buffer.base + boff, nbytes))
        return IoStatus.OK

    def _on_destroy(self) -> None:
        self._mem = None
        self._opened = False


class FileBlockDevice(BlockDeviceBase):
    """POSIX file-backed device; config {path, size_blocks?, create_if_missing?}.

    Attempts cache-bypassing (direct) file IO and falls back to buffered
    IO plus fsync; DeviceInfo.direct_io records the outcome. With direct
    IO the submitted buffer region must be 512-byte aligned or the
    transfer fails with E_IO.
    """

    def __init__(self, arena: Arena | None = None):
        super().__init__(arena)
        self._fd = -1
        self._path = ""
        self._block_size = DEFAULT_BLOCK_SIZE
        self._block_count = 0
        self._direct = False

    def open(self, config: dict | None = None) -> None:
        config = config or {}
        self._path = str(config["path"])
        self._block_size = int(config.get("block_size", DEFAULT_BLOCK_SIZE))
        self.queue_depth = int(config.get("queue_depth", DEFAULT_QUEUE_DEPTH))
        create = bool(config.get("create_if_missing", False))
        exists = os.path.exists(self._path)
        if not exists and not create:
            raise FileNotFoundError(self._path)
        if not exists:
            size_blocks = int(config["size_blocks"])
            with open(self._path, "wb") as fh:
                fh.truncate(size_blocks * self._block_size)
        file_size = os.path.getsize(self._path)
        self._block_count = int(config.get("size_blocks", file_size // self._block_size))
        if self._block_count < 1:
            raise ValueError(f"{self._path}: smaller than one block")
        if file_size < self._block_count * self._block_size:
            with open(self._path, "r+b") as fh:
                fh.truncate(self._block_count * self._block_size)
        self._fd, self._direct = self._open_fd()
        self._opened = True

    def _open_fd(self) -> tuple[int, bool]:
        flags = os.O_RDWR
        direct_flag = getattr(os, "O_DIRECT", 0)
        if direct_flag:
            try:
                fd = os.open(self._path, flags | direct_flag)
                probe = self.arena.allocate(self._block_size, max(self._block_size, 512))
                try:
                    os.preadv(fd, [probe.view], 0)
                    return fd, True
                except OSError:
                    os.close(fd)
                finally:
                    self.arena.free(probe)
            except OSError:
                pass
        return os.open(self._path, flags), False

    def _build_info(self) -> DeviceInfo:
        return DeviceInfo(self._block_size, self._block_count, self.device_id,
                          supports_flush=True, direct_io=self._direct)

    def _execute_io(self, desc: IoDescriptor) -> int:
        if desc.op == IoOp.FLUSH:
            try:
                os.fsync(self._fd)
            except OSError:
                return IoStatus.E_IO
            self.stats["flushes"] += 1
            return IoStatus.OK
        bs = self._block_size
        offset = desc.lba * bs
        nbytes = desc.block_count * bs
        boff = desc.buffer_offset
        region = desc.buffer.view[boff:boff + nbytes]
        try:
            if desc.op == IoOp.READ:
                if self._fault_hit(self._read_faults, desc.lba, desc.block_count):
                    return IoStatus.E_IO
                done = 0
                while done < nbytes:
                    got = os.preadv(self._fd, [region[done:]], offset + done)
                    if got <= 0:
                        return IoStatus.E_IO
                    done += got
                self.stats["reads"] += 1
                self.stats["bytes_read"] += nbytes
            else:
                if self._fault_hit(self._write_faults, desc.lba, desc.block_count):
                    return IoStatus.E_IO
                done = 0
                while done < nbytes:
                    put = os.pwritev(self._fd, [region[done:]], offset + done)
                    if put <= 0:
                        return IoStatus.E_IO
                    done += put
                self.stats["writes"] += 1
                self.stats["bytes_written"] += nbytes
        except OSError:
            return IoStatus.E_IO
        if self._audit is not None:
            self._audit.append((self.device_id, desc.op,
                                desc.buffer.base + boff, nbytes))
        return IoStatus.OK

    def _on_destroy(self) -> None:
        if self._fd >= 0:
            try:
                os.close(self._fd)
            except OSError:
                pass
            self._fd = -1
        self._opened = False

"""Stackable block devices: partition views, striping, mirroring, caching.

Each composite consumes the block-device interface of its bound children
and exposes the same interface upward, so stacks compose freely. Children
are driven synchronously inside the composite's submit (the completion
still reports through poll, matching the base devices).

Partition table, block 0 of the formatted device (little-endian):

    magic      4 bytes  "CMPT"
    version    u32      1
    entry_count u32
    entries    entry_count x { start_lba u64, num_blocks u64, name 32 bytes }
    crc32      u32      over all preceding bytes

Entries are sorted by start_lba, non-overlapping, and lie within
[1, block_count); block 0 belongs to the table itself. Names are
zero-padded UTF-8, 32 bytes max.
"""

from __future__ import annotations

import struct
import zlib
from collections import OrderedDict

from .blockdev import BlockDeviceBase, DeviceInfo, IoDescriptor, IoOp, IoStatus
from .component import Component, ComponentRef
from .errors import (
    CrcError,
    DeviceNotOpen,
    IncompatibleDependency,
    OverlapError,
)
from .interfaces import IBLOCK_DEVICE_IID

PARTITION_MAGIC = b"CMPT"
PARTITION_VERSION = 1
_PT_HEADER = struct.Struct("<4sII")
_PT_ENTRY = struct.Struct("<QQ32s")
_PT_CRC = struct.Struct("<I")


def _pack_partition_table(entries: list[tuple[int, int, bytes]]) -> bytes:
    blob = _PT_HEADER.pack(PARTITION_MAGIC, PARTITION_VERSION, len(entries))
    for start, num, name in entries:
        blob += _PT_ENTRY.pack(start, num, name)
    return blob + _PT_CRC.pack(zlib.crc32(blob))


def _unpack_partition_table(block: bytes) -> list[tuple[int, int, bytes]]:
    magic, version, count = _PT_HEADER.unpack_from(block, 0)
    if magic != PARTITION_MAGIC or version != PARTITION_VERSION:
        raise CrcError("bad partition table magic/version")
    end = _PT_HEADER.size + count * _PT_ENTRY.size
    if end + _PT_CRC.size > len(block):
        raise CrcError("partition table overruns block 0")
    (crc,) = _PT_CRC.unpack_from(block, end)
    if crc != zlib.crc32(block[:end]):
        raise CrcError("partition table checksum mismatch")
    entries = []
    for i in range(count):
        start, num, name = _PT_ENTRY.unpack_from(block, _PT_HEADER.size + i * _PT_ENTRY.size)
        entries.append((start, num, name.rstrip(b"\x00")))
    return entries


def _normalize_entries(device_blocks: int,
                       entries: list[tuple[int, int, str | bytes]]) -> list[tuple[int, int, bytes]]:
    packed = []
    for start, num, name in entries:
        raw = name.encode() if isinstance(name, str) else bytes(name)
        if len(raw) > 32:
            raise ValueError(f"partition name over 32 bytes: {raw!r}")
        if start < 1 or num < 1 or start + num > device_blocks:
            raise OverlapError(f"entry ({start},{num}) outside [1,{device_blocks})")
        packed.append((int(start), int(num), raw))
    packed.sort(key=lambda e: e[0])
    for (s0, n0, name0), (s1, _, name1) in zip(packed, packed[1:]):
        if s0 + n0 > s1:
            raise OverlapError(f"{name0!r} overlaps {name1!r}")
    return packed


def partition_format(device, entries: list[tuple[int, int, str | bytes]]) -> None:
    """Write the table to block 0. Entries are (start_lba, num_blocks, name)."""
    info = device.get_info()
    packed = _normalize_entries(info.block_count, entries)
    blob = _pack_partition_table(packed)
    if len(blob) > info.block_size:
        raise OverlapError("partition table does not fit in block 0")
    device.write_bytes(0, blob.ljust(info.block_size, b"\x00"))
    device.flush_sync()


def partition_read_table(device) -> list[tuple[int, int, bytes]]:
    block = device.read_bytes(0, 1)
    return _unpack_partition_table(block)


class CompositeDevice(BlockDeviceBase):
    """Base for devices that forward IO to bound children."""

    REQUIRED_BIND_INTERFACES = (IBLOCK_DEVICE_IID,)

    def __init__(self, arena=None):
        super().__init__(arena)
        self._children: list[BlockDeviceBase] = []
        self._opened = True

    def _on_bind(self, dep_instance, views) -> None:
        self._children.append(views[IBLOCK_DEVICE_IID].target)

    def register_buffer(self, buf) -> None:
        self.arena.register(buf, self.device_id)
        for child in self._children:
            child.register_buffer(buf)

    def _child_info(self) -> DeviceInfo:
        if not self._children:
            raise DeviceNotOpen(f"{type(self).__name__}: no bound child device")
        return self._children[0].get_info()


class PartitionViewDevice(CompositeDevice):
    """Block-device window onto one partition entry; config {index}.

    The table is read and checked on first use; opening over a corrupt
    table surfaces CrcError.
    """

    def __init__(self, arena=None):
        super().__init__(arena)
        self._index = 0
        self._start_lba = 0
        self._num_blocks = 0
        self._loaded = False

    def open(self, config: dict | None = None) -> None:
        config = config or {}
        self._index = int(config.get("index", 0))

    def _ensure_loaded(self) -> None:
        if self._loaded:
            return
        child = self._children[0] if self._children else None
        if child is None:
            raise DeviceNotOpen("partition view has no bound device")
        entries = partition_read_table(child)
        if self._index >= len(entries):
            raise IndexError(f"partition index {self._index} of {len(entries)}")
        self._start_lba, self._num_blocks, _ = entries[self._index]
        self._loaded = True

    def _build_info(self) -> DeviceInfo:
        self._ensure_loaded()
        child = self._child_info()
        return DeviceInfo(child.block_size, self._num_blocks, self.device_id,
                          child.supports_flush, child.direct_io)

    def _execute_io(self, desc: IoDescriptor) -> int:
        child = self._children[0]
        if desc.op == IoOp.FLUSH:
            return child.flush_sync()
        if desc.op == IoOp.READ:
            return child.read_sync(self._start_lba + desc.lba, desc.block_count,
                                   desc.buffer, desc.buffer_offset)
        return child.write_sync(self._start_lba + desc.lba, desc.block_count,
                                desc.buffer, desc.buffer_offset)


def partition_open(device_ref: ComponentRef, index: int,
                   registry=None) -> ComponentRef:
    """Open one partition of a formatted device as a fresh block device."""
    view = PartitionViewDevice()
    view.open({"index": index})
    ref = ComponentRef(view, IBLOCK_DEVICE_IID)
    try:
        ref.bind(device_ref)
        view._ensure_loaded()  # surface corrupt tables / bad index now
    except Exception:
        ref.release()
        raise
    return ref


class Raid0Device(CompositeDevice):
    """Striping across >= 2 equal children; config {stripe_blocks}.

    Address map: stripe = lba / stripe_blocks; child = stripe mod n;
    child_lba = (stripe / n) * stripe_blocks + lba mod stripe_blocks.
    Children are truncated to the minimum child size rounded down to a
    whole stripe, so the map is a bijection.
    """

    def __init__(self, arena=None):
        super().__init__(arena)
        self._stripe_blocks = 1

    def open(self, config: dict | None = None) -> None:
        config = config or {}
        stripe = int(config.get("stripe_blocks", 1))
        if stripe < 1 or stripe & (stripe - 1):
            raise ValueError(f"stripe_blocks must be a power of two, got {stripe}")
        self._stripe_blocks = stripe

    def validate_bindings(self) -> None:
        if len(self._children) < 2:
            raise IncompatibleDependency("striping needs >= 2 child devices")
        sizes = {c.get_info().block_size for c in self._children}
        if len(sizes) != 1:
            raise IncompatibleDependency("children disagree on block size")

    def map_lba(self, lba: int) -> tuple[int, int]:
        stripe, within = divmod(lba, self._stripe_blocks)
        child_index = stripe % len(self._children)
        child_lba = (stripe // len(self._children)) * self._stripe_blocks + within
        return child_index, child_lba

    def _usable_child_blocks(self) -> int:
        per_child = min(c.get_info().block_count for c in self._children)
        return (per_child // self._stripe_blocks) * self._stripe_blocks

    def _build_info(self) -> DeviceInfo:
        self.validate_bindings()
        child = self._child_info()
        count = self._usable_child_blocks() * len(self._children)
        flush = all(c.get_info().supports_flush for c in self._children)
        return DeviceInfo(child.block_size, count, self.device_id, flush)

    def _execute_io(self, desc: IoDescriptor) -> int:
        if desc.op == IoOp.FLUSH:
            worst = IoStatus.OK
            for child in self._children:
                status = child.flush_sync()
                if status != IoStatus.OK:
                    worst = status
            return worst
        block_size = self._child_info().block_size
        lba, remaining, boff = desc.lba, desc.block_count, desc.buffer_offset
        sb = self._stripe_blocks
        while remaining:
            child_index, child_lba = self.map_lba(lba)
            run = min(remaining, sb - lba % sb)
            child = self._children[child_index]
            if desc.op == IoOp.READ:
                status = child.read_sync(child_lba, run, desc.buffer, boff)
            else:
                status = child.write_sync(child_lba, run, desc.buffer, boff)
            if status != IoStatus.OK:
                return status
            lba += run
            remaining -= run
            boff += run * block_size
        return IoStatus.OK


class Raid1Device(CompositeDevice):
    """Mirroring across >= 2 equal children.

    Writes complete only after every mirror completes (worst status wins).
    Reads are served round-robin; a media error is retried on the next
    mirror and only fails once all mirrors fail.
    """

    def __init__(self, arena=None):
        super().__init__(arena)
        self._rr = 0

    def validate_bindings(self) -> None:
        if len(self._children) < 2:
            raise IncompatibleDependency("mirroring needs >= 2 child devices")
        geometries = {(c.get_info().block_size, c.get_info().block_count)
                      for c in self._children}
        if len(geometries) != 1:
            raise IncompatibleDependency("mirrors disagree on geometry")

    def _build_info(self) -> DeviceInfo:
        self.validate_bindings()
        child = self._child_info()
        flush = all(c.get_info().supports_flush for c in self._children)
        return DeviceInfo(child.block_size, child.block_count, self.device_id, flush)

    def _execute_io(self, desc: IoDescriptor) -> int:
        children = self._children
        if desc.op == IoOp.FLUSH:
            worst = IoStatus.OK
            for child in children:
                status = child.flush_sync()
                if status != IoStatus.OK:
                    worst = status
            return worst
        if desc.op == IoOp.WRITE:
            worst = IoStatus.OK
            for child in children:
                status = child.write_sync(desc.lba, desc.block_count,
                                          desc.buffer, desc.buffer_offset)
                if status != IoStatus.OK:
                    worst = status
            return worst
        first = self._rr % len(children)
        self._rr += 1
        status = IoStatus.E_IO
        for step in range(len(children)):
            child = children[(first + step) % len(children)]
            status = child.read_sync(desc.lba, desc.block_count,
                                     desc.buffer, desc.buffer_offset)
            if status != IoStatus.E_IO:
                return status
        return status


class CacheDevice(CompositeDevice):
    """Write-through LRU block cache over one child; config {capacity_blocks}.

    Read hits are served from the resident copy (the one sanctioned copy in
    the stack); misses read through into the caller's buffer and populate
    the cache. Writes update the child first, then the resident copies.
    """

    def __init__(self, arena=None):
        super().__init__(arena)
        self._capacity = 0
        self._resident: OrderedDict[int, bytes] = OrderedDict()
        self.cache_stats = {"hits": 0, "misses": 0, "evictions": 0}

    def open(self, config: dict | None = None) -> None:
        config = config or {}
        self._capacity = int(config.get("capacity_blocks", 1024))
        if self._capacity < 1:
            raise ValueError("capacity_blocks must be >= 1")

    def validate_bindings(self) -> None:
        if len(self._children) != 1:
            raise IncompatibleDependency("cache binds exactly one child device")

    def _build_info(self) -> DeviceInfo:
        child = self._child_info()
        return DeviceInfo(child.block_size, child.block_count, self.device_id,
                          child.supports_flush, child.direct_io)

    def _insert(self, lba: int, payload: bytes) -> None:
        resident = self._resident
        if lba in resident:
            resident[lba] = payload
            resident.move_to_end(lba)
            return
        resident[lba] = payload
        if len(resident) > self._capacity:
            resident.popitem(last=False)
            self.cache_stats["evictions"] += 1

    def _execute_io(self, desc: IoDescriptor) -> int:
        child = self._children[0]
        if desc.op == IoOp.FLUSH:
            return child.flush_sync()
        bs = self._child_info().block_size
        view = desc.buffer.view
        if desc.op == IoOp.WRITE:
            status = child.write_sync(desc.lba, desc.block_count,
                                      desc.buffer, desc.buffer_offset)
            if status != IoStatus.OK:
                return status
            for i in range(desc.block_count):
                off = desc.buffer_offset + i * bs
                self._insert(desc.lba + i, bytes(view[off:off + bs]))
            return IoStatus.OK
        resident = self._resident
        i = 0
        while i < desc.block_count:
            lba = desc.lba + i
            off = desc.buffer_offset + i * bs
            cached = resident.get(lba)
            if cached is not None:
                view[off:off + bs] = cached
                resident.move_to_end(lba)
                self.cache_stats["hits"] += 1
                i += 1
                continue
            # contiguous miss run: one child read straight into the caller's buffer
            run = 1
            while i + run < desc.block_count and (desc.lba + i + run) not in resident:
                run += 1
            status = child.read_sync(lba, run, desc.buffer, off)
            if status != IoStatus.OK:
                return status
            for j in range(run):
                joff = off + j * bs
                self._insert(lba + j, bytes(view[joff:joff + bs]))
                self.cache_stats["misses"] += 1
            i += run
        return IoStatus.OK

    def drop_cache(self) -> None:
        self._resident.clear()

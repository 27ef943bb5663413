"""Key-value store over a raw block device.

On-disk layout (all integers little-endian):

    block 0                superblock
    [bitmap_start, +bitmap_blocks)   one bit per data block, 1 = allocated
    [index_start,  +index_blocks)    open-addressed bucket array
    [data_start,   total_blocks)     value blocks

Superblock (64 bytes used, rest of block zero):

    magic         4 bytes "CMKV"
    version       u32  1
    block_size    u32
    total_blocks  u64
    bitmap_start  u64
    bitmap_blocks u64
    index_start   u64
    index_buckets u64
    data_start    u64
    crc32         u32  over all preceding bytes

Index bucket, 64-byte stride:

    state      u8   0 empty, 1 used, 2 tombstone
    key_len    u8   <= 40
    value_len  u32
    key_hash   u64  FNV-1a over the key bytes
    data_lba   u64  absolute lba of the first value block
    key        40 bytes inline, zero-padded
    (2 bytes reserved)

The block span of a value is derived, not stored: ceil(value_len /
block_size) blocks from data_lba. Hashing is 64-bit FNV-1a; collisions
use linear probing with wraparound, tombstones are reused on insert.

Crash consistency is ordering-only: value data, then the bitmap, then the
bucket. A torn put may leak blocks or lose the new value, never damage a
committed one. Erase tombstones the bucket before freeing its blocks for
the same reason.
"""

from __future__ import annotations

import struct
import zlib

from .blockdev import IoStatus
from .component import Component
from .errors import (
    CrcError,
    DeviceIoError,
    DeviceNotOpen,
    DeviceTooSmall,
    KeyTooLong,
    NoSpace,
    NotFound,
)
from .interfaces import IBASE_IID, IBLOCK_DEVICE_IID, IKVSTORE_IID

KV_MAGIC = b"CMKV"
KV_VERSION = 1
MAX_KEY_LEN = 40
MIN_DEVICE_BLOCKS = 64
BUCKET_SIZE = 64

_SUPERBLOCK = struct.Struct("<4sIIQQQQQQ")
_SB_CRC = struct.Struct("<I")
_BUCKET = struct.Struct("<BBIQQ40s2x")

BUCKET_EMPTY = 0
BUCKET_USED = 1
BUCKET_TOMBSTONE = 2

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_U64 = 0xFFFFFFFFFFFFFFFF


def fnv1a(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _U64
    return h


class BitmapAllocator:
    """First-fit contiguous run allocator, one bit per block (1 = allocated).

    Backed by a bytearray so it mirrors the on-disk bitmap byte for byte.
    A low-water hint keeps the scan short: nothing below the hint is free.
    """

    def __init__(self, total_bits: int, storage: bytearray | None = None):
        nbytes = -(-total_bits // 8)
        if storage is None:
            storage = bytearray(nbytes)
        if len(storage) < nbytes:
            raise ValueError("bitmap storage smaller than bit count")
        self.storage = storage
        self.total_bits = total_bits
        self._hint = 0
        self.free_count = total_bits - sum(bin(b).count("1") for b in storage[:nbytes])
        # bits past total_bits inside the last byte must stay zero

    def is_allocated(self, index: int) -> bool:
        return bool(self.storage[index >> 3] & (1 << (index & 7)))

    def alloc_run(self, count: int) -> int:
        """Index of the first free run of `count` bits, now marked allocated."""
        if count <= 0:
            raise ValueError("count must be positive")
        if count > self.free_count:
            raise NoSpace(f"need {count} blocks, {self.free_count} free")
        storage = self.storage
        run = 0
        i = self._hint
        # skip fully-allocated bytes while no run is open
        while i < self.total_bits:
            if run == 0 and (i & 7) == 0:
                while i + 8 <= self.total_bits and storage[i >> 3] == 0xFF:
                    i += 8
                if i >= self.total_bits:
                    break
            if storage[i >> 3] & (1 << (i & 7)):
                run = 0
            else:
                run += 1
                if run == count:
                    start = i - count + 1
                    self._mark(start, count, True)
                    if start == self._hint:
                        self._hint = start + count
                    return start
            i += 1
        raise NoSpace(f"no contiguous run of {count} blocks")

    def free_run(self, start: int, count: int) -> None:
        for i in range(start, start + count):
            if not self.storage[i >> 3] & (1 << (i & 7)):
                raise ValueError(f"bit {i} already free")
        self._mark(start, count, False)
        if start < self._hint:
            self._hint = start

    def _mark(self, start: int, count: int, value: bool) -> None:
        storage = self.storage
        for i in range(start, start + count):
            if value:
                storage[i >> 3] |= 1 << (i & 7)
            else:
                storage[i >> 3] &= ~(1 << (i & 7)) & 0xFF
        self.free_count += -count if value else count

    def allocated_indices(self) -> set[int]:
        return {i for i in range(self.total_bits) if self.is_allocated(i)}


class _Layout:
    __slots__ = ("block_size", "total_blocks", "bitmap_start", "bitmap_blocks",
                 "index_start", "index_buckets", "data_start")

    def __init__(self, block_size, total_blocks, bitmap_start, bitmap_blocks,
                 index_start, index_buckets, data_start):
        self.block_size = block_size
        self.total_blocks = total_blocks
        self.bitmap_start = bitmap_start
        self.bitmap_blocks = bitmap_blocks
        self.index_start = index_start
        self.index_buckets = index_buckets
        self.data_start = data_start

    @property
    def data_blocks(self) -> int:
        return self.total_blocks - self.data_start

    @property
    def index_blocks(self) -> int:
        return self.index_buckets * BUCKET_SIZE // self.block_size

    def pack(self) -> bytes:
        blob = _SUPERBLOCK.pack(KV_MAGIC, KV_VERSION, self.block_size,
                                self.total_blocks, self.bitmap_start,
                                self.bitmap_blocks, self.index_start,
                                self.index_buckets, self.data_start)
        return blob + _SB_CRC.pack(zlib.crc32(blob))

    @classmethod
    def unpack(cls, block: bytes) -> "_Layout":
        raw = block[:_SUPERBLOCK.size]
        (crc,) = _SB_CRC.unpack_from(block, _SUPERBLOCK.size)
        if crc != zlib.crc32(raw):
            raise CrcError("superblock checksum mismatch")
        magic, version, bs, total, bm_start, bm_blocks, ix_start, ix_buckets, d_start = \
            _SUPERBLOCK.unpack(raw)
        if magic != KV_MAGIC or version != KV_VERSION:
            raise CrcError("bad superblock magic/version")
        return cls(bs, total, bm_start, bm_blocks, ix_start, ix_buckets, d_start)


def compute_layout(block_size: int, total_blocks: int) -> _Layout:
    """Size the regions: index ~ total/4 buckets rounded up to whole blocks,
    bitmap sized to cover whatever remains as data."""
    if total_blocks < MIN_DEVICE_BLOCKS:
        raise DeviceTooSmall(f"{total_blocks} blocks, need >= {MIN_DEVICE_BLOCKS}")
    buckets_per_block = block_size // BUCKET_SIZE
    index_blocks = max(1, -(-(total_blocks // 4) // buckets_per_block))
    bitmap_blocks = 1
    while True:
        data_start = 1 + bitmap_blocks + index_blocks
        data_blocks = total_blocks - data_start
        if data_blocks < 1:
            raise DeviceTooSmall(f"{total_blocks} blocks leave no data region")
        need = -(-data_blocks // (block_size * 8))
        if need <= bitmap_blocks:
            break
        bitmap_blocks = need
    return _Layout(block_size, total_blocks, 1, bitmap_blocks,
                   1 + bitmap_blocks, index_blocks * buckets_per_block, data_start)


class KvStore(Component):
    """Hash-indexed store; binds one block device below it.

    Single-threaded by contract: concurrent access is provided by running
    the store over a service arrangement, not by internal locking.
    """

    INTERFACES = frozenset({IBASE_IID, IKVSTORE_IID})
    REQUIRED_BIND_INTERFACES = (IBLOCK_DEVICE_IID,)

    def __init__(self):
        super().__init__()
        self._device = None
        self._layout: _Layout | None = None
        self._allocator: BitmapAllocator | None = None
        self._meta_buf = None
        self._data_buf = None
        self._auto_format = False

    def open(self, config: dict | None = None) -> None:
        config = config or {}
        self._auto_format = bool(config.get("auto_format", False))

    def _on_bind(self, dep_instance, views) -> None:
        self._device = views[IBLOCK_DEVICE_IID].target

    @property
    def device(self):
        return self._device

    # -- device IO helpers ---------------------------------------------------

    def _require_device(self):
        if self._device is None:
            raise DeviceNotOpen("kv store has no bound device")
        return self._device

    def _meta(self):
        if self._meta_buf is None:
            bs = self._require_device().get_info().block_size
            self._meta_buf = self._device.allocate_io_buffer(bs, bs)
        return self._meta_buf

    def _data(self, nbytes: int):
        if self._data_buf is None:
            self._data_buf = self._device.allocate_io_buffer(max(nbytes, 4096), 4096)
        elif self._data_buf.size < nbytes:
            self._device.realloc_io_buffer(self._data_buf, nbytes, 4096)
        return self._data_buf

    def _read_block(self, lba: int, buf=None):
        buf = buf if buf is not None else self._meta()
        status = self._device.read_sync(lba, 1, buf)
        if status != IoStatus.OK:
            raise DeviceIoError(f"read lba={lba}: {IoStatus(status).name}")
        return buf

    def _write_block(self, lba: int, buf=None) -> None:
        buf = buf if buf is not None else self._meta()
        status = self._device.write_sync(lba, 1, buf)
        if status != IoStatus.OK:
            raise DeviceIoError(f"write lba={lba}: {IoStatus(status).name}")

    # -- lifecycle -------------------------------------------------------------

    def format(self) -> None:
        """Write a fresh superblock, zeroed bitmap, zeroed index."""
        device = self._require_device()
        info = device.get_info()
        layout = compute_layout(info.block_size, info.block_count)
        zero = self._meta()
        zero.view[:] = b"\x00" * zero.size
        for lba in range(layout.bitmap_start,
                         layout.index_start + layout.index_blocks):
            self._write_block(lba)
        sb = self._meta()
        sb.view[:] = layout.pack().ljust(info.block_size, b"\x00")
        self._write_block(0)
        device.flush_sync()
        self._layout = layout
        self._allocator = BitmapAllocator(
            layout.data_blocks, bytearray(layout.bitmap_blocks * info.block_size))

    def _ensure_open(self) -> _Layout:
        if self._layout is not None:
            return self._layout
        device = self._require_device()
        info = device.get_info()
        block = bytes(self._read_block(0).view)
        try:
            layout = _Layout.unpack(block)
        except CrcError:
            if not self._auto_format:
                raise
            self.format()
            return self._layout
        if layout.block_size != info.block_size or layout.total_blocks > info.block_count:
            raise CrcError("superblock does not match device geometry")
        storage = bytearray()
        for lba in range(layout.bitmap_start, layout.bitmap_start + layout.bitmap_blocks):
            storage += self._read_block(lba).view
        self._layout = layout
        self._allocator = BitmapAllocator(layout.data_blocks, storage)
        return layout

    def flush(self) -> None:
        self._require_device().flush_sync()

    # -- bitmap persistence ------------------------------------------------------

    def free_blocks(self) -> int:
        self._ensure_open()
        return self._allocator.free_count

    def _write_bitmap_range(self, start_bit: int, count: int) -> None:
        """Write the bitmap blocks covering [start_bit, +count) through to disk."""
        layout = self._layout
        bs = layout.block_size
        per_block_bits = bs * 8
        buf = self._meta()
        storage = self._allocator.storage
        for block_i in range(start_bit // per_block_bits,
                             (start_bit + count - 1) // per_block_bits + 1):
            buf.view[:] = storage[block_i * bs:(block_i + 1) * bs]
            self._write_block(layout.bitmap_start + block_i)

    # -- index ----------------------------------------------------------------------

    def _bucket_pos(self, bucket_index: int) -> tuple[int, int]:
        layout = self._layout
        per_block = layout.block_size // BUCKET_SIZE
        return (layout.index_start + bucket_index // per_block,
                (bucket_index % per_block) * BUCKET_SIZE)

    def _read_bucket(self, block_cache: dict, bucket_index: int):
        lba, offset = self._bucket_pos(bucket_index)
        block = block_cache.get(lba)
        if block is None:
            block = bytes(self._read_block(lba).view)
            block_cache[lba] = block
        return _BUCKET.unpack_from(block, offset)

    def _write_bucket(self, bucket_index: int, state: int, key: bytes,
                      value_len: int, key_hash: int, data_lba: int) -> None:
        lba, offset = self._bucket_pos(bucket_index)
        buf = self._read_block(lba)
        _BUCKET.pack_into(buf.view, offset, state, len(key), value_len,
                          key_hash, data_lba, key)
        self._write_block(lba)

    def _probe(self, key: bytes):
        """Locate key. Returns (found_index or None, insert_index or None,
        bucket tuple when found)."""
        layout = self._ensure_open()
        buckets = layout.index_buckets
        h = fnv1a(key)
        start = h % buckets
        first_tombstone = None
        cache: dict[int, bytes] = {}
        for step in range(buckets):
            idx = (start + step) % buckets
            state, key_len, value_len, key_hash, data_lba, raw_key = \
                self._read_bucket(cache, idx)
            if state == BUCKET_EMPTY:
                insert = first_tombstone if first_tombstone is not None else idx
                return None, insert, None
            if state == BUCKET_TOMBSTONE:
                if first_tombstone is None:
                    first_tombstone = idx
                continue
            if key_hash == h and key_len == len(key) and raw_key[:key_len] == key:
                return idx, None, (state, key_len, value_len, key_hash, data_lba)
        return None, first_tombstone, None

    @staticmethod
    def _value_blocks(value_len: int, block_size: int) -> int:
        return -(-value_len // block_size)

    # -- operations --------------------------------------------------------------------

    def put(self, key: bytes, value: bytes) -> None:
        """Insert or overwrite. Write order: data blocks, bitmap, bucket;
        an overwrite frees the old blocks only after the new bucket commits."""
        key = bytes(key)
        if not key:
            raise ValueError("empty key")
        if len(key) > MAX_KEY_LEN:
            raise KeyTooLong(f"{len(key)} bytes, max {MAX_KEY_LEN}")
        layout = self._ensure_open()
        bs = layout.block_size
        found, insert, bucket = self._probe(key)
        new_blocks = self._value_blocks(len(value), bs)
        if insert is None and found is None:
            raise NoSpace("index full")

        old_lba, old_len = 0, 0
        if found is not None:
            _, _, old_len, _, old_lba = bucket
        old_blocks = self._value_blocks(old_len, bs)

        data_lba = 0
        if new_blocks:
            data_index = self._allocator.alloc_run(new_blocks)
            data_lba = layout.data_start + data_index
            buf = self._data(new_blocks * bs)
            buf.view[0:len(value)] = value
            pad = new_blocks * bs - len(value)
            if pad:
                buf.view[len(value):new_blocks * bs] = b"\x00" * pad
            status = self._device.write_sync(data_lba, new_blocks, buf)
            if status != IoStatus.OK:
                self._allocator.free_run(data_index, new_blocks)
                raise DeviceIoError(f"data write: {IoStatus(status).name}")
            self._write_bitmap_range(data_index, new_blocks)

        target = found if found is not None else insert
        self._write_bucket(target, BUCKET_USED, key, len(value), fnv1a(key), data_lba)

        if found is not None and old_blocks:
            start = old_lba - layout.data_start
            self._allocator.free_run(start, old_blocks)
            self._write_bitmap_range(start, old_blocks)

    def get(self, key: bytes) -> bytes:
        key = bytes(key)
        layout = self._ensure_open()
        found, _, bucket = self._probe(key)
        if found is None:
            raise NotFound(repr(key))
        _, _, value_len, _, data_lba = bucket
        if value_len == 0:
            return b""
        blocks = self._value_blocks(value_len, layout.block_size)
        buf = self._data(blocks * layout.block_size)
        status = self._device.read_sync(data_lba, blocks, buf)
        if status != IoStatus.OK:
            raise DeviceIoError(f"data read: {IoStatus(status).name}")
        return bytes(buf.view[0:value_len])

    def get_attr(self, key: bytes) -> int:
        """Value length from the bucket alone; no data-region IO."""
        found, _, bucket = self._probe(bytes(key))
        if found is None:
            raise NotFound(repr(key))
        return bucket[2]

    def erase(self, key: bytes) -> None:
        """Tombstone the bucket, then free its blocks (leak-safe order)."""
        key = bytes(key)
        layout = self._ensure_open()
        found, _, bucket = self._probe(key)
        if found is None:
            raise NotFound(repr(key))
        _, _, value_len, _, data_lba = bucket
        self._write_bucket(found, BUCKET_TOMBSTONE, key, 0, 0, 0)
        blocks = self._value_blocks(value_len, layout.block_size)
        if blocks:
            start = data_lba - layout.data_start
            self._allocator.free_run(start, blocks)
            self._write_bitmap_range(start, blocks)

    def contains(self, key: bytes) -> bool:
        found, _, _ = self._probe(bytes(key))
        return found is not None

    def list(self, prefix: bytes = b"") -> list[bytes]:
        """All live keys with the prefix, lexicographically sorted."""
        prefix = bytes(prefix)
        layout = self._ensure_open()
        keys = []
        buf = self._meta()
        per_block = layout.block_size // BUCKET_SIZE
        for block_i in range(layout.index_blocks):
            self._read_block(layout.index_start + block_i, buf)
            raw = bytes(buf.view)
            for slot in range(per_block):
                state, key_len, _, _, _, raw_key = _BUCKET.unpack_from(raw, slot * BUCKET_SIZE)
                if state == BUCKET_USED:
                    key = raw_key[:key_len]
                    if key.startswith(prefix):
                        keys.append(key)
        keys.sort()
        return keys

    def dump(self) -> str:
        """Line-oriented format audit: superblock summary plus used buckets."""
        layout = self._ensure_open()
        lines = [
            f"superblock block_size={layout.block_size} total_blocks={layout.total_blocks} "
            f"bitmap={layout.bitmap_start}+{layout.bitmap_blocks} "
            f"index={layout.index_start}+{layout.index_blocks} buckets={layout.index_buckets} "
            f"data={layout.data_start}+{layout.data_blocks} free={self._allocator.free_count}"
        ]
        buf = self._meta()
        per_block = layout.block_size // BUCKET_SIZE
        for block_i in range(layout.index_blocks):
            self._read_block(layout.index_start + block_i, buf)
            raw = bytes(buf.view)
            for slot in range(per_block):
                idx = block_i * per_block + slot
                state, key_len, value_len, key_hash, data_lba, raw_key = \
                    _BUCKET.unpack_from(raw, slot * BUCKET_SIZE)
                if state != BUCKET_EMPTY:
                    kind = "used" if state == BUCKET_USED else "tomb"
                    lines.append(
                        f"bucket {idx} {kind} key={raw_key[:key_len]!r} "
                        f"value_len={value_len} hash={key_hash:#018x} data_lba={data_lba}"
                    )
        return "\n".join(lines)

    # -- audit hooks for tests ------------------------------------------------------

    def layout(self) -> _Layout:
        return self._ensure_open()

    def allocated_data_indices(self) -> set[int]:
        self._ensure_open()
        return self._allocator.allocated_indices()

    def _on_destroy(self) -> None:
        for buf in (self._meta_buf, self._data_buf):
            if buf is not None and not buf._freed:
                try:
                    self._device.free_io_buffer(buf)
                except Exception:
                    pass
        self._meta_buf = self._data_buf = None

"""Pinned IO buffer arena with per-device registration checks.

Pinning is emulated: each buffer is carved out of a dedicated bytearray
that is never relocated while the buffer lives, and the exported
memoryview blocks any resize of the backing storage. The buffer's base is
the real data address of the aligned region, so region identities are
honest integers that upper layers (and the no-copy audit) can compare.

Device protection is emulated by a registration table: a device may only
be handed descriptors whose byte range lies inside a region registered for
that device's identity. This is the software stand-in for an IOMMU domain,
and devices reject unregistered ranges with an access status instead of
touching them.
"""

from __future__ import annotations

import ctypes
import threading

from .errors import BadAlignment, BufferInFlight, OutOfMemory, UnknownBuffer

MIN_ALIGNMENT = 8
DEFAULT_ALIGNMENT = 4096

_inflight_lock = threading.Lock()


def _data_address(storage) -> int:
    return ctypes.addressof((ctypes.c_char * len(storage)).from_buffer(storage))


class IoBuffer:
    """Aligned, registered, non-relocating memory region.

    The handle is the stable identity: realloc may move base, never the
    handle. ``view`` is the writable memoryview of exactly [base, base+size).
    """

    __slots__ = (
        "handle", "size", "alignment", "numa_node", "base", "view",
        "registered_devices", "_storage", "_in_flight", "_freed",
    )

    def __init__(self, handle: int, size: int, alignment: int, numa_node: int):
        self.handle = handle
        self.alignment = alignment
        self.numa_node = numa_node
        self.registered_devices: set[int] = set()
        self._in_flight = 0
        self._freed = False
        self._attach_storage(size)

    def _attach_storage(self, size: int) -> None:
        try:
            storage = bytearray(size + self.alignment)
        except MemoryError as exc:
            raise OutOfMemory(f"{size} bytes") from exc
        addr = _data_address(storage)
        offset = (-addr) % self.alignment
        self._storage = storage
        self.base = addr + offset
        self.size = size
        self.view = memoryview(storage)[offset:offset + size]

    @property
    def in_flight(self) -> int:
        return self._in_flight

    def inflight_inc(self) -> None:
        with _inflight_lock:
            self._in_flight += 1

    def inflight_dec(self) -> None:
        with _inflight_lock:
            self._in_flight -= 1

    def write(self, offset: int, data: bytes) -> None:
        self.view[offset:offset + len(data)] = data

    def read(self, offset: int, length: int) -> bytes:
        return bytes(self.view[offset:offset + length])

    def __repr__(self) -> str:
        return f"<IoBuffer #{self.handle} base=0x{self.base:x} size={self.size}>"


class ExternalRegion:
    """Foreign memory (e.g. a mapped shared segment) adapted to the buffer shape.

    Not arena-managed: no realloc/free, identity fixed by the mapping.
    """

    __slots__ = ("handle", "size", "alignment", "numa_node", "base", "view",
                 "registered_devices", "_in_flight", "data_offset")

    def __init__(self, view: memoryview, base: int):
        self.handle = -1
        self.data_offset = 0
        self.size = len(view)
        self.alignment = 1
        self.numa_node = -1
        self.base = base
        self.view = view
        self.registered_devices: set[int] = set()
        self._in_flight = 0

    def inflight_inc(self) -> None:
        with _inflight_lock:
            self._in_flight += 1

    def inflight_dec(self) -> None:
        with _inflight_lock:
            self._in_flight -= 1


class RegistrationTable:
    """device identity -> registered (base, size) regions."""

    def __init__(self) -> None:
        self._entries: dict[int, dict[int, int]] = {}
        self._lock = threading.Lock()

    def add(self, device_id: int, base: int, size: int) -> None:
        with self._lock:
            self._entries.setdefault(device_id, {})[base] = size

    def remove(self, device_id: int, base: int) -> None:
        with self._lock:
            regions = self._entries.get(device_id)
            if regions is not None:
                regions.pop(base, None)

    def check_access(self, device_id: int, base: int, size: int) -> bool:
        """True iff [base, base+size) lies inside one region registered for the device."""
        if size < 0:
            return False
        with self._lock:
            regions = self._entries.get(device_id)
            if not regions:
                return False
            for rbase, rsize in regions.items():
                if rbase <= base and base + size <= rbase + rsize:
                    return True
        return False

    def regions_for(self, device_id: int) -> list[tuple[int, int]]:
        with self._lock:
            return sorted(self._entries.get(device_id, {}).items())


class Arena:
    """Allocator plus registration table for one stack's IO buffers."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._buffers: dict[int, IoBuffer] = {}
        self._next_handle = 1
        self._bytes_outstanding = 0
        self.table = RegistrationTable()

    @staticmethod
    def _check_alignment(alignment: int) -> None:
        if alignment < MIN_ALIGNMENT or alignment & (alignment - 1):
            raise BadAlignment(f"alignment {alignment} (need power of two >= {MIN_ALIGNMENT})")

    def allocate(self, size: int, alignment: int = DEFAULT_ALIGNMENT,
                 numa_node: int = -1) -> IoBuffer:
        """Zero-filled aligned buffer. numa_node is recorded, not enforced."""
        if size <= 0:
            raise ValueError(f"buffer size must be positive, got {size}")
        self._check_alignment(alignment)
        with self._lock:
            handle = self._next_handle
            self._next_handle += 1
            buf = IoBuffer(handle, size, alignment, numa_node)
            self._buffers[handle] = buf
            self._bytes_outstanding += size
        return buf

    def realloc(self, buf: IoBuffer, size: int, alignment: int) -> None:
        """Resize preserving the prefix and the handle; base may move.

        Rejected while any descriptor references the buffer.
        """
        if size <= 0:
            raise ValueError(f"buffer size must be positive, got {size}")
        self._check_alignment(alignment)
        with self._lock:
            if buf._freed or self._buffers.get(buf.handle) is not buf:
                raise UnknownBuffer(f"handle {buf.handle}")
            if buf._in_flight:
                raise BufferInFlight(f"handle {buf.handle}")
            if size == buf.size and alignment == buf.alignment:
                return
            old_view, old_base, old_size = buf.view, buf.base, buf.size
            buf.alignment = alignment
            buf._attach_storage(size)
            keep = min(old_size, size)
            buf.view[0:keep] = old_view[0:keep]
            for device_id in buf.registered_devices:
                self.table.remove(device_id, old_base)
                self.table.add(device_id, buf.base, buf.size)
            self._bytes_outstanding += size - old_size

    def free(self, buf: IoBuffer) -> None:
        with self._lock:
            if buf._freed or self._buffers.get(buf.handle) is not buf:
                raise UnknownBuffer(f"handle {buf.handle}")
            if buf._in_flight:
                raise BufferInFlight(f"handle {buf.handle}")
            for device_id in buf.registered_devices:
                self.table.remove(device_id, buf.base)
            buf.registered_devices.clear()
            buf._freed = True
            buf.view.release()
            del self._buffers[buf.handle]
            self._bytes_outstanding -= buf.size

    def register(self, buf, device_id: int) -> None:
        """Grant a device access to the buffer's current region."""
        self.table.add(device_id, buf.base, buf.size)
        buf.registered_devices.add(device_id)

    def register_region(self, device_id: int, base: int, size: int) -> None:
        self.table.add(device_id, base, size)

    def check_access(self, device_id: int, base: int, size: int) -> bool:
        return self.table.check_access(device_id, base, size)

    def bytes_outstanding(self) -> int:
        with self._lock:
            return self._bytes_outstanding

    def live_buffers(self) -> int:
        with self._lock:
            return len(self._buffers)

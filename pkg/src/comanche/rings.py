"""Single-producer single-consumer rings of fixed-size records.

The ring lives inside any writable buffer (heap bytearray or a mapped
shared segment), so the in-process and cross-process queues share one
implementation. Layout, little-endian:

    offset 0    head  u64   monotonic push counter (producer mirror)
    offset 64   tail  u64   monotonic pop counter  (consumer mirror)
    offset 128  slots (1 << order) x { seq u64, record }

Each side advances only its own position and never trusts a raw read of
the other side's counter. A slot is valid for the consumer only when its
sequence tag equals position + 1, and reusable by the producer only when
the tag equals position; the tag is written after the payload, in the
same slot. This is the phase-tag discipline of hardware completion
queues: a stale view of the queue memory (counters or slots) can only
look like "empty" or "full", never like a torn or duplicated record, so
callers retry instead of corrupting. Sequence values only grow, making
every stale read conservative.

The head/tail mirrors exist for diagnostics and conservation sampling;
ring correctness does not depend on reading them.
"""

from __future__ import annotations

import struct

_U64 = struct.Struct("<Q")

HEAD_OFFSET = 0
TAIL_OFFSET = 64
SLOTS_OFFSET = 128
SEQ_BYTES = 8


def ring_bytes(order: int, record_size: int) -> int:
    return SLOTS_OFFSET + (1 << order) * (SEQ_BYTES + record_size)


class SpscRing:
    """One ring bound to a region of a buffer; init=True formats it.

    A ring object serves one producer and one consumer; when the two
    sides live in different processes, each attaches its own object and
    uses only its own role's methods. Positions are adopted from the
    mirrors at attach time, so attach only while the ring is quiescent.
    """

    __slots__ = ("_mv", "_base", "_order", "_mask", "_cap", "_record_size",
                 "_stride", "_slots", "_head_pos", "_tail_pos")

    def __init__(self, mv, base: int, order: int, record_size: int, init: bool = False):
        if order < 0 or order > 20:
            raise ValueError(f"ring order {order} out of range")
        self._mv = mv
        self._base = base
        self._order = order
        self._cap = 1 << order
        self._mask = self._cap - 1
        self._record_size = record_size
        self._stride = SEQ_BYTES + record_size
        self._slots = base + SLOTS_OFFSET
        if init:
            _U64.pack_into(mv, base + HEAD_OFFSET, 0)
            _U64.pack_into(mv, base + TAIL_OFFSET, 0)
            for i in range(self._cap):
                _U64.pack_into(mv, self._slots + i * self._stride, i)
            self._head_pos = 0
            self._tail_pos = 0
        else:
            self._head_pos = _U64.unpack_from(mv, base + HEAD_OFFSET)[0]
            self._tail_pos = _U64.unpack_from(mv, base + TAIL_OFFSET)[0]

    @property
    def capacity(self) -> int:
        return self._cap

    @property
    def record_size(self) -> int:
        return self._record_size

    def head(self) -> int:
        return _U64.unpack_from(self._mv, self._base + HEAD_OFFSET)[0]

    def tail(self) -> int:
        return _U64.unpack_from(self._mv, self._base + TAIL_OFFSET)[0]

    def count(self) -> int:
        """Diagnostic estimate from the mirrors; exact only at quiescence."""
        return self.head() - self.tail()

    def try_push(self, record: bytes) -> bool:
        """False when the target slot is not yet recycled (ring full, or a
        stale view of it); the caller retries."""
        mv = self._mv
        pos = self._head_pos
        off = self._slots + (pos & self._mask) * self._stride
        if _U64.unpack_from(mv, off)[0] != pos:
            return False
        rs = self._record_size
        mv[off + SEQ_BYTES:off + SEQ_BYTES + rs] = record
        _U64.pack_into(mv, off, pos + 1)  # publish after the payload
        self._head_pos = pos + 1
        _U64.pack_into(mv, self._base + HEAD_OFFSET, pos + 1)
        return True

    def try_pop(self) -> bytes | None:
        mv = self._mv
        pos = self._tail_pos
        off = self._slots + (pos & self._mask) * self._stride
        if _U64.unpack_from(mv, off)[0] != pos + 1:
            return None
        rs = self._record_size
        record = bytes(mv[off + SEQ_BYTES:off + SEQ_BYTES + rs])
        _U64.pack_into(mv, off, pos + self._cap)  # recycle for the producer
        self._tail_pos = pos + 1
        _U64.pack_into(mv, self._base + TAIL_OFFSET, pos + 1)
        return record

    def pop_many(self, max_records: int) -> list[bytes]:
        out = []
        mv = self._mv
        rs = self._record_size
        cap = self._cap
        pos = self._tail_pos
        for _ in range(max_records):
            off = self._slots + (pos & self._mask) * self._stride
            if _U64.unpack_from(mv, off)[0] != pos + 1:
                break
            out.append(bytes(mv[off + SEQ_BYTES:off + SEQ_BYTES + rs]))
            _U64.pack_into(mv, off, pos + cap)
            pos += 1
        if out:
            self._tail_pos = pos
            _U64.pack_into(mv, self._base + TAIL_OFFSET, pos)
        return out


def heap_ring(order: int, record_size: int) -> SpscRing:
    """Ring over a fresh in-process buffer."""
    storage = memoryview(bytearray(ring_bytes(order, record_size)))
    return SpscRing(storage, 0, order, record_size, init=True)

"""Workload generation and latency accounting for the bench command.

Latency is measured per op from submit to terminal status on a monotonic
clock and recorded in a log2 histogram spanning 1 microsecond to 1 second,
so memory stays bounded at millions of ops. The mean and max are tracked
exactly; percentiles are reported at bucket upper bounds.
"""

from __future__ import annotations

import random
import time

from .blockdev import IoDescriptor, IoOp, IoStatus

WORKLOADS = ("randread", "randwrite", "seqread", "seqwrite", "mixed70r")

_BUCKETS = 21  # 2^0 .. 2^20 microseconds, last bucket is the 1 s overflow


class LatencyHistogram:
    def __init__(self):
        self.counts = [0] * (_BUCKETS + 1)
        self.total = 0
        self.sum_ns = 0
        self.max_ns = 0

    def record(self, ns: int) -> None:
        us = ns // 1000
        bucket = us.bit_length()  # 0us -> 0, 1us -> 1, ..., clamped below
        if bucket > _BUCKETS:
            bucket = _BUCKETS
        self.counts[bucket] += 1
        self.total += 1
        self.sum_ns += ns
        if ns > self.max_ns:
            self.max_ns = ns

    def percentile_us(self, fraction: float) -> float:
        """Upper bound (in us) of the bucket where the cumulative count
        crosses the requested fraction, clamped to the exact maximum so the
        reported percentiles never exceed it."""
        if self.total == 0:
            return 0.0
        threshold = fraction * self.total
        seen = 0
        bound = float(1 << _BUCKETS)
        for bucket, count in enumerate(self.counts):
            seen += count
            if seen >= threshold:
                bound = float(1 << bucket) if bucket else 1.0
                break
        return min(bound, self.max_ns / 1000.0)

    def summary(self) -> dict:
        mean_us = (self.sum_ns / self.total / 1000.0) if self.total else 0.0
        return {
            "p50": self.percentile_us(0.50),
            "p90": self.percentile_us(0.90),
            "p99": self.percentile_us(0.99),
            "mean": round(mean_us, 3),
            "max": round(self.max_ns / 1000.0, 3),
        }


def workload_ops(workload: str, seed: int, block_count: int, io_blocks: int):
    """Infinite (op, lba) stream; identical for identical seeds."""
    if workload not in WORKLOADS:
        raise ValueError(f"unknown workload {workload!r}")
    rng = random.Random(seed)
    span = block_count - io_blocks
    if span < 0:
        raise ValueError("io size exceeds device capacity")
    lba = 0
    while True:
        if workload == "randread":
            yield IoOp.READ, rng.randint(0, span)
        elif workload == "randwrite":
            yield IoOp.WRITE, rng.randint(0, span)
        elif workload == "mixed70r":
            op = IoOp.READ if rng.random() < 0.70 else IoOp.WRITE
            yield op, rng.randint(0, span)
        else:
            op = IoOp.READ if workload == "seqread" else IoOp.WRITE
            yield op, lba
            lba += io_blocks
            if lba > span:
                lba = 0


def run_workload(port, *, workload: str, qd: int, io_size: int,
                 duration_s: float, seed: int = 42,
                 max_ops: int | None = None, op_log=None) -> dict:
    """Drive one port with a seeded workload; returns the report dict."""
    info = port.get_info()
    block_size = info.block_size
    if io_size % block_size:
        raise ValueError(f"io size {io_size} not a multiple of block size {block_size}")
    io_blocks = io_size // block_size
    ops = workload_ops(workload, seed, info.block_count, io_blocks)

    buf = port.allocate_io_buffer(max(qd, 1) * io_size, block_size)
    hist = LatencyHistogram()
    errors: dict[str, int] = {}
    inflight: dict[int, int] = {}  # tag -> t0
    free_slots = list(range(max(qd, 1)))
    tag_slot: dict[int, int] = {}
    next_tag = 1
    submitted = completed = 0

    clock = time.perf_counter_ns
    deadline = clock() + int(duration_s * 1e9)
    try:
        while True:
            now = clock()
            stop_submitting = now >= deadline or (max_ops is not None and submitted >= max_ops)
            if stop_submitting and completed == submitted:
                break
            while not stop_submitting and free_slots:
                op, lba = next(ops)
                slot = free_slots.pop()
                desc = IoDescriptor(op, lba, io_blocks, buf, slot * io_size, next_tag)
                t0 = clock()
                if not port.async_submit(desc):
                    free_slots.append(slot)
                    if desc.status == IoStatus.PENDING:
                        break  # backpressure; reap first
                    errors[IoStatus(desc.status).name] = \
                        errors.get(IoStatus(desc.status).name, 0) + 1
                    continue
                if op_log is not None:
                    op_log.write(f"{IoOp(op).name} {lba} {io_blocks}\n")
                inflight[next_tag] = t0
                tag_slot[next_tag] = slot
                next_tag += 1
                submitted += 1
                if max_ops is not None and submitted >= max_ops:
                    break
            completions = port.poll_completions(64)
            if not completions:
                if inflight:
                    time.sleep(0)  # waiting on a service thread; yield
                continue
            for tag, status in completions:
                t1 = clock()
                hist.record(t1 - inflight.pop(tag))
                free_slots.append(tag_slot.pop(tag))
                completed += 1
                if status != IoStatus.OK:
                    errors[IoStatus(status).name] = errors.get(IoStatus(status).name, 0) + 1
    finally:
        elapsed_s = max((clock() - (deadline - int(duration_s * 1e9))) / 1e9, 1e-9)
        port.free_io_buffer(buf)

    return {
        "workload": workload,
        "qd": qd,
        "io_size": io_size,
        "total_ops": completed,
        "elapsed_s": round(elapsed_s, 6),
        "iops": round(completed / elapsed_s, 1),
        "latency_us": hist.summary(),
        "errors": errors,
    }

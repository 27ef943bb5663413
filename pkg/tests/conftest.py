import pytest

from comanche import live_component_count


def pytest_runtest_logreport(report):
    # one visible pass/fail line per acceptance criterion
    if report.when == "call" and "test_acceptance" in report.nodeid:
        name = report.nodeid.split("::")[-1]
        outcome = "PASS" if report.passed else "FAIL"
        print(f"\n[ACCEPTANCE] {name}: {outcome}", flush=True)
from comanche.blockdev import RamBlockDevice
from comanche.component import ComponentRef, default_registry
from comanche.interfaces import (
    FILE_BLOCK_DEVICE_ID,
    IBASE_IID,
    KV_STORE_ID,
    RAM_BLOCK_DEVICE_ID,
)


@pytest.fixture(autouse=True)
def leak_guard():
    """Every test must release what it creates; leaks fail the test."""
    before = live_component_count()
    yield
    after = live_component_count()
    assert after == before, f"leaked {after - before} component instances"


@pytest.fixture
def registry():
    return default_registry()


class RefBag:
    """Creates component refs and releases whatever is still live at teardown."""

    def __init__(self, registry):
        self.registry = registry
        self._refs = []

    def create(self, component_id, config=None):
        ref = self.registry.create_component(component_id)
        if config is not None:
            ref.target.open(config)
        self._refs.append(ref)
        return ref

    def adopt(self, ref):
        self._refs.append(ref)
        return ref

    def ram(self, blocks=256, **extra):
        return self.create(RAM_BLOCK_DEVICE_ID, {"size_blocks": blocks, **extra})

    def file_dev(self, path, blocks=256, **extra):
        return self.create(FILE_BLOCK_DEVICE_ID, {
            "path": str(path), "size_blocks": blocks,
            "create_if_missing": True, **extra})

    def kv(self, device_ref, auto_format=True):
        ref = self.create(KV_STORE_ID, {"auto_format": auto_format})
        ref.bind(device_ref)
        return ref

    def release_all(self):
        for ref in self._refs:
            if ref.valid:
                ref.release()
        self._refs.clear()


@pytest.fixture
def bag(registry):
    bag = RefBag(registry)
    yield bag
    bag.release_all()


class TraceDevice(RamBlockDevice):
    """RAM device recording every executed transfer as (op, lba, count)."""

    def __init__(self, arena=None):
        super().__init__(arena)
        self.trace = []

    def _execute_io(self, desc):
        self.trace.append((int(desc.op), desc.lba, desc.block_count))
        return super()._execute_io(desc)


@pytest.fixture
def trace_device():
    dev = TraceDevice()
    dev.open({"size_blocks": 512})
    ref = ComponentRef(dev, IBASE_IID)
    yield ref
    if ref.valid:
        ref.release()

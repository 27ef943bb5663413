"""Factory table for the built-in components.

This module is itself loaded through the plugin machinery, so the default
registry exercises the same path as any out-of-tree plugin file.
"""

from comanche.blockdev import FileBlockDevice, RamBlockDevice
from comanche.component import Factory, FactoryTable
from comanche.composite import (
    CacheDevice,
    PartitionViewDevice,
    Raid0Device,
    Raid1Device,
)
from comanche.interfaces import (
    CACHE_DEVICE_ID,
    FILE_BLOCK_DEVICE_ID,
    KV_STORE_ID,
    PARTITION_VIEW_ID,
    RAID0_DEVICE_ID,
    RAID1_DEVICE_ID,
    RAM_BLOCK_DEVICE_ID,
    VFS_FACADE_ID,
)
from comanche.kv import KvStore
from comanche.vfs import VfsFacade


def comanche_factory_v1() -> FactoryTable:
    return FactoryTable(
        version=1,
        factories=(
            Factory(RAM_BLOCK_DEVICE_ID, "block:ram", RamBlockDevice),
            Factory(FILE_BLOCK_DEVICE_ID, "block:file", FileBlockDevice),
            Factory(PARTITION_VIEW_ID, "partition", PartitionViewDevice),
            Factory(RAID0_DEVICE_ID, "raid0", Raid0Device),
            Factory(RAID1_DEVICE_ID, "raid1", Raid1Device),
            Factory(CACHE_DEVICE_ID, "cache", CacheDevice),
            Factory(KV_STORE_ID, "kv", KvStore),
            Factory(VFS_FACADE_ID, "vfs", VfsFacade),
        ),
    )

"""Comanche: compositional userspace storage stacks.

Dynamically loadable components with UUID-typed interfaces and reference
counting are composed into block-device and key-value stacks, served
through selectable threading arrangements, with a pinned-buffer zero-copy
IO discipline and a filesystem-style management facade.
"""

from .blockdev import (
    DeviceInfo,
    FileBlockDevice,
    IoDescriptor,
    IoOp,
    IoStatus,
    RamBlockDevice,
)
from .component import (
    Component,
    ComponentRef,
    ComponentRegistry,
    Factory,
    FactoryTable,
    default_registry,
    live_component_count,
)
from .composite import (
    CacheDevice,
    PartitionViewDevice,
    Raid0Device,
    Raid1Device,
    partition_format,
    partition_open,
    partition_read_table,
)
from .compose import StackConfig, build_stack, emit, instantiate, parse_config
from .interfaces import (
    IBASE_IID,
    IBLOCK_DEVICE_IID,
    IKVSTORE_IID,
    IVFS_IID,
    IZEROCOPY_MEMORY_IID,
)
from .kv import BitmapAllocator, KvStore
from .memory import Arena, IoBuffer, RegistrationTable
from .service import (
    ServiceMode,
    ShmClient,
    poller_coalesce,
    service_create,
    shm_attach,
    shm_create,
)
from .vfs import VfsFacade

__version__ = "0.1.0"

"""Interface and component identifiers.

An interface id names a method-set contract; a component id names one
implementation. Both are fixed 128-bit UUIDs compiled into this module:
there is no runtime registry of method signatures, the id is the contract.
"""

from uuid import UUID

# Interface contracts
IBASE_IID = UUID("4064bb69-6a4d-4c6e-82f0-1a9f29888455")
IBLOCK_DEVICE_IID = UUID("f44c6c16-4d73-4d0f-b37d-71e7690a01d3")
IZEROCOPY_MEMORY_IID = UUID("aa5094c0-8ea9-43e8-b461-9e4e12a172c9")
IKVSTORE_IID = UUID("9097b65a-1335-439d-b103-cd01f7c79b46")
IVFS_IID = UUID("84a0a5ad-b7f0-4057-ab06-ae78be151af9")

# Built-in component implementations
RAM_BLOCK_DEVICE_ID = UUID("e5c215c9-0c75-45be-8393-2a4a3b997287")
FILE_BLOCK_DEVICE_ID = UUID("4463ffcc-6913-4ee0-b377-676f4587e879")
PARTITION_VIEW_ID = UUID("b47d1bf2-6a12-4c0b-a01d-d57f292ce2d8")
RAID0_DEVICE_ID = UUID("5c6eeb41-ac83-4021-84db-e864737188b8")
RAID1_DEVICE_ID = UUID("1614b13a-aa08-4aa2-a3dc-4f229a3f5d1d")
CACHE_DEVICE_ID = UUID("6fbb252b-653b-4bee-bacc-4f09941d3140")
KV_STORE_ID = UUID("5bda9faf-cb13-40b9-93ec-ab0fb190f2c8")
VFS_FACADE_ID = UUID("21d97748-7248-4ba8-bfa1-d05db7d3af17")

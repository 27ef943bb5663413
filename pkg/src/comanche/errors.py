"""Exception types shared across the framework.

Data-plane rejections (bounds, access, media errors) travel as descriptor
statuses, not exceptions; see blockdev.IoStatus. Exceptions here are for
control-plane and management-plane failures.
"""


class ComancheError(Exception):
    """Base class for all framework errors."""


# component runtime

class BadPlugin(ComancheError):
    """Plugin file lacks the entry point or has an incompatible version."""


class UnknownComponent(ComancheError):
    """No factory registered for the requested component id."""


class UseAfterFree(ComancheError):
    """A poisoned (released or destroyed) component handle was used."""


class IncompatibleDependency(ComancheError):
    """bind() target does not implement a required interface."""


# io memory

class OutOfMemory(ComancheError):
    pass


class BadAlignment(ComancheError):
    pass


class BufferInFlight(ComancheError):
    """Buffer is referenced by a queued or executing descriptor."""


class UnknownBuffer(ComancheError):
    pass


# devices and stores

class DeviceNotOpen(ComancheError):
    pass


class DeviceIoError(ComancheError):
    """A data-plane error status surfaced through a synchronous call."""


class CrcError(ComancheError):
    """On-disk metadata failed its checksum or magic/version check."""


class OverlapError(ComancheError):
    """Partition entries overlap."""


class DeviceTooSmall(ComancheError):
    pass


class KeyTooLong(ComancheError):
    pass


class NoSpace(ComancheError):
    pass


class NotFound(ComancheError):
    """Key, path, or named segment does not exist."""


class AlreadyExists(ComancheError):
    pass


class AccessError(ComancheError):
    """Buffer is not registered for the device that must touch it."""


# services

class BadMode(ComancheError):
    pass


class ContractViolation(ComancheError):
    """A threading/ownership contract was broken (debug-build check)."""


class SpawnFailure(ComancheError):
    pass


class VersionMismatch(ComancheError):
    """Shared segment header has wrong magic or version."""


class InvalidIndex(ComancheError):
    """Descriptor index out of range for the segment's pool."""


# stack composition

class ConfigError(ComancheError):
    """Base class for composition-config failures."""


class ParseError(ConfigError):
    pass


class DuplicateId(ConfigError):
    pass


class CycleDetected(ConfigError):
    pass


class UnknownType(ConfigError):
    pass


class MultipleRoots(ConfigError):
    pass

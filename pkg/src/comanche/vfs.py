"""Filesystem-style management facade over a KV component.

Paths map to keys: "/a/b" is the key b"a/b". Directories are virtual, they
are just key prefixes, so empty directories cannot exist. Metadata verbs
(list, stat, remove, rename) touch only the index; data moves only through
read/write/copy, and those require a buffer registered for the store's
device, mirroring the fast-path rule that both sides share transfer-capable
memory.
"""

from __future__ import annotations

import threading

from .component import Component
from .errors import AccessError, AlreadyExists, NotFound
from .interfaces import IBASE_IID, IKVSTORE_IID, IVFS_IID


def path_to_key(path: str) -> bytes:
    segments = [seg for seg in path.split("/") if seg]
    if not segments:
        raise ValueError(f"path {path!r} names the root, not an object")
    for seg in segments:
        if seg in (".", ".."):
            raise ValueError(f"path {path!r} contains relative segments")
    return "/".join(segments).encode()


def _prefix_for(path: str) -> bytes:
    segments = [seg for seg in path.split("/") if seg]
    if not segments:
        return b""
    return ("/".join(segments) + "/").encode()


class VfsFacade(Component):
    """Slow-path verbs over one bound KV store."""

    INTERFACES = frozenset({IBASE_IID, IVFS_IID})
    REQUIRED_BIND_INTERFACES = (IKVSTORE_IID,)

    def __init__(self):
        super().__init__()
        self._kv = None
        self._lock = threading.Lock()

    def _on_bind(self, dep_instance, views) -> None:
        self._kv = views[IKVSTORE_IID].target

    def _check_buffer(self, buf) -> None:
        device = self._kv.device
        if device is None or device.device_id not in getattr(buf, "registered_devices", ()):
            raise AccessError("buffer is not registered for the store's device")

    def list(self, path: str = "/") -> list[tuple[str, str]]:
        """(name, kind) entries one level below path; kind is 'file' or 'dir'."""
        with self._lock:
            prefix = _prefix_for(path)
            files = []
            dirs = set()
            for key in self._kv.list(prefix):
                rest = key[len(prefix):].decode()
                if "/" in rest:
                    dirs.add(rest.split("/", 1)[0])
                else:
                    files.append(rest)
            entries = [(name, "file") for name in files]
            entries += [(name, "dir") for name in dirs]
            entries.sort()
            if not entries and prefix and not self._kv.contains(prefix[:-1]):
                raise NotFound(path)
            return entries

    def stat(self, path: str) -> dict:
        with self._lock:
            return {"size": self._kv.get_attr(path_to_key(path))}

    def remove(self, path: str) -> None:
        with self._lock:
            self._kv.erase(path_to_key(path))

    def copy(self, src: str, dst: str, overwrite: bool = False) -> None:
        """Duplicate the value through the store's transfer buffers."""
        with self._lock:
            src_key, dst_key = path_to_key(src), path_to_key(dst)
            if not self._kv.contains(src_key):
                raise NotFound(src)
            if not overwrite and self._kv.contains(dst_key):
                raise AlreadyExists(dst)
            self._kv.put(dst_key, self._kv.get(src_key))

    def rename(self, src: str, dst: str, overwrite: bool = False) -> None:
        """Copy then erase; the source is dropped only after the copy commits."""
        with self._lock:
            src_key, dst_key = path_to_key(src), path_to_key(dst)
            if not self._kv.contains(src_key):
                raise NotFound(src)
            if not overwrite and self._kv.contains(dst_key):
                raise AlreadyExists(dst)
            self._kv.put(dst_key, self._kv.get(src_key))
            self._kv.erase(src_key)

    def read(self, path: str, offset: int, length: int, buf,
             buffer_offset: int = 0) -> int:
        """Fast-path read into a registered buffer; returns bytes moved."""
        self._check_buffer(buf)
        with self._lock:
            value = self._kv.get(path_to_key(path))
        if offset >= len(value):
            return 0
        chunk = value[offset:offset + length]
        buf.view[buffer_offset:buffer_offset + len(chunk)] = chunk
        return len(chunk)

    def write(self, path: str, offset: int, length: int, buf,
              buffer_offset: int = 0) -> int:
        """Fast-path write from a registered buffer.

        Writing past the current end extends the value, zero-filling any
        gap between the old end and the write offset.
        """
        self._check_buffer(buf)
        data = bytes(buf.view[buffer_offset:buffer_offset + length])
        with self._lock:
            key = path_to_key(path)
            try:
                value = self._kv.get(key)
            except NotFound:
                value = b""
            if offset > len(value):
                value += b"\x00" * (offset - len(value))
            new_value = value[:offset] + data + value[offset + length:]
            self._kv.put(key, new_value)
        return length

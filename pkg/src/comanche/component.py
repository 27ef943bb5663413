"""Component runtime: factories, reference counting, interface querying, binding.

Components are plain Python objects managed through explicit reference
counts rather than the interpreter's GC, so that teardown order is
observable and leaks are detectable. Callers never hold a component
directly; they hold a ComponentRef, which views one interface of one
instance and owns a share of its refcount.

Plugins are source modules loaded by path. A plugin exports one symbol,
``comanche_factory_v1``, returning a FactoryTable whose version field is
checked at load time. The environment variable COMANCHE_PLUGIN_PATH
(colon-separated roots) extends the search path for relative plugin names.
"""

from __future__ import annotations

import os
import sys
import threading
from dataclasses import dataclass, field
from importlib.machinery import SourceFileLoader
from importlib.util import module_from_spec, spec_from_loader
from typing import Callable, Iterable
from uuid import UUID

from .errors import (
    BadPlugin,
    IncompatibleDependency,
    UnknownComponent,
    UseAfterFree,
)
from .interfaces import IBASE_IID

PLUGIN_ENTRY_POINT = "comanche_factory_v1"
PLUGIN_ABI_VERSION = 1
PLUGIN_PATH_ENV = "COMANCHE_PLUGIN_PATH"

_live_lock = threading.Lock()
_live_instances: set[int] = set()


def live_component_count() -> int:
    """Number of instances whose refcount has not yet reached zero."""
    with _live_lock:
        return len(_live_instances)


class Component:
    """Base class for every component implementation.

    Subclasses declare INTERFACES (the interface ids they answer to) and
    REQUIRED_BIND_INTERFACES (what any bound dependency must expose).
    """

    INTERFACES: frozenset[UUID] = frozenset({IBASE_IID})
    REQUIRED_BIND_INTERFACES: tuple[UUID, ...] = ()

    def __init__(self) -> None:
        self._refcount = 1
        self._ref_lock = threading.Lock()
        self._destroyed = False
        self._bound_views: list[ComponentRef] = []
        self._aggregated: list[tuple[ComponentRef, frozenset[UUID]]] = []
        with _live_lock:
            _live_instances.add(id(self))

    # -- interface surface ----------------------------------------------

    def interfaces(self) -> frozenset[UUID]:
        iids = self.INTERFACES
        for _, forwarded in self._aggregated:
            iids = iids | forwarded
        return iids

    def interface_target(self, iid: UUID):
        """Object that actually implements iid (self, or an aggregated inner)."""
        if iid in self.INTERFACES:
            return self
        for ref, forwarded in self._aggregated:
            if iid in forwarded:
                return ref.instance.interface_target(iid)
        return self

    def aggregate(self, inner: ComponentRef, forward: Iterable[UUID]) -> None:
        """Hold a counted view of an inner component and forward its interfaces.

        Identity (IBase) stays with the outer component; the forwarded
        interfaces dispatch to the inner instance.
        """
        view = inner.query_interface(IBASE_IID)
        assert view is not None
        self._aggregated.append((view, frozenset(forward)))

    # -- refcounting ------------------------------------------------------

    def _add_ref(self) -> int:
        with self._ref_lock:
            if self._destroyed:
                raise UseAfterFree(f"{type(self).__name__} already destroyed")
            self._refcount += 1
            return self._refcount

    def _release(self) -> int:
        with self._ref_lock:
            if self._destroyed or self._refcount <= 0:
                raise UseAfterFree(f"{type(self).__name__} over-released")
            self._refcount -= 1
            count = self._refcount
            if count == 0:
                self._destroyed = True
        if count == 0:
            self._destroy()
        return count

    def _destroy(self) -> None:
        # own teardown first, then drop inner/bound children (destructor order)
        self._on_destroy()
        for ref, _ in self._aggregated:
            ref.release()
        self._aggregated.clear()
        for ref in self._bound_views:
            ref.release()
        self._bound_views.clear()
        with _live_lock:
            _live_instances.discard(id(self))

    # -- binding ---------------------------------------------------------

    def _bind_dependency(self, dep: ComponentRef) -> None:
        if dep._instance is self:
            raise IncompatibleDependency("component cannot bind itself")
        views: dict[UUID, ComponentRef] = {}
        for rid in self.REQUIRED_BIND_INTERFACES:
            view = dep.query_interface(rid)
            if view is None:
                for acquired in views.values():
                    acquired.release()
                raise IncompatibleDependency(
                    f"{type(self).__name__} requires interface {rid}, "
                    f"{type(dep.instance).__name__} does not implement it"
                )
            views[rid] = view
        self._bound_views.extend(views.values())
        self._on_bind(dep.instance, views)

    # -- subclass hooks ----------------------------------------------------

    def open(self, config: dict | None = None) -> None:
        """Apply instance configuration. Subclasses override."""

    def _on_bind(self, dep_instance: Component, views: dict[UUID, ComponentRef]) -> None:
        pass

    def validate_bindings(self) -> None:
        """Called once all bind edges are applied; subclasses check arity here."""

    def _on_destroy(self) -> None:
        pass


class ComponentRef:
    """Counted handle viewing one interface of one component instance.

    Each ref owns part of the instance refcount (1 at construction, +1 per
    add_ref). Releasing past zero, or calling through a ref whose instance
    was destroyed, raises UseAfterFree rather than corrupting state.
    """

    __slots__ = ("_instance", "_iid", "_owned")

    def __init__(self, instance: Component, iid: UUID, _owned: int = 1) -> None:
        self._instance = instance
        self._iid = iid
        self._owned = _owned

    @property
    def iid(self) -> UUID:
        return self._iid

    @property
    def instance(self) -> Component:
        """Identity object (refcount holder). Prefer .target for method calls."""
        self._check()
        return self._instance

    @property
    def target(self):
        """Implementation object for this ref's interface."""
        self._check()
        return self._instance.interface_target(self._iid)

    @property
    def refcount(self) -> int:
        return self._instance._refcount

    @property
    def valid(self) -> bool:
        return self._owned > 0 and not self._instance._destroyed

    def _check(self) -> None:
        if self._owned <= 0:
            raise UseAfterFree("handle already released")
        if self._instance._destroyed:
            raise UseAfterFree("component destroyed while handle still held")

    def add_ref(self) -> int:
        self._check()
        count = self._instance._add_ref()
        self._owned += 1
        return count

    def release(self) -> int:
        if self._owned <= 0:
            raise UseAfterFree("double release of component handle")
        self._owned -= 1
        return self._instance._release()

    def query_interface(self, iid: UUID) -> ComponentRef | None:
        """Typed interface request: a counted view, or None if unimplemented."""
        self._check()
        if iid not in self._instance.interfaces():
            return None
        self._instance._add_ref()
        return ComponentRef(self._instance, iid)

    def bind(self, dependency: ComponentRef) -> None:
        """Compose: this component takes counted views of the dependency."""
        self._check()
        dependency._check()
        self._instance._bind_dependency(dependency)

    def __getattr__(self, name: str):
        self._check()
        return getattr(self._instance.interface_target(self._iid), name)

    def __repr__(self) -> str:
        state = "live" if self.valid else "poisoned"
        return f"<ComponentRef {type(self._instance).__name__} iid={self._iid} {state}>"


@dataclass(frozen=True)
class Factory:
    """Creates instances of one component implementation."""

    component_id: UUID
    type_name: str
    create: Callable[[], Component]


@dataclass(frozen=True)
class FactoryTable:
    """What a plugin's entry point returns."""

    version: int
    factories: tuple[Factory, ...] = field(default_factory=tuple)


def plugin_search_roots() -> list[str]:
    env = os.environ.get(PLUGIN_PATH_ENV, "")
    return [r for r in env.split(":") if r]


class ComponentRegistry:
    """Maps component ids and type names to factories; loads plugins.

    Loading the same plugin path twice is idempotent: the factory set of
    the first load is returned and nothing is re-registered.
    """

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._plugins: dict[str, frozenset[UUID]] = {}
        self._factories: dict[UUID, Factory] = {}
        self._type_names: dict[str, UUID] = {}
        self._module_seq = 0

    def _resolve_path(self, path: str) -> str:
        if os.path.isabs(path) or os.path.exists(path):
            return os.path.abspath(path)
        for root in plugin_search_roots():
            candidate = os.path.join(root, path)
            if os.path.exists(candidate):
                return os.path.abspath(candidate)
        raise FileNotFoundError(path)

    def load_plugin(self, path: str) -> frozenset[UUID]:
        """Load a plugin module and register its factories.

        Returns the component ids provided by the plugin. Raises
        FileNotFoundError for a missing file and BadPlugin for a module
        without the entry point or with a version mismatch.
        """
        resolved = self._resolve_path(path)
        with self._lock:
            if resolved in self._plugins:
                return self._plugins[resolved]
            table = self._load_table(resolved)
            ids = []
            for factory in table.factories:
                existing = self._factories.get(factory.component_id)
                if existing is not None and existing is not factory:
                    raise BadPlugin(
                        f"{resolved}: component id {factory.component_id} already registered"
                    )
                self._factories[factory.component_id] = factory
                self._type_names[factory.type_name] = factory.component_id
                ids.append(factory.component_id)
            provided = frozenset(ids)
            self._plugins[resolved] = provided
            return provided

    def _load_table(self, resolved: str) -> FactoryTable:
        self._module_seq += 1
        name = f"_comanche_plugin_{self._module_seq}"
        loader = SourceFileLoader(name, resolved)
        spec = spec_from_loader(name, loader)
        module = module_from_spec(spec)
        sys.modules[name] = module  # importable while the plugin is live
        try:
            loader.exec_module(module)
        except Exception as exc:
            del sys.modules[name]
            raise BadPlugin(f"{resolved}: not a loadable module: {exc}") from exc
        entry = getattr(module, PLUGIN_ENTRY_POINT, None)
        if entry is None or not callable(entry):
            raise BadPlugin(f"{resolved}: missing entry point {PLUGIN_ENTRY_POINT}")
        table = entry()
        if not isinstance(table, FactoryTable):
            raise BadPlugin(f"{resolved}: entry point did not return a FactoryTable")
        if table.version != PLUGIN_ABI_VERSION:
            raise BadPlugin(
                f"{resolved}: plugin ABI version {table.version}, "
                f"expected {PLUGIN_ABI_VERSION}"
            )
        return table

    def create_component(self, component_id: UUID) -> ComponentRef:
        """Instantiate a registered component; the ref views IBase, refcount 1."""
        with self._lock:
            factory = self._factories.get(component_id)
        if factory is None:
            raise UnknownComponent(str(component_id))
        instance = factory.create()
        return ComponentRef(instance, IBASE_IID)

    def resolve_type(self, type_name: str) -> UUID:
        """Type name to component id, loading plugins from the search path on miss."""
        with self._lock:
            cid = self._type_names.get(type_name)
        if cid is not None:
            return cid
        for root in plugin_search_roots():
            try:
                entries = sorted(os.listdir(root))
            except OSError:
                continue
            for entry in entries:
                if entry.endswith((".plugin", ".py")):
                    try:
                        self.load_plugin(os.path.join(root, entry))
                    except BadPlugin:
                        continue
        with self._lock:
            cid = self._type_names.get(type_name)
        if cid is None:
            raise UnknownComponent(type_name)
        return cid

    def known_types(self) -> dict[str, UUID]:
        with self._lock:
            return dict(self._type_names)


_default_registry: ComponentRegistry | None = None
_default_registry_lock = threading.Lock()


def default_registry() -> ComponentRegistry:
    """Process-wide registry, pre-loaded with the built-in component plugin."""
    global _default_registry
    with _default_registry_lock:
        if _default_registry is None:
            registry = ComponentRegistry()
            builtin = os.path.join(os.path.dirname(__file__), "builtin_plugin.py")
            registry.load_plugin(builtin)
            _default_registry = registry
        return _default_registry

"""Declarative stack construction from a JSON composition config.

Schema (strict: unknown fields are rejected):

    {
      "components": [{"id": "...", "type": "...", "config": {...}}, ...],
      "bindings":   [{"from": "...", "to": ["...", ...]}, ...],
      "service":    {"mode": "DIRECT|LOCKED|QUEUED|SHM",
                     "queue_depth": 256, "service_threads": 1,
                     "coalesce": false, "shm": {...}}
    }

Binding order is meaningful: a component's children are indexed in the
order its targets are listed (stripe child 0 is the first listed).
The binding graph must be a DAG with exactly one root.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .component import ComponentRef, ComponentRegistry, default_registry
from .errors import (
    CycleDetected,
    DuplicateId,
    MultipleRoots,
    ParseError,
    UnknownComponent,
    UnknownType,
)
from .service import service_create

_COMPONENT_KEYS = {"id", "type", "config"}
_BINDING_KEYS = {"from", "to"}
_SERVICE_KEYS = {"mode", "queue_depth", "service_threads", "coalesce", "shm"}
_TOP_KEYS = {"components", "bindings", "service"}


@dataclass(frozen=True)
class ComponentSpec:
    id: str
    type: str
    config: dict = field(default_factory=dict)


@dataclass(frozen=True)
class BindingSpec:
    source: str
    targets: tuple[str, ...]


@dataclass(frozen=True)
class ServiceSpec:
    mode: str = "DIRECT"
    queue_depth: int = 256
    service_threads: int = 1
    coalesce: bool = False
    shm: dict = field(default_factory=dict)


@dataclass(frozen=True)
class StackConfig:
    components: tuple[ComponentSpec, ...]
    bindings: tuple[BindingSpec, ...]
    service: ServiceSpec

    def root_id(self) -> str:
        targets = {t for b in self.bindings for t in b.targets}
        roots = [c.id for c in self.components if c.id not in targets]
        return roots[0]


def _require_keys(obj: dict, allowed: set, where: str) -> None:
    unknown = set(obj) - allowed
    if unknown:
        raise ParseError(f"{where}: unknown fields {sorted(unknown)}")


def parse_config(text: str, registry: ComponentRegistry | None = None) -> StackConfig:
    """Parse and validate; raises a ConfigError subclass naming the defect."""
    registry = registry or default_registry()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ParseError("top level must be an object")
    _require_keys(raw, _TOP_KEYS, "top level")
    raw_components = raw.get("components")
    if not isinstance(raw_components, list) or not raw_components:
        raise ParseError("components must be a non-empty list")

    components = []
    ids = set()
    for entry in raw_components:
        if not isinstance(entry, dict):
            raise ParseError("component entries must be objects")
        _require_keys(entry, _COMPONENT_KEYS, "component")
        try:
            cid, ctype = entry["id"], entry["type"]
        except KeyError as exc:
            raise ParseError(f"component missing field {exc}") from exc
        if not isinstance(cid, str) or not isinstance(ctype, str):
            raise ParseError("component id and type must be strings")
        if cid in ids:
            raise DuplicateId(cid)
        ids.add(cid)
        config = entry.get("config", {})
        if not isinstance(config, dict):
            raise ParseError(f"{cid}: config must be an object")
        components.append(ComponentSpec(cid, ctype, dict(config)))

    bindings = []
    for entry in raw.get("bindings", []):
        if not isinstance(entry, dict):
            raise ParseError("binding entries must be objects")
        _require_keys(entry, _BINDING_KEYS, "binding")
        source = entry.get("from")
        targets = entry.get("to")
        if not isinstance(source, str) or not isinstance(targets, list):
            raise ParseError("binding needs 'from': str and 'to': list")
        if source not in ids:
            raise ParseError(f"binding source {source!r} is not a defined component")
        for target in targets:
            if target not in ids:
                raise ParseError(f"binding target {target!r} is not a defined component")
        bindings.append(BindingSpec(source, tuple(targets)))

    raw_service = raw.get("service", {})
    if not isinstance(raw_service, dict):
        raise ParseError("service must be an object")
    _require_keys(raw_service, _SERVICE_KEYS, "service")
    service = ServiceSpec(
        mode=str(raw_service.get("mode", "DIRECT")).upper(),
        queue_depth=int(raw_service.get("queue_depth", 256)),
        service_threads=int(raw_service.get("service_threads", 1)),
        coalesce=bool(raw_service.get("coalesce", False)),
        shm=dict(raw_service.get("shm", {})),
    )
    if service.mode not in ("DIRECT", "LOCKED", "QUEUED", "SHM"):
        raise ParseError(f"unknown service mode {service.mode!r}")

    config = StackConfig(tuple(components), tuple(bindings), service)
    _validate_graph(config)
    for spec in config.components:
        try:
            registry.resolve_type(spec.type)
        except UnknownComponent as exc:
            raise UnknownType(spec.type) from exc
    return config


def _validate_graph(config: StackConfig) -> None:
    ids = [c.id for c in config.components]
    edges: dict[str, list[str]] = {cid: [] for cid in ids}
    indegree = {cid: 0 for cid in ids}
    for binding in config.bindings:
        for target in binding.targets:
            edges[binding.source].append(target)
            indegree[target] += 1

    roots = [cid for cid in ids if indegree[cid] == 0]
    # Kahn's algorithm over depends-on edges
    frontier = list(roots)
    seen = 0
    degree = dict(indegree)
    while frontier:
        node = frontier.pop()
        seen += 1
        for target in edges[node]:
            degree[target] -= 1
            if degree[target] == 0:
                frontier.append(target)
    if seen != len(ids):
        raise CycleDetected("binding graph has a cycle")
    if len(roots) != 1:
        raise MultipleRoots(f"expected exactly one root, found {sorted(roots)}")


def emit(config: StackConfig) -> str:
    """Canonical JSON for a parsed config; parse(emit(c)) == c."""
    doc: dict = {
        "components": [
            {"id": c.id, "type": c.type, "config": c.config}
            for c in config.components
        ],
        "bindings": [
            {"from": b.source, "to": list(b.targets)} for b in config.bindings
        ],
        "service": {
            "mode": config.service.mode,
            "queue_depth": config.service.queue_depth,
            "service_threads": config.service.service_threads,
            "coalesce": config.service.coalesce,
            "shm": config.service.shm,
        },
    }
    return json.dumps(doc, indent=2, sort_keys=True)


class StackHandle:
    """A constructed stack: root ref, per-id refs, optional service."""

    def __init__(self, config: StackConfig, refs: dict[str, ComponentRef]):
        self.config = config
        self.refs = refs
        self.root = refs[config.root_id()]
        self.service = None

    def start_service(self):
        spec = self.config.service
        self.service = service_create(
            self.root, spec.mode, queue_depth=spec.queue_depth,
            service_threads=spec.service_threads, coalesce=spec.coalesce,
            shm=spec.shm or None)
        return self.service

    def find_by_type(self, type_name: str) -> ComponentRef | None:
        for spec in self.config.components:
            if spec.type == type_name:
                return self.refs[spec.id]
        return None

    def close(self) -> None:
        if self.service is not None:
            self.service.close()
            self.service = None
        for ref in self.refs.values():
            if ref.valid:
                ref.release()
        self.refs.clear()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def build_stack(config: StackConfig,
                registry: ComponentRegistry | None = None) -> StackHandle:
    """Create components in dependency order, apply binds, keep all refs."""
    registry = registry or default_registry()
    order = _topological_order(config)
    by_id = {c.id: c for c in config.components}
    refs: dict[str, ComponentRef] = {}
    try:
        for cid in order:
            spec = by_id[cid]
            ref = registry.create_component(registry.resolve_type(spec.type))
            ref.target.open(spec.config)
            refs[cid] = ref
        for binding in config.bindings:
            source = refs[binding.source]
            for target in binding.targets:
                source.bind(refs[target])
        for cid in order:
            refs[cid].instance.validate_bindings()
    except Exception:
        for ref in refs.values():
            if ref.valid:
                ref.release()
        raise
    return StackHandle(config, refs)


def _topological_order(config: StackConfig) -> list[str]:
    """Dependencies first, root last."""
    ids = [c.id for c in config.components]
    depends: dict[str, list[str]] = {cid: [] for cid in ids}
    for binding in config.bindings:
        depends[binding.source].extend(binding.targets)
    order: list[str] = []
    state: dict[str, int] = {}

    def visit(node: str) -> None:
        if state.get(node) == 2:
            return
        if state.get(node) == 1:
            raise CycleDetected(node)
        state[node] = 1
        for dep in depends[node]:
            visit(dep)
        state[node] = 2
        order.append(node)

    for cid in ids:
        visit(cid)
    return order


def instantiate(config: StackConfig,
                registry: ComponentRegistry | None = None) -> ComponentRef:
    """Build the stack and return only the root; intermediate refs are
    released (bound children stay alive through their parents)."""
    handle = build_stack(config, registry)
    root_id = config.root_id()
    root = handle.refs.pop(root_id)
    for ref in handle.refs.values():
        ref.release()
    handle.refs.clear()
    return root

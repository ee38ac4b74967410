"""Module tree, service DAG, central registry, and standardized interfaces.

Devices are grouped into *modules* organized as a tree rooted at the system
module; each device belongs to exactly one module, so non-overlapping
subtrees are device-independent and can be controlled in parallel.
System-wide functionality lives in *services*, which may depend on modules
and on other services (acyclically). Everything is registered in one central
registry, which is also how portable clients locate interface
implementations at runtime.
"""

from __future__ import annotations

import abc
import json
import os
import tempfile
import threading
from dataclasses import dataclass, field
from typing import Any, Callable

OPERATION = "operation"
DATA_CONTEXT = "data_context"

_DATASET_TYPES = (int, float, str, list)


class RegistryError(Exception):
    """Base class for registry construction and lookup errors."""


class DuplicateKey(RegistryError):
    pass


class MissingParent(RegistryError):
    pass


class SecondRoot(RegistryError):
    pass


class UnknownKey(RegistryError):
    pass


class UnknownDevice(RegistryError):
    pass


class DeviceAlreadyClaimed(RegistryError):
    def __init__(self, device: str, owner: str):
        super().__init__(f"device {device!r} already claimed by {owner!r}")
        self.device = device
        self.owner = owner


class DuplicateService(RegistryError):
    pass


class MissingDependency(RegistryError):
    pass


class DependencyCycle(RegistryError):
    def __init__(self, cycle: list[str]):
        super().__init__(" -> ".join(cycle))
        self.cycle = cycle


class RegistrySealed(RegistryError):
    pass


class NamespaceViolation(RegistryError):
    pass


class TypeMismatch(RegistryError):
    pass


class OperationInterface(abc.ABC):
    """Gate-level control surface: preparation, X/Y rotations, measurement.

    ``wait`` inserts idle time between pulses (free evolution), which Ramsey
    style sequences require.
    """

    @abc.abstractmethod
    def prep_0(self) -> None: ...

    @abc.abstractmethod
    def rx(self, angle: float) -> None: ...

    @abc.abstractmethod
    def ry(self, angle: float) -> None: ...

    @abc.abstractmethod
    def measure(self) -> int: ...

    @abc.abstractmethod
    def num_qubits(self) -> int: ...

    @abc.abstractmethod
    def wait(self, duration_s: float) -> None: ...


class DataContextInterface(abc.ABC):
    """Measurement collection: push bits into blocks, read back histograms."""

    @abc.abstractmethod
    def open(self) -> None: ...

    @abc.abstractmethod
    def push(self, bit: int) -> None: ...

    @abc.abstractmethod
    def close(self) -> None: ...

    @abc.abstractmethod
    def histogram(self) -> dict[int, int]: ...


@dataclass
class ModuleNode:
    """One node of the device-organization tree."""

    key: str
    parent: str | None
    children: set[str] = field(default_factory=set)
    claimed_devices: set[str] = field(default_factory=set)

    @property
    def dataset_ns(self) -> str:
        return self.key


@dataclass
class ServiceNode:
    """One node of the service DAG, optionally carrying an implementation."""

    name: str
    service_deps: frozenset[str]
    module_deps: frozenset[str]
    interfaces: tuple[str, ...]
    impl: Any = None

    @property
    def dataset_ns(self) -> str:
        return self.name


class Registry:
    """Central searchable index of modules, services, claims, and interfaces.

    Construction is single-threaded; ``seal()`` freezes the registry, after
    which it is safe to share. All lookups land in ``audit_log`` so client
    confinement can be checked after the fact. Mutating operations are
    transactional: on error, nothing changed.
    """

    def __init__(self):
        self.modules: dict[str, ModuleNode] = {}
        self.services: dict[str, ServiceNode] = {}
        self.device_claims: dict[str, str] = {}
        self.declared_devices: set[str] = set()
        self._interface_index: dict[str, list[str]] = {}
        self.audit_log: list[tuple[str, str]] = []
        self._root: str | None = None
        self._sealed = False

    # -- construction -------------------------------------------------------

    def _mutable(self):
        if self._sealed:
            raise RegistrySealed("registry is sealed")

    def declare_device(self, device_key: str) -> None:
        self._mutable()
        self.declared_devices.add(device_key)

    def add_module(self, parent: str | None, name: str) -> str:
        """Create a module node; the key is the parent key plus the local name."""
        self._mutable()
        if not name or "." in name:
            raise ValueError("module name must be non-empty and contain no dots")
        if parent is None:
            if self._root is not None:
                raise SecondRoot(f"root module {self._root!r} already exists")
            key = name
        else:
            if parent not in self.modules:
                raise MissingParent(f"parent module {parent!r} does not exist")
            key = f"{parent}.{name}"
        if key in self.modules:
            raise DuplicateKey(f"module key {key!r} already registered")
        self.modules[key] = ModuleNode(key, parent)
        if parent is None:
            self._root = key
        else:
            self.modules[parent].children.add(key)
        return key

    def claim_device(self, module_key: str, device_key: str) -> None:
        """Assign a declared device to a module, exclusively."""
        self._mutable()
        if module_key not in self.modules:
            raise UnknownKey(f"module {module_key!r} does not exist")
        if device_key not in self.declared_devices:
            raise UnknownDevice(f"device {device_key!r} is not declared")
        owner = self.device_claims.get(device_key)
        if owner is not None:
            raise DeviceAlreadyClaimed(device_key, owner)
        self.device_claims[device_key] = module_key
        self.modules[module_key].claimed_devices.add(device_key)

    def add_service(self, name: str, service_deps=(), module_deps=(),
                    interfaces=(), impl: Any = None) -> None:
        """Register a service after checking its dependencies keep the DAG.

        Cycle detection runs against the graph as it would look with this
        registration applied, so re-registering a service reports a cycle in
        preference to a duplicate.
        """
        self._mutable()
        if not name:
            raise ValueError("service name must be non-empty")
        service_deps = frozenset(service_deps)
        module_deps = frozenset(module_deps)
        for dep in sorted(service_deps):
            if dep not in self.services:
                raise MissingDependency(f"service dependency {dep!r} not registered")
        for dep in sorted(module_deps):
            if dep not in self.modules:
                raise MissingDependency(f"module dependency {dep!r} not registered")
        cycle = self._find_cycle(name, service_deps)
        if cycle is not None:
            raise DependencyCycle(cycle)
        if name in self.services:
            raise DuplicateService(f"service {name!r} already registered")
        self.services[name] = ServiceNode(name, service_deps, module_deps,
                                          tuple(interfaces), impl)
        for interface_id in interfaces:
            self._interface_index.setdefault(interface_id, []).append(name)

    def _find_cycle(self, name, deps) -> list[str] | None:
        # Any new cycle must pass through the (re)registered node; walk its
        # prospective dependency edges and look for a path back to it.
        graph = {svc.name: svc.service_deps for svc in self.services.values()}
        graph[name] = deps

        path = [name]
        seen = set()

        def visit(node) -> bool:
            for dep in sorted(graph.get(node, ())):
                if dep == name:
                    path.append(dep)
                    return True
                if dep in seen:
                    continue
                seen.add(dep)
                path.append(dep)
                if visit(dep):
                    return True
                path.pop()
            return False

        return path if visit(name) else None

    def seal(self) -> None:
        self._sealed = True

    # -- lookups (audited) ----------------------------------------------------

    def get_module(self, key: str) -> ModuleNode:
        self.audit_log.append(("get_module", key))
        try:
            return self.modules[key]
        except KeyError:
            raise UnknownKey(f"module {key!r} does not exist") from None

    def get_service(self, name: str) -> ServiceNode:
        self.audit_log.append(("get_service", name))
        try:
            return self.services[name]
        except KeyError:
            raise UnknownKey(f"service {name!r} does not exist") from None

    def find_interface(self, interface_id: str) -> list[str]:
        """Names of services implementing the interface, in registration order."""
        self.audit_log.append(("find_interface", interface_id))
        return list(self._interface_index.get(interface_id, []))

    def get_interface(self, interface_id: str, name: str | None = None) -> Any:
        """Resolve one implementor (the first, or the named one) to its object."""
        self.audit_log.append(("get_interface", f"{interface_id}:{name or ''}"))
        names = self._interface_index.get(interface_id, [])
        if name is None:
            if not names:
                raise UnknownKey(f"no implementor of interface {interface_id!r}")
            name = names[0]
        elif name not in names:
            raise UnknownKey(
                f"service {name!r} does not implement interface {interface_id!r}")
        impl = self.services[name].impl
        if impl is None:
            raise UnknownKey(f"service {name!r} declares interface "
                             f"{interface_id!r} but carries no implementation")
        return impl

    def audit_mark(self) -> int:
        return len(self.audit_log)

    def audit_since(self, mark: int) -> list[tuple[str, str]]:
        return self.audit_log[mark:]

    # -- structure queries ------------------------------------------------------

    def are_independent(self, a: str, b: str) -> bool:
        """True iff the two modules live in non-overlapping subtrees."""
        for key in (a, b):
            if key not in self.modules:
                raise UnknownKey(f"module {key!r} does not exist")
        if a == b:
            return False
        return not (a.startswith(b + ".") or b.startswith(a + "."))

    def subtree_devices(self, key: str) -> set[str]:
        if key not in self.modules:
            raise UnknownKey(f"module {key!r} does not exist")
        devices: set[str] = set()
        stack = [key]
        while stack:
            node = self.modules[stack.pop()]
            devices |= node.claimed_devices
            stack.extend(node.children)
        return devices

    def topological_services(self) -> list[str]:
        """Dependency-respecting order over all services (deps first)."""
        order: list[str] = []
        placed: set[str] = set()

        def place(name):
            if name in placed:
                return
            placed.add(name)
            for dep in sorted(self.services[name].service_deps):
                place(dep)
            order.append(name)

        for name in self.services:
            place(name)
        return order


class DatasetStore:
    """Namespaced persistent key/value storage for modules and services.

    A namespace is writable only by its owning node; reads are unrestricted
    and never mutate. Values are limited to integers, reals, strings, and
    lists of reals so the persisted form stays portable. Writes serialize per
    store; an optional ``access_hook(op, namespace, key)`` feeds the phase
    audit.
    """

    def __init__(self, access_hook: Callable[[str, str, str], None] | None = None):
        self._data: dict[str, dict[str, tuple[Any, bool]]] = {}
        self._lock = threading.Lock()
        self.access_hook = access_hook

    @staticmethod
    def _check_type(value):
        if isinstance(value, bool) or not isinstance(value, _DATASET_TYPES):
            raise TypeMismatch(f"unsupported dataset value type {type(value).__name__}")
        if isinstance(value, list) and not all(
                isinstance(x, (int, float)) and not isinstance(x, bool)
                for x in value):
            raise TypeMismatch("dataset lists must contain only reals")

    def set(self, namespace: str, key: str, value, *, caller: str,
            persist: bool = True) -> None:
        if self.access_hook is not None:
            self.access_hook("set", namespace, key)
        if caller != namespace:
            raise NamespaceViolation(
                f"{caller!r} may not write into namespace {namespace!r}")
        self._check_type(value)
        with self._lock:
            ns = self._data.setdefault(namespace, {})
            if key in ns:
                old = ns[key][0]
                if not isinstance(value, type(old)):
                    raise TypeMismatch(
                        f"dataset {namespace}.{key} holds {type(old).__name__}, "
                        f"got {type(value).__name__}")
            ns[key] = (value, persist)

    def get(self, namespace: str, key: str, default=None):
        if self.access_hook is not None:
            self.access_hook("get", namespace, key)
        with self._lock:
            ns = self._data.get(namespace, {})
            if key in ns:
                return ns[key][0]
        return default

    def persistent_snapshot(self) -> dict[str, Any]:
        with self._lock:
            return {f"{ns}.{key}": value
                    for ns, entries in sorted(self._data.items())
                    for key, (value, persist) in sorted(entries.items())
                    if persist}

    def save(self, path) -> None:
        """Atomically write the persistent entries as one JSON document."""
        doc = json.dumps(self.persistent_snapshot(), sort_keys=True, indent=2)
        directory = os.path.dirname(os.fspath(path)) or "."
        fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
        try:
            with os.fdopen(fd, "w") as f:
                f.write(doc + "\n")
            os.replace(tmp, path)
        except BaseException:
            os.unlink(tmp)
            raise

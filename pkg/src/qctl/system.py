"""System definitions: loading, validation, and the built-in service library.

A system definition (TOML) declares the device inventory, the module tree
with its device claims, the service DAG with interface bindings, physics
parameters, and initial calibration datasets. Loading builds a fully wired
:class:`System`: a core device with drivers, a sealed registry, a dataset
store, and one simulated ion behind the detection callback.

Two definitions ship with the package, structurally mirroring the two
reference architectures: ``staq_sim`` keeps its detection laser and PMT in
one detection module, while ``rc_sim`` routes the detection laser through the
CW module's master switch, so a dedicated detection service coordinates the
CW and PMT modules in parallel.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from typing import Any

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .devices import CounterDevice, DdsDevice, DelayPolicy, TtlDevice
from .experiment import AccessMonitor
from .framework import (
    DATA_CONTEXT,
    OPERATION,
    DataContextInterface,
    DatasetStore,
    OperationInterface,
    Registry,
    RegistryError,
)
from .physics import (
    DriveParams,
    NoiseModel,
    QubitState,
    apply_depolarizing,
    apply_rotation,
    classify,
    measure,
    prepare_ground,
)
from .rtio import CoreConfig, CoreState, ensure_slack

DEVICE_KINDS = ("dds", "ttl", "counter")


class ParseError(Exception):
    """The definition file is not valid TOML or is structurally malformed."""


class ValidationError(Exception):
    """The definition violates a framework invariant (named in the message)."""


@dataclass
class DeviceSpec:
    key: str
    kind: str
    channel: int
    params: dict[str, Any] = field(default_factory=dict)


@dataclass
class ModuleSpec:
    key: str
    devices: tuple[str, ...] = ()


@dataclass
class ServiceSpec:
    name: str
    impl: str = "generic"
    service_deps: tuple[str, ...] = ()
    module_deps: tuple[str, ...] = ()
    interfaces: tuple[str, ...] = ()
    params: dict[str, Any] = field(default_factory=dict)


@dataclass
class SystemDefinition:
    """Parsed, not-yet-instantiated description of one system."""

    name: str
    core: CoreConfig
    noise: NoiseModel
    drive: DriveParams
    policy: DelayPolicy
    devices: list[DeviceSpec]
    modules: list[ModuleSpec]
    services: list[ServiceSpec]
    datasets: dict[str, dict[str, Any]] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, doc: dict) -> "SystemDefinition":
        try:
            name = doc["name"]
            core = CoreConfig(**doc.get("core", {}))
            noise = NoiseModel(**doc.get("noise", {}))
            drive = DriveParams(**doc["drive"])
            policy_doc = dict(doc.get("delay_policy", {}))
            if "per_function" in policy_doc:
                table = {}
                for key, value in policy_doc["per_function"].items():
                    if "." not in key:
                        raise ValueError(
                            f"per-function delay key {key!r} must be "
                            "'<kind>.<function>'")
                    table[tuple(key.split(".", 1))] = value
                policy_doc["per_function"] = table
            policy = DelayPolicy(**policy_doc)
            devices = [DeviceSpec(d["key"], d["kind"], d["channel"],
                                  {k: v for k, v in d.items()
                                   if k not in ("key", "kind", "channel")})
                       for d in doc.get("devices", [])]
            modules = [ModuleSpec(m["key"], tuple(m.get("devices", ())))
                       for m in doc.get("modules", [])]
            services = [ServiceSpec(s["name"], s.get("impl", "generic"),
                                    tuple(s.get("service_deps", ())),
                                    tuple(s.get("module_deps", ())),
                                    tuple(s.get("interfaces", ())),
                                    dict(s.get("params", {})))
                        for s in doc.get("services", [])]
            datasets = {ns: dict(entries)
                        for ns, entries in doc.get("datasets", {}).items()}
        except (KeyError, TypeError) as exc:
            raise ParseError(f"malformed system definition: {exc}") from exc
        except ValueError as exc:
            raise ValidationError(str(exc)) from exc
        return cls(name, core, noise, drive, policy, devices, modules,
                   services, datasets)

    @classmethod
    def from_toml(cls, text: str) -> "SystemDefinition":
        try:
            doc = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ParseError(str(exc)) from exc
        return cls.from_dict(doc)

    @classmethod
    def from_path(cls, path) -> "SystemDefinition":
        with open(path, "rb") as f:
            data = f.read()
        return cls.from_toml(data.decode("utf-8"))

    def to_toml(self) -> str:
        """Canonical serialization; loading it back yields an equal system."""
        out = [f"name = {_toml_value(self.name)}", ""]

        def table(header, mapping):
            out.append(f"[{header}]")
            for key, value in sorted(mapping.items()):
                out.append(f"{key} = {_toml_value(value)}")
            out.append("")

        core = {"ref_period_mu": self.core.ref_period_mu,
                "fifo_depth": self.core.fifo_depth,
                "input_buffer_capacity": self.core.input_buffer_capacity,
                "initial_slack_mu": self.core.initial_slack_mu}
        table("core", core)
        table("core.cpu_cost", self.core.cpu_cost)
        table("noise", {"depol_per_gate": self.noise.depol_per_gate,
                        "prep_error": self.noise.prep_error,
                        "bright_mean": self.noise.bright_mean,
                        "dark_mean": self.noise.dark_mean,
                        "detect_threshold": self.noise.detect_threshold,
                        "depol_variant": self.noise.depol_variant})
        table("drive", {"rabi_hz": self.drive.rabi_hz,
                        "detuning_hz": self.drive.detuning_hz,
                        "qubit_freq_hz": self.drive.qubit_freq_hz})
        table("delay_policy", {"mode": self.policy.mode.value,
                               "worst_case_mu": self.policy.worst_case_mu})
        table("delay_policy.per_function",
              {f"\"{kind}.{fn}\"": value
               for (kind, fn), value in self.policy.per_function.items()})
        for device in self.devices:
            out.append("[[devices]]")
            entry = {"key": device.key, "kind": device.kind,
                     "channel": device.channel, **device.params}
            for key, value in sorted(entry.items()):
                out.append(f"{key} = {_toml_value(value)}")
            out.append("")
        for module in self.modules:
            out.append("[[modules]]")
            out.append(f"key = {_toml_value(module.key)}")
            if module.devices:
                out.append(f"devices = {_toml_value(list(module.devices))}")
            out.append("")
        for service in self.services:
            out.append("[[services]]")
            out.append(f"name = {_toml_value(service.name)}")
            out.append(f"impl = {_toml_value(service.impl)}")
            if service.service_deps:
                out.append(f"service_deps = {_toml_value(list(service.service_deps))}")
            if service.module_deps:
                out.append(f"module_deps = {_toml_value(list(service.module_deps))}")
            if service.interfaces:
                out.append(f"interfaces = {_toml_value(list(service.interfaces))}")
            if service.params:
                out.append("[services.params]")
                for key, value in sorted(service.params.items()):
                    out.append(f"{key} = {_toml_value(value)}")
            out.append("")
        for ns in sorted(self.datasets):
            out.append(f"[datasets.\"{ns}\"]")
            for key, value in sorted(self.datasets[ns].items()):
                out.append(f"{key} = {_toml_value(value)}")
            out.append("")
        return "\n".join(out)


def _toml_value(value) -> str:
    if isinstance(value, bool):
        raise TypeError("boolean values are not used in system definitions")
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        if value.startswith("\""):  # pre-quoted dotted key
            return value
        return json.dumps(value)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise TypeError(f"cannot serialize {type(value).__name__} to TOML")


# -- built-in services -----------------------------------------------------------


class CoolService:
    """Doppler cooling pulses on the cooling laser."""

    def __init__(self, system: "System", spec: ServiceSpec):
        self._ttl = system.service_device(spec, spec.params["ttl"])
        self._duration_mu = int(spec.params.get("duration_mu", 1000))

    def cool(self) -> None:
        self._ttl.pulse(self._duration_mu)


class ModuleDetection:
    """Detection entirely inside one module: its own laser and counter."""

    def __init__(self, system: "System", spec: ServiceSpec):
        self._core = system.core
        self._laser = system.service_device(spec, spec.params["detect_ttl"])
        self._counter = system.service_device(spec, spec.params["counter"])

    def acquire(self, duration_mu: int):
        core = self._core
        t0 = core.now_mu()
        self._laser.pulse(duration_mu)
        core.at_mu(t0)
        return self._counter.count_window(duration_mu)


class DetectionService:
    """Detection across modules: master switch, detection laser, and PMT run
    in parallel over the same window."""

    def __init__(self, system: "System", spec: ServiceSpec):
        self._core = system.core
        self._master = system.service_device(spec, spec.params["master_ttl"])
        self._laser = system.service_device(spec, spec.params["detect_ttl"])
        self._counter = system.service_device(spec, spec.params["counter"])

    def acquire(self, duration_mu: int):
        core = self._core
        t0 = core.now_mu()
        self._master.pulse(duration_mu)
        core.at_mu(t0)
        self._laser.pulse(duration_mu)
        core.at_mu(t0)
        return self._counter.count_window(duration_mu)


class StateService(DataContextInterface):
    """State initialization and detection; implements the data context.

    Detection is delegated either to a detection module this service depends
    on, or to a dedicated detection service (master-switch architectures).
    """

    def __init__(self, system: "System", spec: ServiceSpec):
        self._system = system
        self._core = system.core
        self._pump = system.service_device(spec, spec.params["pump_ttl"])
        self._pump_mu = int(spec.params.get("pump_mu", 1000))
        self._detect_mu = int(spec.params.get("detect_mu", 100_000))
        self._min_slack_mu = int(spec.params.get("min_slack_mu", 10_000))
        self._cool = system.service_impl(spec.params["cool_service"])
        if "detect_service" in spec.params:
            self._detection = system.service_impl(spec.params["detect_service"])
        else:
            self._detection = ModuleDetection(system, spec)
        self._blocks: list[list[int]] = []
        self._current: list[int] | None = None

    # state manipulation

    def prepare(self) -> None:
        ensure_slack(self._core, self._min_slack_mu)
        self._cool.cool()
        self._pump.pulse(self._pump_mu)
        self._system.qubit = prepare_ground(self._system.noise,
                                            self._system.physics_rng)

    def detect(self) -> int:
        handle = self._detection.acquire(self._detect_mu)
        count = handle.get()
        return classify(count, self._system.noise)

    def acquire(self, duration_mu: int):
        return self._detection.acquire(duration_mu)

    @property
    def detect_mu(self) -> int:
        return self._detect_mu

    # data-context interface

    def open(self) -> None:
        if self._current is not None:
            raise RuntimeError("data context block already open")
        self._current = []

    def push(self, bit: int) -> None:
        if self._current is None:
            raise RuntimeError("no open data context block")
        self._current.append(int(bit))

    def close(self) -> None:
        if self._current is None:
            raise RuntimeError("no open data context block")
        self._blocks.append(self._current)
        self._current = None

    def histogram(self) -> dict[int, int]:
        if not self._blocks:
            raise RuntimeError("no closed data context block")
        hist: dict[int, int] = {}
        for bit in self._blocks[-1]:
            hist[bit] = hist.get(bit, 0) + 1
        return hist


class MwOperationService(OperationInterface):
    """Microwave gate operations: rotations through timed DDS-gated pulses.

    Requested rotation angles convert to pulse durations with the calibrated
    Rabi frequency from this service's dataset; the underlying physics always
    rotates at the system's true Rabi frequency, so a stale calibration shows
    up as systematic over/under-rotation, exactly what the calibration
    clients measure.
    """

    _PHASE = {"x": 0.0, "y": 0.25}

    def __init__(self, system: "System", spec: ServiceSpec):
        self._system = system
        self._core = system.core
        self._name = spec.name
        self._dds = system.service_device(spec, spec.params["dds"])
        self._switch = system.service_device(spec, spec.params["switch"])
        self._state = system.service_impl(spec.params["state_service"])
        self._default_cal_hz = float(
            spec.params.get("rabi_cal_hz", system.drive.rabi_hz))
        self._cal_hz = self._default_cal_hz

    def prep_0(self) -> None:
        self._cal_hz = float(self._system.store.get(
            self._name, "rabi_hz", self._default_cal_hz))
        self._state.prepare()

    def rx(self, angle: float) -> None:
        self._pulse("x", angle)

    def ry(self, angle: float) -> None:
        self._pulse("y", angle)

    def measure(self) -> int:
        return self._state.detect()

    def num_qubits(self) -> int:
        return 1

    def wait(self, duration_s: float) -> None:
        if duration_s < 0:
            raise ValueError("wait duration must be >= 0")
        self._core.delay_mu(int(round(duration_s * 1e9)))
        self._system.qubit = apply_rotation(
            self._system.qubit, "z",
            2.0 * math.pi * self._system.drive.detuning_hz * duration_s)

    def _pulse(self, axis: str, angle: float) -> None:
        if not math.isfinite(angle):
            raise ValueError("rotation angle must be finite")
        phase = self._PHASE[axis]
        sign = 1.0
        if angle < 0:
            # drive phase shifted by half a turn: rotation about the
            # negated axis, i.e. a negative rotation angle
            angle, phase, sign = -angle, phase + 0.5, -1.0
        if angle == 0:
            return
        duration_mu = max(1, int(round(
            angle / (2.0 * math.pi * self._cal_hz) * 1e9)))
        system = self._system
        self._dds.set(system.drive.qubit_freq_hz, phase, 1.0)
        self._switch.pulse(duration_mu)
        actual = sign * 2.0 * math.pi * system.drive.rabi_hz * duration_mu * 1e-9
        qubit = apply_rotation(system.qubit, axis, actual)
        if system.noise.depol_per_gate > 0:
            qubit = apply_depolarizing(qubit, system.noise.depol_per_gate,
                                       system.physics_rng,
                                       system.noise.depol_variant)
        system.qubit = qubit


_SERVICE_IMPLS = {
    "generic": None,
    "cool": CoolService,
    "detection": DetectionService,
    "state": StateService,
    "mw_operation": MwOperationService,
}


# -- system assembly ---------------------------------------------------------------


class System:
    """A loaded system: core device, drivers, sealed registry, one ion."""

    def __init__(self, defn: SystemDefinition):
        self.defn = defn
        self.name = defn.name
        self.noise = defn.noise
        self.drive = defn.drive
        self.policy = defn.policy
        self.monitor = AccessMonitor()
        self.qubit = QubitState.ground()
        self.run_seed = 0
        self.physics_rng = np.random.default_rng([0])
        self.store = DatasetStore(access_hook=self.monitor.dataset_access)
        self.registry = Registry()
        self.devices: dict[str, Any] = {}
        self._impls: dict[str, Any] = {}
        self._build()

    # construction

    def _build(self) -> None:
        defn = self.defn
        channels = [d.channel for d in defn.devices]
        if len(set(channels)) != len(channels):
            raise ValidationError("device channels must be unique")
        self.core = CoreState(defn.core, num_channels=max(channels, default=0) + 1)
        try:
            for spec in defn.devices:
                self._build_device(spec)
            for spec in defn.modules:
                if "." in spec.key:
                    parent, local = spec.key.rsplit(".", 1)
                else:
                    parent, local = None, spec.key
                self.registry.add_module(parent, local)
                for device_key in spec.devices:
                    self.registry.claim_device(spec.key, device_key)
            self._seed_datasets()
            for spec in self._service_order(defn.services):
                impl = self._build_service_impl(spec)
                self.registry.add_service(spec.name, spec.service_deps,
                                          spec.module_deps, spec.interfaces,
                                          impl)
                self._impls[spec.name] = impl
        except RegistryError as exc:
            raise ValidationError(f"{type(exc).__name__}: {exc}") from exc
        except (KeyError, ValueError) as exc:
            raise ValidationError(str(exc)) from exc
        self.registry.seal()

    @staticmethod
    def _service_order(services: list[ServiceSpec]) -> list[ServiceSpec]:
        """Dependency-first, file-order-stable registration order.

        A file may reference a service declared later; only genuine cycles
        are rejected.
        """
        by_name = {}
        for spec in services:
            if spec.name in by_name:
                raise ValidationError(
                    f"DuplicateService: {spec.name!r} declared twice")
            by_name[spec.name] = spec
        order: list[ServiceSpec] = []
        state: dict[str, int] = {}  # 1 = visiting, 2 = done
        stack_path: list[str] = []

        def visit(name: str):
            if state.get(name) == 2:
                return
            if state.get(name) == 1:
                cycle = stack_path[stack_path.index(name):] + [name]
                raise ValidationError("DependencyCycle: " + " -> ".join(cycle))
            state[name] = 1
            stack_path.append(name)
            for dep in by_name[name].service_deps:
                if dep in by_name:
                    visit(dep)
            stack_path.pop()
            state[name] = 2
            order.append(by_name[name])

        for spec in services:
            visit(spec.name)
        return order

    def _build_device(self, spec: DeviceSpec) -> None:
        if spec.key in self.devices:
            raise ValidationError(f"duplicate device key {spec.key!r}")
        hook = self.monitor.device_access
        if spec.kind == "dds":
            device = DdsDevice(spec.key, spec.channel, self.core, self.policy,
                               access_hook=hook)
        elif spec.kind == "ttl":
            device = TtlDevice(spec.key, spec.channel, self.core,
                               access_hook=hook)
        elif spec.kind == "counter":
            reference_mu = int(spec.params.get("reference_window_mu", 100_000))
            if reference_mu <= 0:
                raise ValidationError(
                    f"counter {spec.key!r} needs reference_window_mu > 0")
            device = CounterDevice(
                spec.key, spec.channel, self.core,
                source=self._detection_source(reference_mu), access_hook=hook)
        else:
            raise ValidationError(
                f"unknown device kind {spec.kind!r} (expected {DEVICE_KINDS})")
        self.devices[spec.key] = device
        self.registry.declare_device(spec.key)

    def _detection_source(self, reference_window_mu: int):
        def source(start_mu: int, duration_mu: int) -> int:
            scale = duration_mu / reference_window_mu
            return measure(self.qubit, self.noise, scale, self.physics_rng)

        return source

    def _seed_datasets(self) -> None:
        known = set(self.registry.modules) | {s.name for s in self.defn.services}
        for ns, entries in self.defn.datasets.items():
            if ns not in known:
                raise ValidationError(f"dataset namespace {ns!r} matches no "
                                      "module or service")
            for key, value in entries.items():
                self.store.set(ns, key, value, caller=ns)

    def _build_service_impl(self, spec: ServiceSpec):
        if spec.impl not in _SERVICE_IMPLS:
            raise ValidationError(f"unknown service impl {spec.impl!r}")
        factory = _SERVICE_IMPLS[spec.impl]
        return factory(self, spec) if factory is not None else None

    # wiring helpers used by service implementations

    def service_device(self, spec: ServiceSpec, device_key: str):
        """Resolve a device for a service, enforcing module ownership."""
        if device_key not in self.devices:
            raise ValidationError(f"service {spec.name!r} references unknown "
                                  f"device {device_key!r}")
        allowed: set[str] = set()
        for module_key in spec.module_deps:
            allowed |= self.registry.subtree_devices(module_key)
        if device_key not in allowed:
            raise ValidationError(
                f"service {spec.name!r} uses device {device_key!r} outside "
                f"its module dependencies {sorted(spec.module_deps)}")
        return self.devices[device_key]

    def service_impl(self, name: str):
        if name not in self._impls or self._impls[name] is None:
            raise ValidationError(f"service {name!r} is not instantiated")
        return self._impls[name]

    # run management

    def reset_run(self, seed: int) -> None:
        """Fresh kernel state and a seeded physics stream for one run."""
        self.run_seed = int(seed)
        self.core.reset()
        self.qubit = QubitState.ground()
        self.physics_rng = np.random.default_rng([self.run_seed])

    def sample_rng_hook(self, point_index: int, sample_index: int) -> None:
        """Re-key the physics stream per (point, sample) for scan pipelining."""
        self.physics_rng = np.random.default_rng(
            [self.run_seed, point_index, sample_index])

    def operation(self, name: str | None = None) -> OperationInterface:
        return self.registry.get_interface(OPERATION, name)

    def data_context(self, name: str | None = None) -> DataContextInterface:
        return self.registry.get_interface(DATA_CONTEXT, name)


def load_system(source) -> System:
    """Load and validate a system definition from a path or TOML string."""
    text = source if isinstance(source, str) and "\n" in source else None
    if text is None:
        defn = SystemDefinition.from_path(source)
    else:
        defn = SystemDefinition.from_toml(text)
    return System(defn)


def bundled_definition_path(name: str):
    """Path to a system definition shipped with the package."""
    path = resources.files("qctl") / "systems" / f"{name}.toml"
    if not path.is_file():
        raise FileNotFoundError(f"no bundled system named {name!r}")
    return path

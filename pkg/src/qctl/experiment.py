"""Experiment lifecycle, scanning infrastructure, and overhead accounting.

Experiments progress through four phases (build, prepare, run, analyze);
devices and datasets may only be touched during run. Scans iterate a grid of
points, collect a fixed number of samples per point inside one kernel, and
stream each sample to the host through asynchronous RPCs. With a nonzero
buffer size the scan schedules several detection windows ahead of their
reads, so input results queue in hardware buffers instead of stalling the
kernel between samples.
"""

from __future__ import annotations

import csv
import json
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

from .devices import CountHandle
from .rtio import CoreState, ensure_slack, run_kernel

DEFAULT_MIN_SLACK_MU = 10_000


class ExperimentPhase(Enum):
    BUILD = "build"
    PREPARE = "prepare"
    RUN = "run"
    ANALYZE = "analyze"


class PhaseViolation(Exception):
    """Device or dataset access outside the run phase."""


class SinkClosed(Exception):
    """Asynchronous RPC issued after the kernel finished."""


class BufferTooLarge(Exception):
    """Requested pipelining depth exceeds the input buffer capacity."""


class NonPositiveMinimum(Exception):
    """Overhead is undefined for a non-positive minimal execution time."""


@dataclass(frozen=True)
class AccessRecord:
    phase: ExperimentPhase | None
    category: str  # "device" or "dataset"
    key: str


class AccessMonitor:
    """Tracks the current phase and attributes every access to it.

    Outside a lifecycle (phase ``None``) access is unrestricted, so plain
    scripts and tests can drive devices directly.
    """

    def __init__(self):
        self.phase: ExperimentPhase | None = None
        self.audit: list[AccessRecord] = []

    def _check(self, category: str, key: str):
        self.audit.append(AccessRecord(self.phase, category, key))
        if self.phase is not None and self.phase is not ExperimentPhase.RUN:
            raise PhaseViolation(
                f"{category} access to {key!r} in phase {self.phase.value}")

    def device_access(self, key: str) -> None:
        self._check("device", key)

    def dataset_access(self, op: str, namespace: str, key: str) -> None:
        self._check("dataset", f"{namespace}.{key}")


class Experiment:
    """Base class for experiments; override any subset of the phase bodies.

    ``results`` is the conventional place for run/analyze output.
    """

    def __init__(self):
        self.results: dict = {}

    def build(self) -> None:
        pass

    def prepare(self) -> None:
        pass

    def run(self) -> None:
        pass

    def analyze(self) -> None:
        pass


def run_lifecycle(experiment: Experiment, monitor: AccessMonitor) -> dict:
    """Execute the four phases in order, exactly once each."""
    if getattr(experiment, "_lifecycle_done", False):
        raise PhaseViolation("experiment lifecycle already consumed")
    experiment._lifecycle_done = True
    phases = [
        (ExperimentPhase.BUILD, experiment.build),
        (ExperimentPhase.PREPARE, experiment.prepare),
        (ExperimentPhase.RUN, experiment.run),
        (ExperimentPhase.ANALYZE, experiment.analyze),
    ]
    try:
        for phase, body in phases:
            monitor.phase = phase
            body()
    finally:
        monitor.phase = None
    return experiment.results


# -- host offloading -------------------------------------------------------------


class HostSink:
    """Append-only host-side record list fed by asynchronous RPCs.

    Appends are ordered; a concurrent reader sees a prefix of the final
    contents and completion is signaled exactly once via ``done``.
    """

    def __init__(self):
        self._records: list = []
        self._lock = threading.Lock()
        self.done = threading.Event()
        self._closed = False

    def push(self, record) -> None:
        with self._lock:
            if self._closed:
                raise SinkClosed("host sink is closed")
            self._records.append(record)

    def close(self) -> None:
        with self._lock:
            self._closed = True
        self.done.set()

    @property
    def records(self) -> list:
        with self._lock:
            return list(self._records)

    def __len__(self) -> int:
        with self._lock:
            return len(self._records)


def rpc_async(core: CoreState, sink: HostSink, record) -> None:
    """Enqueue a record for the host; costs only the enqueue time."""
    core.charge_cpu("rpc_async_enqueue")
    sink.push(record)


def rpc_sync(core: CoreState, host_fn: Callable, *args):
    """Round-trip to the host: full latency charged, value returned."""
    core.charge_cpu("rpc_sync_roundtrip")
    return host_fn(*args)


# -- scanning ---------------------------------------------------------------------


@dataclass(frozen=True)
class ScanAxis:
    name: str
    values: tuple

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(self.values))
        if not self.values:
            raise ValueError(f"scan axis {self.name!r} has no values")


@dataclass
class ScanDefinition:
    """A 1D or 2D scan grid with a fixed number of samples per point."""

    axes: list[ScanAxis]
    samples_per_point: int
    buffer_size: int = 0

    def __post_init__(self):
        if not 1 <= len(self.axes) <= 2:
            raise ValueError("scans have one or two axes")
        if self.samples_per_point < 1:
            raise ValueError("samples_per_point must be >= 1")
        if self.buffer_size < 0:
            raise ValueError("buffer_size must be >= 0")

    @property
    def num_points(self) -> int:
        n = 1
        for axis in self.axes:
            n *= len(axis.values)
        return n

    def points(self) -> list[tuple]:
        """Row-major coordinates over the axes as declared."""
        if len(self.axes) == 1:
            return [(v,) for v in self.axes[0].values]
        return [(a, b) for a in self.axes[0].values for b in self.axes[1].values]


@dataclass(frozen=True)
class ScanRecord:
    point_index: int
    coords: tuple
    sample_index: int
    count: int
    bit: int


@dataclass
class ExecutionReport:
    """Measured vs. minimal execution time of one kernel."""

    t_exe_mu: int
    t_min_mu: int
    overhead: float = field(init=False)

    def __post_init__(self):
        self.overhead = compute_overhead(self.t_exe_mu, self.t_min_mu)

    def as_dict(self) -> dict:
        return {"t_exe_mu": self.t_exe_mu, "t_min_mu": self.t_min_mu,
                "overhead": self.overhead}

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True)


@dataclass
class ScanResult:
    scan: ScanDefinition
    records: list[ScanRecord]
    report: ExecutionReport

    def per_point(self) -> list[list[ScanRecord]]:
        out = [[] for _ in range(self.scan.num_points)]
        for record in self.records:
            out[record.point_index].append(record)
        return out


def compute_overhead(t_exe_mu: int, t_min_mu: int) -> float:
    """The execution-time overhead (t_exe - t_min) / t_min."""
    if t_min_mu <= 0:
        raise NonPositiveMinimum("t_min must be > 0")
    if t_exe_mu < 0:
        raise ValueError("t_exe must be >= 0")
    return (t_exe_mu - t_min_mu) / t_min_mu


def t_min_of(scan: ScanDefinition,
             per_sample_mu: int | Callable[[tuple], int]) -> int:
    """Minimal execution time: declared physical durations summed over the scan.

    Counts pulse lengths, detection times, and intentional waits; programming
    delays, CPU costs, and RPC costs are overhead by definition.
    """
    total = 0
    for coords in scan.points():
        per = per_sample_mu(coords) if callable(per_sample_mu) else per_sample_mu
        total += per * scan.samples_per_point
    return total


def run_scan(core: CoreState,
             scan: ScanDefinition,
             point_body: Callable[[tuple, int], CountHandle],
             sink: HostSink,
             *,
             declared_sample_mu: int | Callable[[tuple], int],
             classify: Callable[[int], int],
             point_setup: Callable[[tuple], None] | None = None,
             sample_rng_hook: Callable[[int, int], None] | None = None,
             min_slack_mu: int = DEFAULT_MIN_SLACK_MU) -> ScanResult:
    """Run the scan grid inside one kernel and stream records to the host.

    ``point_body(coords, sample)`` schedules the sample's operations plus
    exactly one detection window and returns its handle. With
    ``buffer_size`` B > 0 up to B windows are in flight before the oldest is
    read; results are identical to the unbuffered scan when the physics RNG
    is keyed per (point, sample) through ``sample_rng_hook``.
    """
    buffer = scan.buffer_size
    if buffer > core.config.input_buffer_capacity:
        raise BufferTooLarge(
            f"buffer_size {buffer} exceeds input buffer capacity "
            f"{core.config.input_buffer_capacity}")
    t_min = t_min_of(scan, declared_sample_mu)
    records: list[ScanRecord] = []

    def collect(point_index, coords, sample_index, handle):
        count = handle.get()
        record = ScanRecord(point_index, coords, sample_index, count,
                            classify(count))
        rpc_async(core, sink, record)
        records.append(record)

    def kernel():
        for point_index, coords in enumerate(scan.points()):
            if point_setup is not None:
                ensure_slack(core, min_slack_mu)
                point_setup(coords)
            in_flight: list[tuple[int, CountHandle]] = []
            for sample in range(scan.samples_per_point):
                if buffer > 0 and len(in_flight) == buffer:
                    s, handle = in_flight.pop(0)
                    collect(point_index, coords, s, handle)
                ensure_slack(core, min_slack_mu)
                if sample_rng_hook is not None:
                    sample_rng_hook(point_index, sample)
                handle = point_body(coords, sample)
                if buffer > 0:
                    in_flight.append((sample, handle))
                else:
                    collect(point_index, coords, sample, handle)
            for s, handle in in_flight:
                collect(point_index, coords, s, handle)

    record = run_kernel(core, kernel)
    sink.close()
    report = ExecutionReport(record.t_exe_mu, t_min)
    return ScanResult(scan, records, report)


def write_scan_csv(path, result: ScanResult) -> None:
    """Per-sample CSV: one column per axis, then sample index, count, bit."""
    axis_names = [axis.name for axis in result.scan.axes]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(axis_names + ["sample", "count", "bit"])
        for r in result.records:
            writer.writerow(list(r.coords) + [r.sample_index, r.count, r.bit])

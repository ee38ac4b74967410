"""Modular real-time quantum control framework over a simulated core device.

Layers, bottom up: :mod:`qctl.rtio` (timeline-cursor event simulator),
:mod:`qctl.devices` (DDS/TTL/counter drivers with delay-insertion policies),
:mod:`qctl.physics` (Bloch-vector ion with SPAM and depolarizing noise),
:mod:`qctl.framework` (modules, services, registry, interfaces, datasets),
:mod:`qctl.experiment` (lifecycle phases, scans, buffering, overhead),
:mod:`qctl.rb` (portable Direct RB and calibration clients),
:mod:`qctl.system` / :mod:`qctl.cli` (system definitions and the front end).
"""

from .experiment import (
    ExecutionReport,
    ExperimentPhase,
    HostSink,
    ScanAxis,
    ScanDefinition,
    compute_overhead,
    run_lifecycle,
    run_scan,
    t_min_of,
)
from .framework import DATA_CONTEXT, OPERATION, DatasetStore, Registry
from .physics import DriveParams, NoiseModel, QubitState
from .rb import RbDesign, RbFit, execute_design, fit_decay, sample_circuit
from .rtio import CoreConfig, CoreState, ExecutionRecord, run_kernel
from .system import System, SystemDefinition, bundled_definition_path, load_system

__all__ = [
    "CoreConfig", "CoreState", "ExecutionRecord", "run_kernel",
    "DriveParams", "NoiseModel", "QubitState",
    "DATA_CONTEXT", "OPERATION", "DatasetStore", "Registry",
    "ExecutionReport", "ExperimentPhase", "HostSink", "ScanAxis",
    "ScanDefinition", "compute_overhead", "run_lifecycle", "run_scan",
    "t_min_of",
    "RbDesign", "RbFit", "execute_design", "fit_decay", "sample_circuit",
    "System", "SystemDefinition", "bundled_definition_path", "load_system",
]

__version__ = "0.1.0"

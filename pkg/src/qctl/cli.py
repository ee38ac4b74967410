"""Command-line front end: load a system, run an experiment, emit reports.

Every run is driven by a manifest (system, experiment id, mandatory seed,
parameter overrides) and writes its results as JSON/CSV files into the output
directory. Re-running the same manifest produces byte-identical files.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import rb
from .experiment import (
    Experiment,
    HostSink,
    ScanAxis,
    ScanDefinition,
    run_lifecycle,
    run_scan,
)
from .framework import OPERATION
from .physics import apply_rotation
from .rtio import run_kernel
from .system import (
    ParseError,
    System,
    SystemDefinition,
    bundled_definition_path,
)

BUNDLED_SYSTEMS = ("staq_sim", "rc_sim")
EXPERIMENT_IDS = ("rabi", "ramsey", "pi_train", "direct_rb", "overhead_bench")

EXIT_OK = 0
EXIT_EXPERIMENT_ERROR = 1
EXIT_USAGE = 2


class ShapeMismatch(Exception):
    """Two execution reports cover different scan shapes."""


@dataclass
class RunManifest:
    """Everything needed to reproduce one run byte-for-byte."""

    system: str
    experiment: str
    seed: int
    out_dir: Path
    overrides: dict[str, str] = field(default_factory=dict)
    buffer_size: int = 0
    policy: str | None = None

    def __post_init__(self):
        if self.experiment not in EXPERIMENT_IDS:
            raise ValueError(f"unknown experiment id {self.experiment!r}")
        self.out_dir = Path(self.out_dir)

    def as_dict(self) -> dict:
        return {"system": self.system, "experiment": self.experiment,
                "seed": self.seed,
                "overrides": dict(sorted(self.overrides.items())),
                "buffer_size": self.buffer_size, "policy": self.policy}


def _coerce(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            continue
    if "," in text:
        return [_coerce(part) for part in text.split(",")]
    return text


def _apply_override(doc: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    if parts[0] == "datasets" and len(parts) >= 3:
        # dataset namespaces contain dots: datasets.<namespace...>.<key>
        namespace, key = ".".join(parts[1:-1]), parts[-1]
        doc.setdefault("datasets", {}).setdefault(namespace, {})[key] = value
        return
    if parts[:2] == ["delay_policy", "per_function"] and len(parts) >= 4:
        key = ".".join(parts[2:])
        doc.setdefault("delay_policy", {}).setdefault("per_function", {})[key] = value
        return
    node = doc
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = value


def build_system(manifest: RunManifest) -> tuple[System, dict]:
    """Instantiate the system with the manifest's overrides applied.

    Returns the system and the experiment-level parameters (``exp.*``
    overrides).
    """
    source = manifest.system
    if source in BUNDLED_SYSTEMS:
        path = bundled_definition_path(source)
    else:
        path = Path(source)
    try:
        doc = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ParseError(str(exc)) from exc
    exp_params: dict = {}
    for dotted, raw in sorted(manifest.overrides.items()):
        value = _coerce(raw) if isinstance(raw, str) else raw
        if dotted.startswith("exp."):
            exp_params[dotted[4:]] = value
        else:
            _apply_override(doc, dotted, value)
    if manifest.policy is not None:
        doc.setdefault("delay_policy", {})["mode"] = manifest.policy
    return System(SystemDefinition.from_dict(doc)), exp_params


# -- experiment runners -----------------------------------------------------------


class _ClientExperiment(Experiment):
    """Shared scaffolding: resolve interfaces in build, audit everything."""

    def __init__(self, system: System, manifest: RunManifest, params: dict):
        super().__init__()
        self.system = system
        self.manifest = manifest
        self.params = params
        self.artifacts: dict[str, str] = {}

    def build(self):
        registry = self.system.registry
        self._audit_mark = registry.audit_mark()
        self.op, self.data = rb.resolve_client_interfaces(
            registry, self.params.get("op"), self.params.get("data"))

    def audit_ops(self) -> list[str]:
        return sorted({op for op, _ in
                       self.system.registry.audit_since(self._audit_mark)})

    def _assumed_rabi_hz(self) -> float:
        """The operator's prior: the resolved op service's stored calibration."""
        name = self.params.get("op") or \
            self.system.registry.find_interface(OPERATION)[0]
        defn = self.system.defn
        for spec in defn.services:
            if spec.name == name:
                fallback = spec.params.get("rabi_cal_hz", defn.drive.rabi_hz)
                return float(defn.datasets.get(name, {}).get("rabi_hz", fallback))
        return float(defn.drive.rabi_hz)


class RabiExperiment(_ClientExperiment):
    def prepare(self):
        self.assumed_hz = float(self.params.get("assumed_rabi_hz",
                                                self._assumed_rabi_hz()))
        points = int(self.params.get("points", 20))
        if points < 4:
            raise ValueError("rabi scan needs at least 4 points")
        periods = float(self.params.get("periods", 1.0))
        samples = int(self.params.get("samples", 100))
        self.samples = samples
        span = periods / self.assumed_hz
        self.durations = [i * span / (points - 1) for i in range(points)]

    def run(self):
        fit_box = {}

        def kernel():
            fit_box["fit"] = rb.rabi_scan(self.op, self.data, self.durations,
                                          self.samples, self.assumed_hz)

        record = run_kernel(self.system.core, kernel)
        fit = fit_box["fit"]
        self.results = {
            "rabi_hz_est": fit.rabi_hz,
            "assumed_rabi_hz": self.assumed_hz,
            "amplitude": fit.amplitude,
            "offset": fit.offset,
            "durations_s": list(fit.durations_s),
            "fractions": list(fit.fractions),
            "t_exe_mu": record.t_exe_mu,
        }

    def analyze(self):
        self.artifacts["results.json"] = _dumps(self.results)


class RamseyExperiment(_ClientExperiment):
    def prepare(self):
        points = int(self.params.get("points", 40))
        if points < 4:
            raise ValueError("ramsey scan needs at least 4 points")
        max_delay = float(self.params.get("max_delay_s", 0.002))
        self.samples = int(self.params.get("samples", 200))
        self.delays = [i * max_delay / (points - 1) for i in range(points)]

    def run(self):
        fit_box = {}

        def kernel():
            fit_box["fit"] = rb.ramsey_scan(self.op, self.data, self.delays,
                                            self.samples)

        record = run_kernel(self.system.core, kernel)
        fit = fit_box["fit"]
        self.results = {
            "detuning_hz_est": fit.detuning_hz,
            "amplitude": fit.amplitude,
            "offset": fit.offset,
            "delays_s": list(fit.delays_s),
            "fractions": list(fit.fractions),
            "t_exe_mu": record.t_exe_mu,
        }

    def analyze(self):
        self.artifacts["results.json"] = _dumps(self.results)


class PiTrainExperiment(_ClientExperiment):
    def prepare(self):
        max_train = int(self.params.get("max_train", 41))
        self.lengths = list(range(1, max_train + 1, 8))
        self.samples = int(self.params.get("samples", 400))
        self.nominal_pi_s = 1.0 / (2.0 * float(
            self.params.get("assumed_rabi_hz", self._assumed_rabi_hz())))

    def run(self):
        fit_box = {}

        def kernel():
            fit_box["fit"] = rb.pi_train_calibration(
                self.op, self.data, self.lengths, self.samples,
                self.nominal_pi_s)

        record = run_kernel(self.system.core, kernel)
        fit = fit_box["fit"]
        self.results = {
            "fractional_error": fit.fractional_error,
            "corrected_pi_time_s": fit.corrected_pi_time_s,
            "nominal_pi_time_s": self.nominal_pi_s,
            "train_lengths": list(fit.train_lengths),
            "fractions": list(fit.fractions),
            "t_exe_mu": record.t_exe_mu,
        }

    def analyze(self):
        self.artifacts["results.json"] = _dumps(self.results)


class DirectRbExperiment(_ClientExperiment):
    def prepare(self):
        lengths = self.params.get("lengths", [1, 2, 4, 8, 16, 32, 64, 128, 256])
        if isinstance(lengths, (int, float)):
            lengths = [int(lengths)]
        self.design = rb.RbDesign(
            lengths=tuple(int(m) for m in lengths),
            circuits_per_length=int(self.params.get("circuits", 10)),
            samples_per_circuit=int(self.params.get("samples", 50)),
            seed=self.manifest.seed)

    def run(self):
        box = {}

        def kernel():
            box["survival"] = rb.execute_design(self.design, self.op, self.data)

        record = run_kernel(self.system.core, kernel)
        self.survival = box["survival"]
        self.results = {"t_exe_mu": record.t_exe_mu}

    def analyze(self):
        fit = rb.fit_decay(self.survival, seed=self.manifest.seed)
        doc = rb.rb_results_document(self.survival, fit)
        doc["t_exe_mu"] = self.results["t_exe_mu"]
        doc["registry_audit_ops"] = self.audit_ops()
        self.results = doc
        self.artifacts["rb_results.json"] = _dumps(doc)
        rows = rb.rb_curve_rows(self.survival)
        self.artifacts["rb_curve.csv"] = _csv_text(
            ["length", "mean", "ci_low", "ci_high"], rows)


class OverheadBenchExperiment(Experiment):
    """Device-level scan benchmark; this is a system experiment, not a client.

    ``short_op`` reprograms the DDS for every sample (high operation
    density); ``long_wait`` programs once per point and idles 5 ms per
    sample, so software overhead is negligible by construction.
    """

    def __init__(self, system: System, manifest: RunManifest, params: dict):
        super().__init__()
        self.system = system
        self.manifest = manifest
        self.params = params
        self.artifacts: dict[str, str] = {}

    def build(self):
        self.scenario = self.params.get("scenario", "short_op")
        if self.scenario not in ("short_op", "long_wait"):
            raise ValueError(f"unknown scenario {self.scenario!r}")
        system = self.system
        self.dds = system.devices["dds_mw"]
        self.switch = system.devices["ttl_mw_switch"]
        self.state = system.service_impl("state")
        self.pulse_mu = int(self.params.get("pulse_mu", 10_000))
        self.detect_mu = int(self.params.get("detect_mu", 100_000))
        self.wait_mu = int(self.params.get("wait_mu", 5_000_000))

    def prepare(self):
        points = int(self.params.get("points", 20))
        samples = int(self.params.get("samples", 100))
        freqs = [self.system.drive.qubit_freq_hz + 100.0 * i
                 for i in range(points)]
        self.scan = ScanDefinition([ScanAxis("freq_hz", freqs)], samples,
                                   buffer_size=self.manifest.buffer_size)
        prep_mu = 2000  # cool + pump pulses scheduled by state.prepare()
        self.sample_mu = prep_mu + self.pulse_mu + self.detect_mu
        if self.scenario == "long_wait":
            self.sample_mu += self.wait_mu

    def _body(self, coords, sample):
        system = self.system
        self.state.prepare()
        if self.scenario == "short_op":
            self.dds.set(coords[0], 0.0, 1.0)
        self.switch.pulse(self.pulse_mu)
        angle = 2.0 * math.pi * system.drive.rabi_hz * self.pulse_mu * 1e-9
        system.qubit = apply_rotation(system.qubit, "x", angle)
        if self.scenario == "long_wait":
            system.core.delay_mu(self.wait_mu)
        return self.state.acquire(self.detect_mu)

    def run(self):
        system = self.system
        sink = HostSink()
        noise = system.noise
        result = run_scan(
            system.core, self.scan, self._body, sink,
            declared_sample_mu=self.sample_mu,
            classify=lambda count: int(count > noise.detect_threshold),
            point_setup=(lambda coords: self.dds.set(coords[0], 0.0, 1.0))
            if self.scenario == "long_wait" else None,
            sample_rng_hook=system.sample_rng_hook)
        self.scan_result = result
        self.results = {
            "scenario": self.scenario,
            "policy": system.policy.mode.value,
            "buffer_size": self.scan.buffer_size,
            "scan": {"points": self.scan.num_points,
                     "samples_per_point": self.scan.samples_per_point},
            **result.report.as_dict(),
        }

    def analyze(self):
        self.artifacts["report.json"] = _dumps(self.results)
        rows = [list(r.coords) + [r.sample_index, r.count, r.bit]
                for r in self.scan_result.records]
        self.artifacts["scan.csv"] = _csv_text(
            [axis.name for axis in self.scan.axes] + ["sample", "count", "bit"],
            rows)


EXPERIMENTS = {
    "rabi": RabiExperiment,
    "ramsey": RamseyExperiment,
    "pi_train": PiTrainExperiment,
    "direct_rb": DirectRbExperiment,
    "overhead_bench": OverheadBenchExperiment,
}


# -- run orchestration ----------------------------------------------------------------


def _dumps(doc) -> str:
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def _csv_text(header, rows) -> str:
    import io

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def run(manifest: RunManifest) -> int:
    """Execute one manifest; returns the process exit code."""
    try:
        system, exp_params = build_system(manifest)
        system.reset_run(manifest.seed)
        experiment = EXPERIMENTS[manifest.experiment](system, manifest,
                                                      exp_params)
        run_lifecycle(experiment, system.monitor)
        out = manifest.out_dir
        out.mkdir(parents=True, exist_ok=True)
        for name, text in experiment.artifacts.items():
            (out / name).write_text(text)
        (out / "manifest.json").write_text(_dumps(manifest.as_dict()))
        system.store.save(out / "datasets.json")
        return EXIT_OK
    except Exception as exc:  # machine-readable failure
        error = {"error": {"type": type(exc).__name__, "message": str(exc)}}
        print(json.dumps(error, sort_keys=True))
        return EXIT_EXPERIMENT_ERROR


def compare_report(report_a: dict, report_b: dict) -> dict:
    """Relative overhead reduction between two runs of the same scan shape."""
    for key in ("scan", "overhead", "t_exe_mu"):
        if key not in report_a or key not in report_b:
            raise ShapeMismatch(f"report missing {key!r}")
    if report_a["scan"] != report_b["scan"] or \
            report_a.get("scenario") != report_b.get("scenario"):
        raise ShapeMismatch("reports cover different scans")
    oh_a, oh_b = report_a["overhead"], report_b["overhead"]
    if oh_a == 0:
        raise ShapeMismatch("first report has zero overhead; nothing to reduce")
    return {
        "overhead_a": oh_a,
        "overhead_b": oh_b,
        "overhead_reduction": (oh_a - oh_b) / oh_a,
        "t_exe_delta_mu": report_a["t_exe_mu"] - report_b["t_exe_mu"],
        "policies": [report_a.get("policy"), report_b.get("policy")],
        "buffer_sizes": [report_a.get("buffer_size"),
                         report_b.get("buffer_size")],
    }


def _default_out_dir(manifest_args) -> Path:
    root = Path(os.environ.get("QCTL_OUT_DIR", "qctl_out"))
    name = Path(manifest_args.system).stem
    return root / f"{name}_{manifest_args.exp}_seed{manifest_args.seed}"


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="qctl",
        description="Run experiments on simulated modular control systems.")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run one experiment")
    run_p.add_argument("--system", required=True,
                       help=f"bundled name {BUNDLED_SYSTEMS} or a TOML path")
    run_p.add_argument("--exp", required=True, choices=EXPERIMENT_IDS)
    run_p.add_argument("--seed", required=True, type=int)
    run_p.add_argument("--buffer", type=int, default=0,
                       help="scan pipelining depth (overhead_bench)")
    run_p.add_argument("--policy", choices=["worst_case", "per_function"])
    run_p.add_argument("--out", help="output directory")
    run_p.add_argument("--set", action="append", default=[], dest="overrides",
                       metavar="KEY=VALUE",
                       help="definition or exp.* parameter override")

    cmp_p = sub.add_parser("compare", help="compare two execution reports")
    cmp_p.add_argument("report_a")
    cmp_p.add_argument("report_b")

    args = parser.parse_args(argv)
    if args.command == "compare":
        try:
            a = json.loads(Path(args.report_a).read_text())
            b = json.loads(Path(args.report_b).read_text())
            print(_dumps(compare_report(a, b)), end="")
            return EXIT_OK
        except (OSError, json.JSONDecodeError, ShapeMismatch) as exc:
            print(json.dumps({"error": {"type": type(exc).__name__,
                                        "message": str(exc)}}, sort_keys=True))
            return EXIT_EXPERIMENT_ERROR

    overrides = {}
    for item in args.overrides:
        if "=" not in item:
            parser.error(f"--set expects KEY=VALUE, got {item!r}")
        key, _, value = item.partition("=")
        overrides[key] = value
    manifest = RunManifest(
        system=args.system, experiment=args.exp, seed=args.seed,
        out_dir=Path(args.out) if args.out else _default_out_dir(args),
        overrides=overrides, buffer_size=args.buffer, policy=args.policy)
    return run(manifest)


if __name__ == "__main__":
    sys.exit(main())

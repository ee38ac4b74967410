"""Front-end behavior: manifests, overrides, output files, exit codes."""

from __future__ import annotations

import json

import pytest

from qctl.cli import (
    EXIT_EXPERIMENT_ERROR,
    EXIT_OK,
    EXIT_USAGE,
    RunManifest,
    ShapeMismatch,
    build_system,
    compare_report,
    main,
    run,
)


def manifest(tmp_path, **kwargs):
    defaults = dict(system="staq_sim", experiment="overhead_bench", seed=1,
                    out_dir=tmp_path / "out", overrides={})
    defaults.update(kwargs)
    return RunManifest(**defaults)


# -- manifests and overrides ---------------------------------------------------


def test_manifest_requires_known_experiment(tmp_path):
    with pytest.raises(ValueError):
        manifest(tmp_path, experiment="nonsense")


def test_overrides_reach_definition_and_exp_params(tmp_path):
    m = manifest(tmp_path, overrides={
        "noise.prep_error": "0.0",
        "drive.detuning_hz": "1000",
        "datasets.mw_op.rabi_hz": "49000.0",
        "exp.samples": "5",
    })
    system, exp_params = build_system(m)
    assert system.noise.prep_error == 0.0
    assert system.drive.detuning_hz == 1000
    assert system.store.get("mw_op", "rabi_hz") == 49000.0
    assert exp_params == {"samples": 5}


def test_policy_flag_overrides_mode(tmp_path):
    m = manifest(tmp_path, policy="worst_case")
    system, _ = build_system(m)
    assert system.policy.mode.value == "worst_case"


# -- runs -------------------------------------------------------------------------


def test_overhead_bench_writes_report_and_scan(tmp_path):
    m = manifest(tmp_path, overrides={"exp.points": "4", "exp.samples": "10"})
    assert run(m) == EXIT_OK
    report = json.loads((m.out_dir / "report.json").read_text())
    assert report["scan"] == {"points": 4, "samples_per_point": 10}
    assert report["overhead"] >= 0.0
    scan_lines = (m.out_dir / "scan.csv").read_text().splitlines()
    assert scan_lines[0] == "freq_hz,sample,count,bit"
    assert len(scan_lines) == 1 + 4 * 10
    assert (m.out_dir / "manifest.json").exists()
    assert (m.out_dir / "datasets.json").exists()


def test_direct_rb_produces_valid_fit_files(tmp_path):
    m = manifest(tmp_path, system="rc_sim", experiment="direct_rb", seed=7,
                 overrides={"exp.lengths": "1,2,4,8",
                            "exp.circuits": "3", "exp.samples": "20"})
    assert run(m) == EXIT_OK
    doc = json.loads((m.out_dir / "rb_results.json").read_text())
    assert doc["lengths"] == [1, 2, 4, 8]
    fit = doc["fit"]
    assert 0.0 <= fit["p"] <= 1.0
    assert fit["r"] == pytest.approx(4 * (1 - fit["p"]) / 3)
    assert set(doc["registry_audit_ops"]) <= {"find_interface", "get_interface"}
    curve = (m.out_dir / "rb_curve.csv").read_text().splitlines()
    assert curve[0] == "length,mean,ci_low,ci_high"
    assert len(curve) == 5


def test_failed_experiment_returns_error_json(tmp_path, capsys):
    # ramsey on a zero-detuning system has no fringe to fit
    m = manifest(tmp_path, experiment="ramsey", seed=3,
                 overrides={"exp.points": "8", "exp.samples": "20"})
    assert run(m) == EXIT_EXPERIMENT_ERROR
    err = json.loads(capsys.readouterr().out)
    assert err["error"]["type"] == "FitDegenerate"
    assert not m.out_dir.exists()  # nothing written on failure


def test_rerun_same_manifest_is_byte_identical(tmp_path):
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    for out in (out_a, out_b):
        m = manifest(tmp_path, experiment="direct_rb", seed=11, out_dir=out,
                     overrides={"exp.lengths": "1,2,4", "exp.circuits": "2",
                                "exp.samples": "10"})
        assert run(m) == EXIT_OK
    for name in ("rb_results.json", "rb_curve.csv", "manifest.json",
                 "datasets.json"):
        assert (out_a / name).read_bytes() == (out_b / name).read_bytes()


# -- compare -----------------------------------------------------------------------


def _report(overhead, t_exe=10**9, policy="worst_case", buffer_size=0,
            scan=None):
    return {"overhead": overhead, "t_exe_mu": t_exe, "t_min_mu": 1,
            "policy": policy, "buffer_size": buffer_size,
            "scenario": "short_op",
            "scan": scan or {"points": 20, "samples_per_point": 100}}


def test_compare_report_worked_example():
    summary = compare_report(_report(0.60), _report(0.22))
    assert summary["overhead_reduction"] == pytest.approx(0.6333, abs=1e-4)


def test_compare_identical_reports_is_zero_reduction():
    summary = compare_report(_report(0.30), _report(0.30))
    assert summary["overhead_reduction"] == 0.0


def test_compare_mismatched_scans_rejected():
    with pytest.raises(ShapeMismatch):
        compare_report(_report(0.5),
                       _report(0.4, scan={"points": 5, "samples_per_point": 2}))


def test_compare_rejects_reports_without_scan_shape():
    partial = {"overhead": 0.5, "t_exe_mu": 10}
    with pytest.raises(ShapeMismatch):
        compare_report(partial, _report(0.4))


# -- argparse surface ------------------------------------------------------------------


def test_unknown_experiment_is_usage_error(tmp_path, capsys):
    with pytest.raises(SystemExit) as excinfo:
        main(["run", "--system", "staq_sim", "--exp", "bogus", "--seed", "1",
              "--out", str(tmp_path)])
    assert excinfo.value.code == EXIT_USAGE
    capsys.readouterr()


def test_main_run_and_compare_round_trip(tmp_path, capsys):
    args = ["--seed", "5", "--out"]
    a_dir, b_dir = str(tmp_path / "wc"), str(tmp_path / "pf")
    base = ["run", "--system", "staq_sim", "--exp", "overhead_bench",
            "--set", "exp.points=3", "--set", "exp.samples=5"]
    assert main(base + ["--policy", "worst_case"] + args + [a_dir]) == EXIT_OK
    assert main(base + ["--policy", "per_function"] + args + [b_dir]) == EXIT_OK
    assert main(["compare", a_dir + "/report.json",
                 b_dir + "/report.json"]) == EXIT_OK
    summary = json.loads(capsys.readouterr().out)
    assert summary["overhead_reduction"] > 0.4


def test_env_var_sets_default_output_root(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("QCTL_OUT_DIR", str(tmp_path / "root"))
    assert main(["run", "--system", "staq_sim", "--exp", "overhead_bench",
                 "--seed", "2", "--set", "exp.points=2",
                 "--set", "exp.samples=2"]) == EXIT_OK
    assert (tmp_path / "root" / "staq_sim_overhead_bench_seed2" /
            "report.json").exists()

"""Direct RB: frame tracking, circuit sampling, decay fits, calibrations."""

from __future__ import annotations

import math

import numpy as np
import pytest
from support import (
    DirectPhysicsOperation,
    FlatOperation,
    ListDataContext,
    bloch_matrix_of,
    circuit_unitary,
    gate_unitary,
    noiseless_outcome_probability,
)

from qctl.physics import NoiseModel
from qctl.rb import (
    NATIVE_GATES,
    AliasWarning,
    CliffordFrame,
    FitDegenerate,
    Gate,
    RbDesign,
    SurvivalData,
    error_per_gate,
    execute_design,
    fit_decay,
    inversion_word,
    pi_train_calibration,
    rabi_scan,
    ramsey_scan,
    sample_circuit,
)

IDEAL = NoiseModel(prep_error=0.0, bright_mean=1000.0, dark_mean=0.0,
                   detect_threshold=50)


def ideal_op(seed=0, **kwargs):
    return DirectPhysicsOperation(noise=IDEAL, seed=seed, **kwargs)


# -- gates and frames ----------------------------------------------------------


def test_native_set_is_six_gates_without_identity():
    assert len(NATIVE_GATES) == 6
    assert all(g.quarter_turns in (1, 2, 3) for g in NATIVE_GATES)


def test_gate_validation():
    with pytest.raises(ValueError):
        Gate("z", 1)
    with pytest.raises(ValueError):
        Gate("x", 0)
    with pytest.raises(ValueError):
        Gate("x", 4)


def test_frame_group_matches_unitary_conjugation():
    rng = np.random.default_rng(8)
    for _ in range(100):
        gates = [NATIVE_GATES[i] for i in rng.integers(0, 6, size=10)]
        frame = CliffordFrame()
        for gate in gates:
            frame = frame.then(gate)
        oracle = bloch_matrix_of(circuit_unitary(gates))
        assert np.allclose(frame.matrix, oracle, atol=1e-9)


def test_inversion_words_are_short_and_correct():
    for index in range(24):
        frame = CliffordFrame(index)
        for flip in (False, True):
            word = inversion_word(frame, flip)
            assert len(word) <= 3
            closed = frame
            for gate in word:
                closed = closed.then(gate)
            expected = bloch_matrix_of(gate_unitary("x", math.pi)) if flip \
                else np.eye(3)
            assert np.allclose(closed.matrix, expected, atol=1e-9)


def test_four_x_quarter_turns_close_to_identity_with_trivial_inversion():
    frame = CliffordFrame()
    for _ in range(4):
        frame = frame.then(Gate("x", 1))
    assert frame.is_identity()
    assert inversion_word(frame, flip=False) == ()
    assert inversion_word(frame, flip=True) == (Gate("x", 2),)


# -- circuit sampling -------------------------------------------------------------


def test_sample_circuit_is_seed_deterministic():
    a = sample_circuit(5, None, np.random.default_rng(42))
    b = sample_circuit(5, None, np.random.default_rng(42))
    assert a == b


def test_single_gate_circuit_verified_against_unitary_oracle():
    circuit = sample_circuit(1, None, np.random.default_rng(7))
    p_dark, p_bright = noiseless_outcome_probability(circuit)
    expected = p_bright if circuit.target_bit == 1 else p_dark
    assert expected == pytest.approx(1.0, abs=1e-12)


def test_sampled_circuits_simulate_to_target_bit():
    rng = np.random.default_rng(2)
    for _ in range(500):
        m = int(rng.integers(1, 65))
        circuit = sample_circuit(m, None, rng)
        assert len(circuit.inversion) <= 3
        p_dark, p_bright = noiseless_outcome_probability(circuit)
        expected = p_bright if circuit.target_bit == 1 else p_dark
        assert expected == pytest.approx(1.0, abs=1e-9)


def test_target_bits_are_balanced():
    rng = np.random.default_rng(3)
    n = 4000
    ones = sum(sample_circuit(3, None, rng).target_bit for _ in range(n))
    sigma = math.sqrt(0.25 / n)
    assert abs(ones / n - 0.5) < 3 * sigma


def test_omega_weights_restrict_the_sampled_gates():
    omega = {Gate("x", 2): 0.5, Gate("y", 2): 0.5}
    rng = np.random.default_rng(11)
    for _ in range(50):
        circuit = sample_circuit(8, omega, rng)
        assert set(circuit.gates) <= set(omega)


def test_design_validation():
    with pytest.raises(ValueError):
        RbDesign(lengths=(4, 2))
    with pytest.raises(ValueError):
        RbDesign(lengths=())
    with pytest.raises(ValueError):
        RbDesign(omega={Gate("x", 1): 0.5})
    with pytest.raises(ValueError):
        sample_circuit(0, None, np.random.default_rng(0))


def test_default_design_is_the_exponential_ladder():
    design = RbDesign()
    assert design.lengths == (1, 2, 4, 8, 16, 32, 64, 128, 256, 512, 1024)
    assert design.circuits_per_length == 10
    assert design.samples_per_circuit == 100


# -- design execution ----------------------------------------------------------------


def test_noiseless_execution_survives_at_every_length():
    design = RbDesign(lengths=(1, 2, 4, 8), circuits_per_length=3,
                      samples_per_circuit=20, seed=5)
    data = ListDataContext()
    survival = execute_design(design, ideal_op(), data)
    assert all(s == 1.0 for row in survival.survival for s in row)
    assert len(data.blocks) == 4 * 3


def test_contraction_noise_decays_survival_as_expected():
    p_dep = 0.01
    design = RbDesign(lengths=(1, 2, 4, 8, 16, 32), circuits_per_length=10,
                      samples_per_circuit=100, seed=9)
    noise = NoiseModel(prep_error=0.0, bright_mean=1000.0, dark_mean=0.0,
                       detect_threshold=50, depol_per_gate=p_dep)
    survival = execute_design(design, DirectPhysicsOperation(noise=noise, seed=1),
                              ListDataContext())
    n = design.circuits_per_length * design.samples_per_circuit
    for m, row in zip(design.lengths, survival.survival):
        expected = 0.5 + 0.5 * (1 - p_dep) ** m
        sigma = math.sqrt(0.25 / n)
        assert abs(float(np.mean(row)) - expected) < 3 * sigma + 0.01


# -- decay fit ---------------------------------------------------------------------------


def synthetic_survival(B, p, lengths=(1, 2, 4, 8, 16, 32, 64, 128, 256, 512, 1024)):
    return SurvivalData(tuple(lengths),
                        [[0.5 + B * p**m] * 5 for m in lengths])


def test_synthetic_fit_recovers_parameters_exactly():
    fit = fit_decay(synthetic_survival(0.48, 0.995), bootstrap_replicates=50)
    assert abs(fit.B - 0.48) <= 1e-6
    assert abs(fit.p - 0.995) <= 1e-6


def test_unit_p_gives_zero_error_per_gate():
    fit = fit_decay(synthetic_survival(0.5, 1.0), bootstrap_replicates=10)
    assert fit.p == pytest.approx(1.0, abs=1e-9)
    assert fit.r == pytest.approx(0.0, abs=1e-9)
    assert error_per_gate(1.0) == 0.0


def test_fit_reproduces_reported_error_per_gate():
    # survival generated from p = 1 - 3r/4 must fit back to the same r
    r = 1.45e-4
    fit = fit_decay(synthetic_survival(0.5, 1.0 - 3.0 * r / 4.0),
                    bootstrap_replicates=10)
    assert fit.r == pytest.approx(r, rel=1e-6)


def test_fit_degenerate_without_signal():
    flat = SurvivalData((1, 2, 4), [[0.5, 0.49], [0.48, 0.5], [0.47, 0.5]])
    with pytest.raises(FitDegenerate):
        fit_decay(flat, bootstrap_replicates=10)


def test_fit_needs_three_distinct_lengths():
    with pytest.raises(ValueError):
        fit_decay(SurvivalData((1, 2), [[1.0], [0.9]]))


def test_fit_bootstrap_is_seed_deterministic():
    rng = np.random.default_rng(4)
    data = SurvivalData(
        (1, 2, 4, 8, 16, 32),
        [[0.5 + 0.49 * 0.99**m + rng.normal(0, 0.01) for _ in range(10)]
         for m in (1, 2, 4, 8, 16, 32)])
    a = fit_decay(data, bootstrap_replicates=200, seed=3)
    b = fit_decay(data, bootstrap_replicates=200, seed=3)
    assert (a.B, a.p, a.r, a.ci_low, a.ci_high, a.p_std) == \
        (b.B, b.p, b.r, b.ci_low, b.ci_high, b.p_std)
    assert a.ci_low <= a.r <= a.ci_high


# -- calibration clients -------------------------------------------------------------------


def test_rabi_scan_recovers_true_frequency_despite_stale_calibration():
    true_hz, cal_hz = 50_000.0, 47_500.0
    op = ideal_op(seed=21, miscal_ratio=true_hz / cal_hz)
    durations = np.linspace(0.0, 1.0 / cal_hz, 20)
    fit = rabi_scan(op, ListDataContext(), durations, 100,
                    assumed_rabi_hz=cal_hz)
    assert fit.rabi_hz == pytest.approx(true_hz, rel=0.02)


def test_rabi_pi_time_definition():
    assert 1.0 / (2.0 * 50_000.0) == pytest.approx(10e-6)


def test_rabi_scan_degenerate_without_oscillation():
    with pytest.raises(FitDegenerate):
        rabi_scan(FlatOperation(), ListDataContext(),
                  np.linspace(0, 2e-5, 12), 50, assumed_rabi_hz=50_000.0)


def test_ramsey_scan_recovers_detuning():
    op = ideal_op(seed=13, detuning_hz=1000.0)
    delays = np.linspace(0.0, 2e-3, 40)
    fit = ramsey_scan(op, ListDataContext(), delays, 200)
    assert fit.detuning_hz == pytest.approx(1000.0, rel=0.01)


def test_ramsey_zero_detuning_is_flat_and_bright():
    op = ideal_op(seed=17, detuning_hz=0.0)
    delays = np.linspace(0.0, 2e-3, 12)
    with pytest.raises(FitDegenerate):
        ramsey_scan(op, ListDataContext(), delays, 100)
    # the flat level itself is full bright-state probability
    data = ListDataContext()
    data.open()
    for _ in range(100):
        op.prep_0()
        op.ry(math.pi / 2)
        op.wait(1e-3)
        op.ry(math.pi / 2)
        data.push(op.measure())
    data.close()
    assert data.histogram() == {1: 100}


def test_ramsey_at_nyquist_warns_about_aliasing():
    spacing = 5e-4  # Nyquist limit 1 kHz
    op = ideal_op(seed=19, detuning_hz=1000.0)
    delays = np.arange(16) * spacing
    with pytest.warns(AliasWarning):
        ramsey_scan(op, ListDataContext(), delays, 400)


def test_pi_train_exact_time_stays_bright_and_uncorrected():
    op = ideal_op(seed=23)
    fit = pi_train_calibration(op, ListDataContext(), [1, 3, 5, 7, 9], 100,
                               nominal_pi_time_s=10e-6)
    assert all(f == 1.0 for f in fit.fractions)
    assert fit.fractional_error == pytest.approx(0.0, abs=1e-6)
    assert fit.corrected_pi_time_s == pytest.approx(10e-6)


def test_pi_train_recovers_one_percent_overrotation():
    op = ideal_op(seed=29, miscal_ratio=1.01)
    lengths = [1, 9, 17, 25, 33, 41]
    fit = pi_train_calibration(op, ListDataContext(), lengths, 400,
                               nominal_pi_time_s=10e-6)
    assert fit.fractional_error == pytest.approx(0.01, rel=0.10)
    assert fit.corrected_pi_time_s == pytest.approx(10e-6 / 1.01, rel=0.002)


def test_pi_train_resolves_underrotation_sign():
    op = ideal_op(seed=31, miscal_ratio=0.99)
    lengths = [1, 9, 17, 25, 33, 41]
    fit = pi_train_calibration(op, ListDataContext(), lengths, 400,
                               nominal_pi_time_s=10e-6)
    assert fit.fractional_error == pytest.approx(-0.01, rel=0.15)


def test_pi_train_rejects_even_or_zero_lengths():
    with pytest.raises(ValueError):
        pi_train_calibration(ideal_op(), ListDataContext(), [0], 10, 1e-5)
    with pytest.raises(ValueError):
        pi_train_calibration(ideal_op(), ListDataContext(), [2, 4], 10, 1e-5)

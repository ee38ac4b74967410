"""Shared test fixtures: an independent unitary oracle and direct-physics
interface implementations that bypass the timeline."""

from __future__ import annotations

import math

import numpy as np

from qctl.framework import DataContextInterface, OperationInterface
from qctl.physics import (
    NoiseModel,
    QubitState,
    apply_depolarizing,
    apply_rotation,
    classify,
    measure,
    prepare_ground,
)

_SIGMA = {
    "x": np.array([[0, 1], [1, 0]], dtype=complex),
    "y": np.array([[0, -1j], [1j, 0]], dtype=complex),
    "z": np.array([[1, 0], [0, -1]], dtype=complex),
}
_PAULIS = (_SIGMA["x"], _SIGMA["y"], _SIGMA["z"])


def gate_unitary(axis: str, angle: float) -> np.ndarray:
    """U = cos(a/2) I + i sin(a/2) sigma; matches the package's Bloch convention."""
    return (math.cos(angle / 2.0) * np.eye(2, dtype=complex)
            + 1j * math.sin(angle / 2.0) * _SIGMA[axis])


def circuit_unitary(gates) -> np.ndarray:
    u = np.eye(2, dtype=complex)
    for gate in gates:
        u = gate_unitary(gate.axis, gate.angle) @ u
    return u


def bloch_matrix_of(u: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unitary by conjugation: R_ij = tr(s_i U s_j U+)/2."""
    r = np.empty((3, 3))
    for i in range(3):
        for j in range(3):
            r[i, j] = 0.5 * np.real(
                np.trace(_PAULIS[i] @ u @ _PAULIS[j] @ u.conj().T))
    return r


def noiseless_outcome_probability(circuit) -> tuple[float, float]:
    """(P(dark), P(bright)) of running the circuit on |0> without noise."""
    psi = circuit_unitary(circuit.all_gates) @ np.array([1.0, 0.0], dtype=complex)
    return float(abs(psi[0]) ** 2), float(abs(psi[1]) ** 2)


class DirectPhysicsOperation(OperationInterface):
    """Operation interface backed by bare physics, no event timeline.

    ``miscal_ratio`` models an angle-to-duration conversion based on a stale
    Rabi calibration: every requested rotation executes scaled by the ratio
    of true to calibrated Rabi frequency.
    """

    def __init__(self, noise: NoiseModel | None = None, seed: int = 0,
                 miscal_ratio: float = 1.0, detuning_hz: float = 0.0):
        self.noise = noise if noise is not None else NoiseModel(prep_error=0.0)
        self.rng = np.random.default_rng(seed)
        self.miscal_ratio = miscal_ratio
        self.detuning_hz = detuning_hz
        self.qubit = QubitState.ground()

    def prep_0(self):
        self.qubit = prepare_ground(self.noise, self.rng)

    def _rotate(self, axis, angle):
        self.qubit = apply_rotation(self.qubit, axis, angle * self.miscal_ratio)
        if self.noise.depol_per_gate > 0:
            self.qubit = apply_depolarizing(
                self.qubit, self.noise.depol_per_gate, self.rng,
                self.noise.depol_variant)

    def rx(self, angle):
        self._rotate("x", angle)

    def ry(self, angle):
        self._rotate("y", angle)

    def measure(self):
        count = measure(self.qubit, self.noise, 1.0, self.rng)
        return classify(count, self.noise)

    def num_qubits(self):
        return 1

    def wait(self, duration_s):
        self.qubit = apply_rotation(
            self.qubit, "z", 2.0 * math.pi * self.detuning_hz * duration_s)


class ListDataContext(DataContextInterface):
    """Minimal data context: blocks of bits, histogram of the last block."""

    def __init__(self):
        self.blocks: list[list[int]] = []
        self._current: list[int] | None = None

    def open(self):
        if self._current is not None:
            raise RuntimeError("block already open")
        self._current = []

    def push(self, bit):
        if self._current is None:
            raise RuntimeError("no open block")
        self._current.append(int(bit))

    def close(self):
        if self._current is None:
            raise RuntimeError("no open block")
        self.blocks.append(self._current)
        self._current = None

    def histogram(self):
        if not self.blocks:
            raise RuntimeError("no closed block")
        hist: dict[int, int] = {}
        for bit in self.blocks[-1]:
            hist[bit] = hist.get(bit, 0) + 1
        return hist


class FlatOperation(OperationInterface):
    """Degenerate system: every measurement returns dark."""

    def prep_0(self):
        pass

    def rx(self, angle):
        pass

    def ry(self, angle):
        pass

    def measure(self):
        return 0

    def num_qubits(self):
        return 1

    def wait(self, duration_s):
        pass

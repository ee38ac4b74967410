"""Portable clients: Direct randomized benchmarking and calibration scans.

All clients drive a system exclusively through the operation and data-context
interfaces, so they run unchanged on any system implementing them. Direct RB
samples native X/Y quarter-turn gates from a distribution, tracks the
accumulated Clifford frame, and closes each circuit with a short inversion
word so the noiseless outcome is a known (randomized) bit. The survival decay
is fitted to ``P(m) = 0.5 + B p^m`` and the error per gate reported as
``r = 4 (1 - p) / 3``.
"""

from __future__ import annotations

import math
import warnings
from collections import deque
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import curve_fit, minimize_scalar

from .framework import (
    DATA_CONTEXT,
    OPERATION,
    DataContextInterface,
    OperationInterface,
    Registry,
)
from .physics import rotation_matrix


class FitDegenerate(Exception):
    """The data carries no usable signal for the requested fit."""


class AliasWarning(UserWarning):
    """A fitted frequency sits at or beyond the scan's Nyquist limit."""


@dataclass(frozen=True)
class Gate:
    """One native gate: an X or Y rotation by 1..3 quarter turns."""

    axis: str
    quarter_turns: int

    def __post_init__(self):
        if self.axis not in ("x", "y"):
            raise ValueError("gate axis must be 'x' or 'y'")
        if self.quarter_turns not in (1, 2, 3):
            raise ValueError("quarter_turns must be 1, 2 or 3")

    @property
    def angle(self) -> float:
        return self.quarter_turns * math.pi / 2.0


NATIVE_GATES = tuple(Gate(axis, q) for axis in ("x", "y") for q in (1, 2, 3))


def _int_rotation(gate: Gate) -> tuple:
    m = np.rint(rotation_matrix(gate.axis, gate.angle)).astype(int)
    return tuple(map(tuple, m))


def _matmul(a: tuple, b: tuple) -> tuple:
    return tuple(
        tuple(sum(a[i][k] * b[k][j] for k in range(3)) for j in range(3))
        for i in range(3))


def _transpose(a: tuple) -> tuple:
    return tuple(tuple(a[j][i] for j in range(3)) for i in range(3))


def _build_group():
    """Enumerate the 24-element frame group and shortest native words via BFS."""
    identity = tuple(tuple(int(i == j) for j in range(3)) for i in range(3))
    gate_mats = [_int_rotation(g) for g in NATIVE_GATES]
    elements = [identity]
    index = {identity: 0}
    words = {0: ()}
    queue = deque([identity])
    while queue:
        m = queue.popleft()
        for gi, gm in enumerate(gate_mats):
            n = _matmul(gm, m)
            if n not in index:
                index[n] = len(elements)
                elements.append(n)
                words[index[n]] = words[index[m]] + (NATIVE_GATES[gi],)
                queue.append(n)
    assert len(elements) == 24
    assert max(len(w) for w in words.values()) <= 3
    apply = [[index[_matmul(gm, m)] for m in elements] for gm in gate_mats]
    compose = [[index[_matmul(a, b)] for b in elements] for a in elements]
    inverse = [index[_transpose(m)] for m in elements]
    return elements, index, words, apply, compose, inverse


_ELEMENTS, _INDEX, _WORDS, _APPLY, _COMPOSE, _INVERSE = _build_group()
_GATE_POS = {gate: i for i, gate in enumerate(NATIVE_GATES)}
_ID_IDX = 0
_XPI_IDX = _INDEX[_int_rotation(Gate("x", 2))]


@dataclass(frozen=True)
class CliffordFrame:
    """Accumulated Bloch rotation of a gate sequence, as a group index."""

    index: int = _ID_IDX

    def then(self, gate: Gate) -> "CliffordFrame":
        return CliffordFrame(_APPLY[_GATE_POS[gate]][self.index])

    @property
    def matrix(self) -> np.ndarray:
        return np.array(_ELEMENTS[self.index])

    def is_identity(self) -> bool:
        return self.index == _ID_IDX


def inversion_word(frame: CliffordFrame, flip: bool) -> tuple[Gate, ...]:
    """Shortest native word mapping ``frame`` to identity (or to X(pi))."""
    target = _XPI_IDX if flip else _ID_IDX
    return _WORDS[_COMPOSE[target][_INVERSE[frame.index]]]


@dataclass(frozen=True)
class RbCircuit:
    """Sampled core gates plus the inversion word and the expected outcome."""

    gates: tuple[Gate, ...]
    inversion: tuple[Gate, ...]
    target_bit: int

    @property
    def all_gates(self) -> tuple[Gate, ...]:
        return self.gates + self.inversion


@dataclass
class RbDesign:
    """Shape of a Direct RB experiment."""

    lengths: tuple[int, ...] = (1, 2, 4, 8, 16, 32, 64, 128, 256, 512, 1024)
    circuits_per_length: int = 10
    samples_per_circuit: int = 100
    omega: dict[Gate, float] | None = None
    seed: int = 0

    def __post_init__(self):
        self.lengths = tuple(self.lengths)
        if not self.lengths or any(m < 1 for m in self.lengths):
            raise ValueError("lengths must be positive")
        if list(self.lengths) != sorted(set(self.lengths)):
            raise ValueError("lengths must be strictly increasing")
        if self.circuits_per_length < 1 or self.samples_per_circuit < 1:
            raise ValueError("circuits and samples per circuit must be >= 1")
        _omega_probabilities(self.omega)

    def probabilities(self) -> np.ndarray | None:
        return _omega_probabilities(self.omega)


def _omega_probabilities(omega: dict[Gate, float] | None) -> np.ndarray | None:
    if omega is None:
        return None  # uniform
    if set(omega) - set(NATIVE_GATES):
        raise ValueError("omega assigns weight outside the native set")
    probs = np.array([omega.get(g, 0.0) for g in NATIVE_GATES])
    if np.any(probs < 0) or not math.isclose(float(probs.sum()), 1.0,
                                             abs_tol=1e-9):
        raise ValueError("omega must be a probability distribution")
    return probs


def sample_circuit(m: int, omega: dict[Gate, float] | None,
                   rng: np.random.Generator) -> RbCircuit:
    """Draw ``m`` gates i.i.d. from omega and append the inversion word.

    The inversion maps the tracked frame to identity or to X(pi), chosen
    uniformly, which randomizes the expected outcome bit.
    """
    if m < 1:
        raise ValueError("circuit length must be >= 1")
    picks = rng.choice(len(NATIVE_GATES), size=m, p=_omega_probabilities(omega))
    frame = CliffordFrame()
    gates = []
    for pick in picks:
        gate = NATIVE_GATES[pick]
        gates.append(gate)
        frame = frame.then(gate)
    flip = bool(rng.integers(0, 2))
    word = inversion_word(frame, flip)
    # closed-form check: the full product must land on the chosen target
    final = frame
    for gate in word:
        final = final.then(gate)
    assert final.index == (_XPI_IDX if flip else _ID_IDX)
    return RbCircuit(tuple(gates), word, int(flip))


@dataclass
class SurvivalData:
    """Per-length, per-circuit survival fractions."""

    lengths: tuple[int, ...]
    survival: list[list[float]]

    def means(self) -> np.ndarray:
        return np.array([float(np.mean(row)) for row in self.survival])


def resolve_client_interfaces(registry: Registry,
                              operation_name: str | None = None,
                              data_context_name: str | None = None
                              ) -> tuple[OperationInterface, DataContextInterface]:
    """Obtain the two client interfaces through the registry, nothing else."""
    if not registry.find_interface(OPERATION):
        raise LookupError("system implements no operation interface")
    if not registry.find_interface(DATA_CONTEXT):
        raise LookupError("system implements no data-context interface")
    op = registry.get_interface(OPERATION, operation_name)
    data = registry.get_interface(DATA_CONTEXT, data_context_name)
    return op, data


def _apply_gate(op: OperationInterface, gate: Gate) -> None:
    if gate.axis == "x":
        op.rx(gate.angle)
    else:
        op.ry(gate.angle)


def _collect_block(op: OperationInterface, data: DataContextInterface,
                   shots: int, body: Callable[[], None]) -> dict[int, int]:
    data.open()
    for _ in range(shots):
        body()
        data.push(op.measure())
    data.close()
    return data.histogram()


def execute_design(design: RbDesign, op: OperationInterface,
                   data: DataContextInterface) -> SurvivalData:
    """Run every circuit of the design through the interfaces.

    Survival at length m is the per-circuit fraction of samples matching the
    circuit's expected outcome bit.
    """
    rng = np.random.default_rng(design.seed)
    survival: list[list[float]] = []
    for m in design.lengths:
        row = []
        for _ in range(design.circuits_per_length):
            circuit = sample_circuit(m, design.omega, rng)

            def shot(circuit=circuit):
                op.prep_0()
                for gate in circuit.all_gates:
                    _apply_gate(op, gate)

            hist = _collect_block(op, data, design.samples_per_circuit, shot)
            total = sum(hist.values())
            row.append(hist.get(circuit.target_bit, 0) / total)
        survival.append(row)
    return SurvivalData(design.lengths, survival)


# -- decay fitting -----------------------------------------------------------------


@dataclass
class RbFit:
    """Fitted decay ``P(m) = 0.5 + B p^m`` and the derived error per gate."""

    B: float
    p: float
    r: float
    ci_low: float
    ci_high: float
    p_std: float

    def as_dict(self) -> dict:
        return {"B": self.B, "p": self.p, "r": self.r,
                "ci_low": self.ci_low, "ci_high": self.ci_high,
                "p_std": self.p_std}


def _fit_point(lengths: np.ndarray, means: np.ndarray) -> tuple[float, float]:
    """Bounded least squares of 0.5 + B p^m via variable projection.

    The model is linear in B, so for each decay base the optimal amplitude is
    closed-form and the problem reduces to a one-dimensional search over
    p in [0, 1] (coarse grid, then bounded Brent refinement). This finds the
    same optimum as a generic trust-region fit at a fraction of the cost,
    which matters for the bootstrap.
    """
    excess = means - 0.5
    if np.all(excess <= 0):
        raise FitDegenerate("all survival fractions at or below 0.5")

    def projected(p: float) -> tuple[float, float]:
        u = np.power(p, lengths)
        uu = float(u @ u)
        amp = float(excess @ u) / uu if uu > 0 else 0.0
        amp = min(max(amp, 0.0), 1.0)
        r = excess - amp * u
        return float(r @ r), amp

    grid = np.linspace(0.0, 1.0, 65)
    powers = np.power(grid[:, None], lengths[None, :])
    norms = np.einsum("ij,ij->i", powers, powers)
    amps = np.clip(np.where(norms > 0, powers @ excess, 0.0)
                   / np.where(norms > 0, norms, 1.0), 0.0, 1.0)
    residuals = excess[None, :] - amps[:, None] * powers
    k = int(np.argmin(np.einsum("ij,ij->i", residuals, residuals)))
    lo, hi = grid[max(k - 1, 0)], grid[min(k + 1, len(grid) - 1)]
    result = minimize_scalar(lambda p: projected(p)[0], bounds=(lo, hi),
                             method="bounded", options={"xatol": 1e-12})
    p = float(result.x)
    # bounded Brent never evaluates the exact endpoints; cover them too
    for candidate in (lo, hi, 0.0, 1.0):
        if projected(candidate)[0] < projected(p)[0]:
            p = candidate
    if 0.0 < p < 1.0:
        # parabolic polish: Brent's termination floors near sqrt(eps)
        for h in (1e-7, 1e-9):
            if not h < p < 1.0 - h:
                continue
            c0 = projected(p)[0]
            cm = projected(p - h)[0]
            cp = projected(p + h)[0]
            curve = cm - 2.0 * c0 + cp
            if curve > 0.0:
                vertex = p + 0.5 * h * (cm - cp) / curve
                if 0.0 < vertex < 1.0 and projected(vertex)[0] <= c0:
                    p = vertex
    _, B = projected(p)
    return B, p


def error_per_gate(p: float) -> float:
    return 4.0 * (1.0 - p) / 3.0


def fit_decay(survival: SurvivalData, *, bootstrap_replicates: int = 1000,
              seed: int = 0) -> RbFit:
    """Least-squares decay fit with a bootstrap over circuits.

    Circuits are the independent units of the design, so each replicate
    resamples whole circuits per length; the 10th/90th percentiles of the
    replicated error-per-gate bound the confidence interval.
    """
    if len(set(survival.lengths)) < 3:
        raise ValueError("need at least 3 distinct lengths to fit a decay")
    lengths = np.array(survival.lengths, dtype=float)
    B, p = _fit_point(lengths, survival.means())
    rng = np.random.default_rng(seed)
    rows = [np.array(row, dtype=float) for row in survival.survival]
    replicates_p, replicates_r = [], []
    for _ in range(bootstrap_replicates):
        means = np.array([
            float(np.mean(rng.choice(row, size=row.size, replace=True)))
            for row in rows])
        try:
            _, p_rep = _fit_point(lengths, means)
        except (FitDegenerate, RuntimeError):
            continue
        replicates_p.append(p_rep)
        replicates_r.append(error_per_gate(p_rep))
    if replicates_r:
        ci_low, ci_high = np.percentile(replicates_r, [10.0, 90.0])
        p_std = float(np.std(replicates_p))
    else:
        ci_low = ci_high = error_per_gate(p)
        p_std = 0.0
    return RbFit(B, p, error_per_gate(p), float(ci_low), float(ci_high), p_std)


def rb_results_document(survival: SurvivalData, fit: RbFit) -> dict:
    """The RB results file: lengths, per-circuit survival, and the fit."""
    return {
        "lengths": list(survival.lengths),
        "survival": [list(row) for row in survival.survival],
        "fit": {"B": fit.B, "p": fit.p, "r": fit.r,
                "ci_low": fit.ci_low, "ci_high": fit.ci_high},
    }


def rb_curve_rows(survival: SurvivalData) -> list[tuple[int, float, float, float]]:
    """Plot-data rows (length, mean, ci_low, ci_high); the bounds are the
    10th/90th percentiles over circuits at each length."""
    rows = []
    for m, circuits in zip(survival.lengths, survival.survival):
        low, high = np.percentile(circuits, [10.0, 90.0])
        rows.append((m, float(np.mean(circuits)), float(low), float(high)))
    return rows


# -- calibration clients ---------------------------------------------------------------


@dataclass
class RabiFit:
    rabi_hz: float
    amplitude: float
    offset: float
    durations_s: tuple[float, ...]
    fractions: tuple[float, ...]


@dataclass
class RamseyFit:
    detuning_hz: float
    amplitude: float
    offset: float
    delays_s: tuple[float, ...]
    fractions: tuple[float, ...]


@dataclass
class PiTrainFit:
    fractional_error: float
    corrected_pi_time_s: float
    train_lengths: tuple[int, ...]
    fractions: tuple[float, ...]


def _bright_fraction(hist: dict[int, int]) -> float:
    total = sum(hist.values())
    return hist.get(1, 0) / total


def _noise_floor(shots: int) -> float:
    # resolvable amplitude: several binomial sigmas, at least a few percent
    return max(0.05, 6.0 * math.sqrt(0.25 / shots))


def _fft_peak_hz(x: np.ndarray, y: np.ndarray) -> float:
    dt = float(np.mean(np.diff(x)))
    spectrum = np.abs(np.fft.rfft(y - np.mean(y)))
    freqs = np.fft.rfftfreq(len(y), dt)
    return float(freqs[1 + int(np.argmax(spectrum[1:]))])


def rabi_scan(op: OperationInterface, data: DataContextInterface,
              durations_s: Sequence[float], samples_per_point: int,
              assumed_rabi_hz: float) -> RabiFit:
    """Scan microwave pulse duration and fit the resulting oscillation.

    Pulses are requested as rotation angles at the assumed Rabi frequency (the
    current best estimate); the fitted oscillation frequency is the actual
    Rabi frequency regardless of that assumption.
    """
    durations = np.array([float(t) for t in durations_s])
    if durations.size < 4 or np.any(durations < 0):
        raise ValueError("need at least 4 non-negative durations")
    fractions = []
    for t in durations:
        angle = 2.0 * math.pi * assumed_rabi_hz * t

        def shot(angle=angle):
            op.prep_0()
            if angle > 0:
                op.rx(angle)

        fractions.append(_bright_fraction(
            _collect_block(op, data, samples_per_point, shot)))
    y = np.array(fractions)
    if float(np.ptp(y)) < _noise_floor(samples_per_point):
        raise FitDegenerate("oscillation amplitude below the noise floor")

    def model(t, amplitude, f, offset):
        return amplitude * np.sin(math.pi * f * t) ** 2 + offset

    p0 = [float(np.ptp(y)), _fft_peak_hz(durations, y), float(np.min(y))]
    params, _ = curve_fit(model, durations, y, p0=p0,
                          bounds=([0.0, 0.0, 0.0], [1.0, np.inf, 1.0]),
                          maxfev=5000)
    return RabiFit(float(params[1]), float(params[0]), float(params[2]),
                   tuple(durations), tuple(fractions))


def ramsey_scan(op: OperationInterface, data: DataContextInterface,
                delays_s: Sequence[float],
                samples_per_point: int) -> RamseyFit:
    """pi/2 - wait T - pi/2 fringes; the fitted fringe frequency is the detuning."""
    delays = np.array([float(t) for t in delays_s])
    if delays.size < 4 or np.any(delays < 0):
        raise ValueError("need at least 4 non-negative delays")
    fractions = []
    for t in delays:
        def shot(t=t):
            op.prep_0()
            op.ry(math.pi / 2.0)
            if t > 0:
                op.wait(t)
            op.ry(math.pi / 2.0)

        hist = _collect_block(op, data, samples_per_point, shot)
        fractions.append(_bright_fraction(hist))
    y = np.array(fractions)
    if float(np.ptp(y)) < _noise_floor(samples_per_point):
        raise FitDegenerate("fringe contrast below the noise floor")

    def model(t, amplitude, f, phase, offset):
        return amplitude * np.cos(2.0 * math.pi * f * t + phase) + offset

    p0 = [float(np.ptp(y)) / 2.0, _fft_peak_hz(delays, y), 0.0,
          float(np.mean(y))]
    params, _ = curve_fit(model, delays, y, p0=p0,
                          bounds=([0.0, 0.0, -math.pi, 0.0],
                                  [1.0, np.inf, math.pi, 1.0]), maxfev=5000)
    detuning = float(params[1])
    nyquist = 0.5 / float(np.median(np.diff(delays)))
    if detuning >= 0.95 * nyquist:
        warnings.warn(f"fitted detuning {detuning:.3g} Hz is at the scan's "
                      f"Nyquist limit {nyquist:.3g} Hz", AliasWarning,
                      stacklevel=2)
    return RamseyFit(detuning, float(params[0]), float(params[3]),
                     tuple(delays), tuple(fractions))


def pi_train_calibration(op: OperationInterface, data: DataContextInterface,
                         train_lengths: Sequence[int], samples_per_point: int,
                         nominal_pi_time_s: float) -> PiTrainFit:
    """Amplify a pi-time miscalibration with odd trains of nominal pi pulses.

    An odd train leaves the qubit in the excited (bright) state when the pi
    time is exact; a fractional error ``e`` decays the bright fraction as
    cos^2(n pi e / 2). One probe block with rescaled pulses resolves the sign
    of the error, which the probability data alone cannot.
    """
    lengths = [int(n) for n in train_lengths]
    if not lengths or any(n < 1 or n % 2 == 0 for n in lengths):
        raise ValueError("train lengths must be positive odd integers")
    if nominal_pi_time_s <= 0:
        raise ValueError("nominal_pi_time_s must be > 0")

    def train_fraction(n, scale=1.0):
        def shot():
            op.prep_0()
            for _ in range(n):
                op.rx(math.pi * scale)

        return _bright_fraction(
            _collect_block(op, data, samples_per_point, shot))

    fractions = [train_fraction(n) for n in lengths]
    x = np.array(lengths, dtype=float)
    y = np.array(fractions)
    if np.all(y <= 0.5):
        raise FitDegenerate("no bright signal in any pi train")

    # The offset is exactly 0.5: preparation flips, depolarizing, and
    # detection contrast all scale the amplitude symmetrically. Leaving it
    # free makes the fit nearly degenerate at small angle errors.
    def model(n, amplitude, err):
        return amplitude * np.cos(n * err) + 0.5

    a0 = max(float(y[0] - 0.5), 0.05)
    ratio = float(np.clip((y[-1] - 0.5) / a0, -1.0, 1.0))
    err0 = math.acos(ratio) / float(x[-1])
    yc = np.clip(y, 1e-3, 1.0 - 1e-3)
    sigma = np.sqrt(yc * (1.0 - yc) / samples_per_point)
    params, _ = curve_fit(model, x, y, p0=[a0, err0], sigma=sigma,
                          absolute_sigma=True,
                          bounds=([0.0, 0.0], [0.6, math.pi / max(lengths)]),
                          maxfev=5000)
    eps = float(params[1]) / math.pi  # |fractional pi-time error|
    if eps > 1e-9:
        # Sign probe: shorten the requested angle by the fitted error. If the
        # pulses were over-rotating, this lands closer to a true pi pulse.
        n_probe = max(lengths)
        baseline = fractions[-1]
        probed = train_fraction(n_probe, scale=1.0 / (1.0 + eps))
        if probed < baseline:
            eps = -eps
    return PiTrainFit(eps, nominal_pi_time_s / (1.0 + eps),
                      tuple(lengths), tuple(fractions))

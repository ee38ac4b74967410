"""Single-ion qubit backend: Bloch vector, Rabi dynamics, noise, detection.

Sign convention, fixed once: a rotation by angle ``theta`` about an axis maps
the Bloch vector through ``R_axis(-theta)`` (right-handed on state vectors,
i.e. the unitary ``cos(theta/2) I + i sin(theta/2) sigma_axis``). The excited
state sits at ``z = -1`` and fluoresces during detection; the ground state
(``z = +1``) is dark.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

AXES = ("x", "y", "z")


@dataclass
class QubitState:
    """Bloch-vector state of one qubit."""

    bloch: np.ndarray = field(
        default_factory=lambda: np.array([0.0, 0.0, 1.0]))

    def __post_init__(self):
        self.bloch = np.asarray(self.bloch, dtype=float)
        if self.bloch.shape != (3,):
            raise ValueError("bloch vector must have three components")
        if float(self.bloch @ self.bloch) > 1.0 + 1e-12:
            raise ValueError("bloch vector norm exceeds 1")

    @classmethod
    def ground(cls) -> "QubitState":
        return cls(np.array([0.0, 0.0, 1.0]))

    @classmethod
    def excited(cls) -> "QubitState":
        return cls(np.array([0.0, 0.0, -1.0]))

    @property
    def z(self) -> float:
        return float(self.bloch[2])


@dataclass
class NoiseModel:
    """SPAM and per-gate noise parameters of a simulated system.

    ``bright_mean``/``dark_mean`` are expected photon counts over one
    reference detection window; a count strictly above ``detect_threshold``
    classifies as bright. With the defaults (20 / 0.5 / 4) the exact Poisson
    misclassification probability is below 1e-3 on both sides.
    """

    depol_per_gate: float = 0.0
    prep_error: float = 0.005
    bright_mean: float = 20.0
    dark_mean: float = 0.5
    detect_threshold: int = 4
    depol_variant: str = "contraction"

    def __post_init__(self):
        if not 0.0 <= self.depol_per_gate <= 1.0:
            raise ValueError("depol_per_gate must be in [0, 1]")
        if not 0.0 <= self.prep_error <= 1.0:
            raise ValueError("prep_error must be in [0, 1]")
        if not self.bright_mean > self.dark_mean >= 0.0:
            raise ValueError("require bright_mean > dark_mean >= 0")
        if self.detect_threshold < 1:
            raise ValueError("detect_threshold must be >= 1")
        if self.depol_variant not in ("contraction", "stochastic"):
            raise ValueError("depol_variant must be contraction or stochastic")


@dataclass
class DriveParams:
    """Microwave drive parameters: Rabi frequency, detuning, transition."""

    rabi_hz: float
    detuning_hz: float = 0.0
    qubit_freq_hz: float = 12.642812e9

    def __post_init__(self):
        if not self.rabi_hz > 0:
            raise ValueError("rabi_hz must be > 0")


@lru_cache(maxsize=256)
def _rotation_matrix(axis: str, angle: float) -> np.ndarray:
    # gate angles repeat heavily; cached matrices are frozen against mutation
    c, s = math.cos(angle), math.sin(angle)
    if axis == "x":
        m = np.array([[1.0, 0.0, 0.0], [0.0, c, s], [0.0, -s, c]])
    elif axis == "y":
        m = np.array([[c, 0.0, -s], [0.0, 1.0, 0.0], [s, 0.0, c]])
    elif axis == "z":
        m = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
    else:
        raise ValueError(f"unknown rotation axis {axis!r}")
    m.setflags(write=False)
    return m


def rotation_matrix(axis: str, angle: float) -> np.ndarray:
    """Bloch-space matrix for a rotation by ``angle`` about ``axis``."""
    if not math.isfinite(angle):
        raise ValueError("rotation angle must be finite")
    return _rotation_matrix(axis, angle)


def apply_rotation(q: QubitState, axis: str, angle: float) -> QubitState:
    return QubitState(rotation_matrix(axis, angle) @ q.bloch)


def apply_depolarizing(q: QubitState, p: float,
                       rng: np.random.Generator | None = None,
                       variant: str = "contraction") -> QubitState:
    """Depolarize with strength ``p``.

    ``contraction`` scales the Bloch vector by ``1 - p`` deterministically;
    ``stochastic`` replaces the state with the maximally mixed one with
    probability ``p``. Both channels have the same mean.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must be in [0, 1]")
    if variant == "contraction":
        return QubitState(q.bloch * (1.0 - p))
    if variant == "stochastic":
        if rng is None:
            raise ValueError("stochastic depolarizing needs an rng")
        if rng.random() < p:
            return QubitState(np.zeros(3))
        return QubitState(q.bloch.copy())
    raise ValueError(f"unknown depolarizing variant {variant!r}")


def rabi_flip_probability(drive: DriveParams, t: float) -> float:
    """Excitation probability after driving |0> for ``t`` seconds.

    Generalized Rabi formula: (W^2/(W^2+d^2)) sin^2(sqrt(W^2+d^2) t / 2) with
    W = 2 pi rabi_hz and d = 2 pi detuning_hz.
    """
    if t < 0:
        raise ValueError("t must be >= 0")
    omega = 2.0 * math.pi * drive.rabi_hz
    delta = 2.0 * math.pi * drive.detuning_hz
    total_sq = omega * omega + delta * delta
    return (omega * omega / total_sq) * math.sin(math.sqrt(total_sq) * t / 2.0) ** 2


def prepare_ground(noise: NoiseModel, rng: np.random.Generator) -> QubitState:
    """State preparation with a ``prep_error`` chance of starting flipped."""
    if rng.random() < noise.prep_error:
        return QubitState.excited()
    return QubitState.ground()


def measure(q: QubitState, noise: NoiseModel, window_scale: float,
            rng: np.random.Generator) -> int:
    """Fluorescence detection: sample a photon count and collapse the qubit.

    The excited manifold is bright with probability (1 - z)/2; the count is
    Poisson with mean ``window_scale`` times the reference bright/dark mean.
    """
    if not window_scale > 0:
        raise ValueError("window_scale must be > 0")
    p_bright = (1.0 - q.z) / 2.0
    bright = rng.random() < p_bright
    mean = noise.bright_mean if bright else noise.dark_mean
    count = int(rng.poisson(window_scale * mean)) if mean > 0 else 0
    q.bloch = np.array([0.0, 0.0, -1.0 if bright else 1.0])
    return count


def classify(count: int, noise: NoiseModel) -> int:
    """Threshold discrimination: 1 (bright) iff the count exceeds the threshold."""
    return 1 if count > noise.detect_threshold else 0

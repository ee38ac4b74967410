"""Simulated real-time device drivers: DDS, TTL output, photon counter.

Driver calls translate into timeline events on the core device. Device
programming time is modeled as cursor advancement, with the amount taken from
a :class:`DelayPolicy`: either one conservative worst-case delay for every
programming call, or a per-function table of empirically tuned delays.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

from .rtio import CoreState

# 32-bit frequency tuning word scale, AD9910-style 1 GHz sysclk.
_FTW_PER_HZ = (1 << 32) / 1e9

DEFAULT_WORST_CASE_MU = 200_000  # 200 us

DEFAULT_PER_FUNCTION = {
    ("dds", "set"): 1_500,
    ("ttl", "pulse"): 0,
}


class DelayMode(Enum):
    WORST_CASE = "worst_case"
    PER_FUNCTION = "per_function"


@dataclass
class DelayPolicy:
    """Programming-time compensation inserted on the event timeline.

    ``PER_FUNCTION`` entries missing from the table fall back to the worst
    case, so the table can never under-compensate relative to it.
    """

    mode: DelayMode = DelayMode.WORST_CASE
    worst_case_mu: int = DEFAULT_WORST_CASE_MU
    per_function: dict[tuple[str, str], int] = field(
        default_factory=lambda: dict(DEFAULT_PER_FUNCTION))

    def __post_init__(self):
        if isinstance(self.mode, str):
            self.mode = DelayMode(self.mode)
        if self.worst_case_mu < 0:
            raise ValueError("worst_case_mu must be >= 0")
        for key, value in self.per_function.items():
            if value < 0:
                raise ValueError(f"per-function delay for {key} must be >= 0")
            if value > self.worst_case_mu:
                raise ValueError(
                    f"per-function delay for {key} exceeds the worst case "
                    f"({value} > {self.worst_case_mu} mu)")

    def delay_mu(self, kind: str, function: str) -> int:
        if self.mode is DelayMode.WORST_CASE:
            return self.worst_case_mu
        return self.per_function.get((kind, function), self.worst_case_mu)


class _Device:
    kind = "device"

    def __init__(self, key: str, channel: int, core: CoreState,
                 access_hook: Callable[[str], None] | None = None):
        self.key = key
        self.channel = channel
        self.core = core
        self._access_hook = access_hook

    def _touch(self):
        if self._access_hook is not None:
            self._access_hook(self.key)

    def _post(self, payload: int):
        # Real kernels poll the RTIO counter when a FIFO backs up instead of
        # crashing; mirror that here so long pulse trains stay legal.
        self.core.wait_for_fifo_space(self.channel)
        self.core.post_output(self.channel, payload)


class DdsDevice(_Device):
    """Direct digital synthesizer output channel."""

    kind = "dds"

    def __init__(self, key, channel, core, policy: DelayPolicy,
                 access_hook=None):
        super().__init__(key, channel, core, access_hook)
        self.policy = policy
        self.freq_hz = 1e6
        self.phase_turns = 0.0
        self.amp_frac = 0.0
        self.last_program_mu: int | None = None

    def set(self, freq_hz: float, phase_turns: float, amp_frac: float) -> None:
        """Program frequency/phase/amplitude at the cursor, then pay the
        policy delay for the hardware to latch the registers."""
        self._touch()
        if not freq_hz > 0:
            raise ValueError("freq_hz must be > 0")
        if not 0.0 <= phase_turns < 1.0:
            raise ValueError("phase_turns must be in [0, 1)")
        if not 0.0 <= amp_frac <= 1.0:
            raise ValueError("amp_frac must be in [0, 1]")
        ftw = int(round(freq_hz * _FTW_PER_HZ))
        self._post(ftw)
        self.last_program_mu = self.core.now_mu()
        self.core.delay_mu(self.policy.delay_mu(self.kind, "set"))
        self.freq_hz = freq_hz
        self.phase_turns = phase_turns
        self.amp_frac = amp_frac


class TtlDevice(_Device):
    """Digital output line."""

    kind = "ttl"

    def __init__(self, key, channel, core, access_hook=None):
        super().__init__(key, channel, core, access_hook)
        self.state = False

    def on(self) -> None:
        self._touch()
        self._post(1)
        self.state = True

    def off(self) -> None:
        self._touch()
        self._post(0)
        self.state = False

    def pulse(self, duration_mu: int) -> None:
        """Rising edge at the cursor, falling edge ``duration_mu`` later."""
        if duration_mu <= 0:
            raise ValueError("pulse duration must be > 0")
        self.on()
        self.core.delay_mu(duration_mu)
        self.off()


@dataclass
class CountHandle:
    """Deferred photon count. Handles on one counter redeem in FIFO order."""

    core: CoreState
    channel: int

    def get(self) -> int:
        return self.core.read_input_count(self.channel)


class CounterDevice(_Device):
    """Photon-counter input channel backed by a detection callback."""

    kind = "counter"

    def __init__(self, key, channel, core, source: Callable[[int, int], int],
                 access_hook=None):
        super().__init__(key, channel, core, access_hook)
        self.source = source
        core.set_input_source(channel, self._fill)

    def _fill(self, start_mu: int, duration_mu: int) -> int:
        count = int(self.source(start_mu, duration_mu))
        if count < 0:
            raise ValueError("detection callback produced a negative count")
        return count

    def count_window(self, duration_mu: int) -> CountHandle:
        """Open a counting window at the cursor; redeem with ``CountHandle.get``."""
        self._touch()
        if duration_mu <= 0:
            raise ValueError("count window duration must be > 0")
        self.core.open_input_window(self.channel, duration_mu)
        return CountHandle(self.core, self.channel)

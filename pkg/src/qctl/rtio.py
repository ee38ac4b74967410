"""Simulated core device: wall clock, timeline cursor, and per-channel RTIO queues.

The core device executes kernels. A kernel places output events on a timeline
by moving an integer *cursor* (machine units, 1 mu = 1 ns) and posting events
at the cursor position, while a monotonically increasing *wall clock* models
the hardware consuming those events. The difference ``cursor - wall`` is the
slack; posting with negative slack is an underflow.
"""

from __future__ import annotations

import bisect
import json
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

I64_MIN = -(1 << 63)
I64_MAX = (1 << 63) - 1

PAYLOAD_MASK = 0xFFFFFFFF

DEFAULT_CPU_COST = {
    "event_post": 8,
    "input_read": 8,
    "arithmetic": 1,
    "rpc_sync_roundtrip": 2_000_000,
    "rpc_async_enqueue": 1_000,
}


class RtioError(Exception):
    """Base class for timeline errors raised by the core device.

    Carries the offending event coordinates when applicable; ``run_kernel``
    attaches the partial :class:`ExecutionRecord` as ``record`` before
    re-raising.
    """

    def __init__(self, message, *, channel=None, t_mu=None, payload=None,
                 slack_mu=None):
        super().__init__(message)
        self.channel = channel
        self.t_mu = t_mu
        self.payload = payload
        self.slack_mu = slack_mu
        self.record = None

    def as_dict(self) -> dict:
        d = {"type": type(self).__name__, "message": str(self)}
        for k in ("channel", "t_mu", "payload", "slack_mu"):
            v = getattr(self, k)
            if v is not None:
                d[k] = v
        return d


class ArithmeticOverflow(RtioError):
    """Timestamp arithmetic left the signed 64-bit range."""


class RtioUnderflow(RtioError):
    """An event was posted at a cursor position behind the wall clock."""


class SequenceError(RtioError):
    """An event was posted before the previous event on the same channel."""


class FifoOverflow(RtioError):
    """A channel output FIFO already holds ``fifo_depth`` pending events."""


class InputBufferOverflow(RtioError):
    """A channel already has ``input_buffer_capacity`` unread input windows."""


class NoWindowPending(RtioError):
    """An input read was issued with no window registered on the channel."""


def _checked(value: int) -> int:
    if value > I64_MAX or value < I64_MIN:
        raise ArithmeticOverflow(f"timestamp {value} outside signed 64-bit range")
    return value


@dataclass
class CoreConfig:
    """Static parameters of the simulated core device.

    ``cpu_cost`` maps instruction-class labels to the machine time the wall
    clock consumes per instruction. The absolute values are configuration,
    not hardware measurements.
    """

    ref_period_mu: int = 1
    fifo_depth: int = 64
    input_buffer_capacity: int = 64
    cpu_cost: dict[str, int] = field(default_factory=lambda: dict(DEFAULT_CPU_COST))
    initial_slack_mu: int = 125_000

    def __post_init__(self):
        if self.ref_period_mu < 1:
            raise ValueError("ref_period_mu must be >= 1")
        if self.fifo_depth < 1:
            raise ValueError("fifo_depth must be >= 1")
        if self.input_buffer_capacity < 1:
            raise ValueError("input_buffer_capacity must be >= 1")
        cost = dict(DEFAULT_CPU_COST)
        cost.update(self.cpu_cost)
        unknown = set(cost) - set(DEFAULT_CPU_COST)
        if unknown:
            raise ValueError(f"unknown cpu_cost classes: {sorted(unknown)}")
        if any(v < 0 for v in cost.values()):
            raise ValueError("cpu_cost values must be >= 0")
        if self.initial_slack_mu < 0:
            raise ValueError("initial_slack_mu must be >= 0")
        self.cpu_cost = cost


@dataclass(frozen=True)
class RtioEvent:
    """One scheduled output event: ``payload`` on ``channel`` at ``timestamp``."""

    channel: int
    timestamp: int
    payload: int

    def as_dict(self) -> dict:
        return {"channel": self.channel, "t_mu": self.timestamp,
                "payload": self.payload}


@dataclass
class InputWindow:
    start_mu: int
    end_mu: int
    result_count: int | None = None


@dataclass
class ChannelState:
    """Per-channel queues: pending output FIFO and unread input windows."""

    last_posted_mu: int | None = None
    pending_outputs: deque = field(default_factory=deque)
    input_windows: deque = field(default_factory=deque)


@dataclass
class ExecutionRecord:
    """Outcome of one kernel execution: elapsed machine time and event log."""

    t_exe_mu: int
    events: list
    error: dict | None = None

    def to_json(self) -> str:
        doc = {
            "t_exe_mu": self.t_exe_mu,
            "events": [e.as_dict() for e in self.events],
            "error": self.error,
        }
        return json.dumps(doc, sort_keys=True)


class CoreState:
    """Mutable state of one core device.

    Not thread-safe; one kernel executes against one core at a time. Distinct
    instances share nothing and may run concurrently.
    """

    def __init__(self, config: CoreConfig | None = None, num_channels: int = 8):
        if num_channels < 1:
            raise ValueError("num_channels must be >= 1")
        self.config = config if config is not None else CoreConfig()
        self.num_channels = num_channels
        # Input sources survive reset: they are device wiring, not kernel state.
        self._input_sources: dict[int, Callable[[int, int], int]] = {}
        self.reset()

    def reset(self) -> None:
        """Return to the start-of-kernel state: wall 0, cursor at initial slack."""
        self.wall_mu = 0
        self.cursor_mu = self.config.initial_slack_mu
        self.channels = [ChannelState() for _ in range(self.num_channels)]
        self.event_log: list[RtioEvent] = []
        self._log_keys: list[tuple] = []
        self._seq = 0

    # -- cursor ------------------------------------------------------------

    @property
    def slack_mu(self) -> int:
        return self.cursor_mu - self.wall_mu

    def now_mu(self) -> int:
        return self.cursor_mu

    def delay_mu(self, d: int) -> None:
        self.cursor_mu = _checked(self.cursor_mu + d)

    def at_mu(self, t: int) -> None:
        self.cursor_mu = _checked(t)

    # -- outputs -----------------------------------------------------------

    def post_output(self, channel: int, payload: int) -> None:
        """Append an event at the current cursor to the channel FIFO.

        Raises ``RtioUnderflow`` on negative slack, ``SequenceError`` if the
        cursor is behind the channel's last posted timestamp, and
        ``FifoOverflow`` if the FIFO is full.
        """
        ch = self._channel(channel)
        ts = self.cursor_mu
        payload &= PAYLOAD_MASK
        if ts < self.wall_mu:
            raise RtioUnderflow(
                f"event on channel {channel} at {ts} mu is {self.wall_mu - ts} mu "
                "behind the wall clock",
                channel=channel, t_mu=ts, payload=payload, slack_mu=self.slack_mu)
        if ch.last_posted_mu is not None and ts < ch.last_posted_mu:
            raise SequenceError(
                f"event on channel {channel} at {ts} mu precedes previous event "
                f"at {ch.last_posted_mu} mu",
                channel=channel, t_mu=ts, payload=payload)
        if len(ch.pending_outputs) >= self.config.fifo_depth:
            raise FifoOverflow(
                f"channel {channel} FIFO full ({self.config.fifo_depth} pending)",
                channel=channel, t_mu=ts, payload=payload)
        ch.pending_outputs.append(RtioEvent(channel, ts, payload))
        ch.last_posted_mu = ts
        self._advance_wall(self.config.cpu_cost["event_post"])

    def wait_for_fifo_space(self, channel: int) -> None:
        """Spin on the wall clock until the channel FIFO has a free slot.

        Models a kernel polling the hardware counter before posting; the wall
        advances to the oldest pending event so the hardware consumes it.
        """
        ch = self._channel(channel)
        while len(ch.pending_outputs) >= self.config.fifo_depth:
            target = ch.pending_outputs[0].timestamp
            self._advance_wall(target - self.wall_mu)

    # -- inputs ------------------------------------------------------------

    def set_input_source(self, channel: int, source: Callable[[int, int], int]) -> None:
        """Attach the callback producing counts for windows on ``channel``."""
        self._channel(channel)
        self._input_sources[channel] = source

    def open_input_window(self, channel: int, duration: int) -> None:
        """Register the window [cursor, cursor+duration) and advance the cursor.

        The window's count is produced by the channel's input source from the
        physics state at the window start.
        """
        ch = self._channel(channel)
        if duration <= 0:
            raise ValueError("input window duration must be > 0")
        if len(ch.input_windows) >= self.config.input_buffer_capacity:
            raise InputBufferOverflow(
                f"channel {channel} already has "
                f"{self.config.input_buffer_capacity} unread windows",
                channel=channel, t_mu=self.cursor_mu)
        start = self.cursor_mu
        end = _checked(start + duration)
        source = self._input_sources.get(channel)
        count = int(source(start, duration)) if source is not None else 0
        if count < 0:
            raise ValueError("input source produced a negative count")
        ch.input_windows.append(InputWindow(start, end, count))
        self.cursor_mu = end

    def read_input_count(self, channel: int) -> int:
        """Consume the oldest window on the channel, stalling until it closes."""
        ch = self._channel(channel)
        if not ch.input_windows:
            raise NoWindowPending(f"no input window pending on channel {channel}",
                                  channel=channel)
        window = ch.input_windows.popleft()
        if window.end_mu > self.wall_mu:
            self._advance_wall(window.end_mu - self.wall_mu)
        self._advance_wall(self.config.cpu_cost["input_read"])
        return window.result_count

    def pending_input_windows(self, channel: int) -> int:
        return len(self._channel(channel).input_windows)

    # -- wall clock --------------------------------------------------------

    def charge_cpu(self, instruction_class: str) -> None:
        self._advance_wall(self.config.cpu_cost[instruction_class])

    def _advance_wall(self, d: int) -> None:
        assert d >= 0
        self.wall_mu = _checked(self.wall_mu + d)
        self._drain()

    def _drain(self) -> None:
        # Consume every pending output whose timestamp the wall has reached.
        # The log is kept sorted by (timestamp, channel, posting order).
        for ch in self.channels:
            q = ch.pending_outputs
            while q and q[0].timestamp <= self.wall_mu:
                event = q.popleft()
                key = (event.timestamp, event.channel, self._seq)
                self._seq += 1
                pos = bisect.bisect(self._log_keys, key)
                self._log_keys.insert(pos, key)
                self.event_log.insert(pos, event)

    def flush(self) -> None:
        """Advance the wall to the latest pending event, consuming everything."""
        latest = max((ch.pending_outputs[-1].timestamp
                      for ch in self.channels if ch.pending_outputs),
                     default=self.wall_mu)
        if latest > self.wall_mu:
            self._advance_wall(latest - self.wall_mu)

    def _channel(self, channel: int) -> ChannelState:
        if not 0 <= channel < self.num_channels:
            raise ValueError(f"channel {channel} out of range "
                             f"(0..{self.num_channels - 1})")
        return self.channels[channel]


def ensure_slack(core: CoreState, min_slack_mu: int) -> None:
    """Move the cursor forward so it leads the wall by at least ``min_slack_mu``.

    The standard recovery after a blocking read left the cursor at (or behind)
    the wall clock.
    """
    deficit = min_slack_mu - core.slack_mu
    if deficit > 0:
        core.delay_mu(deficit)


def run_kernel(core: CoreState, kernel: Callable[[], None]) -> ExecutionRecord:
    """Execute ``kernel`` against the core and measure its execution time.

    ``t_exe`` spans from kernel entry to the point where the wall clock has
    consumed every posted event; host RPC time charged by the kernel is
    included. Timeline errors are re-raised with the partial record attached.
    """
    start = core.wall_mu
    try:
        kernel()
    except RtioError as exc:
        exc.record = ExecutionRecord(core.wall_mu - start, list(core.event_log),
                                     error=exc.as_dict())
        raise
    core.flush()
    return ExecutionRecord(core.wall_mu - start, list(core.event_log), None)

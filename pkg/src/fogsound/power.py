"""Additive end-device power model with per-peripheral on/off states.

The device draws a constant baseline plus a fixed increment for each
peripheral that is powered: microphone while recording, CPU while busy,
radio while transmitting. A round of work is a contiguous timeline of
such states, and energy is the time integral of power over it.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, fields
from typing import Sequence

from .errors import InvalidConfig, MalformedTimeline
from .placement import PlacementConfig, Stage, Tier, validate


class CpuMode(enum.Enum):
    IDLE = "idle"
    BUSY = "busy"


@dataclass(frozen=True)
class PowerState:
    radio_on: bool = False
    mic_on: bool = False
    cpu_mode: CpuMode = CpuMode.IDLE

    @property
    def busy(self) -> bool:
        return self.cpu_mode is CpuMode.BUSY


IDLE = PowerState()
RECORDING = PowerState(mic_on=True, cpu_mode=CpuMode.BUSY)
COMPUTING = PowerState(cpu_mode=CpuMode.BUSY)
TRANSMITTING = PowerState(radio_on=True, cpu_mode=CpuMode.BUSY)


@dataclass(frozen=True)
class PowerParams:
    """Milliwatt contributions of each component."""

    p_idle: float
    p_mic: float
    p_cpu_busy: float
    p_radio_tx: float

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be non-negative")


# Least-squares fit of the additive model to the four reported device
# averages (config1 1852.00 mW, config2 1830.54 mW, proposed 1786.86 mW,
# recorder send/no-send delta 127.54 mW) using the default stage durations
# and link constants in fogsound.sim. Regenerate with scripts/calibrate.py.
# The radio term is large because the default link moves a 4 s clip in
# ~50 ms, so the whole measured delta is carried by a short burst.
CALIBRATED = PowerParams(
    p_idle=1540.3225,
    p_mic=6.3421,
    p_cpu_busy=340.2306,
    p_radio_tx=25033.7282,
)


def calibrate_defaults() -> PowerParams:
    """The shipped, offline-fitted parameters."""
    return CALIBRATED


def power_of(state: PowerState, params: PowerParams) -> float:
    return (params.p_idle
            + (params.p_mic if state.mic_on else 0.0)
            + (params.p_cpu_busy if state.busy else 0.0)
            + (params.p_radio_tx if state.radio_on else 0.0))


@dataclass(frozen=True)
class Interval:
    start_s: float
    end_s: float
    state: PowerState

    @property
    def duration_s(self) -> float:
        return self.end_s - self.start_s


class StateTimeline:
    """Contiguous, gap-free sequence of power-state intervals."""

    def __init__(self, intervals: Sequence[Interval]):
        intervals = tuple(intervals)
        if not intervals:
            raise MalformedTimeline("timeline has no intervals")
        for i, iv in enumerate(intervals):
            if not iv.end_s > iv.start_s:
                raise MalformedTimeline(f"interval {i} has non-positive duration")
            if i and abs(iv.start_s - intervals[i - 1].end_s) > 1e-12:
                raise MalformedTimeline(f"gap or overlap before interval {i}")
        self.intervals = intervals

    @classmethod
    def from_durations(cls, pieces: Sequence[tuple[float, PowerState]], start_s: float = 0.0):
        """Build from ``(duration, state)`` pairs; zero-length pieces are dropped."""
        out, t = [], start_s
        for d, state in pieces:
            if d < 0:
                raise MalformedTimeline("negative duration")
            if t + d > t:  # also drops pieces too short to move the clock
                out.append(Interval(t, t + d, state))
                t += d
        return cls(out)

    def __iter__(self):
        return iter(self.intervals)

    def __len__(self):
        return len(self.intervals)

    @property
    def duration_s(self) -> float:
        return self.intervals[-1].end_s - self.intervals[0].start_s

    def time_in(self, predicate) -> float:
        return sum(iv.duration_s for iv in self.intervals if predicate(iv.state))


@dataclass(frozen=True)
class EnergyReport:
    energy_mj: float
    avg_power_mw: float
    duration_s: float


def energy(timeline: StateTimeline, params: PowerParams) -> EnergyReport:
    if not isinstance(timeline, StateTimeline):
        timeline = StateTimeline(timeline)
    mj = sum(iv.duration_s * power_of(iv.state, params) for iv in timeline)
    dur = timeline.duration_s
    if dur <= 0:
        raise MalformedTimeline("timeline has zero duration")
    return EnergyReport(mj, mj / dur, dur)


@dataclass(frozen=True)
class StageDurations:
    """Device-side seconds per activity.

    ``handoff_s`` is the idle gap between local processing and the start of
    a transmission (link wake-up and socket setup).
    """

    record_s: float = 10.0
    # Fitted by scripts/calibrate.py against the 57.77 s / 16.42 s runtimes.
    extract_s: float = 2.8
    classify_s: float = 39.935
    handoff_s: float = 5.03

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be >= 0")


def timeline_for_round(config: PlacementConfig, durations: StageDurations, tx_seconds: float,
                       reply_wait_s: float = 0.0, grant_wait_s: float = 0.0,
                       send: bool = True) -> StateTimeline:
    """Device power states for one record-process-transmit round.

    Order: record, device-placed extract/classify, handoff, wait for the
    server grant, transmit, wait for the server reply. The radio is powered
    only while transmitting.
    """
    problems = validate(config)
    if problems:
        raise InvalidConfig("; ".join(problems))
    if min(tx_seconds, reply_wait_s, grant_wait_s) < 0:
        raise MalformedTimeline("durations must be non-negative")
    pieces = [(durations.record_s, RECORDING)]
    if config[Stage.EXTRACT] == Tier.DEVICE:
        pieces.append((durations.extract_s, COMPUTING))
    if config[Stage.CLASSIFY] == Tier.DEVICE:
        pieces.append((durations.classify_s, COMPUTING))
    if send:
        pieces += [(durations.handoff_s, IDLE), (grant_wait_s, IDLE),
                   (tx_seconds, TRANSMITTING), (reply_wait_s, IDLE)]
    return StateTimeline.from_durations(pieces)


def recorder_timeline(durations: StageDurations, tx_seconds: float, send: bool) -> StateTimeline:
    """Recorder-only round: record, then optionally push the clip straight out."""
    pieces = [(durations.record_s, RECORDING)]
    if send:
        pieces.append((tx_seconds, TRANSMITTING))
    return StateTimeline.from_durations(pieces)

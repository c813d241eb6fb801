"""Timestamps, envelopes and clocks.

All times are integer nanoseconds since the Unix epoch (UTC), kept inside the
signed 64-bit range. Plain ``int`` is used as the carrier; the helpers below
turn any arithmetic that leaves the range into :class:`TimeOverflow`.
"""

from __future__ import annotations

import enum
import re
import threading
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from fractions import Fraction
from typing import Optional, Union

INT64_MIN = -(2**63)
INT64_MAX = 2**63 - 1
UINT32_MAX = 2**32 - 1
UINT64_MAX = 2**64 - 1

NS_PER_US = 1_000
NS_PER_MS = 1_000_000
NS_PER_S = 1_000_000_000

Timestamp = int
TimeSpan = int


class TimeOverflow(OverflowError):
    """Time arithmetic left the signed 64-bit nanosecond range."""


class UnsupportedMode(ValueError):
    pass


def checked(ns: int) -> int:
    if not INT64_MIN <= ns <= INT64_MAX:
        raise TimeOverflow(f"{ns} ns is outside the signed 64-bit range")
    return ns


def add(t: Timestamp, span: TimeSpan) -> Timestamp:
    return checked(t + span)


def sub(a: Timestamp, b: Timestamp) -> TimeSpan:
    return checked(a - b)


def require_span(span: TimeSpan, what: str = "span") -> TimeSpan:
    if not isinstance(span, int) or isinstance(span, bool):
        raise TypeError(f"{what} must be an integer number of nanoseconds")
    if span < 0:
        raise ValueError(f"{what} must be >= 0 ns, got {span}")
    return checked(span)


def millis(n: float) -> TimeSpan:
    return int(n * NS_PER_MS)


def seconds(n: float) -> TimeSpan:
    return int(n * NS_PER_S)


_UNITS = {"ns": 1, "us": NS_PER_US, "ms": NS_PER_MS, "s": NS_PER_S}
_DURATION = re.compile(r"^\s*(-?\d+(?:\.\d+)?)\s*(ns|us|ms|s)?\s*$")


def parse_duration(text: str) -> TimeSpan:
    """Parse ``"250ms"``, ``"1.5s"``, ``"40us"`` or bare nanoseconds."""
    m = _DURATION.match(text)
    if not m:
        raise ValueError(f"invalid duration {text!r}")
    value, unit = m.groups()
    return checked(int(Fraction(value) * _UNITS[unit or "ns"]))


def format_timestamp(ns: Optional[Timestamp]) -> str:
    """ISO-8601 UTC with nine fractional digits, e.g. ``1970-01-01T00:00:00.000000010Z``."""
    if ns is None:
        return "-"
    secs, frac = divmod(ns, NS_PER_S)
    try:
        dt = datetime.fromtimestamp(secs, tz=timezone.utc)
    except (OverflowError, OSError, ValueError):
        return f"{ns}ns"
    return dt.strftime("%Y-%m-%dT%H:%M:%S") + f".{frac:09d}Z"


_ISO = re.compile(
    r"^(\d{4}-\d{2}-\d{2}T\d{2}:\d{2}:\d{2})(?:\.(\d{1,9}))?(Z|[+-]\d{2}:\d{2})?$"
)


def parse_timestamp(text: str) -> Timestamp:
    """Accept raw nanoseconds (``"1500"``) or ISO-8601 with up to 9 fractional digits."""
    text = text.strip()
    if re.fullmatch(r"-?\d+", text):
        return checked(int(text))
    m = _ISO.match(text)
    if not m:
        raise ValueError(f"invalid timestamp {text!r}")
    base, frac, zone = m.groups()
    zone = "+00:00" if zone in (None, "Z") else zone
    dt = datetime.fromisoformat(base + zone)
    whole = int(dt.timestamp())
    return checked(whole * NS_PER_S + int((frac or "0").ljust(9, "0")))


@dataclass(frozen=True, slots=True)
class Envelope:
    stream_id: int
    sequence: int
    originating: Timestamp
    creation: Timestamp


class ViolationKind(enum.Enum):
    SEQUENCE_GAP = "SequenceGap"
    NON_MONOTONE_ORIGINATING = "NonMonotoneOriginating"
    CREATION_BEFORE_ORIGINATING = "CreationBeforeOriginating"


@dataclass(frozen=True)
class Violation:
    kind: ViolationKind
    detail: str = ""


class EnvelopeViolation(ValueError):
    def __init__(self, violation: Violation):
        super().__init__(f"{violation.kind.value}: {violation.detail}")
        self.violation = violation


def validate_envelope(prev: Optional[Envelope], nxt: Envelope) -> Optional[Violation]:
    """Return ``None`` when ``nxt`` may follow ``prev`` on one stream, else the violation.

    Checks are ordered sequence, originating, creation; the first failure wins.
    """
    expected = 0 if prev is None else prev.sequence + 1
    if nxt.sequence != expected:
        return Violation(
            ViolationKind.SEQUENCE_GAP, f"expected sequence {expected}, got {nxt.sequence}"
        )
    if prev is not None and nxt.originating <= prev.originating:
        return Violation(
            ViolationKind.NON_MONOTONE_ORIGINATING,
            f"originating {nxt.originating} does not advance past {prev.originating}",
        )
    if nxt.creation < nxt.originating:
        return Violation(
            ViolationKind.CREATION_BEFORE_ORIGINATING,
            f"creation {nxt.creation} precedes originating {nxt.originating}",
        )
    return None


def check_envelope(prev: Optional[Envelope], nxt: Envelope) -> None:
    v = validate_envelope(prev, nxt)
    if v is not None:
        raise EnvelopeViolation(v)


class _MaxSpeed:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "MAX_SPEED"

    def __reduce__(self):
        return (_MaxSpeed, ())


MAX_SPEED = _MaxSpeed()
Speed = Union[Fraction, _MaxSpeed]


def as_speed(value) -> Speed:
    """Normalise a speed given as number, ``Fraction``, ``"max"`` or ``MAX_SPEED``."""
    if value is MAX_SPEED or (isinstance(value, str) and value.lower() in ("max", "maxspeed")):
        return MAX_SPEED
    speed = Fraction(value) if not isinstance(value, float) else Fraction(value).limit_denominator(10**9)
    if speed <= 0:
        raise ValueError("speed must be positive (use MAX_SPEED for unpaced replay)")
    return speed


class ClockMode(enum.Enum):
    REAL = "real"
    VIRTUAL = "virtual"


@dataclass(frozen=True)
class Clock:
    """Value description of a pipeline clock. Real mode ignores the other fields."""

    mode: ClockMode = ClockMode.REAL
    virtual_origin: Timestamp = 0
    wall_origin: Timestamp = 0
    speed: Speed = Fraction(1)

    def __post_init__(self):
        object.__setattr__(self, "speed", as_speed(self.speed))


def virtual_now(clock: Clock, wall: Timestamp) -> Timestamp:
    """Map a wall time onto the virtual timeline, rounding toward zero."""
    if clock.mode is not ClockMode.VIRTUAL:
        raise UnsupportedMode("virtual_now requires a virtual clock")
    if clock.speed is MAX_SPEED:
        raise UnsupportedMode("a MAX_SPEED clock has no wall-time mapping")
    elapsed = Fraction(sub(wall, clock.wall_origin)) * clock.speed
    return add(clock.virtual_origin, int(elapsed))  # int() truncates toward zero


@dataclass(frozen=True)
class ReplayDescriptor:
    start: Timestamp
    end: Optional[Timestamp] = None
    speed: Speed = MAX_SPEED
    deterministic: bool = True

    def __post_init__(self):
        object.__setattr__(self, "speed", as_speed(self.speed))
        if self.end is not None and not self.start < self.end:
            raise ValueError("replay start must precede end")

    def contains(self, t: Timestamp) -> bool:
        return t >= self.start and (self.end is None or t <= self.end)


# -- runtime clocks ---------------------------------------------------------
#
# A runtime clock answers now(), stamps creation times and paces sources.
# Virtual clocks never stamp a creation earlier than the originating time they
# are handed: on a virtual timeline a value cannot be produced before the world
# moment it describes.


class RealTimeClock:
    virtual = False

    def now(self) -> Timestamp:
        return time.time_ns()

    def stamp(self, originating: Timestamp) -> Timestamp:
        return time.time_ns()

    def observe(self, t: Timestamp) -> None:
        pass

    def wait_until(self, t: Timestamp, stop: threading.Event) -> None:
        while True:
            delay = t - time.time_ns()
            if delay <= 0 or stop.is_set():
                return
            stop.wait(min(delay / NS_PER_S, 0.05))


class PacedClock:
    """Virtual time advancing at ``speed`` × wall time from ``virtual_origin``."""

    virtual = True

    def __init__(self, virtual_origin: Timestamp, speed: Speed, wall_origin: Optional[Timestamp] = None):
        self.spec = Clock(
            ClockMode.VIRTUAL,
            virtual_origin,
            time.time_ns() if wall_origin is None else wall_origin,
            speed,
        )

    def now(self) -> Timestamp:
        return virtual_now(self.spec, time.time_ns())

    def stamp(self, originating: Timestamp) -> Timestamp:
        return max(self.now(), originating)

    def observe(self, t: Timestamp) -> None:
        pass

    def wait_until(self, t: Timestamp, stop: threading.Event) -> None:
        while True:
            ahead = t - self.now()
            if ahead <= 0 or stop.is_set():
                return
            stop.wait(min(float(ahead / self.spec.speed) / NS_PER_S, 0.05))


class LogicalClock:
    """Virtual time equal to the furthest originating time observed so far.

    Used for unpaced replay and for deterministic execution, where creation
    times must not depend on wall time. An optional ``pacer`` still throttles
    source emission against the wall without leaking into timestamps.
    """

    virtual = True

    def __init__(self, origin: Timestamp = 0, pacer: Optional[PacedClock] = None):
        self._frontier = origin
        self._lock = threading.Lock()
        self.pacer = pacer

    def now(self) -> Timestamp:
        return self._frontier

    def observe(self, t: Timestamp) -> None:
        with self._lock:
            if t > self._frontier:
                self._frontier = t

    def stamp(self, originating: Timestamp) -> Timestamp:
        self.observe(originating)
        return self._frontier

    def wait_until(self, t: Timestamp, stop: threading.Event) -> None:
        if self.pacer is not None:
            self.pacer.wait_until(t, stop)


class ManualClock:
    """Test clock moved explicitly with :meth:`set` / :meth:`advance`."""

    virtual = True

    def __init__(self, start: Timestamp = 0):
        self._now = start
        self._lock = threading.Lock()

    def now(self) -> Timestamp:
        return self._now

    def set(self, t: Timestamp) -> None:
        with self._lock:
            if t < self._now:
                raise ValueError("a manual clock never moves backwards")
            self._now = checked(t)

    def advance(self, span: TimeSpan) -> None:
        self.set(self._now + span)

    def stamp(self, originating: Timestamp) -> Timestamp:
        return max(self._now, originating)

    def observe(self, t: Timestamp) -> None:
        pass

    def wait_until(self, t: Timestamp, stop: threading.Event) -> None:
        pass

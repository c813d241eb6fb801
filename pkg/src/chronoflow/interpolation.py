"""Certainty-gated interpolators.

An interpolator picks (or declines to pick) a secondary-stream message for a
query time ``t``. :func:`interpolate` only returns a final decision when no
future secondary message, which must have a strictly later originating time,
could change it; otherwise it returns :data:`INSUFFICIENT`.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from typing import Any, Optional, Union

from .temporal import Envelope, Timestamp, TimeSpan, require_span


@dataclass(frozen=True)
class Exact:
    def __str__(self):
        return "exact"


@dataclass(frozen=True)
class Nearest:
    tolerance: TimeSpan

    def __post_init__(self):
        require_span(self.tolerance, "tolerance")

    def __str__(self):
        return f"nearest({self.tolerance}ns)"


@dataclass(frozen=True)
class LastBefore:
    def __str__(self):
        return "last-before"


Interpolator = Union[Exact, Nearest, LastBefore]


@dataclass(frozen=True)
class Match:
    envelope: Envelope
    payload: Any


class _Outcome:
    def __init__(self, name: str):
        self.name = name

    def __repr__(self):
        return self.name


NO_MATCH = _Outcome("NoMatch")
INSUFFICIENT = _Outcome("InsufficientData")


@dataclass
class JoinState:
    """Secondary-side buffer of a fusion, ordered by originating time."""

    secondary_buffer: list = field(default_factory=list)  # (Envelope, payload)
    secondary_max_seen: Optional[Timestamp] = None
    secondary_closed: bool = False
    pending_primaries: list = field(default_factory=list)
    _times: list = field(default_factory=list, repr=False)

    def add_secondary(self, envelope: Envelope, payload: Any) -> None:
        t = envelope.originating
        if self.secondary_max_seen is not None and t <= self.secondary_max_seen:
            raise ValueError("secondary originating times must strictly increase")
        self.secondary_buffer.append((envelope, payload))
        self._times.append(t)
        self.secondary_max_seen = t

    def close_secondary(self) -> None:
        self.secondary_closed = True

    def discard_before(self, index: int) -> None:
        if index > 0:
            del self.secondary_buffer[:index]
            del self._times[:index]

    @classmethod
    def from_times(cls, times, payloads=None, *, max_seen=None, closed=False) -> "JoinState":
        """Build a state from bare times (testing aid); payloads default to the times."""
        st = cls()
        payloads = list(times) if payloads is None else payloads
        for i, (t, p) in enumerate(zip(times, payloads)):
            st.add_secondary(Envelope(0, i, t, t), p)
        if max_seen is not None:
            if st.secondary_max_seen is not None and max_seen < st.secondary_max_seen:
                raise ValueError("max_seen cannot precede buffered messages")
            st.secondary_max_seen = max_seen
        st.secondary_closed = closed
        return st


def _nearest_index(times: list, t: Timestamp, tol: TimeSpan) -> Optional[int]:
    i = bisect.bisect_left(times, t)
    best = None
    # left neighbour first so equidistant ties resolve to the earlier message
    for j in (i - 1, i):
        if 0 <= j < len(times):
            d = abs(times[j] - t)
            if d <= tol and (best is None or d < abs(times[best] - t)):
                best = j
    return best


def interpolate(state: JoinState, t: Timestamp, ip: Interpolator):
    """Return ``Match``, ``NO_MATCH`` or ``INSUFFICIENT`` for query time ``t``."""
    times = state._times
    seen = state.secondary_max_seen
    closed = state.secondary_closed

    if isinstance(ip, Exact):
        if not (closed or (seen is not None and seen >= t)):
            return INSUFFICIENT
        i = bisect.bisect_left(times, t)
        if i < len(times) and times[i] == t:
            return Match(*state.secondary_buffer[i])
        return NO_MATCH

    if isinstance(ip, Nearest):
        tol = ip.tolerance
        j = _nearest_index(times, t, tol)
        if j is not None:
            if closed or seen - t >= abs(times[j] - t):
                return Match(*state.secondary_buffer[j])
            return INSUFFICIENT
        if closed or (seen is not None and seen >= t + tol):
            return NO_MATCH
        return INSUFFICIENT

    if isinstance(ip, LastBefore):
        if not (closed or (seen is not None and seen > t)):
            return INSUFFICIENT
        i = bisect.bisect_right(times, t)
        if i == 0:
            return NO_MATCH
        return Match(*state.secondary_buffer[i - 1])

    raise TypeError(f"unknown interpolator {ip!r}")


def prune(state: JoinState, t: Timestamp, ip: Interpolator) -> None:
    """Drop buffered secondaries that no query later than ``t`` can select."""
    times = state._times
    if isinstance(ip, Nearest):
        state.discard_before(bisect.bisect_left(times, t - ip.tolerance))
    elif isinstance(ip, Exact):
        state.discard_before(bisect.bisect_left(times, t))
    elif isinstance(ip, LastBefore):
        state.discard_before(bisect.bisect_right(times, t) - 1)


def parse_interpolator(text: str) -> Interpolator:
    """Parse ``exact``, ``last-before`` or ``nearest(<duration>)``."""
    from .temporal import parse_duration

    s = text.strip().lower().replace("_", "-")
    if s == "exact":
        return Exact()
    if s in ("last-before", "lastbefore"):
        return LastBefore()
    if s.startswith("nearest(") and s.endswith(")"):
        return Nearest(parse_duration(s[len("nearest(") : -1]))
    raise ValueError(f"unknown interpolator {text!r}")

"""Synthetic sources and collecting sinks."""

from __future__ import annotations

import threading
from typing import Any, Callable, Iterable, Optional

from .graph import Component, Source
from .temporal import Envelope, Timestamp, TimeSpan


class Sequence(Source):
    """Emits a fixed list of ``(originating, value)`` pairs."""

    def __init__(self, items: Iterable[tuple[Timestamp, Any]], type_: Any = Any):
        super().__init__()
        self.items = list(items)
        self.out = self.add_output("out", type_)

    def messages(self):
        for t, v in self.items:
            yield self.out, v, t


class Generator(Source):
    """Emits ``values`` every ``interval`` ns, starting at the pipeline's current time.

    With a real-time clock this paces emission at one value per interval.
    """

    def __init__(self, values: Iterable[Any], interval: TimeSpan, type_: Any = Any, start: Optional[Timestamp] = None):
        super().__init__()
        if interval <= 0:
            raise ValueError("interval must be positive")
        self.values = values
        self.interval = interval
        self.start = start
        self.out = self.add_output("out", type_)

    def messages(self):
        t = self.now() if self.start is None else self.start
        for v in self.values:
            yield self.out, v, t
            t += self.interval


class Burst(Source):
    """Emits ``count`` values as fast as downstream accepts them.

    ``make(i)`` builds the ``i``-th payload. Originating times follow the
    pipeline clock, nudged forward by 1 ns whenever the clock has not advanced.
    """

    def __init__(self, count: int, make: Callable[[int], Any] = lambda i: i, type_: Any = Any):
        super().__init__()
        self.count = count
        self.make = make
        self.out = self.add_output("out", type_)

    def messages(self):
        last = None
        for i in range(self.count):
            t = self.now()
            if last is not None and t <= last:
                t = last + 1
            last = t
            yield self.out, self.make(i), t


class Collector(Component):
    """Records every delivered ``(envelope, payload)`` per input port."""

    def __init__(self, type_: Any = Any, inputs: int = 1, on_value: Optional[Callable[[Any, Envelope], None]] = None):
        super().__init__()
        self.received: list[list[tuple[Envelope, Any]]] = [[] for _ in range(inputs)]
        self.closed_ports: list[str] = []
        self.finals = 0
        self._on_value = on_value
        self._lock = threading.Lock()
        for i in range(inputs):
            self.add_input("in" if inputs == 1 else f"in{i}", type_)

    @property
    def input(self):
        return self.inputs[0]

    def on_message(self, receiver, envelope, payload):
        if self._on_value is not None:
            self._on_value(payload, envelope)
        with self._lock:
            self.received[receiver.index].append((envelope, payload))

    def on_closed(self, receiver):
        self.closed_ports.append(receiver.name)

    def on_final(self):
        self.finals += 1

    @property
    def values(self) -> list:
        return [p for _, p in self.received[0]]

    @property
    def envelopes(self) -> list[Envelope]:
        return [e for e, _ in self.received[0]]

    @property
    def times(self) -> list[Timestamp]:
        return [e.originating for e, _ in self.received[0]]

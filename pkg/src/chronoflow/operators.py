"""Stream operators: transforms, windows, fusion and dynamic per-key subgraphs.

Each operator is a component. The helper functions at the bottom of the
module (:func:`map`, :func:`join`, ...) add the operator to a pipeline, wire
its input(s) and return its output emitter so chains read top to bottom::

    doubled = ops.map(p, src.out, lambda x: 2 * x)
    fused = ops.join(p, doubled, other.out, Nearest(millis(5)))
"""

from __future__ import annotations

import builtins
import heapq
import itertools
from collections import deque
from dataclasses import dataclass
from typing import Any, Callable, Optional, Union

from .graph import Component, Emitter, Pipeline, Receiver
from .interpolation import (
    INSUFFICIENT,
    Exact,
    Interpolator,
    JoinState,
    LastBefore,
    Match,
    Nearest,
    interpolate,
    prune,
)
from .scheduler import DeliveryPolicy, clone
from .temporal import Envelope, Timestamp, TimeSpan, require_span


class Map(Component):
    """One output per input; originating time copied from the input."""

    def __init__(self, f: Callable[[Any], Any], in_type: Any = Any, out_type: Any = Any):
        super().__init__()
        self.f = f
        self.dropped = 0
        self.input = self.add_input("in", in_type, self._on_value)
        self.out = self.add_output("out", out_type)

    def _on_value(self, value, envelope):
        try:
            result = self.f(value)
        except Exception as exc:  # noqa: BLE001 - error channel
            self.dropped += 1
            self.report_error(envelope, exc)
            return
        self.out.post(result, envelope.originating)


class Filter(Component):
    def __init__(self, predicate: Callable[[Any], bool], type_: Any = Any):
        super().__init__()
        self.predicate = predicate
        self.dropped = 0
        self.input = self.add_input("in", type_, self._on_value)
        self.out = self.add_output("out", type_)

    def _on_value(self, value, envelope):
        try:
            keep = self.predicate(value)
        except Exception as exc:  # noqa: BLE001
            self.dropped += 1
            self.report_error(envelope, exc)
            return
        if keep:
            self.out.post(value, envelope.originating)


class Aggregate(Component):
    """Running fold; emits the accumulator after every input."""

    def __init__(self, seed: Any, step: Callable[[Any, Any], Any], in_type: Any = Any, out_type: Any = Any):
        super().__init__()
        self.state = seed
        self.step = step
        self.dropped = 0
        self.input = self.add_input("in", in_type, self._on_value)
        self.out = self.add_output("out", out_type)

    def _on_value(self, value, envelope):
        try:
            self.state = self.step(self.state, value)
        except Exception as exc:  # noqa: BLE001
            self.dropped += 1
            self.report_error(envelope, exc)
            return
        self.out.post(clone(self.state), envelope.originating)


@dataclass(frozen=True)
class ByCount:
    k: int

    def __post_init__(self):
        if not isinstance(self.k, int) or self.k < 1:
            raise ValueError("window count must be >= 1")


@dataclass(frozen=True)
class ByTime:
    span: TimeSpan

    def __post_init__(self):
        require_span(self.span, "window span")


WindowSpec = Union[ByCount, ByTime]


class Window(Component):
    """Sliding window.

    ``ByCount(k)`` emits the last ``k`` values once ``k`` have been seen;
    ``ByTime(s)`` emits, for every input at ``t``, all values with originating
    in ``[t - s, t]``. Output originating is the newest value's.
    """

    def __init__(self, spec: WindowSpec, type_: Any = Any):
        super().__init__()
        self.spec = spec
        self._buf: deque = deque(maxlen=spec.k if isinstance(spec, ByCount) else None)
        self.input = self.add_input("in", type_, self._on_value)
        self.out = self.add_output("out", list)

    def _on_value(self, value, envelope):
        t = envelope.originating
        self._buf.append((t, value))
        if isinstance(self.spec, ByCount):
            if len(self._buf) < self.spec.k:
                return
        else:
            lo = t - self.spec.span
            while self._buf[0][0] < lo:
                self._buf.popleft()
        self.out.post([v for _, v in self._buf], t)


class Join(Component):
    """Reproducible fusion of a primary stream with a secondary stream.

    Every primary message waits until the interpolator's decision is final;
    matches are emitted as ``(primary, secondary)`` at the primary's
    originating time, unmatched primaries are counted in ``dropped``.
    """

    def __init__(self, interpolator: Interpolator, primary_type: Any = Any, secondary_type: Any = Any, *, prune_buffer: bool = True):
        super().__init__()
        self.interpolator = interpolator
        self.state = JoinState()
        self.prune_buffer = prune_buffer
        self.dropped = 0
        self.primary = self.add_input("primary", primary_type, self._on_primary)
        self.secondary = self.add_input("secondary", secondary_type, self._on_secondary)
        self.out = self.add_output("out", tuple)

    def _on_primary(self, value, envelope):
        self.state.pending_primaries.append((envelope, value))
        self._resolve()

    def _on_secondary(self, value, envelope):
        self.state.add_secondary(envelope, value)
        self._resolve()

    def on_closed(self, receiver):
        if receiver is self.secondary:
            self.state.close_secondary()
            self._resolve()

    def _resolve(self):
        pending = self.state.pending_primaries
        done = 0
        for envelope, value in pending:
            t = envelope.originating
            decision = interpolate(self.state, t, self.interpolator)
            if decision is INSUFFICIENT:
                break
            done += 1
            if isinstance(decision, Match):
                self.out.post((value, decision.payload), t)
            else:
                self.dropped += 1
            if self.prune_buffer:
                prune(self.state, t, self.interpolator)
        if done:
            del pending[:done]


class Sample(Component):
    """Resamples a stream onto the grid ``t0, t0 + interval, ...``.

    The grid anchors at the first input's originating time. Each grid point is
    resolved with the interpolator's certainty rules; matches are emitted at the
    grid time. After the input closes the grid stops at the last input time
    (plus the tolerance for ``Nearest``).
    """

    def __init__(self, interval: TimeSpan, interpolator: Interpolator, type_: Any = Any):
        super().__init__()
        if interval <= 0:
            raise ValueError("sample interval must be positive")
        self.interval = interval
        self.interpolator = interpolator
        self.state = JoinState()
        self._query: Optional[Timestamp] = None
        self.input = self.add_input("in", type_, self._on_value)
        self.out = self.add_output("out", type_)

    def _on_value(self, value, envelope):
        if self._query is None:
            self._query = envelope.originating
        self.state.add_secondary(envelope, value)
        self._resolve()

    def on_closed(self, receiver):
        self.state.close_secondary()
        self._resolve()

    def _horizon(self) -> Optional[Timestamp]:
        last = self.state.secondary_max_seen
        if isinstance(self.interpolator, Nearest):
            return last + self.interpolator.tolerance
        return last

    def _resolve(self):
        while self._query is not None:
            q = self._query
            if self.state.secondary_closed and q > self._horizon():
                return
            decision = interpolate(self.state, q, self.interpolator)
            if decision is INSUFFICIENT:
                return
            if isinstance(decision, Match):
                self.out.post(decision.payload, q)
            prune(self.state, q, self.interpolator)
            self._query = q + self.interval


class Zip(Component):
    """Reproducible merge of same-typed streams in originating-time order.

    Messages sharing an originating time are emitted together as one list,
    ordered by input index, so the output keeps strictly increasing times.
    A group at ``t`` is released once every input has seen ``t`` or closed.
    """

    def __init__(self, n: int, type_: Any = Any):
        super().__init__()
        if n < 1:
            raise ValueError("zip needs at least one input")
        self._bufs = [deque() for _ in range(n)]
        self._seen: list[Optional[Timestamp]] = [None] * n
        self._closed = [False] * n
        for i in range(n):
            self.add_input(f"in{i}", type_)
        self.out = self.add_output("out", list)

    def on_message(self, receiver, envelope, payload):
        self._bufs[receiver.index].append((envelope.originating, payload))
        self._seen[receiver.index] = envelope.originating
        self._release()

    def on_closed(self, receiver):
        self._closed[receiver.index] = True
        self._release()

    def _release(self):
        while True:
            heads = [b[0][0] for b in self._bufs if b]
            if not heads:
                return
            t = min(heads)
            for seen, closed in builtins.zip(self._seen, self._closed):
                if not closed and (seen is None or seen < t):
                    return
            group = [b.popleft()[1] for b in self._bufs if b and b[0][0] == t]
            self.out.post(group, t)


@dataclass(frozen=True)
class Tagged:
    index: int
    envelope: Envelope
    payload: Any


class Merge(Component):
    """Arrival-order interleave. Not reproducible across runs.

    The output's originating time is the input's, raised to one nanosecond past
    the previous output when arrivals are out of time order; the exact source
    envelope travels in the :class:`Tagged` payload.
    """

    def __init__(self, n: int, type_: Any = Any):
        super().__init__()
        if n < 1:
            raise ValueError("merge needs at least one input")
        for i in range(n):
            self.add_input(f"in{i}", type_)
        self.out = self.add_output("out", Tagged)
        self._last: Optional[Timestamp] = None

    def on_message(self, receiver, envelope, payload):
        t = envelope.originating
        if self._last is not None and t <= self._last:
            t = self._last + 1
        self._last = t
        self.out.post(Tagged(receiver.index, envelope, payload), t)


# -- dynamic per-key subgraphs ---------------------------------------------------


class _Inline:
    """Runs a small component graph synchronously inside a host component."""

    def __init__(self, host: Component, component: Component, key: Any, capture, clock):
        sub = Pipeline(f"{host.name}[{key!r}]")
        sub._clock = clock
        sub._record_error = host.pipeline._root()._record_error
        sub.add_component(component, "sub")
        leaves, edges = sub._flatten()
        self.host = host
        self.clock = clock
        self.capture = capture
        if len(component.inputs) != 1 or len(component.outputs) != 1:
            raise ValueError("per-key subpipelines need exactly one input and one output")
        self.entry: Receiver = component.inputs[0].resolve()
        self.exit: Emitter = component.outputs[0].resolve()
        self.leaves = [c for _, c in leaves]
        if any(c.is_source for c in self.leaves):
            raise ValueError("per-key subpipelines cannot contain sources")
        self.routes: dict[int, list[tuple[Receiver, bool]]] = {}
        for e in edges:
            self.routes.setdefault(id(e.source), []).append((e.target, e.zero_copy))
        self.connected = {id(e.target) for e in edges} | {id(self.entry)}
        self.open_inputs = {
            id(c): sum(1 for r in c.inputs if id(r) in self.connected) for c in self.leaves
        }
        self.finalized: set[int] = set()
        self.work: deque = deque()
        for c in self.leaves:
            for em in c.outputs:
                em._runtime = self
        self._seq = 0
        for c in self.leaves:
            c.on_start()

    # runtime protocol used by emitters
    def stamp(self, originating):
        return self.clock.stamp(originating)

    def dispatch(self, emitter, envelope, payload):
        if emitter is self.exit:
            self.capture(envelope, payload)
        for r, zero_copy in self.routes.get(id(emitter), ()):
            self.work.append((r, envelope, payload if zero_copy else clone(payload)))

    def close_emitter(self, emitter):
        for r, _ in self.routes.get(id(emitter), ()):
            self.work.append((r, None, None))

    def push(self, payload, originating):
        env = Envelope(0, self._seq, originating, self.clock.stamp(originating))
        self._seq += 1
        self.work.append((self.entry, env, payload))
        self._run()

    def close(self):
        self.work.append((self.entry, None, None))
        self._run()
        for c in self.leaves:
            if id(c) not in self.finalized:
                self._finalize(c)
        self._run()

    def _finalize(self, comp):
        self.finalized.add(id(comp))
        try:
            comp.on_final()
        except Exception as exc:  # noqa: BLE001
            self.host.report_error(None, exc)
        for em in comp.outputs:
            em._close_from_runtime()

    def _run(self):
        while self.work:
            receiver, envelope, payload = self.work.popleft()
            comp = receiver.owner
            if id(comp) in self.finalized:
                continue
            try:
                if envelope is None:
                    comp.on_closed(receiver)
                else:
                    comp._deliver(receiver, envelope, payload)
            except Exception as exc:  # noqa: BLE001
                self.host.report_error(envelope, exc)
            if envelope is None:
                self.open_inputs[id(comp)] -= 1
                if self.open_inputs[id(comp)] == 0:
                    self._finalize(comp)


class ParallelByKey(Component):
    """Routes ``(key, value)`` messages to per-key subpipelines built on demand.

    ``factory(key)`` returns a component (possibly a composite) with one input
    and one output; it is instantiated the first time ``key`` appears. Outputs
    come back as ``(key, result)`` in ``(originating, first-appearance order)``.

    Subpipelines must be order-preserving: once a subpipeline has consumed an
    input at ``t``, it may not later emit an output earlier than ``t``. Outputs
    that would break the ordering are reported on the error channel and dropped.
    """

    def __init__(self, factory: Callable[[Any], Component], in_type: Any = Any):
        super().__init__()
        self.factory = factory
        self.subpipelines: dict[Any, _Inline] = {}
        self._order: dict[Any, int] = {}
        self._pending: list = []
        self._tiebreak = itertools.count()
        self._frontier: Optional[Timestamp] = None
        self._last: Optional[Timestamp] = None
        self.dropped = 0
        self.input = self.add_input("in", in_type, self._on_value)
        self.out = self.add_output("out", tuple)

    def _sub(self, key) -> Optional[_Inline]:
        sub = self.subpipelines.get(key)
        if sub is None:
            idx = len(self._order)

            def capture(envelope, payload, key=key, idx=idx):
                heapq.heappush(self._pending, (envelope.originating, idx, next(self._tiebreak), key, payload))

            try:
                sub = _Inline(self, self.factory(key), key, capture, self.pipeline._root()._clock)
            except Exception as exc:  # noqa: BLE001
                self.report_error(None, exc)
                return None
            self._order[key] = idx
            self.subpipelines[key] = sub
        return sub

    def _on_value(self, value, envelope):
        key, item = value
        t = envelope.originating
        sub = self._sub(key)
        if sub is None:
            self.dropped += 1
            return
        sub.push(item, t)
        self._frontier = t
        self._release(t)

    def on_closed(self, receiver):
        for sub in self.subpipelines.values():
            sub.close()
        self._release(None)

    def _release(self, upto: Optional[Timestamp]):
        while self._pending and (upto is None or self._pending[0][0] <= upto):
            t, _, _, key, payload = heapq.heappop(self._pending)
            if self._last is not None and t <= self._last:
                self.dropped += 1
                self.report_error(None, ValueError(f"subpipeline for {key!r} emitted out of order at {t}"))
                continue
            self._last = t
            self.out.post((key, payload), t)


# -- fluent helpers ------------------------------------------------------------------


_names = itertools.count()


def _add(p: Pipeline, comp: Component, name: Optional[str], kind: str) -> Component:
    if name is None:
        while True:
            name = f"{kind}{next(_names)}"
            if name not in p._names:
                break
    p.add_component(comp, name)
    return comp


def map(p: Pipeline, stream, f, *, name=None, policy: Optional[DeliveryPolicy] = None, out_type=Any) -> Emitter:
    c = _add(p, Map(f, stream.type_, out_type), name, "map")
    p.connect(stream, c.input, policy)
    return c.out


def filter(p: Pipeline, stream, predicate, *, name=None, policy=None) -> Emitter:
    c = _add(p, Filter(predicate, stream.type_), name, "filter")
    p.connect(stream, c.input, policy)
    return c.out


def window(p: Pipeline, stream, spec: WindowSpec, *, name=None, policy=None) -> Emitter:
    c = _add(p, Window(spec, stream.type_), name, "window")
    p.connect(stream, c.input, policy)
    return c.out


def aggregate(p: Pipeline, stream, seed, step, *, name=None, policy=None, out_type=Any) -> Emitter:
    c = _add(p, Aggregate(seed, step, stream.type_, out_type), name, "aggregate")
    p.connect(stream, c.input, policy)
    return c.out


def join(p: Pipeline, primary, secondary, interpolator: Interpolator, *, name=None, policy=None) -> Emitter:
    c = _add(p, Join(interpolator, primary.type_, secondary.type_), name, "join")
    p.connect(primary, c.primary, policy)
    p.connect(secondary, c.secondary, policy)
    return c.out


def sample(p: Pipeline, stream, interval: TimeSpan, interpolator: Interpolator, *, name=None, policy=None) -> Emitter:
    c = _add(p, Sample(interval, interpolator, stream.type_), name, "sample")
    p.connect(stream, c.input, policy)
    return c.out


def zip(p: Pipeline, streams: list, *, name=None, policy=None) -> Emitter:
    c = _add(p, Zip(len(streams), streams[0].type_), name, "zip")
    for s, r in builtins.zip(streams, c.inputs):
        p.connect(s, r, policy)
    return c.out


def merge(p: Pipeline, streams: list, *, name=None, policy=None) -> Emitter:
    c = _add(p, Merge(len(streams), streams[0].type_), name, "merge")
    for s, r in builtins.zip(streams, c.inputs):
        p.connect(s, r, policy)
    return c.out


def parallel_by_key(p: Pipeline, stream, factory, *, name=None, policy=None) -> Emitter:
    c = _add(p, ParallelByKey(factory, stream.type_), name, "by_key")
    p.connect(stream, c.input, policy)
    return c.out


__all__ = [
    "Aggregate", "ByCount", "ByTime", "Exact", "Filter", "Join", "LastBefore", "Map", "Merge",
    "Nearest", "ParallelByKey", "Sample", "Tagged", "Window", "Zip",
    "aggregate", "filter", "join", "map", "merge", "parallel_by_key", "sample", "window", "zip",
]

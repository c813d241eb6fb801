"""Message delivery: delivery policies, edge queues and the worker pool.

The scheduler is the concurrency boundary of the runtime. Guarantees:

* callbacks of one component never run concurrently and run in order;
* each receiver's queue is delivered FIFO;
* up to ``worker_count`` distinct components execute in parallel;
* queue operations and their policy accounting are atomic (one lock).

In deterministic mode a single lane delivers the globally smallest ready item
by ``(originating, stream_id, sequence)`` and pulls sources lazily, so the
delivery order depends only on stream contents.
"""

from __future__ import annotations

import copy
import enum
import logging
import os
import threading
import time
from collections import deque
from dataclasses import dataclass
from fractions import Fraction
from typing import Any, Optional

from .diagnostics import DEFAULT_LATENCY_THRESHOLD, EdgeMetrics, record_delivery
from .temporal import INT64_MIN, Envelope, TimeSpan, Timestamp, require_span

log = logging.getLogger(__name__)

WORKERS_ENV = "CHRONOFLOW_WORKERS"


class PostResult(enum.Enum):
    ACCEPTED = "accepted"
    DROPPED = "dropped"
    BLOCKED = "blocked"


class PipelineStopped(RuntimeError):
    """A blocked post was abandoned because the pipeline is stopping."""


class ClosedEdge(RuntimeError):
    pass


class DeterministicDeadlock(RuntimeError):
    pass


# -- delivery policies ----------------------------------------------------------


class DeliveryPolicy:
    bound: Optional[int] = None

    def offer(self, q: "EdgeQueue", envelope: Envelope, payload: Any, now: Timestamp) -> PostResult:
        q._enqueue(envelope, payload)
        return PostResult.ACCEPTED


@dataclass(frozen=True)
class Unlimited(DeliveryPolicy):
    def __str__(self):
        return "Unlimited"


@dataclass(frozen=True)
class QueueSize(DeliveryPolicy):
    """Bounded queue keeping the freshest ``n`` messages (oldest evicted, counted as dropped)."""

    n: int

    def __post_init__(self):
        if not isinstance(self.n, int) or self.n < 1:
            raise ValueError("queue size must be a positive integer")

    @property
    def bound(self) -> int:
        return self.n

    def offer(self, q, envelope, payload, now):
        while len(q.items) >= self.n:
            q._evict_oldest()
        q._enqueue(envelope, payload)
        return PostResult.ACCEPTED

    def __str__(self):
        return f"QueueSize({self.n})"


@dataclass(frozen=True)
class LatestMessage(QueueSize):
    n: int = 1

    def __post_init__(self):
        if self.n != 1:
            raise ValueError("LatestMessage always keeps exactly one message")

    def __str__(self):
        return "LatestMessage"


@dataclass(frozen=True)
class Throttle(DeliveryPolicy):
    """Lossless bounded queue: a full queue blocks the producer (back-pressure)."""

    n: int

    def __post_init__(self):
        if not isinstance(self.n, int) or self.n < 1:
            raise ValueError("throttle bound must be a positive integer")

    @property
    def bound(self) -> int:
        return self.n

    def offer(self, q, envelope, payload, now):
        if len(q.items) >= self.n:
            return PostResult.BLOCKED
        q._enqueue(envelope, payload)
        return PostResult.ACCEPTED

    def __str__(self):
        return f"Throttle({self.n})"


@dataclass(frozen=True)
class LatencyConstrained(DeliveryPolicy):
    """Drop messages already older than ``max_latency`` (pipeline clock) when posted."""

    max_latency: TimeSpan

    def __post_init__(self):
        require_span(self.max_latency, "max_latency")

    def offer(self, q, envelope, payload, now):
        if now - envelope.originating > self.max_latency:
            q.metrics.dropped += 1
            return PostResult.DROPPED
        q._enqueue(envelope, payload)
        return PostResult.ACCEPTED

    def __str__(self):
        return f"LatencyConstrained({self.max_latency}ns)"


@dataclass(frozen=True)
class SchedulerConfig:
    worker_count: int = 1
    deterministic: bool = False

    def __post_init__(self):
        if not isinstance(self.worker_count, int) or self.worker_count < 1:
            raise ValueError("worker_count must be a positive integer")

    @classmethod
    def resolve(cls, workers: Optional[int] = None, deterministic: bool = False) -> "SchedulerConfig":
        """Explicit ``workers`` wins, then ``$CHRONOFLOW_WORKERS``, then the CPU count."""
        if workers is None:
            env = os.environ.get(WORKERS_ENV)
            if env is not None:
                try:
                    workers = int(env)
                except ValueError:
                    raise ValueError(f"{WORKERS_ENV} must be a positive integer, got {env!r}") from None
            else:
                workers = os.cpu_count() or 1
        return cls(workers, deterministic)


_IMMUTABLE = (int, float, complex, str, bytes, bool, type(None), Fraction, frozenset)


def clone(payload: Any) -> Any:
    if type(payload) in _IMMUTABLE:
        return payload
    return copy.deepcopy(payload)


# -- queues ---------------------------------------------------------------------


class EdgeQueue:
    """The receiver-side buffer of one edge. All methods require the scheduler lock."""

    def __init__(self, edge, node: "_Node", threshold: TimeSpan):
        self.edge = edge
        self.policy: DeliveryPolicy = edge.policy
        self.zero_copy: bool = edge.zero_copy
        self.metrics: EdgeMetrics = edge.metrics
        self.node = node
        self.receiver = edge.target
        self.source_stream = edge.source.stream_id
        self.threshold = threshold
        self.items: deque = deque()
        self.closing = False  # upstream emitter closed; close marker follows the items
        self.closed = False  # receiver has been told (or finalized)
        self.last_posted_originating: Timestamp = INT64_MIN
        self.last_delivered_seq: Optional[int] = None

    def offer(self, envelope: Envelope, payload: Any, now: Timestamp) -> PostResult:
        if self.closed or self.node.finalized:
            self.metrics.posted += 1
            self.metrics.dropped += 1
            return PostResult.DROPPED
        result = self.policy.offer(self, envelope, payload, now)
        if result is not PostResult.BLOCKED:
            self.metrics.posted += 1
            self.last_posted_originating = envelope.originating
        return result

    def _enqueue(self, envelope: Envelope, payload: Any) -> None:
        self.items.append((envelope, payload))
        n = len(self.items)
        bound = self.policy.bound
        assert bound is None or n <= bound, f"queue bound {bound} exceeded"
        self.metrics.queue_len = n
        if n > self.metrics.queue_max:
            self.metrics.queue_max = n

    def _evict_oldest(self) -> None:
        self.items.popleft()
        self.metrics.dropped += 1
        self.metrics.queue_len = len(self.items)

    def pop(self, now: Timestamp) -> tuple[Envelope, Any]:
        envelope, payload = self.items.popleft()
        if self.last_delivered_seq is not None:
            assert envelope.sequence > self.last_delivered_seq, "per-receiver FIFO violated"
        self.last_delivered_seq = envelope.sequence
        self.metrics.queue_len = len(self.items)
        record_delivery(self.metrics, envelope, now, self.threshold)
        return envelope, payload

    def drop_all(self) -> None:
        self.metrics.dropped += len(self.items)
        self.items.clear()
        self.metrics.queue_len = 0

    @property
    def close_ready(self) -> bool:
        return self.closing and not self.closed and not self.items


class WorkKind(enum.Enum):
    MESSAGE = "message"
    CLOSE = "close"
    FINAL = "final"


@dataclass
class WorkItem:
    node: int
    port: int
    envelope: Optional[Envelope]
    payload: Any = None
    kind: WorkKind = WorkKind.MESSAGE


class _Node:
    def __init__(self, index: int, component, path: str):
        self.index = index
        self.component = component
        self.path = path
        self.is_source = component.is_source
        self.queues: list[EdgeQueue] = []  # one per connected receiver, in port order
        self.queue_by_port: dict[int, EdgeQueue] = {}
        self.scheduled = False
        self.executing = False
        self.finalized = False
        self.force_final = False
        self.scc = -1

    def has_work(self) -> bool:
        if self.finalized:
            return False
        if self.force_final:
            return True
        return any(q.items or q.close_ready for q in self.queues)

    def all_closed(self) -> bool:
        return all(q.closed for q in self.queues)


def _strongly_connected(nodes: list[_Node], succ: dict[int, set[int]]) -> list[list[int]]:
    """Tarjan's algorithm; components come out in reverse topological order."""
    index_of: dict[int, int] = {}
    low: dict[int, int] = {}
    stack: list[int] = []
    on_stack: set[int] = set()
    out: list[list[int]] = []
    counter = 0

    for root in range(len(nodes)):
        if root in index_of:
            continue
        work = [(root, iter(sorted(succ.get(root, ()))))]
        index_of[root] = low[root] = counter
        counter += 1
        stack.append(root)
        on_stack.add(root)
        while work:
            v, it = work[-1]
            advanced = False
            for w in it:
                if w not in index_of:
                    index_of[w] = low[w] = counter
                    counter += 1
                    stack.append(w)
                    on_stack.add(w)
                    work.append((w, iter(sorted(succ.get(w, ())))))
                    advanced = True
                    break
                if w in on_stack:
                    low[v] = min(low[v], index_of[w])
            if advanced:
                continue
            work.pop()
            if work:
                low[work[-1][0]] = min(low[work[-1][0]], low[v])
            if low[v] == index_of[v]:
                comp = []
                while True:
                    w = stack.pop()
                    on_stack.discard(w)
                    comp.append(w)
                    if w == v:
                        break
                out.append(sorted(comp))
    return out


_tls = threading.local()


class Scheduler:
    """Runs a flattened graph: ``leaves`` are ``(path, component)`` in registration
    order, ``edges`` the leaf edges with ``source`` emitter and ``target`` receiver."""

    def __init__(
        self,
        leaves: list,
        edges: list,
        config: SchedulerConfig,
        clock,
        *,
        latency_threshold: TimeSpan = DEFAULT_LATENCY_THRESHOLD,
        error_sink=None,
        record_trace: bool = False,
    ):
        self.config = config
        self.clock = clock
        self.deterministic = config.deterministic
        self.error_sink = error_sink or (lambda component, envelope, exc: log.exception("callback failed"))
        self.lock = threading.RLock()
        self._work = threading.Condition(self.lock)
        self._space = threading.Condition(self.lock)
        self._done = threading.Event()
        self._stop = threading.Event()
        self.draining = False
        self.trace: Optional[list] = [] if record_trace else None

        self.nodes = [_Node(i, comp, path) for i, (path, comp) in enumerate(leaves)]
        by_component = {id(n.component): n for n in self.nodes}
        self._emitter_queues: dict[int, list[EdgeQueue]] = {}
        self.queues: list[EdgeQueue] = []
        succ: dict[int, set[int]] = {}
        for edge in edges:
            src = by_component[id(edge.source.owner)]
            dst = by_component[id(edge.target.owner)]
            q = EdgeQueue(edge, dst, latency_threshold)
            self.queues.append(q)
            dst.queue_by_port[edge.target.index] = q
            self._emitter_queues.setdefault(id(edge.source), []).append(q)
            succ.setdefault(src.index, set()).add(dst.index)
            q.source_node = src
        for n in self.nodes:
            n.queues = [n.queue_by_port[p] for p in sorted(n.queue_by_port)]

        self.sccs = list(reversed(_strongly_connected(self.nodes, succ)))
        for i, members in enumerate(self.sccs):
            for m in members:
                self.nodes[m].scc = i
        self._scc_external: list[list[EdgeQueue]] = [[] for _ in self.sccs]
        self._scc_internal: list[list[EdgeQueue]] = [[] for _ in self.sccs]
        for q in self.queues:
            s = q.node.scc
            (self._scc_internal if q.source_node.scc == s else self._scc_external)[s].append(q)

        self._sources = [n for n in self.nodes if n.is_source]
        self._active_sources = len(self._sources)
        self._ready: deque[_Node] = deque()
        self._executing = 0
        self._live_workers = 0
        self._blocked_workers = 0
        self._threads: list[threading.Thread] = []
        self._source_heads: dict[int, Any] = {}

    # -- wiring used by emitters ------------------------------------------------

    def queues_for(self, emitter) -> list[EdgeQueue]:
        return self._emitter_queues.get(id(emitter), [])

    def stamp(self, originating: Timestamp) -> Timestamp:
        return self.clock.stamp(originating)

    def post(self, q: EdgeQueue, envelope: Envelope, payload: Any) -> PostResult:
        """Offer one message to one edge, waiting out back-pressure."""
        value = payload if q.zero_copy else clone(payload)
        with self.lock:
            while True:
                result = q.offer(envelope, value, self.clock.now())
                if result is not PostResult.BLOCKED:
                    break
                if self.deterministic:
                    self._help_locked(q)
                else:
                    self.throttle_wait(q)
            if result is PostResult.ACCEPTED:
                self._schedule_locked(q.node)
        return result

    def dispatch(self, emitter, envelope: Envelope, payload: Any) -> None:
        for q in self.queues_for(emitter):
            self.post(q, envelope, payload)

    def close_emitter(self, emitter) -> None:
        with self.lock:
            for q in self.queues_for(emitter):
                q.closing = True
                self._schedule_locked(q.node)

    def throttle_wait(self, q: EdgeQueue) -> None:
        """Park the posting component until ``q`` has space. Caller holds the lock.

        A blocked pool worker is compensated by a spare worker so that the pool
        keeps ``worker_count`` threads doing useful work.
        """
        on_worker = getattr(_tls, "scheduler", None) is self
        if on_worker:
            self._blocked_workers += 1
            if self._live_workers - self._blocked_workers < self.config.worker_count:
                self._spawn_worker_locked()
        try:
            while len(q.items) >= q.policy.bound and not q.node.finalized:
                if self._stop.is_set():
                    raise PipelineStopped("pipeline stopped while waiting for queue space")
                self._space.wait(0.1)
        finally:
            if on_worker:
                self._blocked_workers -= 1

    # -- selection ----------------------------------------------------------------

    def _schedule_locked(self, node: _Node) -> None:
        if self.deterministic:
            return
        if not node.scheduled and not node.executing and node.has_work():
            node.scheduled = True
            self._ready.append(node)
            self._work.notify()

    def _take_item_locked(self, node: _Node) -> Optional[WorkItem]:
        if node.force_final:
            return WorkItem(node.index, -1, None, kind=WorkKind.FINAL)
        best = None
        for q in node.queues:
            if q.items:
                head = q.items[0][0]
                if best is None or (head.originating, head.stream_id) < (
                    best.items[0][0].originating,
                    best.items[0][0].stream_id,
                ):
                    best = q
        if best is not None:
            envelope, payload = best.pop(self.clock.now())
            if best.policy.bound is not None:
                self._space.notify_all()
            return WorkItem(node.index, best.receiver.index, envelope, payload)
        for q in node.queues:
            if q.close_ready:
                return WorkItem(node.index, q.receiver.index, None, kind=WorkKind.CLOSE)
        return None

    def next_work(self) -> Optional[WorkItem]:
        """Claim the next deliverable item, or ``None`` when idle."""
        with self.lock:
            if self.deterministic:
                return self._next_deterministic_locked()
            while self._ready:
                node = self._ready.popleft()
                node.scheduled = False
                if node.executing or not node.has_work():
                    continue
                item = self._take_item_locked(node)
                if item is None:
                    continue
                node.executing = True
                self._executing += 1
                return item
            return None

    def _item_key(self, q: EdgeQueue):
        if q.items:
            e = q.items[0][0]
            return (e.originating, e.stream_id, e.sequence)
        return (q.last_posted_originating, q.source_stream, float("inf"))

    def _next_deterministic_locked(self) -> Optional[WorkItem]:
        best_key, best_q = None, None
        for node in self.nodes:
            if node.finalized or node.executing:
                continue
            for q in node.queues:
                if q.items or q.close_ready:
                    k = self._item_key(q)
                    if best_key is None or k < best_key:
                        best_key, best_q = k, q
        best_src = None
        for node in self._sources:
            head = self._source_heads.get(node.index)
            if head is not None:
                emitter, _, originating = head
                k = (originating, emitter.stream_id, emitter.next_sequence)
                if best_key is None or k < best_key:
                    best_key, best_src = k, node
        if best_src is not None:
            return WorkItem(best_src.index, -1, None, kind=WorkKind.MESSAGE)
        if best_q is not None:
            node = best_q.node
            node.executing = True
            self._executing += 1
            if best_q.items:
                envelope, payload = best_q.pop(self.clock.now())
                return WorkItem(node.index, best_q.receiver.index, envelope, payload)
            return WorkItem(node.index, best_q.receiver.index, None, kind=WorkKind.CLOSE)
        for node in self.nodes:
            if node.force_final and not node.finalized and not node.executing:
                node.executing = True
                self._executing += 1
                return WorkItem(node.index, -1, None, kind=WorkKind.FINAL)
        return None

    # -- execution ----------------------------------------------------------------

    def _execute(self, item: WorkItem) -> None:
        node = self.nodes[item.node]
        comp = node.component
        finalize = False
        if item.kind is WorkKind.MESSAGE:
            self.clock.observe(item.envelope.originating)
            if self.trace is not None:
                self.trace.append((item.node, item.port, item.envelope.stream_id, item.envelope.sequence))
            receiver = comp.inputs[item.port]
            try:
                comp._deliver(receiver, item.envelope, item.payload)
            except PipelineStopped:
                pass
            except Exception as exc:  # noqa: BLE001 - routed to the error channel
                self.error_sink(comp, item.envelope, exc)
        elif item.kind is WorkKind.CLOSE:
            q = node.queue_by_port[item.port]
            with self.lock:
                q.closed = True
            try:
                comp.on_closed(comp.inputs[item.port])
            except Exception as exc:  # noqa: BLE001
                self.error_sink(comp, None, exc)
            with self.lock:
                finalize = node.all_closed()
        else:
            with self.lock:
                for q in node.queues:
                    q.drop_all()
                    q.closed = True
            finalize = True
        if finalize:
            self._finalize(node)

    def _finalize(self, node: _Node) -> None:
        comp = node.component
        try:
            comp.on_final()
        except PipelineStopped:
            pass
        except Exception as exc:  # noqa: BLE001
            self.error_sink(comp, None, exc)
        with self.lock:
            node.finalized = True
            node.force_final = False
            for q in node.queues:
                q.drop_all()
                q.closed = True
        for emitter in comp.outputs:
            emitter._close_from_runtime()
        with self.lock:
            self._space.notify_all()

    def _after_execute_locked(self, node: _Node) -> None:
        node.executing = False
        self._executing -= 1
        self._schedule_locked(node)
        self._progress_locked()

    def _progress_locked(self) -> None:
        if not self.draining:
            return
        for s, members in enumerate(self.sccs):
            mnodes = [self.nodes[m] for m in members]
            if all(n.finalized or n.force_final for n in mnodes):
                continue
            if any(n.is_source and not n.finalized for n in mnodes):
                continue
            if not all(q.closed for q in self._scc_external[s]):
                continue
            for n in mnodes:
                if not n.finalized and not n.force_final:
                    if self._scc_internal[s] or not n.queues:
                        n.force_final = True
                        self._schedule_locked(n)
        if self._executing == 0 and all(n.finalized for n in self.nodes):
            self._done.set()
            self._work.notify_all()

    # -- threads ------------------------------------------------------------------

    def _spawn_worker_locked(self) -> None:
        self._live_workers += 1
        t = threading.Thread(target=self._worker, name=f"chronoflow-worker-{len(self._threads)}", daemon=True)
        self._threads.append(t)
        t.start()

    def _worker(self) -> None:
        _tls.scheduler = self
        try:
            while True:
                with self.lock:
                    while True:
                        if self._done.is_set():
                            return
                        if self._live_workers - self._blocked_workers > self.config.worker_count:
                            return
                        item = self.next_work()
                        if item is not None:
                            break
                        self._work.wait(0.1)
                self._execute(item)
                with self.lock:
                    self._after_execute_locked(self.nodes[item.node])
        finally:
            with self.lock:
                self._live_workers -= 1

    def _source_loop(self, node: _Node) -> None:
        comp = node.component
        gen = comp.messages()
        try:
            for emitter, payload, originating in gen:
                if self._stop.is_set():
                    break
                self.clock.wait_until(originating, self._stop)
                if self._stop.is_set():
                    break
                try:
                    emitter.post(payload, originating)
                except PipelineStopped:
                    break
                except Exception as exc:  # noqa: BLE001
                    self.error_sink(comp, None, exc)
        except Exception as exc:  # noqa: BLE001
            self.error_sink(comp, None, exc)
        finally:
            gen.close()
        self._source_finished(node)

    def _source_finished(self, node: _Node) -> None:
        self._finalize(node)
        with self.lock:
            self._active_sources -= 1
            if self._active_sources == 0:
                self.draining = True
            self._progress_locked()

    def _advance_source(self, node: _Node) -> None:
        gen = self._source_heads.pop(node.index, None)
        it = node._iter
        try:
            head = None if self._stop.is_set() else next(it, None)
        except Exception as exc:  # noqa: BLE001
            self.error_sink(node.component, None, exc)
            head = None
        if head is None:
            it.close()
            self._source_finished(node)
        else:
            self._source_heads[node.index] = head

    def _lane(self) -> None:
        _tls.scheduler = self
        for node in self._sources:
            node._iter = iter(node.component.messages())
            self._advance_source(node)
        while not self._done.is_set():
            if self._stop.is_set():
                for node in self._sources:
                    if node.index in self._source_heads:
                        self._source_heads.pop(node.index)
                        node._iter.close()
                        self._source_finished(node)
            item = self.next_work()
            if item is None:
                with self.lock:
                    self._progress_locked()
                    if self._done.is_set():
                        break
                    if not any(n.force_final for n in self.nodes):
                        raise DeterministicDeadlock("no deliverable work but pipeline not finished")
                continue
            node = self.nodes[item.node]
            if node.is_source and item.kind is WorkKind.MESSAGE and item.envelope is None:
                emitter, payload, originating = self._source_heads[node.index]
                self.clock.wait_until(originating, self._stop)
                try:
                    emitter.post(payload, originating)
                except Exception as exc:  # noqa: BLE001
                    self.error_sink(node.component, None, exc)
                self._advance_source(node)
                continue
            self._execute(item)
            with self.lock:
                self._after_execute_locked(node)

    def _help_locked(self, q: EdgeQueue) -> None:
        """Deterministic back-pressure: deliver the blocked queue's head inline."""
        node = q.node
        if node.executing:
            raise DeterministicDeadlock("throttled edge into a component that is mid-callback")
        node.executing = True
        self._executing += 1
        envelope, payload = q.pop(self.clock.now())
        item = WorkItem(node.index, q.receiver.index, envelope, payload)
        self._execute(item)
        self._after_execute_locked(node)

    # -- lifecycle ----------------------------------------------------------------

    def start(self) -> None:
        with self.lock:
            if not self._sources:
                self.draining = True
            if self.deterministic:
                t = threading.Thread(target=self._lane_guarded, name="chronoflow-lane", daemon=True)
                self._threads.append(t)
                self._live_workers += 1
                t.start()
            else:
                for _ in range(self.config.worker_count):
                    self._spawn_worker_locked()
                for node in self._sources:
                    t = threading.Thread(
                        target=self._source_loop, args=(node,), name=f"chronoflow-source-{node.path}", daemon=True
                    )
                    self._threads.append(t)
                    t.start()
            for node in self.nodes:
                self._schedule_locked(node)
            self._progress_locked()

    def _lane_guarded(self) -> None:
        try:
            self._lane()
        except BaseException as exc:  # noqa: BLE001
            self.failure = exc
            self.error_sink(None, None, exc)
            self._done.set()

    def request_stop(self) -> None:
        self._stop.set()
        with self.lock:
            self._space.notify_all()
            self._work.notify_all()

    def wait(self, timeout: Optional[float] = None) -> bool:
        return self._done.wait(timeout)

    @property
    def done(self) -> bool:
        return self._done.is_set()

    def executing_components(self) -> list[str]:
        with self.lock:
            return [n.path for n in self.nodes if n.executing]

    def join_threads(self, timeout: float = 1.0) -> None:
        deadline = time.monotonic() + timeout
        for t in self._threads:
            t.join(max(0.0, deadline - time.monotonic()))

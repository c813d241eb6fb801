"""Pipeline construction and lifecycle.

A pipeline is a graph of components. Components declare typed receivers and
emitters; :meth:`Pipeline.connect` wires an emitter to a receiver under a
delivery policy. Subgraphs can be wrapped into a single component with
:func:`encapsulate`. Once :meth:`Pipeline.run` is called the graph is flattened
to its leaf components and handed to the :class:`~chronoflow.scheduler.Scheduler`.
"""

from __future__ import annotations

import contextlib
import enum
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, Optional, Union

from .diagnostics import DEFAULT_LATENCY_THRESHOLD, EdgeMetrics, PipelineGraphSnapshot
from .scheduler import ClosedEdge, DeliveryPolicy, Scheduler, SchedulerConfig, Unlimited
from .temporal import (
    MAX_SPEED,
    Envelope,
    LogicalClock,
    PacedClock,
    RealTimeClock,
    ReplayDescriptor,
    Timestamp,
    TimeSpan,
    check_envelope,
)


class GraphError(Exception):
    pass


class DuplicateName(GraphError):
    pass


class PipelineAlreadyStarted(GraphError):
    pass


class TypeMismatch(GraphError):
    pass


class ValidationFailed(GraphError):
    pass


class InnerAlreadyStarted(GraphError):
    pass


class FinalizationTimeout(GraphError, TimeoutError):
    pass


class PipelineState(enum.Enum):
    CREATED = "Created"
    RUNNING = "Running"
    DRAINING = "Draining"
    COMPLETED = "Completed"


def type_name(t: Any) -> str:
    if t is Any:
        return "any"
    return getattr(t, "__name__", None) or str(t).replace("typing.", "")


def compatible(a: Any, b: Any) -> bool:
    return a is Any or b is Any or a == b


# -- ports ----------------------------------------------------------------------


class Receiver:
    def __init__(self, owner: "Component", name: str, type_: Any, handler, optional: bool, index: int):
        self.owner = owner
        self.name = name
        self.type_ = type_
        self.handler = handler
        self.optional = optional
        self.index = index
        self.edge: Optional[Edge] = None

    def resolve(self) -> "Receiver":
        return self

    def __repr__(self):
        return f"<Receiver {self.owner.name}.{self.name}: {type_name(self.type_)}>"


class Emitter:
    def __init__(self, owner: "Component", name: str, type_: Any, index: int):
        self.owner = owner
        self.name = name
        self.type_ = type_
        self.index = index
        self.stream_id: int = -1
        self.last_envelope: Optional[Envelope] = None
        self.closed = False
        self._runtime = None

    @property
    def next_sequence(self) -> int:
        return 0 if self.last_envelope is None else self.last_envelope.sequence + 1

    def resolve(self) -> "Emitter":
        return self

    def post(self, payload: Any, originating: Timestamp) -> Envelope:
        """Publish ``payload`` stamped with ``originating``; returns the envelope used.

        Raises :class:`~chronoflow.temporal.EnvelopeViolation` when ``originating``
        does not advance past the previous post (the post is rejected).
        """
        if self.closed:
            raise ClosedEdge(f"{self.owner.name}.{self.name} is closed")
        rt = self._runtime
        if rt is None:
            raise RuntimeError("emitters can only post while their pipeline runs")
        envelope = Envelope(self.stream_id, self.next_sequence, originating, rt.stamp(originating))
        check_envelope(self.last_envelope, envelope)
        self.last_envelope = envelope
        rt.dispatch(self, envelope, payload)
        return envelope

    def _close_from_runtime(self) -> None:
        if not self.closed:
            self.closed = True
            if self._runtime is not None:
                self._runtime.close_emitter(self)

    def __repr__(self):
        return f"<Emitter {self.owner.name}.{self.name}: {type_name(self.type_)} #{self.stream_id}>"


class BoundaryInput:
    """Input port of a composite; forwards to an inner receiver."""

    def __init__(self, owner: "Composite", name: str, inner: Union[Receiver, "BoundaryInput"]):
        self.owner = owner
        self.name = name
        self.inner = inner
        self.type_ = inner.type_
        self.edge: Optional[Edge] = None

    def resolve(self) -> Receiver:
        return self.inner.resolve()


class BoundaryOutput:
    def __init__(self, owner: "Composite", name: str, inner: Union[Emitter, "BoundaryOutput"]):
        self.owner = owner
        self.name = name
        self.inner = inner
        self.type_ = inner.type_

    def resolve(self) -> Emitter:
        return self.inner.resolve()


@dataclass(eq=False)
class Edge:
    from_port: Union[Emitter, BoundaryOutput]
    to_port: Union[Receiver, BoundaryInput]
    policy: DeliveryPolicy
    zero_copy: bool = False
    metrics: EdgeMetrics = field(default_factory=EdgeMetrics)
    id: int = -1

    @property
    def source(self) -> Emitter:
        return self.from_port.resolve()

    @property
    def target(self) -> Receiver:
        return self.to_port.resolve()

    @property
    def type_(self) -> Any:
        t = self.from_port.type_
        return self.to_port.type_ if t is Any else t


# -- components ---------------------------------------------------------------


class Component:
    """Base class for pipeline components.

    Subclasses declare ports in ``__init__`` and override the lifecycle
    callbacks they need. The runtime never calls two callbacks of the same
    component concurrently, so component state needs no locking.
    """

    is_source = False
    is_composite = False

    def __init__(self):
        self.inputs: list[Receiver] = []
        self.outputs: list[Emitter] = []
        self.name: Optional[str] = None
        self.node_id: Optional[int] = None
        self.pipeline: Optional[Pipeline] = None

    def add_input(
        self,
        name: str,
        type_: Any = Any,
        handler: Optional[Callable[[Any, Envelope], None]] = None,
        *,
        optional: bool = False,
    ) -> Receiver:
        r = Receiver(self, name, type_, handler, optional, len(self.inputs))
        self.inputs.append(r)
        return r

    def add_output(self, name: str, type_: Any = Any) -> Emitter:
        e = Emitter(self, name, type_, len(self.outputs))
        self.outputs.append(e)
        if self.pipeline is not None:
            self.pipeline._root()._assign_stream_id(e)
        return e

    def port(self, name: str):
        for p in (*self.inputs, *self.outputs):
            if p.name == name:
                return p
        raise KeyError(f"{self.name or type(self).__name__} has no port {name!r}")

    # lifecycle callbacks

    def on_start(self) -> None:
        pass

    def on_message(self, receiver: Receiver, envelope: Envelope, payload: Any) -> None:
        raise NotImplementedError(f"{type(self).__name__} has no handler for {receiver.name!r}")

    def on_closed(self, receiver: Receiver) -> None:
        pass

    def on_final(self) -> None:
        pass

    def _deliver(self, receiver: Receiver, envelope: Envelope, payload: Any) -> None:
        if receiver.handler is not None:
            receiver.handler(payload, envelope)
        else:
            self.on_message(receiver, envelope, payload)

    # helpers for subclasses

    def now(self) -> Timestamp:
        return self.pipeline.now() if self.pipeline is not None else time.time_ns()

    def report_error(self, envelope: Optional[Envelope], exc: BaseException) -> None:
        if self.pipeline is not None:
            self.pipeline._root()._record_error(self, envelope, exc)


class Source(Component):
    """A component that originates messages.

    Subclasses implement :meth:`messages`, yielding ``(emitter, payload,
    originating)`` tuples. The runtime posts each one once the pipeline clock
    reaches ``originating`` (immediately for unpaced clocks); exhausting the
    iterator completes the source.
    """

    is_source = True

    def add_input(self, *args, **kwargs):
        raise TypeError("sources do not take inputs")

    def messages(self) -> Iterator[tuple[Emitter, Any, Timestamp]]:
        raise NotImplementedError


class Composite(Component):
    is_composite = True

    def __init__(self, inner: "Pipeline", inputs: dict, outputs: dict):
        super().__init__()
        self.inner = inner
        self.inputs = [BoundaryInput(self, n, p) for n, p in inputs.items()]
        self.outputs = [BoundaryOutput(self, n, p) for n, p in outputs.items()]

    def add_input(self, *args, **kwargs):
        raise TypeError("composite ports come from encapsulate()")

    add_output = add_input


def encapsulate(inner: "Pipeline", inputs: dict, outputs: dict) -> Composite:
    """Wrap ``inner`` as one component exposing the given inner ports.

    ``inputs`` maps boundary names to inner receivers, ``outputs`` to inner
    emitters (boundary ports of nested composites work too). Boundary crossings
    are plain wiring, so envelopes pass through unchanged.
    """
    if inner.state is not PipelineState.CREATED:
        raise InnerAlreadyStarted("cannot encapsulate a pipeline that has run")
    if inner._sealed:
        raise InnerAlreadyStarted("pipeline is already encapsulated")
    for name, p in inputs.items():
        if not isinstance(p, (Receiver, BoundaryInput)) or p.owner not in inner.nodes:
            raise TypeMismatch(f"boundary input {name!r} does not map to a receiver of the inner pipeline")
        if p.edge is not None:
            raise TypeMismatch(f"boundary input {name!r} maps to an already connected receiver")
    for name, p in outputs.items():
        if not isinstance(p, (Emitter, BoundaryOutput)) or p.owner not in inner.nodes:
            raise TypeMismatch(f"boundary output {name!r} does not map to an emitter of the inner pipeline")
    comp = Composite(inner, inputs, outputs)
    inner._sealed = True
    inner._parent = comp
    return comp


# -- pipeline -------------------------------------------------------------------


@dataclass
class ComponentError:
    component: Optional[str]
    envelope: Optional[Envelope]
    exception: BaseException


@dataclass
class CompletionReport:
    edges: list[EdgeMetrics]
    errors: list[ComponentError]
    duration: float
    trace: Optional[list] = None

    def for_edge(self, edge: Edge) -> EdgeMetrics:
        return self.edges[edge.id]

    @property
    def delivered(self) -> list[int]:
        return [m.delivered for m in self.edges]

    @property
    def dropped(self) -> list[int]:
        return [m.dropped for m in self.edges]


class Pipeline:
    def __init__(
        self,
        name: str = "pipeline",
        *,
        workers: Optional[int] = None,
        deterministic: bool = False,
        clock=None,
        latency_threshold: TimeSpan = DEFAULT_LATENCY_THRESHOLD,
        finalization_timeout: Optional[float] = 60.0,
        record_trace: bool = False,
    ):
        self.name = name
        self._workers = workers
        self._deterministic = deterministic
        self._clock_override = clock
        self.latency_threshold = latency_threshold
        self.finalization_timeout = finalization_timeout
        self.record_trace = record_trace
        self.nodes: list[Component] = []
        self.edges: list[Edge] = []
        self._names: set[str] = set()
        self._state = PipelineState.CREATED
        self._sealed = False
        self._parent: Optional[Composite] = None
        self._next_stream = 0
        self._errors: list[ComponentError] = []
        self._errors_lock = threading.Lock()
        self._hooks: list = []
        self._scheduler: Optional[Scheduler] = None
        self._clock = None
        self._report: Optional[CompletionReport] = None
        self._started_at = 0.0
        self.replay: Optional[ReplayDescriptor] = None

    # -- construction ---------------------------------------------------------------

    @property
    def state(self) -> PipelineState:
        if self._state is PipelineState.RUNNING and self._scheduler is not None and self._scheduler.draining:
            return PipelineState.DRAINING
        return self._state

    def _root(self) -> "Pipeline":
        p = self
        while p._parent is not None and p._parent.pipeline is not None:
            p = p._parent.pipeline
        return p

    def _check_mutable(self) -> None:
        if self._state is not PipelineState.CREATED:
            raise PipelineAlreadyStarted(f"pipeline {self.name!r} has already been started")
        if self._sealed:
            raise PipelineAlreadyStarted(f"pipeline {self.name!r} is encapsulated and can no longer change")

    def _assign_stream_id(self, emitter: Emitter) -> None:
        emitter.stream_id = self._next_stream
        self._next_stream += 1

    def _assign_ids(self, comp: Component) -> None:
        if comp.is_composite:
            for c in comp.inner.nodes:
                self._assign_ids(c)
        else:
            for e in comp.outputs:
                self._assign_stream_id(e)

    def add_component(self, component: Component, name: str) -> int:
        """Register ``component`` under a unique ``name``; returns its node id."""
        self._check_mutable()
        if name in self._names:
            raise DuplicateName(f"component name {name!r} already used in {self.name!r}")
        if "/" in name:
            raise ValueError("component names cannot contain '/'")
        if component.pipeline is not None:
            raise GraphError(f"component is already part of pipeline {component.pipeline.name!r}")
        component.name = name
        component.node_id = len(self.nodes)
        component.pipeline = self
        self.nodes.append(component)
        self._names.add(name)
        # an unsealed pipeline is always its own root; embedding renumbers again
        self._assign_ids(component)
        return component.node_id

    def add(self, component: Component, name: str) -> Component:
        """Like :meth:`add_component` but returns the component, for chaining."""
        self.add_component(component, name)
        return component

    def connect(
        self,
        source: Union[Emitter, BoundaryOutput],
        target: Union[Receiver, BoundaryInput],
        policy: Optional[DeliveryPolicy] = None,
        *,
        zero_copy: bool = False,
    ) -> Edge:
        """Wire ``source`` to ``target``.

        Payloads are deep-copied per edge on delivery unless ``zero_copy`` is
        set; with ``zero_copy`` the receiver aliases the producer's object and
        must not mutate it.
        """
        self._check_mutable()
        if not isinstance(source, (Emitter, BoundaryOutput)):
            raise TypeMismatch(f"{source!r} is not an output port")
        if not isinstance(target, (Receiver, BoundaryInput)):
            raise TypeMismatch(f"{target!r} is not an input port")
        for port in (source, target):
            if port.owner not in self.nodes:
                raise GraphError(f"port {port.name!r} belongs to a component outside {self.name!r}")
        if not compatible(source.type_, target.type_):
            raise TypeMismatch(
                f"cannot connect {type_name(source.type_)} output to {type_name(target.type_)} input"
            )
        leaf = target.resolve()
        if leaf.edge is not None or target.edge is not None:
            raise GraphError(f"input {target.name!r} is already connected")
        edge = Edge(source, target, policy or Unlimited(), zero_copy)
        leaf.edge = edge
        target.edge = edge
        self.edges.append(edge)
        return edge

    # -- flattening / description -------------------------------------------------

    def _flatten(self, prefix: str = "") -> tuple[list, list[Edge]]:
        leaves: list = []
        edges: list[Edge] = []
        for comp in self.nodes:
            path = prefix + comp.name
            if comp.is_composite:
                sub_leaves, sub_edges = comp.inner._flatten(path + "/")
                leaves.extend(sub_leaves)
                edges.extend(sub_edges)
            else:
                leaves.append((path, comp))
        edges.extend(self.edges)
        return leaves, edges

    def _leaf_edges(self) -> list[Edge]:
        _, edges = self._flatten()
        for i, e in enumerate(edges):
            e.id = i
            e.metrics.edge_id = i
        return edges

    def _describe(self, prefix: str = "", paths: Optional[dict] = None) -> PipelineGraphSnapshot:
        is_root = paths is None
        if is_root:
            leaves, _ = self._flatten()
            paths = {id(c): p for p, c in leaves}
            self._leaf_edges()
        nodes = []
        for comp in self.nodes:
            path = prefix + comp.name
            nodes.append(
                {
                    "id": comp.node_id,
                    "name": comp.name,
                    "path": path,
                    "type": type(comp).__name__,
                    "is_source": comp.is_source,
                    "is_composite": comp.is_composite,
                    "children": comp.inner._describe(path + "/", paths) if comp.is_composite else None,
                }
            )
        edges = [
            {
                "edge_id": e.id,
                "from_node": e.from_port.owner.name,
                "from_port": e.from_port.name,
                "to_node": e.to_port.owner.name,
                "to_port": e.to_port.name,
                "policy": str(e.policy),
                "type": type_name(e.type_),
            }
            for e in self.edges
        ]
        snap = PipelineGraphSnapshot(self.name, nodes, edges, state=self.state.value)
        if is_root:
            snap.leaf_edges = [
                {
                    "edge_id": e.id,
                    "from_path": paths[id(e.source.owner)],
                    "from_port": e.source.name,
                    "to_path": paths[id(e.target.owner)],
                    "to_port": e.target.name,
                    "policy": str(e.policy),
                    "type": type_name(e.type_),
                }
                for e in self._leaf_edges()
            ]
        return snap

    def _metrics_lock(self):
        return self._scheduler.lock if self._scheduler is not None else contextlib.nullcontext()

    # -- running ----------------------------------------------------------------------

    def now(self) -> Timestamp:
        root = self._root()
        return root._clock.now() if root._clock is not None else time.time_ns()

    @property
    def errors(self) -> list[ComponentError]:
        with self._errors_lock:
            return list(self._errors)

    def _record_error(self, component, envelope, exc) -> None:
        with self._errors_lock:
            self._errors.append(ComponentError(getattr(component, "name", None), envelope, exc))

    def _add_lifecycle_hook(self, hook) -> None:
        self._check_mutable()
        self._hooks.append(hook)

    def _make_clock(self, replay: Optional[ReplayDescriptor], deterministic: bool):
        if self._clock_override is not None:
            return self._clock_override
        if replay is None:
            return LogicalClock(0) if deterministic else RealTimeClock()
        if deterministic:
            pacer = None if replay.speed is MAX_SPEED else PacedClock(replay.start, replay.speed)
            return LogicalClock(replay.start, pacer)
        if replay.speed is MAX_SPEED:
            return LogicalClock(replay.start)
        return PacedClock(replay.start, replay.speed)

    def validate(self) -> tuple[list, list[Edge]]:
        leaves, _ = self._flatten()
        edges = self._leaf_edges()
        dangling = [
            f"{path}.{r.name}"
            for path, comp in leaves
            for r in comp.inputs
            if r.edge is None and not r.optional
        ]
        if dangling:
            raise ValidationFailed("unconnected required inputs: " + ", ".join(dangling))
        for e in edges:
            if not compatible(e.source.type_, e.target.type_):
                raise ValidationFailed(f"edge {e.id} joins incompatible types")
        return leaves, edges

    def run(self, replay: Optional[ReplayDescriptor] = None) -> "RunHandle":
        """Start execution and return immediately with a :class:`RunHandle`."""
        if self._sealed:
            raise PipelineAlreadyStarted("an encapsulated pipeline runs as part of its parent")
        if self._state is not PipelineState.CREATED:
            raise PipelineAlreadyStarted(f"pipeline {self.name!r} has already been started")
        leaves, edges = self.validate()
        config = SchedulerConfig.resolve(self._workers, self._deterministic or bool(replay and replay.deterministic))
        self.config = config
        self.replay = replay
        self._clock = self._make_clock(replay, config.deterministic)
        sched = Scheduler(
            leaves,
            edges,
            config,
            self._clock,
            latency_threshold=self.latency_threshold,
            error_sink=self._record_error,
            record_trace=self.record_trace,
        )
        self._scheduler = sched
        for _, comp in leaves:
            for e in comp.outputs:
                e._runtime = sched
                e.last_envelope = None
                e.closed = False
        self._state = PipelineState.RUNNING
        self._started_at = time.perf_counter()
        for _, comp in leaves:
            try:
                comp.on_start()
            except Exception as exc:  # noqa: BLE001
                self._record_error(comp, None, exc)
        for hook in self._hooks:
            hook.pipeline_started(config.deterministic)
        sched.start()
        return RunHandle(self)

    def stop(self) -> None:
        if self._scheduler is not None:
            self._scheduler.request_stop()

    def drain_and_finalize(self, timeout: Optional[float] = None, *, stop: bool = False) -> CompletionReport:
        """Wait for all sources to finish (or stop them), drain queues and finalize.

        Raises :class:`FinalizationTimeout` if the pipeline is still busy after
        ``timeout`` seconds (default: the pipeline's ``finalization_timeout``).
        """
        if self._scheduler is None:
            raise GraphError("pipeline has not been started")
        if self._report is not None:
            return self._report
        if stop:
            self.stop()
        limit = self.finalization_timeout if timeout is None else timeout
        if not self._scheduler.wait(limit):
            busy = self._scheduler.executing_components()
            raise FinalizationTimeout(
                f"pipeline {self.name!r} did not finish within {limit}s; busy: {', '.join(busy) or 'none'}"
            )
        failure = getattr(self._scheduler, "failure", None)
        self._scheduler.join_threads()
        self._state = PipelineState.COMPLETED
        for hook in self._hooks:  # they see the final state
            hook.pipeline_completed()
        edges = self._leaf_edges()
        self._report = CompletionReport(
            edges=[e.metrics.copy() for e in edges],
            errors=self.errors,
            duration=time.perf_counter() - self._started_at,
            trace=self._scheduler.trace,
        )
        if failure is not None:
            raise failure
        return self._report

    def run_to_completion(self, replay: Optional[ReplayDescriptor] = None, timeout: Optional[float] = None) -> CompletionReport:
        return self.run(replay).wait(timeout)


class RunHandle:
    def __init__(self, pipeline: Pipeline):
        self.pipeline = pipeline

    def wait(self, timeout: Optional[float] = None) -> CompletionReport:
        return self.pipeline.drain_and_finalize(timeout)

    def stop(self) -> None:
        self.pipeline.stop()

    @property
    def done(self) -> bool:
        return self.pipeline._scheduler.done

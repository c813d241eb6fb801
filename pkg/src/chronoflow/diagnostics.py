"""Runtime introspection: per-edge metrics, topology snapshots and DOT export."""

from __future__ import annotations

import json
import threading
from dataclasses import asdict, dataclass, field
from typing import TYPE_CHECKING, Any, Optional

from .temporal import NS_PER_MS, Envelope, Timestamp, TimeSpan

if TYPE_CHECKING:
    from .graph import Pipeline

DEFAULT_LATENCY_THRESHOLD: TimeSpan = 500 * NS_PER_MS
DEFAULT_SNAPSHOT_INTERVAL: TimeSpan = 100 * NS_PER_MS
DIAGNOSTICS_STREAM = "__diagnostics"


@dataclass
class EdgeMetrics:
    edge_id: int = -1
    queue_len: int = 0
    queue_max: int = 0
    posted: int = 0
    delivered: int = 0
    dropped: int = 0
    latency_last: TimeSpan = 0
    latency_avg: float = 0.0
    latency_max: TimeSpan = 0
    over_threshold: bool = False
    latency_total: int = 0

    def copy(self) -> "EdgeMetrics":
        return EdgeMetrics(**asdict(self))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EdgeMetrics":
        return cls(**d)


def record_delivery(
    metrics: EdgeMetrics,
    envelope: Envelope,
    delivered_at: Timestamp,
    threshold: TimeSpan = DEFAULT_LATENCY_THRESHOLD,
) -> EdgeMetrics:
    """Account one delivery. Caller holds the edge queue's exclusion."""
    latency = delivered_at - envelope.originating
    metrics.delivered += 1
    metrics.latency_last = latency
    metrics.latency_total += latency
    metrics.latency_avg = metrics.latency_total / metrics.delivered
    if metrics.delivered == 1 or latency > metrics.latency_max:
        metrics.latency_max = latency
    metrics.over_threshold = latency > threshold
    return metrics


@dataclass
class PipelineGraphSnapshot:
    """Hierarchical topology.

    ``nodes`` carry nested ``children`` snapshots for composites. ``edges`` are
    the edges declared at this level; ``leaf_edges`` (root only) are the
    resolved edges between leaf node paths, carrying the runtime edge ids.
    """

    name: str
    nodes: list = field(default_factory=list)
    edges: list = field(default_factory=list)
    leaf_edges: list = field(default_factory=list)
    state: str = "Created"

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "state": self.state,
            "nodes": [_node_to_dict(n) for n in self.nodes],
            "edges": list(self.edges),
            "leaf_edges": list(self.leaf_edges),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineGraphSnapshot":
        return cls(
            name=d["name"],
            nodes=[_node_from_dict(n) for n in d["nodes"]],
            edges=list(d.get("edges", [])),
            leaf_edges=list(d.get("leaf_edges", [])),
            state=d.get("state", "Created"),
        )

    def leaves(self) -> list[dict]:
        out = []

        def walk(nodes):
            for n in nodes:
                if n["is_composite"]:
                    walk(n["children"].nodes)
                else:
                    out.append(n)

        walk(self.nodes)
        return out


def _node_to_dict(n: dict) -> dict:
    d = dict(n)
    if d.get("children") is not None:
        d["children"] = d["children"].to_dict()
    return d


def _node_from_dict(n: dict) -> dict:
    d = dict(n)
    if d.get("children") is not None:
        d["children"] = PipelineGraphSnapshot.from_dict(d["children"])
    return d


def snapshot(pipeline: "Pipeline") -> tuple[PipelineGraphSnapshot, list[EdgeMetrics]]:
    """Point-in-time topology plus a copy of every leaf edge's metrics.

    Each edge's counters are copied under the scheduler lock, so per-edge
    conservation holds; cross-edge consistency is only guaranteed at quiescence.
    """
    graph = pipeline._describe()
    lock = pipeline._metrics_lock()
    with lock:
        metrics = [e.metrics.copy() for e in pipeline._leaf_edges()]
    return graph, metrics


def snapshot_message(pipeline: "Pipeline") -> dict:
    graph, metrics = snapshot(pipeline)
    return {"graph": graph.to_dict(), "edges": [m.to_dict() for m in metrics]}


def parse_snapshot_message(payload: Any) -> tuple[PipelineGraphSnapshot, list[EdgeMetrics]]:
    if isinstance(payload, (bytes, str)):
        payload = json.loads(payload)
    return (
        PipelineGraphSnapshot.from_dict(payload["graph"]),
        [EdgeMetrics.from_dict(m) for m in payload["edges"]],
    )


# -- DOT ---------------------------------------------------------------------


def _quote(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"') + '"'


def export_dot(snap: PipelineGraphSnapshot, depth: Optional[int] = None) -> str:
    """Render ``snap`` as a DOT digraph.

    Composites nested deeper than ``depth`` collapse into a single node; ``None``
    expands everything. Edges are drawn between the visible ancestors of their
    leaf endpoints, so edges internal to a collapsed composite disappear.
    """
    lines = [f"digraph {_quote(snap.name)} {{", "  rankdir=LR;", "  node [shape=box];"]

    def visible(path: str) -> str:
        parts = path.split("/")
        if depth is None:
            return path
        return "/".join(parts[: depth + 1])

    def emit_nodes(nodes, level, indent):
        for n in nodes:
            if n["is_composite"] and (depth is None or level < depth):
                lines.append(f"{indent}subgraph {_quote('cluster_' + n['path'])} {{")
                lines.append(f"{indent}  label={_quote(n['name'])};")
                emit_nodes(n["children"].nodes, level + 1, indent + "  ")
                lines.append(f"{indent}}}")
            else:
                attrs = [f"label={_quote(n['name'])}"]
                if n["is_composite"]:
                    attrs.append("shape=box3d")
                elif n["is_source"]:
                    attrs.append("shape=ellipse")
                lines.append(f"{indent}{_quote(n['path'])} [{', '.join(attrs)}];")

    emit_nodes(snap.nodes, 0, "  ")
    for e in snap.leaf_edges:
        src, dst = visible(e["from_path"]), visible(e["to_path"])
        if src == dst and (src != e["from_path"] or dst != e["to_path"]):
            continue
        label = f"{e['type']} / {e['policy']}"
        lines.append(f"  {_quote(src)} -> {_quote(dst)} [label={_quote(label)}];")
    lines.append("}")
    return "\n".join(lines) + "\n"


# -- metrics stream ------------------------------------------------------------


class DiagnosticsRecorder:
    """Persists snapshots of a pipeline into a store as the ``__diagnostics`` stream.

    Live runs write a snapshot every ``interval`` of wall time plus a final one
    at completion; deterministic runs write only the final snapshot so that the
    store stays reproducible.
    """

    def __init__(self, pipeline: "Pipeline", writer, interval: TimeSpan = DEFAULT_SNAPSHOT_INTERVAL):
        if interval <= 0:
            raise ValueError("snapshot interval must be positive")
        self.pipeline = pipeline
        self.writer = writer
        self.interval = interval
        self.stream_id = writer.create_stream(DIAGNOSTICS_STREAM, "json")
        self._last: Optional[Timestamp] = None
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None
        pipeline._add_lifecycle_hook(self)

    def _write(self) -> None:
        t = self.pipeline.now()
        if self._last is not None and t <= self._last:
            t = self._last + 1
        self._last = t
        self.writer.write(self.stream_id, t, snapshot_message(self.pipeline), creation=t)

    def _loop(self) -> None:
        while not self._stop.wait(self.interval / 1e9):
            self._write()

    def pipeline_started(self, deterministic: bool) -> None:
        if not deterministic:
            self._thread = threading.Thread(target=self._loop, name="chronoflow-diagnostics", daemon=True)
            self._thread.start()

    def pipeline_completed(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join()
        self._write()

"""Synthetic pipeline-parallelism benchmark.

A burst source fans out to ``stages`` independent, equal-cost stages which
all feed one sink. Stage cost is SHA-256 over a private work buffer (hashlib
releases the GIL for large buffers, so stages really can overlap) plus an
optional blocking wait.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from typing import Optional

from .components import Burst
from .diagnostics import DiagnosticsRecorder, EdgeMetrics
from .graph import Component, Pipeline
from .scheduler import DeliveryPolicy, Unlimited


class HashStage(Component):
    def __init__(self, hash_rounds: int, work_bytes: int, wait_s: float):
        super().__init__()
        self.hash_rounds = hash_rounds
        self.wait_s = wait_s
        self._buf = bytes(work_bytes)
        self.input = self.add_input("in", bytes, self._on_value)
        self.out = self.add_output("out", bytes)

    def _on_value(self, payload, envelope):
        h = hashlib.sha256(payload)
        for _ in range(self.hash_rounds):
            h.update(self._buf)
        if self.wait_s:
            time.sleep(self.wait_s)
        self.out.post(payload, envelope.originating)


class CountingSink(Component):
    def __init__(self, inputs: int):
        super().__init__()
        self.counts = [0] * inputs
        self.payload_sizes: set[int] = set()
        for i in range(inputs):
            self.add_input(f"in{i}", bytes)

    def on_message(self, receiver, envelope, payload):
        self.counts[receiver.index] += 1
        self.payload_sizes.add(len(payload))


@dataclass
class BenchReport:
    stages: int
    messages: int
    workers: int
    payload_bytes: int
    duration_s: float
    throughput: float
    edges: list[EdgeMetrics] = field(default_factory=list)
    edge_names: list[str] = field(default_factory=list)
    sink_counts: list[int] = field(default_factory=list)
    errors: int = 0

    @property
    def lossless(self) -> bool:
        return all(e.dropped == 0 and e.delivered == e.posted for e in self.edges)

    def summary(self) -> dict:
        return {
            "kind": "summary",
            "stages": self.stages,
            "messages": self.messages,
            "workers": self.workers,
            "payload_bytes": self.payload_bytes,
            "duration_s": self.duration_s,
            "throughput_msg_s": self.throughput,
            "errors": self.errors,
        }

    def jsonl(self) -> str:
        lines = [json.dumps(self.summary())]
        for name, e in zip(self.edge_names, self.edges):
            lines.append(json.dumps({"kind": "edge", "edge": name, **e.to_dict()}))
        return "\n".join(lines) + "\n"

    def text(self) -> str:
        w = max([4, *map(len, self.edge_names)])
        out = [
            f"stages={self.stages} messages={self.messages} workers={self.workers} payload_bytes={self.payload_bytes}",
            f"duration {self.duration_s:.3f} s, throughput {self.throughput:.1f} msg/s",
            f"{'edge':<{w}} {'posted':>8} {'delivered':>9} {'dropped':>7} {'queue_max':>9} {'lat_avg_ms':>10} {'lat_max_ms':>10}",
        ]
        for name, e in zip(self.edge_names, self.edges):
            out.append(
                f"{name:<{w}} {e.posted:>8} {e.delivered:>9} {e.dropped:>7} {e.queue_max:>9} "
                f"{e.latency_avg / 1e6:>10.3f} {e.latency_max / 1e6:>10.3f}"
            )
        return "\n".join(out) + "\n"


def build(
    stages: int,
    messages: int,
    workers: Optional[int],
    payload_bytes: int,
    *,
    hash_rounds: int = 4,
    work_bytes: int = 1 << 16,
    wait_s: float = 0.0,
    policy: Optional[DeliveryPolicy] = None,
) -> tuple[Pipeline, CountingSink]:
    if stages < 1 or messages < 1 or (workers is not None and workers < 1) or payload_bytes < 0:
        raise ValueError("stages, messages and workers must be >= 1 and payload_bytes >= 0")
    p = Pipeline("bench", workers=workers, finalization_timeout=None)
    src = p.add(Burst(messages, lambda i: bytes(payload_bytes), bytes), "source")
    sink = CountingSink(stages)
    stage_nodes = [p.add(HashStage(hash_rounds, work_bytes, wait_s), f"stage{i}") for i in range(stages)]
    p.add(sink, "sink")
    for i, st in enumerate(stage_nodes):
        p.connect(src.out, st.input, policy or Unlimited())
        p.connect(st.out, sink.inputs[i], policy or Unlimited())
    return p, sink


def run_bench(
    stages: int,
    messages: int,
    workers: Optional[int],
    payload_bytes: int,
    *,
    hash_rounds: int = 4,
    work_bytes: int = 1 << 16,
    wait_s: float = 0.0,
    store: Optional[str] = None,
    timeout: Optional[float] = None,
) -> BenchReport:
    """Run the benchmark; with ``store`` the run's diagnostics are persisted there."""
    from .store import StoreWriter

    p, sink = build(stages, messages, workers, payload_bytes, hash_rounds=hash_rounds, work_bytes=work_bytes, wait_s=wait_s)
    writer = StoreWriter(store, overwrite=True) if store else None
    if writer is not None:
        DiagnosticsRecorder(p, writer)
    try:
        t0 = time.perf_counter()
        report = p.run_to_completion(timeout=timeout)
        dt = time.perf_counter() - t0
    finally:
        if writer is not None:
            writer.close()
    edges = p._leaf_edges()
    names = [f"{e.source.owner.name}.{e.source.name}->{e.target.owner.name}.{e.target.name}" for e in edges]
    return BenchReport(
        stages=stages,
        messages=messages,
        workers=p.config.worker_count,
        payload_bytes=payload_bytes,
        duration_s=dt,
        throughput=messages / dt if dt > 0 else float("inf"),
        edges=report.edges,
        edge_names=names,
        sink_counts=list(sink.counts),
        errors=len(report.errors),
    )

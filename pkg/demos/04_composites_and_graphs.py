"""Hide a subgraph behind one component and look at it from outside.

A "cleanup" composite (clamp, then drop outliers) is reused twice. The DOT
export can expand every level or collapse composites into single boxes, and
the same picture can be rebuilt later from the diagnostics stream of a store.
"""

import tempfile
from pathlib import Path

from chronoflow import Collector, DiagnosticsRecorder, Pipeline, Sequence, StoreWriter, encapsulate, export_dot, snapshot
from chronoflow import operators as ops
from chronoflow.cli import main as cli


def cleanup():
    inner = Pipeline("cleanup")
    clamp = inner.add(ops.Map(lambda x: max(-50, min(50, x))), "clamp")
    keep = inner.add(ops.Filter(lambda x: abs(x) < 50), "drop_outliers")
    inner.connect(clamp.out, keep.input)
    return encapsulate(inner, {"in": clamp.input}, {"out": keep.out})


p = Pipeline("plant", deterministic=True)
left = p.add(Sequence([(t, (t * 37) % 130 - 65) for t in range(100)]), "left_probe")
right = p.add(Sequence([(t, (t * 53) % 110 - 55) for t in range(100)]), "right_probe")
lc, rc = p.add(cleanup(), "clean_left"), p.add(cleanup(), "clean_right")
p.connect(left.out, lc.port("in"))
p.connect(right.out, rc.port("in"))
both = ops.zip(p, [lc.port("out"), rc.port("out")], name="align")
sink = p.add(Collector(), "sink")
p.connect(both, sink.input)

graph, _ = snapshot(p)
print(export_dot(graph, depth=0))

with tempfile.TemporaryDirectory() as tmp:
    store = Path(tmp) / "run"
    with StoreWriter(store) as w:
        DiagnosticsRecorder(p, w)
        report = p.run_to_completion()
    print(f"{len(sink.values)} aligned groups; per-edge delivered: {report.delivered}")
    print("\nexpanded view, rebuilt from the store:\n")
    cli(["graph", "--store", str(store)])

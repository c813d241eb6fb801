import os
import random

import pytest
from hypothesis import HealthCheck, settings

from chronoflow import Collector, Pipeline, Sequence
from chronoflow.store import StoreWriter

settings.register_profile(
    "default",
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def run_linear(items, build, *, deterministic=True, type_=object, **kw):
    """Sequence(items) -> build(p, emitter) -> Collector; returns (collector, report)."""
    p = Pipeline("t", deterministic=deterministic, **kw)
    src = p.add(Sequence(items), "src")
    out = build(p, src.out)
    sink = p.add(Collector(), "sink")
    p.connect(out, sink.input)
    report = p.run_to_completion(timeout=30)
    return sink, report


def pairs(sink, port=0):
    return [(e.originating, v) for e, v in sink.received[port]]


def monotone_times(rng: random.Random, n: int, lo: int = 0, max_gap: int = 10) -> list[int]:
    t = lo + rng.randint(0, max_gap)
    out = []
    for _ in range(n):
        out.append(t)
        t += rng.randint(1, max_gap)
    return out


@pytest.fixture
def make_store(tmp_path):
    """make_store(name, {stream: (codec, [(t, value), ...])}) -> path of a closed store."""

    def make(name="store", streams=None, granularity=64):
        path = tmp_path / name
        with StoreWriter(path, index_granularity=granularity) as w:
            for sname, (codec, items) in (streams or {}).items():
                sid = w.create_stream(sname, codec)
                for t, v in items:
                    w.write(sid, t, v)
        return path

    return make

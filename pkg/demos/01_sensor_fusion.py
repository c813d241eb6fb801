"""Fusing two sensors that tick at different rates.

A 50 Hz accelerometer and a 20 Hz gyroscope are paired by originating time.
The join only commits to a pairing once no later gyroscope message could
change it, so the answer is the same whether the pipeline runs on a worker
pool or in deterministic mode.
"""

from chronoflow import Collector, Nearest, Pipeline, Sequence, format_timestamp, millis
from chronoflow import operators as ops

accel = [(millis(20 * i), round(0.1 * i, 2)) for i in range(25)]  # 50 Hz
gyro = [(millis(50 * i + 3), -i) for i in range(10)]  # 20 Hz, 3 ms skew


def fuse(deterministic):
    p = Pipeline("fusion", deterministic=deterministic, workers=4)
    a = p.add(Sequence(accel), "accel")
    g = p.add(Sequence(gyro), "gyro")
    # anything further than 10 ms away is no partner at all
    pairs = ops.join(p, a.out, g.out, Nearest(millis(10)), name="join")
    sink = p.add(Collector(), "sink")
    p.connect(pairs, sink.input)
    report = p.run_to_completion()
    join = p.nodes[2]
    return [(e.originating, v) for e, v in sink.received[0]], join.dropped, report


live, dropped, report = fuse(False)
replayed, _, _ = fuse(True)

print(f"{len(live)} fused pairs, {dropped} accelerometer samples had no gyro within 10 ms")
for t, (acc, gy) in live[:6]:
    print(f"  {format_timestamp(t)}  accel={acc:<5} gyro={gy}")
print("worker pool and deterministic mode agree:", live == replayed)
print("edges:", [(m.posted, m.delivered) for m in report.edges])

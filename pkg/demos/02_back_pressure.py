"""What a slow consumer does to each delivery policy.

The producer emits 2000 readings as fast as it can and the consumer needs
about half a millisecond per reading. Throttle blocks the producer and loses
nothing; LatestMessage keeps only the freshest value; QueueSize keeps a short
backlog and throws away the oldest.
"""

import time

from chronoflow import Burst, Collector, LatestMessage, Pipeline, QueueSize, Throttle, Unlimited

N = 2000


def run(policy):
    p = Pipeline("pressure", workers=2)
    src = p.add(Burst(N), "sensor")
    sink = p.add(Collector(on_value=lambda v, e: time.sleep(0.0005)), "slow")
    edge = p.connect(src.out, sink.input, policy)
    t0 = time.perf_counter()
    m = p.run_to_completion().for_edge(edge)
    return m, sink.values[-1], time.perf_counter() - t0


print(f"{'policy':<16}{'posted':>8}{'delivered':>10}{'dropped':>9}{'max queue':>10}{'last':>6}{'wall s':>8}")
for policy in (Unlimited(), Throttle(4), QueueSize(8), LatestMessage()):
    m, last, wall = run(policy)
    assert m.posted == m.delivered + m.dropped
    print(f"{policy!s:<16}{m.posted:>8}{m.delivered:>10}{m.dropped:>9}{m.queue_max:>10}{last:>6}{wall:>8.2f}")

"""Record a live run, then replay it twice and get identical bytes.

A live pipeline smooths a noisy temperature signal and writes both the raw and
smoothed streams into a store. Replaying the raw stream in deterministic mode
through the same smoothing reproduces the derived store byte for byte, and a
cropped copy keeps only the middle of the recording.
"""

import random
import tempfile
from pathlib import Path

from chronoflow import ByCount, Pipeline, ReplaySource, Sequence, StoreReader, StoreSink, StoreWriter, crop, seconds
from chronoflow import operators as ops
from chronoflow.cli import main as cli

rng = random.Random(1)
readings = [(seconds(i) // 10, 20 + rng.gauss(0, 0.5)) for i in range(300)]  # 30 s at 10 Hz


def smooth(p, stream):
    return ops.map(p, ops.window(p, stream, ByCount(5), name="last5"), lambda xs: sum(xs) / len(xs), name="mean", out_type=float)


with tempfile.TemporaryDirectory() as tmp:
    tmp = Path(tmp)

    live = Pipeline("live")
    src = live.add(Sequence(readings, float), "thermometer")
    with StoreWriter(tmp / "recording") as w:
        raw = live.add(StoreSink(w, "temperature", "f64"), "raw")
        smoothed = live.add(StoreSink(w, "smoothed", "f64"), "smoothed")
        live.connect(src.out, raw.input)
        live.connect(smooth(live, src.out), smoothed.input)
        live.run_to_completion()

    def replay(dst):
        p = Pipeline("replay", deterministic=True)
        rs = p.add(ReplaySource(tmp / "recording", ["temperature"]), "replay")
        with StoreWriter(dst) as w:
            out = p.add(StoreSink(w, "smoothed", "f64"), "out")
            p.connect(smooth(p, rs.stream("temperature")), out.input)
            p.run_to_completion()
        return (dst / "data.bin").read_bytes()

    first, second = replay(tmp / "r1"), replay(tmp / "r2")
    print("two deterministic replays byte-identical:", first == second)
    print("replayed values equal the live ones:",
          StoreReader(tmp / "r1").values("smoothed") == StoreReader(tmp / "recording").values("smoothed"))

    crop(tmp / "recording", seconds(10), seconds(20), tmp / "middle")
    print()
    cli(["info", "--store", str(tmp / "middle")])

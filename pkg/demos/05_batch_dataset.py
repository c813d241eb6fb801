"""Batch-derive a feature over every session of a dataset.

Two recording sessions are grouped into a dataset; the second session was
recorded in two parts. ``derive`` concatenates each session's parts and
computes a one-second moving mean, one output store per session.
"""

import math
import tempfile
from pathlib import Path

from chronoflow import StoreReader, StoreWriter, millis
from chronoflow.cli import main as cli


def record(path, start_s, seconds_long):
    with StoreWriter(path) as w:
        sid = w.create_stream("audio_level", "f64")
        for i in range(seconds_long * 20):
            t = millis(start_s * 1000 + 50 * i)
            w.write(sid, t, abs(math.sin(i / 7)))
    return str(path)


with tempfile.TemporaryDirectory() as tmp:
    tmp = Path(tmp)
    ds = str(tmp / "study")
    cli(["dataset", "create", "--dataset", ds, "--name", "study"])
    cli(["dataset", "add", record(tmp / "monday", 0, 10), "--dataset", ds, "--session", "monday"])
    cli(["dataset", "add", record(tmp / "tue_am", 0, 5), record(tmp / "tue_pm", 60, 5), "--dataset", ds, "--session", "tuesday"])
    cli(["dataset", "list", "--dataset", ds])

    rc = cli(["derive", "--dataset", ds, "--stream", "audio_level", "--transform", "window-time-mean(1s)",
              "--output", "level_1s", "--dst", str(tmp / "features")])
    print("derive exit code", rc)
    for session in ("monday", "tuesday"):
        meta = StoreReader(tmp / "features" / session).stream("level_1s")
        print(f"{session}: {meta.message_count} derived values")
    cli(["export", "--store", str(tmp / "features" / "monday"), "--stream", "level_1s", "--to", str(millis(200))])

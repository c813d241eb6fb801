"""``chronoflow`` command-line tool.

Exit codes: 0 success, 2 usage or input error, 3 data corruption.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import functools
import json
import operator
import re
import sys
import tempfile
import time
from pathlib import Path
from typing import Any, Optional

from . import operators as ops
from .dataset import Dataset, DatasetError
from .diagnostics import DIAGNOSTICS_STREAM, export_dot, parse_snapshot_message
from .graph import Component, Pipeline
from .interpolation import parse_interpolator
from .store import (
    CODECS,
    CorruptFrame,
    CorruptStore,
    OverlappingRanges,
    ReplaySource,
    SchemaMismatch,
    StoreError,
    StoreReader,
    StoreSink,
    StoreWriter,
    UnknownStream,
    concat,
    crop,
)
from .temporal import (
    INT64_MAX,
    INT64_MIN,
    MAX_SPEED,
    ReplayDescriptor,
    as_speed,
    format_timestamp,
    parse_duration,
    parse_timestamp,
)

OK, USAGE, CORRUPT = 0, 2, 3


class UsageError(Exception):
    pass


# -- rendering ---------------------------------------------------------------------


def _table(headers: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h) for i, h in enumerate(headers)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in [headers, *rows]]
    return "\n".join(lines) + "\n"


def render_csv_value(codec_name: str, value: Any) -> str:
    if codec_name == "f64":
        return repr(value)
    if codec_name == "bool":
        return "true" if value else "false"
    if codec_name == "bytes":
        return value.hex()
    if codec_name == "json":
        return json.dumps(value, separators=(",", ":"), ensure_ascii=False)
    return str(value)


def render_json_value(codec_name: str, value: Any) -> Any:
    return value.hex() if codec_name == "bytes" else value


def _jsonable(v: Any) -> Any:
    if isinstance(v, (bytes, bytearray)):
        return bytes(v).hex()
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    return v


# -- helpers -----------------------------------------------------------------------


def _need(args, name: str) -> Any:
    v = getattr(args, name, None)
    if v is None:
        raise UsageError(f"--{name.replace('_', '-')} is required for {args.command}")
    return v


def _open(path: str) -> StoreReader:
    if not Path(path).is_dir():
        raise UsageError(f"no store at {path}")
    return StoreReader(path)


def _range(args) -> tuple[int, int]:
    lo = parse_timestamp(args.from_) if getattr(args, "from_", None) is not None else INT64_MIN
    hi = parse_timestamp(args.to) if getattr(args, "to", None) is not None else INT64_MAX
    if lo > hi:
        raise UsageError("--from must not be after --to")
    return lo, hi


def _warn_truncated(reader: StoreReader, err) -> None:
    if reader.truncated:
        print(f"warning: truncated frame at byte {reader.truncated_at}; later bytes ignored", file=err)


_CALL = re.compile(r"^\s*([a-z][a-z-]*)\s*\((.*)\)\s*$")


def _split_args(text: str) -> list[str]:
    out, depth, cur = [], 0, ""
    for ch in text:
        if ch == "," and depth == 0:
            out.append(cur.strip())
            cur = ""
            continue
        depth += ch == "("
        depth -= ch == ")"
        cur += ch
    if cur.strip():
        out.append(cur.strip())
    return out


def parse_transform(text: str) -> tuple[str, list[str]]:
    m = _CALL.match(text)
    if not m:
        raise UsageError(f"invalid transform {text!r}")
    name, rest = m.groups()
    return name, _split_args(rest)


# -- commands ------------------------------------------------------------------------


def cmd_info(args, out, err) -> int:
    reader = _open(_need(args, "store"))
    with reader:
        streams = reader.streams
        if args.json:
            doc = {
                "format_version": reader.format_version,
                "index_granularity": reader.index_granularity,
                "truncated": reader.truncated,
                "streams": [
                    {
                        "id": s.id,
                        "name": s.name,
                        "codec": s.codec,
                        "message_count": s.message_count,
                        "first_originating": s.first_originating,
                        "last_originating": s.last_originating,
                        "closed": s.closed,
                    }
                    for s in streams
                ],
            }
            out.write(json.dumps(doc, indent=2) + "\n")
        else:
            out.write(f"format_version: {reader.format_version}\n")
            out.write(f"index_granularity: {reader.index_granularity}\n")
            out.write(f"streams: {len(streams)}\n")
            rows = [
                [
                    str(s.id),
                    s.name,
                    s.codec,
                    str(s.message_count),
                    format_timestamp(s.first_originating),
                    format_timestamp(s.last_originating),
                    "yes" if s.closed else "no",
                ]
                for s in streams
            ]
            out.write(_table(["id", "name", "codec", "count", "first_originating", "last_originating", "closed"], rows))
        _warn_truncated(reader, err)
    return OK


def cmd_export(args, out, err) -> int:
    reader = _open(_need(args, "store"))
    fmt = "jsonl" if args.json else args.format
    lo, hi = _range(args)
    with reader:
        name = _need(args, "stream")
        meta = reader.stream(name)
        dec = CODECS[meta.codec].decode
        target = open(args.out, "w", encoding="utf-8", newline="") if args.out else out
        rows = 0
        try:
            if fmt == "csv":
                w = csv.writer(target, lineterminator="\n")
                w.writerow(["sequence", "originating_ns", "creation_ns", "value"])
            for env, raw in reader.iter_range(meta.id, lo, hi):
                value = dec(raw)
                if fmt == "csv":
                    w.writerow([env.sequence, env.originating, env.creation, render_csv_value(meta.codec, value)])
                else:
                    target.write(
                        json.dumps(
                            {
                                "sequence": env.sequence,
                                "originating_ns": env.originating,
                                "creation_ns": env.creation,
                                "value": render_json_value(meta.codec, value),
                            },
                            ensure_ascii=False,
                        )
                        + "\n"
                    )
                rows += 1
        finally:
            if args.out:
                target.close()
        if args.out:
            out.write(f"wrote {rows} rows to {args.out}\n")
        _warn_truncated(reader, err)
    return OK


def _mean(xs: list) -> float:
    return functools.reduce(operator.add, xs) / len(xs)


def _derive_one(src: Path, dst: Path, args, transform: str, params: list[str], deterministic: bool, err) -> None:
    lo, hi = _range(args)
    output = args.output
    with StoreReader(src) as reader:
        meta = reader.stream(_need(args, "stream"))
        selected = [meta.name]
        other = None
        if transform == "join":
            if len(params) != 2:
                raise UsageError("join takes (other_stream, interpolator)")
            other = reader.stream(params[0])
            if other.id == meta.id:
                raise UsageError("cannot join a stream with itself")
            selected.append(other.name)
        output = output or f"{meta.name}.{transform}"
        present = [reader.stream(n) for n in selected]
        firsts = [s.first_originating for s in present if s.first_originating is not None]
        start = max(lo, min(firsts)) if firsts else (0 if lo == INT64_MIN else lo)
        replay = ReplayDescriptor(start, None if hi == INT64_MAX else hi, MAX_SPEED, deterministic)

        p = Pipeline("derive", deterministic=deterministic, finalization_timeout=None)
        source = p.add(ReplaySource(reader, selected), "replay")
        stream = source.stream(meta.name)
        numeric = meta.codec in ("f64", "i64")
        if transform in ("window-mean", "window-time-mean"):
            if len(params) != 1:
                raise UsageError(f"{transform} takes one parameter")
            if not numeric:
                raise UsageError(f"{transform} needs an f64 or i64 stream, {meta.name!r} is {meta.codec}")
            if transform == "window-mean":
                try:
                    spec = ops.ByCount(int(params[0]))
                except ValueError as exc:
                    raise UsageError(f"bad window size: {exc}") from None
            else:
                spec = ops.ByTime(parse_duration(params[0]))
            w = ops.window(p, stream, spec, name="window")
            result = ops.map(p, w, _mean, name="mean", out_type=float)
            out_codec = "f64"
        elif transform == "sample":
            if len(params) != 2:
                raise UsageError("sample takes (interval, interpolator)")
            result = ops.sample(p, stream, parse_duration(params[0]), parse_interpolator(params[1]), name="sample")
            out_codec = meta.codec
        elif transform == "join":
            pair = ops.join(p, stream, source.stream(other.name), parse_interpolator(params[1]), name="join")
            result = ops.map(p, pair, _jsonable, name="encode")
            out_codec = "json"
        else:
            raise UsageError(f"unknown transform {transform!r}")

        with StoreWriter(dst, overwrite=True) as writer:
            sink = p.add(StoreSink(writer, output, out_codec), "sink")
            p.connect(result, sink.input)
            report = p.run_to_completion(replay)
        _warn_truncated(reader, err)
    for e in report.errors:
        raise UsageError(f"derive failed in {e.component}: {e.exception}")


def cmd_derive(args, out, err) -> int:
    transform, params = parse_transform(_need(args, "transform"))
    dst = Path(_need(args, "dst"))
    deterministic = not args.parallel
    if args.dataset is not None:
        ds = Dataset.load(args.dataset)
        dst.mkdir(parents=True, exist_ok=True)
        for s in ds.sessions:
            parts = ds.partition_paths(s.name)
            if not parts:
                raise UsageError(f"session {s.name!r} has no partitions")
            if len(parts) == 1:
                _derive_one(parts[0], dst / s.name, args, transform, params, deterministic, err)
            else:
                with tempfile.TemporaryDirectory() as tmp:
                    joined = concat(parts, Path(tmp) / "session")
                    _derive_one(joined, dst / s.name, args, transform, params, deterministic, err)
            out.write(f"{s.name}: {dst / s.name}\n")
        return OK
    store = Path(_need(args, "store"))
    if not store.is_dir():
        raise UsageError(f"no store at {store}")
    _derive_one(store, dst, args, transform, params, deterministic, err)
    out.write(f"wrote {dst}\n")
    return OK


class _Counter(Component):
    def __init__(self):
        super().__init__()
        self.count = 0
        self.input = self.add_input("in")

    def on_message(self, receiver, envelope, payload):
        self.count += 1


def cmd_replay(args, out, err) -> int:
    reader = _open(_need(args, "store"))
    lo, hi = _range(args)
    try:
        speed = MAX_SPEED if args.speed.lower() in ("max", "maxspeed") else as_speed(args.speed)
    except (ValueError, ZeroDivisionError) as exc:
        raise UsageError(f"invalid speed {args.speed!r}: {exc}") from None
    with reader:
        names = [n for n in args.streams.split(",") if n] if args.streams else None
        source = ReplaySource(reader, names)
        firsts = [s.first_originating for s in source.selected if s.first_originating is not None]
        start = max(lo, min(firsts)) if firsts else (0 if lo == INT64_MIN else lo)
        replay = ReplayDescriptor(start, None if hi == INT64_MAX else hi, speed, args.deterministic)
        p = Pipeline("replay", deterministic=args.deterministic, finalization_timeout=None)
        p.add(source, "replay")
        writer = StoreWriter(args.dst, index_granularity=reader.index_granularity, overwrite=True) if args.dst else None
        try:
            for s in source.selected:
                sink = StoreSink(writer, s.name, s.codec) if writer else _Counter()
                p.add(sink, f"sink:{s.name}")
                p.connect(source.stream(s.name), sink.input)
            t0 = time.perf_counter()
            p.run_to_completion(replay)
            wall = time.perf_counter() - t0
        finally:
            if writer is not None:
                writer.close()
        counts = dict(source.emitted)
        if args.json:
            out.write(json.dumps({"streams": counts, "wall_duration_s": wall}) + "\n")
        else:
            out.write(_table(["stream", "emitted"], [[n, str(c)] for n, c in counts.items()]))
            out.write(f"wall_duration_s: {wall:.3f}\n")
        _warn_truncated(reader, err)
    return OK


def cmd_bench(args, out, err) -> int:
    from .bench import run_bench

    for name in ("stages", "messages"):
        if getattr(args, name) < 1:
            raise UsageError(f"--{name} must be >= 1")
    if args.workers is not None and args.workers < 1:
        raise UsageError("--workers must be >= 1")
    if args.payload_bytes < 0 or args.hash_rounds < 0 or args.work_bytes < 0 or args.wait_ms < 0:
        raise UsageError("--payload-bytes, --hash-rounds, --work-bytes and --wait-ms must be >= 0")
    report = run_bench(
        args.stages,
        args.messages,
        args.workers,
        args.payload_bytes,
        hash_rounds=args.hash_rounds,
        work_bytes=args.work_bytes,
        wait_s=args.wait_ms / 1000,
        store=args.store,
    )
    out.write(report.jsonl() if args.json else report.text())
    return OK


def cmd_graph(args, out, err) -> int:
    reader = _open(_need(args, "store"))
    depth = None if args.depth in (None, "all") else args.depth
    if depth is not None:
        try:
            depth = int(depth)
        except ValueError:
            raise UsageError("--depth must be an integer or 'all'") from None
    with reader:
        try:
            reader.stream(DIAGNOSTICS_STREAM)
        except UnknownStream:
            raise UsageError(f"store has no {DIAGNOSTICS_STREAM} stream") from None
        last = None
        for _, value in reader.messages(DIAGNOSTICS_STREAM):
            last = value
        if last is None:
            raise UsageError(f"{DIAGNOSTICS_STREAM} stream is empty")
        snap, _ = parse_snapshot_message(last)
    out.write(export_dot(snap, depth))
    return OK


def cmd_crop(args, out, err) -> int:
    src = _need(args, "store")
    _open(src).close()
    lo, hi = _range(args)
    crop(src, lo, hi, _need(args, "dst"))
    out.write(f"wrote {args.dst}\n")
    return OK


def cmd_concat(args, out, err) -> int:
    for s in args.sources:
        _open(s).close()
    concat(args.sources, _need(args, "dst"))
    out.write(f"wrote {args.dst}\n")
    return OK


def cmd_dataset(args, out, err) -> int:
    path = _need(args, "dataset")
    if args.action == "create":
        ds = Dataset.create(path, args.name or Path(path).stem)
        out.write(f"created dataset {ds.name!r} at {ds.path}\n")
    elif args.action == "add":
        ds = Dataset.load(path)
        stores = list(args.stores) + ([args.store] if args.store else [])
        if not stores:
            raise UsageError("dataset add needs at least one store")
        for s in stores:
            ds.add(args.session, s)
        out.write(f"session {args.session!r}: {len(ds.session(args.session).partitions)} partitions\n")
    else:
        ds = Dataset.load(path)
        if args.json:
            out.write(json.dumps(ds.to_dict(), indent=2) + "\n")
        else:
            out.write(f"dataset: {ds.name}\n")
            for s in ds.sessions:
                out.write(f"{s.name}: {len(s.partitions)} partitions\n")
                for p in s.partitions:
                    out.write(f"  {p}\n")
    return OK


# -- parser --------------------------------------------------------------------------


def _globals(defaults: bool) -> argparse.ArgumentParser:
    d = None if defaults else argparse.SUPPRESS
    g = argparse.ArgumentParser(add_help=False)
    g.add_argument("--store", default=d, help="store directory")
    g.add_argument("--dataset", default=d, help="dataset file or directory")
    g.add_argument("--from", dest="from_", default=d, metavar="TIME", help="range start, ISO-8601 or ns")
    g.add_argument("--to", default=d, metavar="TIME", help="range end, ISO-8601 or ns")
    g.add_argument("--json", action="store_true", default=False if defaults else argparse.SUPPRESS, help="machine-readable output")
    return g


def build_parser() -> argparse.ArgumentParser:
    common = _globals(defaults=False)
    parser = argparse.ArgumentParser(prog="chronoflow", description=__doc__, parents=[_globals(defaults=True)])
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("info", parents=[common], help="show the catalog of a store")
    sp.set_defaults(func=cmd_info)

    sp = sub.add_parser("export", parents=[common], help="export one stream as csv or jsonl")
    sp.add_argument("--stream", required=True)
    sp.add_argument("--format", choices=["csv", "jsonl"], default="csv")
    sp.add_argument("--out", help="output file (default stdout)")
    sp.set_defaults(func=cmd_export)

    sp = sub.add_parser("derive", parents=[common], help="compute a new stream in deterministic batch mode")
    sp.add_argument("--stream", required=True, help="source stream")
    sp.add_argument(
        "--transform",
        required=True,
        help="window-mean(K) | window-time-mean(SPAN) | sample(INTERVAL, INTERP) | join(OTHER, INTERP)",
    )
    sp.add_argument("--output", help="derived stream name")
    sp.add_argument("--dst", required=True, help="destination store (directory of stores for a dataset)")
    sp.add_argument("--parallel", action="store_true", help="use the worker pool instead of deterministic mode")
    sp.set_defaults(func=cmd_derive)

    sp = sub.add_parser("replay", parents=[common], help="replay a store at a given speed")
    sp.add_argument("--speed", default="max", help="replay speed factor, or 'max'")
    sp.add_argument("--dst", help="persist a copy of the replayed streams here")
    sp.add_argument("--streams", help="comma-separated stream names")
    sp.add_argument("--deterministic", action="store_true")
    sp.set_defaults(func=cmd_replay)

    sp = sub.add_parser("bench", parents=[common], help="pipeline parallelism benchmark")
    sp.add_argument("--stages", type=int, default=4)
    sp.add_argument("--messages", type=int, default=1000)
    sp.add_argument("--workers", type=int, default=None)
    sp.add_argument("--payload-bytes", type=int, default=64)
    sp.add_argument("--hash-rounds", type=int, default=4, help="SHA-256 passes over the work buffer per message")
    sp.add_argument("--work-bytes", type=int, default=1 << 16, help="size of each stage's work buffer")
    sp.add_argument("--wait-ms", type=float, default=0.0, help="extra blocking wait per message and stage")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("graph", parents=[common], help="DOT graph from a store's diagnostics stream")
    sp.add_argument("--depth", default="all", help="composite expansion depth, or 'all'")
    sp.set_defaults(func=cmd_graph)

    sp = sub.add_parser("crop", parents=[common], help="copy a time range into a new store")
    sp.add_argument("--dst", required=True)
    sp.set_defaults(func=cmd_crop)

    sp = sub.add_parser("concat", parents=[common], help="concatenate stores")
    sp.add_argument("sources", nargs="+")
    sp.add_argument("--dst", required=True)
    sp.set_defaults(func=cmd_concat)

    sp = sub.add_parser("dataset", parents=[common], help="manage datasets")
    sp.add_argument("action", choices=["create", "add", "list"])
    sp.add_argument("stores", nargs="*", help="stores to add")
    sp.add_argument("--name", help="dataset name (create)")
    sp.add_argument("--session", help="session name (add)")
    sp.set_defaults(func=cmd_dataset)
    return parser


def main(argv: Optional[list[str]] = None, out=None, err=None) -> int:
    out = sys.stdout if out is None else out
    err = sys.stderr if err is None else err
    parser = build_parser()
    try:
        with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
            args, extra = parser.parse_known_args(argv)
            # store paths may follow --session, which argparse will not fold into the positional
            if getattr(args, "command", None) == "dataset" and not any(x.startswith("-") for x in extra):
                args.stores = list(args.stores) + extra
            elif extra:
                parser.error("unrecognized arguments: " + " ".join(extra))
    except SystemExit as exc:
        return USAGE if exc.code else OK
    if args.command == "dataset" and args.action == "add" and not args.session:
        print("chronoflow: dataset add needs --session", file=err)
        return USAGE
    try:
        return args.func(args, out, err)
    except CorruptFrame as exc:
        print(f"chronoflow: corrupt data: {exc}", file=err)
        return CORRUPT
    except (UsageError, UnknownStream, CorruptStore, OverlappingRanges, SchemaMismatch, DatasetError) as exc:
        print(f"chronoflow: {exc}", file=err)
        return USAGE
    except StoreError as exc:
        print(f"chronoflow: {exc}", file=err)
        return USAGE
    except (ValueError, FileExistsError) as exc:
        print(f"chronoflow: {exc}", file=err)
        return USAGE


if __name__ == "__main__":
    sys.exit(main())

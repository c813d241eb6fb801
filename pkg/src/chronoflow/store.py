"""On-disk stores.

A store is a directory holding

``catalog.json``
    UTF-8 JSON: ``format_version``, ``index_granularity`` and a ``streams``
    array (id, name, codec, message_count, first/last_originating, closed).
``data.bin``
    ``CHRONOF1`` magic, then frames: a 32-byte little-endian header
    (u32 stream_id, u64 sequence, i64 originating, i64 creation, u32
    payload_len) followed by the payload.
``index.bin``
    ``CHRONOF1`` magic, then 20-byte records (u32 stream_id, i64
    originating, u64 frame offset): every ``index_granularity``-th message of
    each stream and its final message.
"""

from __future__ import annotations

import bisect
import heapq
import json
import os
import struct
import threading
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Callable, Iterator, Optional, Union

from .graph import Component, Source
from .temporal import (
    INT64_MAX,
    INT64_MIN,
    UINT32_MAX,
    Envelope,
    ReplayDescriptor,
    Timestamp,
    check_envelope,
)

MAGIC = b"CHRONOF1"
FORMAT_VERSION = 1
DEFAULT_INDEX_GRANULARITY = 64
FRAME_HEADER = struct.Struct("<IQqqI")
INDEX_RECORD = struct.Struct("<IqQ")
CATALOG = "catalog.json"
DATA = "data.bin"
INDEX = "index.bin"

PathLike = Union[str, os.PathLike]


class StoreError(Exception):
    pass


class UnknownStream(StoreError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class StreamClosed(StoreError):
    pass


class CorruptFrame(StoreError):
    pass


class CorruptStore(StoreError):
    pass


class IoFailure(StoreError, OSError):
    pass


class OverlappingRanges(StoreError):
    pass


class SchemaMismatch(StoreError):
    pass


# -- codecs --------------------------------------------------------------------


@dataclass(frozen=True)
class Codec:
    name: str
    type_: Any
    encode: Callable[[Any], bytes]
    decode: Callable[[bytes], Any]


def _decode_bool(b: bytes) -> bool:
    if b not in (b"\x00", b"\x01"):
        raise CorruptFrame(f"invalid bool payload {b!r}")
    return b == b"\x01"


def _fixed(fmt: struct.Struct, what: str):
    def decode(b: bytes):
        if len(b) != fmt.size:
            raise CorruptFrame(f"{what} payload must be {fmt.size} bytes, got {len(b)}")
        return fmt.unpack(b)[0]

    return decode


def _text(parse: Callable[[str], Any], what: str):
    def decode(b: bytes):
        try:
            return parse(b.decode("utf-8"))
        except ValueError as exc:  # UnicodeDecodeError and JSONDecodeError both
            raise CorruptFrame(f"undecodable {what} payload: {exc}") from exc

    return decode


def _encode_json(v: Any) -> bytes:
    return json.dumps(v, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


_F64 = struct.Struct("<d")
_I64 = struct.Struct("<q")

CODECS: dict[str, Codec] = {
    "f64": Codec("f64", float, lambda v: _F64.pack(float(v)), _fixed(_F64, "f64")),
    "i64": Codec("i64", int, lambda v: _I64.pack(v), _fixed(_I64, "i64")),
    "bool": Codec("bool", bool, lambda v: b"\x01" if v else b"\x00", _decode_bool),
    "utf8": Codec("utf8", str, lambda v: v.encode("utf-8"), _text(str, "utf8")),
    "bytes": Codec("bytes", bytes, bytes, bytes),
    "json": Codec("json", Any, _encode_json, _text(json.loads, "json")),
}


def codec(name: str) -> Codec:
    try:
        return CODECS[name]
    except KeyError:
        raise ValueError(f"unknown codec {name!r}; expected one of {sorted(CODECS)}") from None


@dataclass
class StreamMetadata:
    id: int
    name: str
    codec: str
    message_count: int = 0
    first_originating: Optional[Timestamp] = None
    last_originating: Optional[Timestamp] = None
    closed: bool = False


@dataclass(frozen=True)
class Frame:
    stream_id: int
    sequence: int
    originating: Timestamp
    creation: Timestamp
    payload: bytes
    offset: int

    @property
    def envelope(self) -> Envelope:
        return Envelope(self.stream_id, self.sequence, self.originating, self.creation)

    @property
    def size(self) -> int:
        return FRAME_HEADER.size + len(self.payload)


def _write_json_atomic(path: Path, obj: Any) -> None:
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")
    os.replace(tmp, path)


# -- writer ---------------------------------------------------------------------


class StoreWriter:
    """Single writer of a store. Thread-safe; appends are serialized."""

    def __init__(self, path: PathLike, *, index_granularity: int = DEFAULT_INDEX_GRANULARITY, overwrite: bool = False):
        if index_granularity < 1:
            raise ValueError("index granularity must be >= 1")
        self.path = Path(path)
        self.index_granularity = index_granularity
        self.streams: list[StreamMetadata] = []
        self._by_name: dict[str, int] = {}
        self._last: dict[int, Optional[Envelope]] = {}
        self._last_offset: dict[int, int] = {}
        self._last_indexed: dict[int, int] = {}
        self._lock = threading.Lock()
        self.closed = False
        try:
            self.path.mkdir(parents=True, exist_ok=True)
            if (self.path / DATA).exists() and not overwrite:
                raise FileExistsError(f"store already exists at {self.path}")
            self._data = open(self.path / DATA, "wb")
            self._index = open(self.path / INDEX, "wb")
            self._data.write(MAGIC)
            self._index.write(MAGIC)
            self._offset = len(MAGIC)
            self._write_catalog()
        except FileExistsError:
            raise
        except OSError as exc:
            raise IoFailure(str(exc)) from exc

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _write_catalog(self) -> None:
        _write_json_atomic(
            self.path / CATALOG,
            {
                "format_version": FORMAT_VERSION,
                "index_granularity": self.index_granularity,
                "streams": [asdict(s) for s in self.streams],
            },
        )

    def create_stream(self, name: str, codec_name: str) -> int:
        codec(codec_name)
        with self._lock:
            if self.closed:
                raise StoreError("store is closed")
            if name in self._by_name:
                raise ValueError(f"stream {name!r} already exists")
            sid = len(self.streams)
            self.streams.append(StreamMetadata(sid, name, codec_name))
            self._by_name[name] = sid
            self._last[sid] = None
            self._write_catalog()
            return sid

    def stream_id(self, name: str) -> int:
        try:
            return self._by_name[name]
        except KeyError:
            raise UnknownStream(f"no stream named {name!r}") from None

    def _meta(self, stream: int) -> StreamMetadata:
        if not isinstance(stream, int) or not 0 <= stream < len(self.streams):
            raise UnknownStream(f"unknown stream id {stream!r}")
        return self.streams[stream]

    def append(self, stream: int, envelope: Envelope, payload: bytes) -> None:
        """Write one frame. Validation happens before any byte reaches the file."""
        with self._lock:
            meta = self._meta(stream)
            if meta.closed:
                raise StreamClosed(f"stream {meta.name!r} is closed")
            if envelope.stream_id != stream:
                raise ValueError(f"envelope stream id {envelope.stream_id} does not match stream {stream}")
            check_envelope(self._last[stream], envelope)
            if len(payload) > UINT32_MAX:
                raise ValueError("payload exceeds 4 GiB")
            offset = self._offset
            try:
                self._data.write(
                    FRAME_HEADER.pack(stream, envelope.sequence, envelope.originating, envelope.creation, len(payload))
                )
                self._data.write(payload)
                if envelope.sequence % self.index_granularity == 0:
                    self._index_entry(stream, envelope.originating, offset)
            except OSError as exc:
                raise IoFailure(str(exc)) from exc
            self._offset += FRAME_HEADER.size + len(payload)
            self._last[stream] = envelope
            self._last_offset[stream] = offset
            meta.message_count += 1
            if meta.first_originating is None:
                meta.first_originating = envelope.originating
            meta.last_originating = envelope.originating

    def _index_entry(self, stream: int, originating: Timestamp, offset: int) -> None:
        self._index.write(INDEX_RECORD.pack(stream, originating, offset))
        self._last_indexed[stream] = offset

    def write(
        self,
        stream: int,
        originating: Timestamp,
        value: Any,
        *,
        creation: Optional[Timestamp] = None,
    ) -> Envelope:
        """Encode ``value`` with the stream's codec and append it with the next sequence number."""
        meta = self._meta(stream)
        payload = codec(meta.codec).encode(value)
        with self._lock:
            last = self._last[stream]
            seq = 0 if last is None else last.sequence + 1
        env = Envelope(stream, seq, originating, originating if creation is None else creation)
        self.append(stream, env, payload)
        return env

    def close_stream(self, stream: int) -> None:
        with self._lock:
            self._close_stream_locked(stream)
            self._write_catalog()

    def _close_stream_locked(self, stream: int) -> None:
        meta = self._meta(stream)
        if meta.closed:
            return
        last = self._last[stream]
        if last is not None and self._last_indexed.get(stream) != self._last_offset[stream]:
            self._index_entry(stream, last.originating, self._last_offset[stream])
        meta.closed = True

    def flush(self) -> None:
        with self._lock:
            self._data.flush()
            self._index.flush()

    def close(self) -> None:
        with self._lock:
            if self.closed:
                return
            for s in self.streams:
                self._close_stream_locked(s.id)
            try:
                self._data.close()
                self._index.close()
                self._write_catalog()
            except OSError as exc:
                raise IoFailure(str(exc)) from exc
            self.closed = True


# -- reader -------------------------------------------------------------------------


class StoreReader:
    """Reads a store, closed or still being written.

    Only complete frames are ever returned. A truncated tail (a crashed or
    in-progress writer) is reported through :attr:`truncated` after the frames
    before it have been read. ``frames_read`` counts headers inspected.
    """

    def __init__(self, path: PathLike):
        self.path = Path(path)
        try:
            cat = json.loads((self.path / CATALOG).read_text(encoding="utf-8"))
            self.format_version = int(cat["format_version"])
            self.index_granularity = int(cat.get("index_granularity", DEFAULT_INDEX_GRANULARITY))
            self._catalog_streams = [StreamMetadata(**s) for s in cat["streams"]]
        except FileNotFoundError as exc:
            raise CorruptStore(f"no store at {self.path}") from exc
        except (ValueError, KeyError, TypeError) as exc:
            raise CorruptStore(f"unreadable catalog in {self.path}: {exc}") from exc
        try:
            self._data = open(self.path / DATA, "rb")
        except OSError as exc:
            raise CorruptStore(f"missing data file in {self.path}") from exc
        if self._data.read(len(MAGIC)) != MAGIC:
            raise CorruptStore("data file has a bad magic header")
        self._ids = {s.id for s in self._catalog_streams}
        self._names = {s.name: s.id for s in self._catalog_streams}
        self._index = self._load_index()
        self.frames_read = 0
        self.truncated = False
        self.truncated_at: Optional[int] = None
        self._scanned_meta: Optional[list[StreamMetadata]] = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def close(self) -> None:
        self._data.close()

    def _load_index(self) -> dict[int, tuple[list, list]]:
        out: dict[int, tuple[list, list]] = {sid: ([], []) for sid in self._ids}
        try:
            raw = (self.path / INDEX).read_bytes()
        except OSError:
            return out
        if raw[: len(MAGIC)] != MAGIC:
            raise CorruptStore("index file has a bad magic header")
        body = raw[len(MAGIC) :]
        whole = len(body) - len(body) % INDEX_RECORD.size
        for sid, orig, off in INDEX_RECORD.iter_unpack(body[:whole]):
            if sid in out:
                times, offsets = out[sid]
                if times and orig < times[-1]:
                    continue
                times.append(orig)
                offsets.append(off)
        return out

    # -- catalog ---------------------------------------------------------------

    @property
    def streams(self) -> list[StreamMetadata]:
        """Catalog metadata; counters are recomputed by a scan for unclosed streams
        or when the data file does not end where the catalog says it should."""
        if all(s.closed for s in self._catalog_streams) and self._tail_intact():
            return [StreamMetadata(**asdict(s)) for s in self._catalog_streams]
        if self._scanned_meta is None:
            meta = {s.id: StreamMetadata(s.id, s.name, s.codec, closed=s.closed) for s in self._catalog_streams}
            for f in self.frames():
                m = meta[f.stream_id]
                m.message_count += 1
                if m.first_originating is None:
                    m.first_originating = f.originating
                m.last_originating = f.originating
            self._scanned_meta = [meta[s.id] for s in self._catalog_streams]
        return [StreamMetadata(**asdict(s)) for s in self._scanned_meta]

    def _tail_intact(self) -> bool:
        # a closed stream's last frame is always indexed, so the greatest
        # indexed offset is the last frame in the file
        offsets = [off for _, offs in self._index.values() for off in offs]
        size = self._size()
        if not offsets:
            return size == len(MAGIC) and all(s.message_count == 0 for s in self._catalog_streams)
        counted = self.frames_read
        try:
            f = self.read_frame_at(max(offsets), size)
        finally:
            self.frames_read = counted
        return f is not None and f.offset + f.size == size

    def stream(self, key: Union[int, str]) -> StreamMetadata:
        sid = self._resolve(key)
        return next(s for s in self.streams if s.id == sid)

    def _resolve(self, key: Union[int, str]) -> int:
        if isinstance(key, str):
            if key not in self._names:
                raise UnknownStream(f"no stream named {key!r}")
            return self._names[key]
        if key not in self._ids:
            raise UnknownStream(f"unknown stream id {key!r}")
        return key

    def codec(self, key: Union[int, str]) -> Codec:
        sid = self._resolve(key)
        return codec(next(s.codec for s in self._catalog_streams if s.id == sid))

    @property
    def index_entries(self) -> list[tuple[int, Timestamp, int]]:
        return [
            (sid, t, off)
            for sid, (times, offsets) in sorted(self._index.items())
            for t, off in zip(times, offsets)
        ]

    # -- frames ------------------------------------------------------------------

    def _size(self) -> int:
        return os.fstat(self._data.fileno()).st_size

    def read_frame_at(self, offset: int, size: Optional[int] = None) -> Optional[Frame]:
        """Frame at ``offset``, or ``None`` (and :attr:`truncated` set) if incomplete."""
        size = self._size() if size is None else size
        if offset + FRAME_HEADER.size > size:
            if offset < size:
                self._mark_truncated(offset)
            return None
        self._data.seek(offset)
        header = self._data.read(FRAME_HEADER.size)
        self.frames_read += 1
        sid, seq, orig, creat, n = FRAME_HEADER.unpack(header)
        if sid not in self._ids:
            raise CorruptFrame(f"frame at {offset} names unknown stream {sid}")
        end = offset + FRAME_HEADER.size + n
        if end > size:
            self._mark_truncated(offset)
            return None
        payload = self._data.read(n)
        if len(payload) != n:
            self._mark_truncated(offset)
            return None
        return Frame(sid, seq, orig, creat, payload, offset)

    def _mark_truncated(self, offset: int) -> None:
        self.truncated = True
        self.truncated_at = offset

    def frames(self, start: int = len(MAGIC)) -> Iterator[Frame]:
        size = self._size()
        offset = start
        while offset < size:
            f = self.read_frame_at(offset, size)
            if f is None:
                return
            yield f
            offset += f.size

    def _seek_offset(self, sid: int, t: Timestamp) -> int:
        times, offsets = self._index.get(sid, ([], []))
        i = bisect.bisect_right(times, t) - 1
        return offsets[i] if i >= 0 else (offsets[0] if offsets else len(MAGIC))

    def iter_range(self, key, start: Timestamp = INT64_MIN, end: Timestamp = INT64_MAX) -> Iterator[tuple[Envelope, bytes]]:
        if start > end:
            raise ValueError("range start must not exceed its end")
        sid = self._resolve(key)
        for f in self.frames(self._seek_offset(sid, start)):
            if f.stream_id != sid:
                continue
            if f.originating > end:
                return
            if f.originating >= start:
                yield f.envelope, f.payload

    def read_range(self, key, start: Timestamp = INT64_MIN, end: Timestamp = INT64_MAX) -> list[tuple[Envelope, bytes]]:
        """Messages of one stream with originating in ``[start, end]``, raw payloads."""
        return list(self.iter_range(key, start, end))

    def messages(self, key, start: Timestamp = INT64_MIN, end: Timestamp = INT64_MAX) -> Iterator[tuple[Envelope, Any]]:
        dec = self.codec(key).decode
        for env, raw in self.iter_range(key, start, end):
            yield env, dec(raw)

    def values(self, key, start: Timestamp = INT64_MIN, end: Timestamp = INT64_MAX) -> list:
        return [v for _, v in self.messages(key, start, end)]


# -- pipeline endpoints -----------------------------------------------------------


class ReplaySource(Source):
    """Emits persisted streams with their original originating times.

    ``streams`` selects stream names (default: all but ``__diagnostics``).
    Messages are emitted in ``(originating, stream id, sequence)`` order and
    restricted to ``window`` or, failing that, the pipeline's replay
    descriptor. Output ports are named after the streams.
    """

    def __init__(self, store: Union[StoreReader, PathLike], streams: Optional[list[str]] = None, window: Optional[ReplayDescriptor] = None):
        super().__init__()
        self.reader = store if isinstance(store, StoreReader) else StoreReader(store)
        if streams is None:
            streams = [s.name for s in self.reader.streams if not s.name.startswith("__")]
        self.selected = [self.reader.stream(n) for n in streams]
        self.selected.sort(key=lambda s: s.id)
        self.window = window
        self.emitted = {s.name: 0 for s in self.selected}
        self._by_stream = {}
        for s in self.selected:
            self._by_stream[s.id] = self.add_output(s.name, codec(s.codec).type_)

    def stream(self, name: str):
        return self.port(name)

    def messages(self):
        window = self.window
        if window is None and self.pipeline is not None:
            window = self.pipeline._root().replay
        start = INT64_MIN if window is None else window.start
        end = INT64_MAX if window is None or window.end is None else window.end

        def one(meta: StreamMetadata):
            dec = codec(meta.codec).decode
            for env, raw in self.reader.iter_range(meta.id, start, end):
                yield env.originating, env.stream_id, env.sequence, meta.name, dec(raw)

        for t, sid, _, name, value in heapq.merge(*(one(m) for m in self.selected)):
            self.emitted[name] += 1
            yield self._by_stream[sid], value, t


class StoreSink(Component):
    """Persists its input as one store stream, keeping originating and creation times."""

    def __init__(self, writer: StoreWriter, stream: str, codec_name: str, type_: Any = Any):
        super().__init__()
        self.writer = writer
        self.stream_id = writer.create_stream(stream, codec_name)
        self.input = self.add_input("in", type_, self._on_value)

    def _on_value(self, value, envelope):
        self.writer.write(self.stream_id, envelope.originating, value, creation=envelope.creation)

    def on_final(self):
        self.writer.close_stream(self.stream_id)


# -- store transforms ---------------------------------------------------------------


def _copy_frames(writer: StoreWriter, frames, keep: Callable[[Frame], bool]) -> None:
    last: dict[int, Optional[Envelope]] = {}
    for f in frames:
        if not keep(f):
            continue
        prev = last.get(f.stream_id)
        env = Envelope(f.stream_id, 0 if prev is None else prev.sequence + 1, f.originating, f.creation)
        writer.append(f.stream_id, env, f.payload)
        last[f.stream_id] = env


def crop(src: PathLike, start: Timestamp, end: Timestamp, dst: PathLike) -> Path:
    """Copy the frames with originating in ``[start, end]`` into a new store."""
    if start > end:
        raise ValueError("crop start must not exceed its end")
    with StoreReader(src) as r, StoreWriter(dst, index_granularity=r.index_granularity) as w:
        for s in r.streams:
            w.create_stream(s.name, s.codec)
        _copy_frames(w, r.frames(), lambda f: start <= f.originating <= end)
    return Path(dst)


def concat(srcs: list[PathLike], dst: PathLike) -> Path:
    """Concatenate stores with identical schemas and time-ordered contents."""
    if not srcs:
        raise ValueError("concat needs at least one store")
    readers = [StoreReader(p) for p in srcs]
    try:
        schema = [(s.name, s.codec) for s in readers[0].streams]
        for r in readers[1:]:
            if [(s.name, s.codec) for s in r.streams] != schema:
                raise SchemaMismatch(f"{r.path} does not match the stream names/codecs of {readers[0].path}")
        last_seen: dict[str, Timestamp] = {}
        for r in readers:
            for s in r.streams:
                if s.message_count == 0:
                    continue
                prev = last_seen.get(s.name)
                if prev is not None and s.first_originating <= prev:
                    raise OverlappingRanges(
                        f"stream {s.name!r} in {r.path} starts at {s.first_originating}, not after {prev}"
                    )
                last_seen[s.name] = s.last_originating
        with StoreWriter(dst, index_granularity=readers[0].index_granularity) as w:
            for name, c in schema:
                w.create_stream(name, c)
            state: dict[int, Optional[Envelope]] = {}
            for r in readers:
                for f in r.frames():
                    prev = state.get(f.stream_id)
                    env = Envelope(f.stream_id, 0 if prev is None else prev.sequence + 1, f.originating, f.creation)
                    w.append(f.stream_id, env, f.payload)
                    state[f.stream_id] = env
    finally:
        for r in readers:
            r.close()
    return Path(dst)


def content(path: PathLike) -> dict[str, list[tuple[Timestamp, bytes]]]:
    """Per-stream ``(originating, payload)`` lists: what "content-equal" compares."""
    with StoreReader(path) as r:
        return {s.name: [(e.originating, p) for e, p in r.read_range(s.id)] for s in r.streams}


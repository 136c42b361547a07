"""QTT1 binary time-tag streams.

Layout (little-endian)::

    header, 32 bytes
      0  4s  magic            b"QTT1"
      4  u16 version          1
      6  u16 resolution       ps per tick, 1
      8  u16 channel_count
     10  2s  basis_label      ASCII, XX arm first, b"--" if unset
     12  u64 record_count
     20  12x zero padding
    record, 16 bytes
      0  u64 timestamp        ps since stream epoch
      8  u16 channel
     10  u16 flags            bit 0 marks a simulated dark count
     12  u32 reserved         0

A single record (timestamp 100, channel 1) therefore reads::

    64 00 00 00 00 00 00 00 01 00 00 00 00 00 00 00

Records are non-decreasing in timestamp; equal timestamps are ordered by
channel, then flags.
"""
from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

MAGIC = b"QTT1"
VERSION = 1
RESOLUTION_PS = 1
HEADER_SIZE = 32
RECORD_SIZE = 16
DARK_FLAG = 1

RECORD_DTYPE = np.dtype(
    [("timestamp", "<u8"), ("channel", "<u2"), ("flags", "<u2"), ("reserved", "<u4")]
)
_HEADER_STRUCT = struct.Struct("<4sHHH2sQ12x")

# 4 Mi records = 64 MiB
DEFAULT_BUFFER_RECORDS = 1 << 22


class FormatError(ValueError):
    """Malformed or inconsistent QTT1 data."""


@dataclass(frozen=True)
class StreamHeader:
    channel_count: int = 2
    basis_label: str = "--"
    record_count: int = 0
    version: int = VERSION
    resolution: int = RESOLUTION_PS

    def __post_init__(self):
        if len(self.basis_label) != 2 or not self.basis_label.isascii():
            raise ValueError(f"basis label must be 2 ASCII characters, got {self.basis_label!r}")

    def pack(self) -> bytes:
        return _HEADER_STRUCT.pack(
            MAGIC,
            self.version,
            self.resolution,
            self.channel_count,
            self.basis_label.encode("ascii"),
            self.record_count,
        )

    @classmethod
    def unpack(cls, raw: bytes) -> "StreamHeader":
        if len(raw) < HEADER_SIZE:
            raise FormatError(f"truncated header: {len(raw)} of {HEADER_SIZE} bytes")
        magic, version, resolution, nch, label, count = _HEADER_STRUCT.unpack(raw[:HEADER_SIZE])
        if magic != MAGIC:
            raise FormatError(f"bad magic {magic!r} (hex {magic.hex(' ')}), expected {MAGIC!r}")
        if version != VERSION:
            raise FormatError(f"unsupported version {version}, expected {VERSION}")
        if resolution != RESOLUTION_PS:
            raise FormatError(f"unsupported resolution {resolution} ps/tick")
        try:
            text = label.decode("ascii")
        except UnicodeDecodeError as exc:
            raise FormatError(f"basis label {label!r} is not ASCII") from exc
        return cls(channel_count=nch, basis_label=text, record_count=count, version=version, resolution=resolution)


@dataclass
class TimeTagStream:
    """In-memory stream: structured ``records`` plus metadata.

    ``duration`` is the acquisition length in seconds when known (it is not
    stored in the file format).
    """

    records: np.ndarray
    channel_count: int = 2
    basis_label: str = "--"
    duration: float | None = None

    def __post_init__(self):
        self.records = as_records(self.records)

    def __len__(self):
        return len(self.records)

    @property
    def timestamps(self) -> np.ndarray:
        return self.records["timestamp"]

    @property
    def channels(self) -> np.ndarray:
        return self.records["channel"]

    @property
    def header(self) -> StreamHeader:
        return StreamHeader(self.channel_count, self.basis_label, len(self.records))


def as_records(data) -> np.ndarray:
    """Coerce ``data`` to a contiguous RECORD_DTYPE array.

    Accepts a structured array, or a sequence of (timestamp, channel[, flags]) tuples.
    """
    if isinstance(data, np.ndarray) and data.dtype == RECORD_DTYPE:
        return np.ascontiguousarray(data)
    if isinstance(data, np.ndarray) and data.dtype.names:
        out = np.zeros(len(data), dtype=RECORD_DTYPE)
        for name in ("timestamp", "channel", "flags"):
            if name in data.dtype.names:
                out[name] = data[name]
        return out
    rows = list(data)
    out = np.zeros(len(rows), dtype=RECORD_DTYPE)
    for i, row in enumerate(rows):
        out[i]["timestamp"] = row[0]
        out[i]["channel"] = row[1]
        if len(row) > 2:
            out[i]["flags"] = row[2]
    return out


def make_records(timestamps, channels, flags=None) -> np.ndarray:
    out = np.zeros(len(timestamps), dtype=RECORD_DTYPE)
    out["timestamp"] = timestamps
    out["channel"] = channels
    if flags is not None:
        out["flags"] = flags
    return out


def sort_records(records: np.ndarray) -> np.ndarray:
    """Sort by timestamp, then channel, then flags."""
    order = np.lexsort((records["flags"], records["channel"], records["timestamp"]))
    return records[order]


def first_regression(timestamps: np.ndarray) -> int:
    """Index of the first timestamp smaller than its predecessor, or -1."""
    if len(timestamps) < 2:
        return -1
    bad = np.flatnonzero(timestamps[1:] < timestamps[:-1])
    return int(bad[0]) + 1 if bad.size else -1


class StreamWriter:
    """Incremental writer; the header record count is patched on close.

    Output goes to a temporary file that is renamed into place on a clean
    close, so readers never observe a half-written stream.
    """

    def __init__(self, path, channel_count: int = 2, basis_label: str = "--"):
        self.path = Path(path)
        self.header = StreamHeader(channel_count, basis_label, 0)
        self.count = 0
        self._last = None
        self.path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(prefix=self.path.name + ".", suffix=".tmp", dir=self.path.parent)
        self._tmp = Path(tmp)
        self._fh = os.fdopen(fd, "wb")
        self._fh.write(self.header.pack())

    def write(self, records) -> None:
        rec = as_records(records)
        if len(rec) == 0:
            return
        ts = rec["timestamp"]
        bad = first_regression(ts)
        if bad >= 0:
            raise ValueError(f"unsorted input: timestamp regression at record {self.count + bad}")
        if self._last is not None and ts[0] < self._last:
            raise ValueError(f"unsorted input: timestamp regression at record {self.count}")
        if np.any(rec["reserved"]):
            raise ValueError("reserved field must be zero")
        self._fh.write(rec.tobytes())
        self.count += len(rec)
        self._last = int(ts[-1])

    def close(self) -> None:
        if self._fh.closed:
            return
        self.header = replace(self.header, record_count=self.count)
        self._fh.seek(0)
        self._fh.write(self.header.pack())
        self._fh.close()
        os.replace(self._tmp, self.path)

    def abort(self) -> None:
        if not self._fh.closed:
            self._fh.close()
        self._tmp.unlink(missing_ok=True)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            self.close()
        else:
            self.abort()


def write_stream(path, header: StreamHeader, records) -> None:
    """Write a complete stream. ``header.record_count`` is replaced by the actual count."""
    with StreamWriter(path, header.channel_count, header.basis_label) as w:
        w.write(records)


class StreamReader:
    """Chunked reader; iterating yields RECORD_DTYPE arrays of at most ``buffer_records``.

    Monotonicity is validated across chunk boundaries and the header record
    count is cross-checked once the data is exhausted. Chunks are views into
    one reused buffer; copy a chunk to keep it past the next iteration.
    """

    def __init__(self, path, buffer_records: int = DEFAULT_BUFFER_RECORDS):
        self.path = Path(path)
        self.buffer_records = int(buffer_records)
        if self.buffer_records < 1:
            raise ValueError("buffer_records must be positive")
        with open(self.path, "rb") as fh:
            self.header = StreamHeader.unpack(fh.read(HEADER_SIZE))

    @property
    def buffer_bytes(self) -> int:
        return self.buffer_records * RECORD_SIZE

    def __iter__(self) -> Iterator[np.ndarray]:
        buf = np.empty(self.buffer_records, dtype=RECORD_DTYPE)
        raw = buf.view(np.uint8)
        seen = 0
        last = None
        with open(self.path, "rb") as fh:
            fh.seek(HEADER_SIZE)
            while True:
                n = fh.readinto(raw)
                if not n:
                    break
                if n % RECORD_SIZE:
                    # a short read may just be a pipe boundary; top up once
                    more = fh.read(RECORD_SIZE - n % RECORD_SIZE)
                    raw[n:n + len(more)] = np.frombuffer(more, dtype=np.uint8)
                    n += len(more)
                    if n % RECORD_SIZE:
                        raise FormatError(
                            f"truncated file: trailing {n % RECORD_SIZE} bytes after record {seen + n // RECORD_SIZE}"
                        )
                k = n // RECORD_SIZE
                chunk = buf[:k]
                ts = chunk["timestamp"]
                if last is not None and k and ts[0] < last:
                    raise FormatError(f"timestamp regression at record {seen}")
                bad = first_regression(ts)
                if bad >= 0:
                    raise FormatError(f"timestamp regression at record {seen + bad}")
                seen += k
                if seen > self.header.record_count:
                    raise FormatError(
                        f"record count mismatch: header says {self.header.record_count}, file has more"
                    )
                last = int(ts[-1])
                yield chunk
        if seen != self.header.record_count:
            raise FormatError(
                f"truncated file: header says {self.header.record_count} records, found {seen}"
            )

    def records(self) -> Iterator[tuple[int, int, int]]:
        """Per-record (timestamp, channel, flags) tuples; convenient, not fast."""
        for chunk in self:
            for ts, ch, fl, _ in chunk.tolist():
                yield ts, ch, fl


def read_stream(path, buffer_records: int = DEFAULT_BUFFER_RECORDS) -> tuple[StreamHeader, StreamReader]:
    reader = StreamReader(path, buffer_records)
    return reader.header, reader


def load_stream(path) -> TimeTagStream:
    """Read a whole file into memory."""
    reader = StreamReader(path)
    chunks = list(c.copy() for c in reader)
    rec = np.concatenate(chunks) if chunks else np.zeros(0, dtype=RECORD_DTYPE)
    h = reader.header
    return TimeTagStream(rec, h.channel_count, h.basis_label)


def merge_streams(
    inputs: Sequence,
    output,
    allow_label_mismatch: bool = False,
    buffer_records: int = 1 << 18,
) -> StreamHeader:
    """K-way merge of sorted streams into ``output``.

    Ties on timestamp are broken by channel, flags and then input position,
    so the result is deterministic. Memory stays bounded by the per-input
    buffers.
    """
    if not inputs:
        raise ValueError("no input streams")
    readers = [StreamReader(p, buffer_records) for p in inputs]
    h0 = readers[0].header
    for p, r in zip(inputs, readers):
        h = r.header
        if h.resolution != h0.resolution or h.channel_count != h0.channel_count:
            raise FormatError(f"incompatible header in {p}: {h} vs {h0}")
        if h.basis_label != h0.basis_label and not allow_label_mismatch:
            raise FormatError(
                f"basis label mismatch: {p} has {h.basis_label!r}, expected {h0.basis_label!r}"
            )
    labels = {r.header.basis_label for r in readers}
    label = h0.basis_label if len(labels) == 1 else "--"

    iters = [iter(r) for r in readers]
    bufs: list[np.ndarray | None] = [None] * len(readers)
    done = [False] * len(readers)

    def refill(i):
        try:
            nxt = next(iters[i]).copy()
        except StopIteration:
            done[i] = True
            return
        bufs[i] = nxt if bufs[i] is None or len(bufs[i]) == 0 else np.concatenate([bufs[i], nxt])

    for i in range(len(readers)):
        refill(i)

    with StreamWriter(output, h0.channel_count, label) as w:
        while True:
            live = [i for i in range(len(readers)) if bufs[i] is not None and len(bufs[i])]
            if not live:
                if all(done):
                    break
                for i in range(len(readers)):
                    if not done[i]:
                        refill(i)
                continue
            pending = [i for i in live if not done[i]]
            # everything strictly below the smallest buffered tail is final
            bound = min(int(bufs[i]["timestamp"][-1]) for i in pending) if pending else None
            parts, src = [], []
            for i in live:
                b = bufs[i]
                k = len(b) if bound is None else int(np.searchsorted(b["timestamp"], bound, side="left"))
                if k:
                    parts.append(b[:k])
                    src.append(np.full(k, i, dtype=np.int64))
                    bufs[i] = b[k:]
            if parts:
                rec = np.concatenate(parts)
                idx = np.concatenate(src)
                order = np.lexsort((idx, rec["flags"], rec["channel"], rec["timestamp"]))
                w.write(rec[order])
            for i in pending:
                if len(bufs[i]) == 0 or int(bufs[i]["timestamp"][-1]) == bound:
                    refill(i)
    with open(output, "rb") as fh:
        return StreamHeader.unpack(fh.read(HEADER_SIZE))


def iter_chunks(source, buffer_records: int = DEFAULT_BUFFER_RECORDS) -> Iterator[np.ndarray]:
    """Uniform chunk iteration over a path, a TimeTagStream or a record array."""
    if isinstance(source, (str, os.PathLike)):
        yield from StreamReader(source, buffer_records)
    elif isinstance(source, TimeTagStream):
        yield source.records
    else:
        yield as_records(source)

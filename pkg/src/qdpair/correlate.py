"""Streaming coincidence correlation of time-tag streams.

Every pair of events (a, b) with |t_a - t_b| <= window is counted, in the
bin containing delta = t_a - t_b. Pairs are enumerated once, when the later
event of the pair (in stream order) arrives, against a ring buffer of the
earlier events still inside the window. That rule makes chunked processing
exact: a chunk only needs the events of the preceding ``window`` ps as
look-back context.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from numba import njit

from .timetag import TimeTagStream, as_records, first_regression, iter_chunks

DEFAULT_BIN_PS = 8
DEFAULT_WINDOW_PS = 25_000
DEFAULT_BUFFER_CAP = 1 << 22

HIST_CSV_MAGIC = "# qdpair-histogram v1"


class CorrelationError(ValueError):
    pass


@dataclass
class CoincidenceHistogram:
    """Counts over the delay grid; bin ``i`` covers [tau_min + i*w, tau_min + (i+1)*w) ps."""

    bin_width: int
    tau_min: int
    counts: np.ndarray
    total_singles_a: int = 0
    total_singles_b: int = 0
    duration: float | None = None
    basis_label: str = "--"

    def __post_init__(self):
        self.counts = np.asarray(self.counts)
        if self.bin_width < 1:
            raise ValueError("bin width must be >= 1 ps")
        if np.any(self.counts < 0):
            raise ValueError("negative counts")

    @property
    def nbins(self) -> int:
        return len(self.counts)

    @property
    def tau_max(self) -> int:
        return self.tau_min + self.nbins * self.bin_width

    @property
    def edges(self) -> np.ndarray:
        return self.tau_min + self.bin_width * np.arange(self.nbins + 1, dtype=np.int64)

    @property
    def centers(self) -> np.ndarray:
        return self.tau_min + self.bin_width * (np.arange(self.nbins) + 0.5)

    @property
    def total(self) -> float:
        return float(self.counts.sum())

    def same_grid(self, other: "CoincidenceHistogram") -> bool:
        return (self.bin_width, self.tau_min, self.nbins) == (other.bin_width, other.tau_min, other.nbins)

    def __add__(self, other: "CoincidenceHistogram") -> "CoincidenceHistogram":
        if not self.same_grid(other):
            raise ValueError("histograms have different bin grids")
        dur = None if self.duration is None or other.duration is None else self.duration + other.duration
        label = self.basis_label if self.basis_label == other.basis_label else "--"
        return CoincidenceHistogram(
            self.bin_width,
            self.tau_min,
            self.counts + other.counts,
            self.total_singles_a + other.total_singles_a,
            self.total_singles_b + other.total_singles_b,
            dur,
            label,
        )

    def mirrored(self) -> "CoincidenceHistogram":
        """Histogram of -delta with channel roles swapped.

        Exact for integer timestamps when the grid maps onto itself under
        t -> -t, i.e. when 1 - tau_max == tau_min.
        """
        return CoincidenceHistogram(
            self.bin_width,
            1 - self.tau_max,
            self.counts[::-1].copy(),
            self.total_singles_b,
            self.total_singles_a,
            self.duration,
            self.basis_label,
        )

    def rebin(self, factor: int) -> "CoincidenceHistogram":
        if factor < 1:
            raise ValueError("rebin factor must be positive")
        n = self.nbins // factor
        c = self.counts[: n * factor].reshape(n, factor).sum(axis=1)
        return replace(self, bin_width=self.bin_width * factor, counts=c)

    def integrate(self, lo: float, hi: float) -> float:
        """Sum of bins whose centers lie in [lo, hi)."""
        c = self.centers
        return float(self.counts[(c >= lo) & (c < hi)].sum())

    def to_csv(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "w", newline="") as fh:
            fh.write(f"{HIST_CSV_MAGIC}\n")
            fh.write(f"# bin_width_ps,{self.bin_width}\n")
            fh.write(f"# tau_min_ps,{self.tau_min}\n")
            fh.write(f"# tau_max_ps,{self.tau_max}\n")
            fh.write(f"# singles_a,{self.total_singles_a}\n")
            fh.write(f"# singles_b,{self.total_singles_b}\n")
            fh.write(f"# duration_s,{'' if self.duration is None else repr(float(self.duration))}\n")
            fh.write(f"# basis_label,{self.basis_label}\n")
            fh.write("bin_center_ps,count\n")
            for c, n in zip(self.centers, self.counts):
                fh.write(f"{_fmt_center(c)},{_fmt_count(n)}\n")
        os.replace(tmp, path)

    @classmethod
    def from_csv(cls, path) -> "CoincidenceHistogram":
        meta = {}
        counts = []
        with open(path, newline="") as fh:
            first = fh.readline().strip()
            if first != HIST_CSV_MAGIC:
                raise ValueError(f"{path}: not a histogram CSV (first line {first!r})")
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                if line.startswith("#"):
                    key, _, value = line[1:].strip().partition(",")
                    meta[key] = value
                elif line.startswith("bin_center_ps"):
                    continue
                else:
                    _, n = line.split(",")
                    counts.append(float(n))
        arr = np.asarray(counts)
        if np.all(arr == np.round(arr)):
            arr = arr.astype(np.int64)
        h = cls(
            int(meta["bin_width_ps"]),
            int(meta["tau_min_ps"]),
            arr,
            int(meta.get("singles_a", 0)),
            int(meta.get("singles_b", 0)),
            float(meta["duration_s"]) if meta.get("duration_s") else None,
            meta.get("basis_label", "--"),
        )
        if h.tau_max != int(meta["tau_max_ps"]):
            raise ValueError(f"{path}: tau_max does not match bin count")
        return h


def _fmt_center(c: float) -> str:
    return str(int(c)) if float(c).is_integer() else repr(float(c))


def _fmt_count(n) -> str:
    return str(int(n)) if float(n).is_integer() else repr(float(n))


def delay_grid(bin_width: int, window: int) -> tuple[int, int]:
    """(tau_min, nbins) for a grid with one bin centred on zero delay covering [-window, window]."""
    if bin_width < 1:
        raise ValueError("bin width must be >= 1 ps")
    if window <= 0:
        raise ValueError("window must be positive")
    k = -(-int(window) // int(bin_width))
    return -k * bin_width - bin_width // 2, 2 * k + 1


@njit(cache=True, nogil=True)
def _expire(buf, st, h, t, window):
    cap = buf.shape[0]
    while st[h + 1] > 0 and t - buf[st[h]] > window:
        st[h] += 1
        if st[h] == cap:
            st[h] = 0
        st[h + 1] -= 1


@njit(cache=True, nogil=True)
def _push(buf, st, h, t):
    cap = buf.shape[0]
    if st[h + 1] == cap:
        return False
    j = st[h] + st[h + 1]
    if j >= cap:
        j -= cap
    buf[j] = t
    st[h + 1] += 1
    return True


@njit(cache=True, nogil=True)
def _cross_kernel(ts, ch, start, ch_a, ch_b, window, tau_min, bw, counts, buf_a, buf_b, st):
    """Returns -1 on success or the index of the event that overflowed a buffer."""
    cap = buf_a.shape[0]
    for i in range(ts.shape[0]):
        t = ts[i]
        c = ch[i]
        if c == ch_a:
            _expire(buf_b, st, 2, t, window)
            if i >= start:
                j = st[2]
                for _ in range(st[3]):
                    counts[(t - buf_b[j] - tau_min) // bw] += 1
                    j += 1
                    if j == cap:
                        j = 0
            _expire(buf_a, st, 0, t, window)
            if not _push(buf_a, st, 0, t):
                return i
        elif c == ch_b:
            _expire(buf_a, st, 0, t, window)
            if i >= start:
                j = st[0]
                for _ in range(st[1]):
                    counts[(buf_a[j] - t - tau_min) // bw] += 1
                    j += 1
                    if j == cap:
                        j = 0
            _expire(buf_b, st, 2, t, window)
            if not _push(buf_b, st, 2, t):
                return i
    return -1


@njit(cache=True, nogil=True)
def _auto_kernel(ts, ch, start, ch_a, window, tau_min, bw, counts, buf, st):
    cap = buf.shape[0]
    for i in range(ts.shape[0]):
        if ch[i] != ch_a:
            continue
        t = ts[i]
        _expire(buf, st, 0, t, window)
        if i >= start:
            j = st[0]
            for _ in range(st[1]):
                d = t - buf[j]
                counts[(d - tau_min) // bw] += 1
                counts[(-d - tau_min) // bw] += 1
                j += 1
                if j == cap:
                    j = 0
        if not _push(buf, st, 0, t):
            return i
    return -1


def _timestamps_i64(records: np.ndarray) -> np.ndarray:
    ts = records["timestamp"]
    if len(ts) and int(ts.max()) >= 2**63:
        raise CorrelationError("timestamps beyond 2**63 ps are not supported")
    return np.ascontiguousarray(ts).view(np.int64)


class StreamingCorrelator:
    """Bounded-memory accumulator; feed sorted record chunks in order.

    Memory is two ring buffers of ``buffer_cap`` int64 timestamps plus the
    histogram, independent of stream length. If more than ``buffer_cap``
    events of one channel fall inside the window a CorrelationError is raised
    rather than silently dropping pairs.
    """

    def __init__(
        self,
        ch_a: int,
        ch_b: int | None = None,
        bin_width: int = DEFAULT_BIN_PS,
        window: int = DEFAULT_WINDOW_PS,
        buffer_cap: int = DEFAULT_BUFFER_CAP,
        basis_label: str = "--",
    ):
        self.auto = ch_b is None or ch_b == ch_a
        self.ch_a = int(ch_a)
        self.ch_b = self.ch_a if self.auto else int(ch_b)
        self.bin_width = int(bin_width)
        self.window = int(window)
        self.tau_min, nbins = delay_grid(self.bin_width, self.window)
        self.counts = np.zeros(nbins, dtype=np.int64)
        self.buffer_cap = int(buffer_cap)
        self._buf_a = np.zeros(self.buffer_cap, dtype=np.int64)
        self._buf_b = np.zeros(0 if self.auto else self.buffer_cap, dtype=np.int64)
        self._state = np.zeros(4, dtype=np.int64)
        self._last = None
        self._pos = 0
        self.singles_a = 0
        self.singles_b = 0
        self.first_ts = None
        self.last_ts = None
        self.basis_label = basis_label

    def feed(self, records, start: int = 0) -> None:
        """Process a chunk; events before index ``start`` only prime the buffers."""
        rec = as_records(records)
        if len(rec) == 0:
            return
        ts = _timestamps_i64(rec)
        bad = first_regression(ts)
        if bad >= 0 or (self._last is not None and ts[0] < self._last):
            pos = self._pos + max(bad, 0)
            raise CorrelationError(f"unsorted stream: timestamp regression at record {pos}")
        ch = np.ascontiguousarray(rec["channel"])
        if self.auto:
            err = _auto_kernel(ts, ch, start, self.ch_a, self.window, self.tau_min, self.bin_width,
                               self.counts, self._buf_a, self._state)
        else:
            err = _cross_kernel(ts, ch, start, self.ch_a, self.ch_b, self.window, self.tau_min,
                                self.bin_width, self.counts, self._buf_a, self._buf_b, self._state)
        if err >= 0:
            raise CorrelationError(
                f"coincidence buffer overflow at record {self._pos + err}: more than {self.buffer_cap} "
                f"events within a {self.window} ps window; raise buffer_cap or shrink the window"
            )
        live = ch[start:]
        self.singles_a += int(np.count_nonzero(live == self.ch_a))
        if not self.auto:
            self.singles_b += int(np.count_nonzero(live == self.ch_b))
        if self.first_ts is None and start < len(ts):
            self.first_ts = int(ts[start])
        self._last = int(ts[-1])
        self.last_ts = self._last
        self._pos += len(rec)

    def result(self, duration: float | None = None) -> CoincidenceHistogram:
        if duration is None and self.first_ts is not None:
            duration = (self.last_ts - self.first_ts) * 1e-12
        return CoincidenceHistogram(
            self.bin_width,
            self.tau_min,
            self.counts.copy(),
            self.singles_a,
            self.singles_a if self.auto else self.singles_b,
            duration,
            self.basis_label,
        )


def _source_meta(stream):
    if isinstance(stream, TimeTagStream):
        return stream.basis_label, stream.duration
    if isinstance(stream, (str, os.PathLike)):
        from .timetag import StreamReader

        return StreamReader(stream).header.basis_label, None
    return "--", None


def cross_correlate(
    stream,
    ch_a: int,
    ch_b: int,
    bin_width: int = DEFAULT_BIN_PS,
    window: int = DEFAULT_WINDOW_PS,
    buffer_cap: int = DEFAULT_BUFFER_CAP,
    duration: float | None = None,
) -> CoincidenceHistogram:
    """Histogram of delta = t_a - t_b over all pairs with |delta| <= window.

    ``stream`` may be a path (read chunk-wise), a TimeTagStream or a record
    array. Map a = XX and b = X for the delta = t_XX - t_X convention.
    """
    label, dur = _source_meta(stream)
    corr = StreamingCorrelator(ch_a, ch_b, bin_width, window, buffer_cap, label)
    if ch_a == ch_b:
        raise ValueError("use auto_correlate for a single channel")
    for chunk in iter_chunks(stream):
        corr.feed(chunk)
    return corr.result(duration if duration is not None else dur)


def auto_correlate(
    stream,
    ch: int,
    bin_width: int = DEFAULT_BIN_PS,
    window: int = DEFAULT_WINDOW_PS,
    buffer_cap: int = DEFAULT_BUFFER_CAP,
    duration: float | None = None,
) -> CoincidenceHistogram:
    """Histogram of delays between distinct events of one channel (each unordered pair counted at +d and -d)."""
    label, dur = _source_meta(stream)
    corr = StreamingCorrelator(ch, None, bin_width, window, buffer_cap, label)
    for chunk in iter_chunks(stream):
        corr.feed(chunk)
    return corr.result(duration if duration is not None else dur)


def correlate_chunked(
    records,
    ch_a: int,
    ch_b: int | None,
    bin_width: int = DEFAULT_BIN_PS,
    window: int = DEFAULT_WINDOW_PS,
    n_chunks: int = 4,
    threads: int | None = None,
) -> CoincidenceHistogram:
    """Correlate disjoint time chunks independently and sum the partial histograms.

    Each chunk is primed with the events of the preceding ``window`` ps and
    counts only pairs whose later event lies inside the chunk, so seams are
    neither lost nor double counted.
    """
    rec = as_records(records)
    ts = rec["timestamp"]
    bounds = np.linspace(0, len(rec), n_chunks + 1).astype(int)

    def work(k):
        lo, hi = bounds[k], bounds[k + 1]
        if hi <= lo:
            return None
        pre = int(np.searchsorted(ts, max(int(ts[lo]) - window, 0), side="left"))
        c = StreamingCorrelator(ch_a, ch_b, bin_width, window)
        c.feed(rec[pre:hi], start=lo - pre)
        return c

    workers = threads or int(os.environ.get("QDPAIR_THREADS", "1"))
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        parts = [p for p in pool.map(work, range(n_chunks)) if p is not None]
    if not parts:
        tau_min, nbins = delay_grid(bin_width, window)
        return CoincidenceHistogram(bin_width, tau_min, np.zeros(nbins, dtype=np.int64))
    out = parts[0].result()
    for p in parts[1:]:
        out = out + p.result()
    out.duration = (int(ts[-1]) - int(ts[0])) * 1e-12
    return out


def g2_from_histogram(
    hist: CoincidenceHistogram,
    rep_period: float,
    peak_halfwidth: float,
    n_side_peaks: int,
) -> tuple[float, float]:
    """g2(0) from the zero-delay peak area over the mean of ``n_side_peaks`` side peaks per side.

    Peak areas sum bins whose centers fall in [k*T - h, k*T + h). Sigma is
    Poisson propagation of both areas (a zero center area counts as one).
    """
    if n_side_peaks < 1:
        raise ValueError("need at least one side peak per side")
    reach = n_side_peaks * rep_period + peak_halfwidth
    if hist.tau_min > -reach or hist.tau_max < reach:
        raise ValueError(
            f"histogram [{hist.tau_min}, {hist.tau_max}) ps does not span {n_side_peaks} periods each side"
        )
    center = hist.integrate(-peak_halfwidth, peak_halfwidth)
    side = [
        hist.integrate(k * rep_period - peak_halfwidth, k * rep_period + peak_halfwidth)
        for k in range(-n_side_peaks, n_side_peaks + 1)
        if k != 0
    ]
    side_total = float(np.sum(side))
    if side_total <= 0:
        raise ValueError("side peaks are empty; g2 undefined")
    mean_side = side_total / len(side)
    g2 = center / mean_side
    sigma = g2 * math.sqrt(1.0 / max(center, 1.0) + 1.0 / side_total) if center > 0 else 1.0 / mean_side
    return g2, sigma


def rate_series(
    stream,
    ch: int | str = "all",
    window: float = 1.0,
    duration: float | None = None,
    t_offset: float = 0.0,
) -> list[tuple[float, float]]:
    """Count rate in non-overlapping windows of ``window`` seconds.

    Only complete windows are returned; with ``duration`` unknown the run is
    taken to end at the last event. ``ch='all'`` sums every channel.
    """
    if window <= 0:
        raise ValueError("window must be positive")
    if duration is None and isinstance(stream, TimeTagStream):
        duration = stream.duration
    win_ps = window * 1e12
    counts = np.zeros(0, dtype=np.int64)
    last = 0
    for chunk in iter_chunks(stream):
        if len(chunk) == 0:
            continue
        sel = chunk if ch == "all" else chunk[chunk["channel"] == int(ch)]
        last = int(chunk["timestamp"][-1])
        if len(sel) == 0:
            continue
        idx = (sel["timestamp"].astype(np.float64) // win_ps).astype(np.int64)
        add = np.bincount(idx)
        if len(add) > len(counts):
            counts = np.concatenate([counts, np.zeros(len(add) - len(counts), dtype=np.int64)])
        counts[: len(add)] += add
    span = duration if duration is not None else last * 1e-12
    n = int(math.floor(span / window + 1e-9))
    counts = np.concatenate([counts, np.zeros(max(0, n - len(counts)), dtype=np.int64)])[:n]
    return [(t_offset + (i + 0.5) * window, float(c) / window) for i, c in enumerate(counts)]


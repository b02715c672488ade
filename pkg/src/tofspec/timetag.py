"""Time-tag streams: binary format, start-stop histogramming, coincidence pairing.

A stream holds integer-picosecond detection timestamps on small channel
numbers (0 = clock trigger, 1 = signal, 2 = idler/herald), globally ordered
by timestamp with ties broken by channel.  Histogramming follows start-stop
semantics: every stop tag is referenced to the most recent trigger tag.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, FormatError

TRIGGER_CHANNEL = 0
SIGNAL_CHANNEL = 1
IDLER_CHANNEL = 2

TTAG_MAGIC = b"TTAG"
TTAG_VERSION = 1
_HEADER = struct.Struct("<4sHHQQ")
_RECORD_DTYPE = np.dtype([("channel", "<u1"), ("timestamp", "<u8")])


class TimeTag(NamedTuple):
    channel: int
    timestamp: int


@dataclass(frozen=True)
class TagStream:
    """Ordered multi-channel list of integer-picosecond timestamps.

    ``channels`` is uint8, ``timestamps`` uint64 (ps from run start).
    Construction validates the ordering invariants and reports the first
    offending record index on failure.
    """

    clock_period: int
    channels: np.ndarray
    timestamps: np.ndarray

    def __post_init__(self):
        if not (int(self.clock_period) > 0):
            raise ConfigError(f"clock period must be positive, got {self.clock_period}")
        ch = np.ascontiguousarray(self.channels, dtype=np.uint8)
        ts = np.ascontiguousarray(self.timestamps, dtype=np.uint64)
        if ch.shape != ts.shape or ch.ndim != 1:
            raise ConfigError("channels and timestamps must be 1D arrays of equal length")
        object.__setattr__(self, "clock_period", int(self.clock_period))
        object.__setattr__(self, "channels", ch)
        object.__setattr__(self, "timestamps", ts)
        bad = _first_order_violation(ch, ts)
        if bad is not None:
            raise FormatError(f"tag stream ordering violated at record {bad}")

    def __len__(self) -> int:
        return int(self.timestamps.size)

    def channel_times(self, channel: int) -> np.ndarray:
        return self.timestamps[self.channels == channel]

    def n_channels(self) -> int:
        return int(self.channels.max()) + 1 if len(self) else 0

    def tags(self):
        for c, t in zip(self.channels, self.timestamps):
            yield TimeTag(int(c), int(t))


def _first_order_violation(channels: np.ndarray, timestamps: np.ndarray):
    """Index of the first record breaking the stream ordering, or None.

    Non-decreasing timestamps with strictly increasing channels inside each
    tie group also guarantees strict per-channel monotonicity, since a repeat
    on one channel would be a duplicate (timestamp, channel) record.
    """
    if timestamps.size < 2:
        return None
    dt = np.diff(timestamps.astype(np.int64))
    bad = (dt < 0) | ((dt == 0) & (np.diff(channels.astype(np.int64)) <= 0))
    hit = np.flatnonzero(bad)
    return int(hit[0]) + 1 if hit.size else None


def from_records(clock_period: int, records) -> TagStream:
    """Build a stream from (channel, timestamp) pairs; sorts into canonical order."""
    records = list(records)
    if not records:
        return TagStream(
            clock_period,
            np.empty(0, dtype=np.uint8),
            np.empty(0, dtype=np.uint64),
        )
    ch = np.asarray([r[0] for r in records], dtype=np.uint8)
    ts = np.asarray([r[1] for r in records], dtype=np.uint64)
    order = np.lexsort((ch, ts))
    return TagStream(clock_period, ch[order], ts[order])


def sort_tags(clock_period: int, channels: np.ndarray, timestamps: np.ndarray) -> TagStream:
    """Sort raw channel/timestamp arrays into a canonical TagStream."""
    ch = np.asarray(channels, dtype=np.uint8)
    ts = np.asarray(timestamps, dtype=np.uint64)
    order = np.lexsort((ch, ts))
    return TagStream(clock_period, ch[order], ts[order])


def quantize_timestamps(stream: TagStream, resolution: int) -> TagStream:
    """Floor all timestamps to multiples of ``resolution`` ps (coarse TDC model)."""
    resolution = int(resolution)
    if resolution < 1:
        raise ConfigError(f"TDC resolution must be >= 1 ps, got {resolution}")
    if resolution == 1:
        return stream
    ts = (stream.timestamps // resolution) * resolution
    return TagStream(stream.clock_period, stream.channels.copy(), ts)


@dataclass(frozen=True)
class Histogram:
    """Start-stop histogram: counts of stop delays relative to the trigger.

    ``dropped`` tallies stop tags that could not be binned (no preceding
    trigger, or delay outside the binned range); it is reported, never
    silently discarded.
    """

    bin_width: int
    origin: int
    counts: np.ndarray
    dropped: int = 0

    def __post_init__(self):
        if int(self.bin_width) <= 0:
            raise ConfigError(f"bin width must be positive, got {self.bin_width}")
        counts = np.ascontiguousarray(self.counts, dtype=np.int64)
        if np.any(counts < 0):
            raise ConfigError("histogram counts must be nonnegative")
        object.__setattr__(self, "bin_width", int(self.bin_width))
        object.__setattr__(self, "origin", int(self.origin))
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "dropped", int(self.dropped))

    @property
    def n_bins(self) -> int:
        return int(self.counts.size)

    def bin_centers(self) -> np.ndarray:
        return self.origin + (np.arange(self.n_bins) + 0.5) * self.bin_width

    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class JointHistogram:
    """2D start-stop histogram of per-trigger delay pairs."""

    bin_width_a: int
    bin_width_b: int
    origin_a: int
    origin_b: int
    counts: np.ndarray
    dropped: int = 0

    def __post_init__(self):
        if int(self.bin_width_a) <= 0 or int(self.bin_width_b) <= 0:
            raise ConfigError("joint histogram bin widths must be positive")
        counts = np.ascontiguousarray(self.counts, dtype=np.int64)
        if counts.ndim != 2:
            raise ConfigError("joint histogram counts must be a 2D grid")
        object.__setattr__(self, "counts", counts)

    def bin_centers_a(self) -> np.ndarray:
        return self.origin_a + (np.arange(self.counts.shape[0]) + 0.5) * self.bin_width_a

    def bin_centers_b(self) -> np.ndarray:
        return self.origin_b + (np.arange(self.counts.shape[1]) + 0.5) * self.bin_width_b

    def total(self) -> int:
        return int(self.counts.sum())


def _default_n_bins(clock_period: int, bin_width: int, origin: int) -> int:
    # Cover delays up to one full clock period past the origin.
    return max(int((clock_period - origin) // bin_width) + 1, 1)


def _stop_delays(stream: TagStream, stop_channel: int):
    """(delays, n_dropped_before_first_trigger) for all stop tags."""
    triggers = stream.channel_times(TRIGGER_CHANNEL).astype(np.int64)
    stops = stream.channel_times(stop_channel).astype(np.int64)
    if stops.size == 0:
        return np.empty(0, dtype=np.int64), 0
    if triggers.size == 0:
        return np.empty(0, dtype=np.int64), int(stops.size)
    idx = np.searchsorted(triggers, stops, side="right") - 1
    ok = idx >= 0
    tau = stops[ok] - triggers[idx[ok]]
    return tau, int(np.count_nonzero(~ok))


def build_histogram(
    stream: TagStream,
    stop_channel: int,
    bin_width: int,
    origin: int = 0,
    n_bins: int | None = None,
) -> Histogram:
    """Histogram stop-channel delays relative to the most recent trigger tag.

    Delays land in bin floor((tau - origin) / bin_width).  Stops preceding
    every trigger, or falling outside [origin, origin + n_bins*bin_width),
    are counted in the drop tally.  The default geometry spans one clock
    period so chunked accumulation always agrees with a single pass.
    """
    bin_width = int(bin_width)
    if bin_width <= 0:
        raise ConfigError(f"bin width must be positive, got {bin_width}")
    if n_bins is None:
        n_bins = _default_n_bins(stream.clock_period, bin_width, origin)
    tau, dropped = _stop_delays(stream, stop_channel)
    rel = tau - origin
    inside = rel >= 0
    bins = rel[inside] // bin_width
    in_range = bins < n_bins
    counts = np.bincount(bins[in_range], minlength=n_bins).astype(np.int64)
    dropped += int(np.count_nonzero(~inside)) + int(np.count_nonzero(~in_range))
    return Histogram(bin_width=bin_width, origin=origin, counts=counts, dropped=dropped)


def split_at_triggers(stream: TagStream, n_chunks: int) -> list[TagStream]:
    """Split a stream into contiguous sub-streams whose cuts fall on trigger tags.

    Every stop tag stays in the same chunk as its most recent trigger, so
    per-chunk histograms merge to exactly the single-pass result.
    """
    n_chunks = max(int(n_chunks), 1)
    trig_pos = np.flatnonzero(stream.channels == TRIGGER_CHANNEL)
    if n_chunks == 1 or trig_pos.size < 2:
        return [stream]
    pick = np.unique(np.linspace(0, trig_pos.size, n_chunks, endpoint=False).astype(np.int64))
    bounds = np.concatenate(([0], trig_pos[pick[1:]], [len(stream)]))
    chunks = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        if hi > lo:
            chunks.append(
                TagStream(
                    stream.clock_period,
                    stream.channels[lo:hi],
                    stream.timestamps[lo:hi],
                )
            )
    return chunks


def build_histogram_chunked(
    stream: TagStream,
    stop_channel: int,
    bin_width: int,
    n_chunks: int,
    origin: int = 0,
    n_bins: int | None = None,
) -> Histogram:
    """Chunk-parallel form of build_histogram; exactly equals the single pass."""
    if n_bins is None:
        n_bins = _default_n_bins(stream.clock_period, int(bin_width), origin)
    parts = [
        build_histogram(chunk, stop_channel, bin_width, origin=origin, n_bins=n_bins)
        for chunk in split_at_triggers(stream, n_chunks)
    ]
    out = parts[0]
    for part in parts[1:]:
        out = merge_histograms(out, part)
    return out


def merge_histograms(a: Histogram, b: Histogram) -> Histogram:
    """Elementwise sum of two histograms with identical geometry."""
    if (a.bin_width, a.origin, a.n_bins) != (b.bin_width, b.origin, b.n_bins):
        raise ConfigError(
            "histogram geometry mismatch: "
            f"({a.bin_width}, {a.origin}, {a.n_bins}) vs ({b.bin_width}, {b.origin}, {b.n_bins})"
        )
    return Histogram(
        bin_width=a.bin_width,
        origin=a.origin,
        counts=a.counts + b.counts,
        dropped=a.dropped + b.dropped,
    )


def coincidence_pairs(stream: TagStream, chan_a: int, chan_b: int) -> np.ndarray:
    """Per-cycle coincidences between two channels, as an (n, 2) array of delays.

    A pair is emitted for every trigger that has at least one tag on each
    channel; multi-hit cycles keep the earliest tag per channel.  Delays are
    relative to the shared trigger, in ps.
    """
    triggers = stream.channel_times(TRIGGER_CHANNEL).astype(np.int64)
    if triggers.size == 0:
        return np.empty((0, 2), dtype=np.int64)
    hits = {}
    for chan in (chan_a, chan_b):
        times = stream.channel_times(chan).astype(np.int64)
        idx = np.searchsorted(triggers, times, side="right") - 1
        ok = idx >= 0
        trig_ids, first = np.unique(idx[ok], return_index=True)
        hits[chan] = (trig_ids, times[ok][first])
    ids_a, t_a = hits[chan_a]
    ids_b, t_b = hits[chan_b]
    common, ia, ib = np.intersect1d(ids_a, ids_b, return_indices=True)
    tau_a = t_a[ia] - triggers[common]
    tau_b = t_b[ib] - triggers[common]
    return np.stack([tau_a, tau_b], axis=1)


def build_joint_histogram(
    pairs: np.ndarray,
    bin_width_a: int,
    bin_width_b: int,
    origin_a: int = 0,
    origin_b: int = 0,
    n_bins_a: int | None = None,
    n_bins_b: int | None = None,
    n_chunks: int = 1,
) -> JointHistogram:
    """Grid delay pairs onto a 2D histogram; chunked accumulation is exact."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    bin_width_a = int(bin_width_a)
    bin_width_b = int(bin_width_b)
    if bin_width_a <= 0 or bin_width_b <= 0:
        raise ConfigError("joint histogram bin widths must be positive")
    ia_all = (pairs[:, 0] - origin_a) // bin_width_a
    ib_all = (pairs[:, 1] - origin_b) // bin_width_b
    if n_bins_a is None:
        n_bins_a = int(ia_all.max()) + 1 if pairs.size else 1
    if n_bins_b is None:
        n_bins_b = int(ib_all.max()) + 1 if pairs.size else 1
    counts = np.zeros(n_bins_a * n_bins_b, dtype=np.int64)
    dropped = 0
    for chunk in np.array_split(np.arange(pairs.shape[0]), max(int(n_chunks), 1)):
        ia, ib = ia_all[chunk], ib_all[chunk]
        ok = (ia >= 0) & (ia < n_bins_a) & (ib >= 0) & (ib < n_bins_b)
        flat = ia[ok] * n_bins_b + ib[ok]
        counts += np.bincount(flat, minlength=counts.size)
        dropped += int(np.count_nonzero(~ok))
    return JointHistogram(
        bin_width_a=bin_width_a,
        bin_width_b=bin_width_b,
        origin_a=int(origin_a),
        origin_b=int(origin_b),
        counts=counts.reshape(n_bins_a, n_bins_b),
        dropped=dropped,
    )


def merge_joint_histograms(a: JointHistogram, b: JointHistogram) -> JointHistogram:
    geom = ("bin_width_a", "bin_width_b", "origin_a", "origin_b")
    if any(getattr(a, f) != getattr(b, f) for f in geom) or a.counts.shape != b.counts.shape:
        raise ConfigError("joint histogram geometry mismatch")
    return replace(a, counts=a.counts + b.counts, dropped=a.dropped + b.dropped)


def write_tags(path, stream: TagStream) -> None:
    """Write a stream to the binary tag format (little-endian, 9-byte records)."""
    records = np.empty(len(stream), dtype=_RECORD_DTYPE)
    records["channel"] = stream.channels
    records["timestamp"] = stream.timestamps
    header = _HEADER.pack(
        TTAG_MAGIC,
        TTAG_VERSION,
        stream.n_channels(),
        stream.clock_period,
        len(stream),
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(records.tobytes())


def read_tags(path) -> TagStream:
    """Read a binary tag file, validating framing and per-channel monotonicity."""
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise FormatError(f"{path}: truncated header ({len(head)} of {_HEADER.size} bytes)")
        magic, version, n_channels, clock_period, n_records = _HEADER.unpack(head)
        if magic != TTAG_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {TTAG_MAGIC!r}")
        if version != TTAG_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        payload = fh.read()
    expected = n_records * _RECORD_DTYPE.itemsize
    if len(payload) != expected:
        complete = len(payload) // _RECORD_DTYPE.itemsize
        raise FormatError(
            f"{path}: truncated at record {complete} "
            f"({len(payload)} payload bytes, header promises {n_records} records)"
        )
    records = np.frombuffer(payload, dtype=_RECORD_DTYPE)
    if n_records and int(records["channel"].max()) >= n_channels:
        bad = int(np.argmax(records["channel"] >= n_channels))
        raise FormatError(
            f"{path}: record {bad} has channel {int(records['channel'][bad])} "
            f">= declared channel count {n_channels}"
        )
    try:
        return TagStream(
            clock_period=int(clock_period),
            channels=records["channel"].copy(),
            timestamps=records["timestamp"].copy(),
        )
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from None


def write_tags_csv(path, stream: TagStream) -> None:
    """Debug-friendly CSV mirror of the binary format."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# clock_period_ps={stream.clock_period}\n")
        fh.write("channel,timestamp_ps\n")
        for c, t in zip(stream.channels, stream.timestamps):
            fh.write(f"{int(c)},{int(t)}\n")


def read_tags_csv(path) -> TagStream:
    clock_period = None
    chans, times = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            text = line.strip()
            if text.startswith("#"):
                if "clock_period_ps=" in text:
                    clock_period = int(text.split("=", 1)[1])
                continue
            if not text or text.startswith("channel"):
                continue
            c, t = text.split(",")
            chans.append(int(c))
            times.append(int(t))
    if clock_period is None:
        raise FormatError(f"{path}: missing '# clock_period_ps=' comment")
    return TagStream(
        clock_period,
        np.asarray(chans, dtype=np.uint8),
        np.asarray(times, dtype=np.uint64),
    )

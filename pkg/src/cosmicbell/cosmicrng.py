"""Cosmic-photon random bit generation.

A clock edge every ``clock_period``; the acceptance window is the
``window`` immediately before each edge, split into two equal bins. The
first detection in the early bin yields bit 0, in the late bin bit 1. After
a bit is emitted no further bits are produced for ``deadtime``. All times are
integer picoseconds internally.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .chstats import BiasMonitor
from .errors import ValidationError

PS_PER_NS = 1000
PS_PER_US = 1_000_000
PS_PER_S = 10**12

SIGNAL, BACKGROUND, UNKNOWN = "signal", "background", "unknown"
_CHANNELS = (SIGNAL, BACKGROUND, UNKNOWN)


@dataclass(frozen=True, eq=False)
class PhotonEventStream:
    """Time-tagged detections in picoseconds from the stream origin.

    ``channel`` holds an index into ``("signal", "background", "unknown")``.
    """

    timestamps: np.ndarray
    channel: np.ndarray | None = None

    def __post_init__(self):
        t = np.asarray(self.timestamps, dtype=np.int64)
        if t.ndim != 1:
            raise ValidationError("timestamps must be one-dimensional")
        if len(t) > 1 and np.any(np.diff(t) <= 0):
            raise ValidationError("timestamps must be strictly increasing")
        ch = np.full(len(t), 2, dtype=np.int8) if self.channel is None else np.asarray(self.channel, dtype=np.int8)
        if ch.shape != t.shape:
            raise ValidationError("channel tags must match timestamps")
        object.__setattr__(self, "timestamps", t)
        object.__setattr__(self, "channel", ch)

    def __len__(self):
        return len(self.timestamps)

    @property
    def duration_ps(self) -> int:
        return int(self.timestamps[-1]) if len(self.timestamps) else 0


@dataclass(frozen=True, eq=False)
class BitRecords:
    """Extracted bits; ``timestamp`` is the clock edge at which the bit was emitted."""

    timestamp: np.ndarray
    bit: np.ndarray
    clock_index: np.ndarray

    def __len__(self):
        return len(self.bit)

    def __iter__(self):
        for t, b, k in zip(self.timestamp, self.bit, self.clock_index):
            yield BitRecord(int(t), int(b), int(k))


@dataclass(frozen=True)
class BitRecord:
    timestamp: int
    bit: int
    clock_index: int


def extract_bits(events: PhotonEventStream, clock_period: float = 500.0, window: float = 133.2,
                 deadtime: float = 5.0) -> BitRecords:
    """Digitize photon arrival times into bits.

    Parameters
    ----------
    events : detections to digitize
    clock_period : clock spacing in ns; edges sit at integer multiples of it
    window : acceptance window before each edge, in ns
    deadtime : minimum spacing between emitted bits, in microseconds
    """
    if clock_period <= 0 or window <= 0 or deadtime < 0:
        raise ValidationError("clock period, window and deadtime must be positive")
    if window >= clock_period:
        raise ValidationError("acceptance window must be shorter than the clock period")
    P = int(round(clock_period * PS_PER_NS))
    W = int(round(window * PS_PER_NS))
    half = W // 2
    D = int(round(deadtime * PS_PER_US))

    t = events.timestamps
    edge = t // P + 1                 # first edge strictly after the event
    lead = edge * P - t               # time remaining until that edge, in (0, P]
    inside = lead <= W
    edge, t_in = edge[inside], t[inside]
    # only the first detection of each window is digitized
    first = np.ones(len(edge), dtype=bool)
    first[1:] = edge[1:] != edge[:-1]
    edge, t_in = edge[first], t_in[first]
    bits = (t_in >= edge * P - W + half).astype(np.int8)

    keep = np.zeros(len(edge), dtype=bool)
    next_allowed = -np.inf
    edge_ps = edge * P
    for i, e in enumerate(edge_ps.tolist()):
        if e >= next_allowed:
            keep[i] = True
            next_allowed = e + D
    return BitRecords(edge_ps[keep], bits[keep], edge[keep])


def _poisson_times(rng, rate, duration_ps, profile, period_ps):
    n = rng.poisson(rate * duration_ps / PS_PER_S)
    t = rng.integers(0, duration_ps, size=n, dtype=np.int64)
    if profile is not None:
        phase = (t % period_ps) / period_ps
        keep = rng.random(n) < np.clip(profile(phase), 0.0, 1.0)
        t = t[keep]
    return t


def simulate_arrivals(rate_signal: float, rate_background: float, duration: float, seed: int,
                      profile: Callable[[np.ndarray], np.ndarray] | None = None,
                      clock_period: float = 500.0) -> PhotonEventStream:
    """Superposed homogeneous Poisson detections, channel-tagged.

    ``rate_*`` in Hz, ``duration`` in seconds. ``profile`` optionally thins the
    signal channel: it receives the arrival phase within the clock period
    (in ``[0, 1)``) and returns an acceptance probability, which lets callers
    inject a phase-dependent (hence bit-biased) intensity. Coincident
    picosecond stamps are merged, keeping the first.
    """
    if rate_signal < 0 or rate_background < 0 or duration < 0:
        raise ValidationError("rates and duration must be nonnegative")
    rng = np.random.default_rng(seed)
    duration_ps = int(round(duration * PS_PER_S))
    period_ps = int(round(clock_period * PS_PER_NS))
    ts = _poisson_times(rng, rate_signal, duration_ps, profile, period_ps)
    tb = _poisson_times(rng, rate_background, duration_ps, None, period_ps)
    t = np.concatenate([ts, tb])
    ch = np.concatenate([np.zeros(len(ts), np.int8), np.ones(len(tb), np.int8)])
    order = np.argsort(t, kind="stable")
    t, ch = t[order], ch[order]
    if len(t) > 1:
        uniq = np.ones(len(t), dtype=bool)
        uniq[1:] = np.diff(t) > 0
        t, ch = t[uniq], ch[uniq]
    return PhotonEventStream(t, ch)


def ratio_snr(bits_onsource: BitRecords, bits_dark: BitRecords | None,
              duration_onsource: float, duration_dark: float) -> BiasMonitor:
    """Bit ratio ``n0/n1`` and SNR from on-source and dark-sky bit records.

    SNR is ``(on-source rate - dark rate) / dark rate``, with rates taken from
    the bit records. Once the deadtime saturates the bit output this no
    longer tracks the photon rates, so monitoring runs should stay well below
    one photon per deadtime. A zero dark rate or an on-source record with no
    ones gives infinity, with a flag recorded.
    """
    if len(bits_onsource) == 0:
        raise ValidationError("on-source bit record is empty")
    if duration_onsource <= 0:
        raise ValidationError("on-source duration must be positive")
    flags = []
    n1 = int(np.sum(bits_onsource.bit))
    n0 = len(bits_onsource) - n1
    if n1 == 0:
        r = math.inf
        flags.append("no-ones")
    else:
        r = n0 / n1
        if n0 == 0:
            flags.append("no-zeros")
    on_rate = len(bits_onsource) / duration_onsource
    dark_n = 0 if bits_dark is None else len(bits_dark)
    if dark_n == 0 or duration_dark <= 0:
        snr = math.inf
        flags.append("zero-dark-rate")
    else:
        dark_rate = dark_n / duration_dark
        snr = (on_rate - dark_rate) / dark_rate
        if snr <= 0:
            raise ValidationError("on-source rate does not exceed the dark rate")
    return BiasMonitor(r, snr, tuple(flags))


# ---------------------------------------------------------------------------
# time-tag files

def read_timetags(path) -> PhotonEventStream:
    """Read a ``timestamp_ps,channel`` CSV file."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["timestamp_ps", "channel"]:
            raise ValidationError(f"{path}: expected header 'timestamp_ps,channel'")
        times, chans = [], []
        last = None
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise ValidationError(f"{path}:{lineno}: expected 2 fields")
            try:
                t = int(row[0])
            except ValueError:
                raise ValidationError(f"{path}:{lineno}: bad timestamp {row[0]!r}") from None
            name = row[1].strip()
            if name not in _CHANNELS:
                raise ValidationError(f"{path}:{lineno}: unknown channel {name!r}")
            if last is not None and t < last:
                raise ValidationError(f"{path}:{lineno}: timestamps decrease")
            if last is not None and t == last:
                continue
            last = t
            times.append(t)
            chans.append(_CHANNELS.index(name))
    return PhotonEventStream(np.array(times, dtype=np.int64), np.array(chans, dtype=np.int8))


def write_timetags(path, events: PhotonEventStream):
    with Path(path).open("w", newline="") as fh:
        fh.write("timestamp_ps,channel\n")
        for t, c in zip(events.timestamps.tolist(), events.channel.tolist()):
            fh.write(f"{t},{_CHANNELS[c]}\n")


def write_bits(path, bits: BitRecords):
    with Path(path).open("w", newline="") as fh:
        fh.write("timestamp_ps,bit,clock_index\n")
        for t, b, k in zip(bits.timestamp.tolist(), bits.bit.tolist(), bits.clock_index.tolist()):
            fh.write(f"{t},{b},{k}\n")

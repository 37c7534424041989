"""
Streaming histogram of intervals between consecutive detections.

Bins are indexed by interval value starting at 1 (an interval of zero
units cannot occur). Intervals beyond ``n_bins`` go to ``overflow``.
"""
from __future__ import annotations

import io
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .errors import EmptyHistogramError, IncompatibleHistogramError, OrderingError, DomainError

UNITS = ("gates", "samples")
DEFAULT_BINS = 4096


class IntervalHistogram:
    """Single-writer accumulator of inter-detection intervals.

    Feed event positions (gate indices or sample counts) in order with
    :meth:`feed`. Each call to :meth:`new_segment` starts a fresh stream
    segment whose first event opens no interval.
    """

    def __init__(self, unit: str = "gates", n_bins: int = DEFAULT_BINS):
        if unit not in UNITS:
            raise DomainError(f"unit must be one of {UNITS}, got {unit!r}")
        if n_bins < 1:
            raise DomainError("n_bins must be >= 1")
        self.unit = unit
        self.n_bins = int(n_bins)
        self.bin_counts = np.zeros(self.n_bins, dtype=np.int64)
        self.overflow_count = 0
        self.n_events = 0
        self.n_segments = 0
        self._last: Optional[int] = None

    @property
    def total(self) -> int:
        return int(self.bin_counts.sum()) + self.overflow_count

    @property
    def intervals(self) -> np.ndarray:
        """Interval value of each bin (1..n_bins)."""
        return np.arange(1, self.n_bins + 1)

    def new_segment(self):
        self._last = None

    def feed(self, positions) -> "IntervalHistogram":
        """Add events at the given positions (scalar or array, non-decreasing order required)."""
        pos = np.atleast_1d(np.asarray(positions, dtype=np.int64))
        if pos.size == 0:
            return self
        if self._last is None:
            self.n_segments += 1
            prev = pos[:1]
            rest = pos[1:]
        else:
            prev = np.array([self._last], dtype=np.int64)
            rest = pos
        deltas = np.diff(np.concatenate((prev, rest))) if rest.size else np.empty(0, np.int64)
        if deltas.size and deltas.min() < 1:
            bad = int(np.argmax(deltas < 1))
            raise OrderingError(f"events must be strictly increasing (violation at fed index {bad})")
        self.n_events += int(pos.size)
        self._last = int(pos[-1])
        if deltas.size:
            inside = deltas <= self.n_bins
            self.bin_counts += np.bincount(deltas[inside] - 1, minlength=self.n_bins)
            self.overflow_count += int(deltas.size - inside.sum())
        return self

    def copy(self) -> "IntervalHistogram":
        h = IntervalHistogram(self.unit, self.n_bins)
        h.bin_counts = self.bin_counts.copy()
        h.overflow_count = self.overflow_count
        h.n_events = self.n_events
        h.n_segments = self.n_segments
        h._last = self._last
        return h

    def same_counts(self, other: "IntervalHistogram") -> bool:
        return (
            self.unit == other.unit
            and self.n_bins == other.n_bins
            and self.overflow_count == other.overflow_count
            and np.array_equal(self.bin_counts, other.bin_counts)
        )

    __eq__ = same_counts
    __hash__ = None

    def __repr__(self):
        return f"IntervalHistogram(unit={self.unit!r}, n_bins={self.n_bins}, total={self.total})"

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        buf.write(f"# unit={self.unit}\n")
        buf.write("interval,count\n")
        for i, c in enumerate(self.bin_counts.tolist(), start=1):
            buf.write(f"{i},{c}\n")
        buf.write(f"overflow,{self.overflow_count}\n")
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8", newline="")
        return text

    @classmethod
    def from_csv(cls, source) -> "IntervalHistogram":
        if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source):
            source = Path(source).read_text(encoding="utf-8")
        unit = "gates"
        counts = []
        overflow = 0
        seen_overflow = False
        for lineno, line in enumerate(source.splitlines(), start=1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                if key.strip() == "unit":
                    unit = value.strip()
                continue
            if line == "interval,count":
                continue
            key, _, value = line.partition(",")
            try:
                if key == "overflow":
                    overflow = int(value)
                    seen_overflow = True
                    continue
                if seen_overflow:
                    raise ValueError
                if int(key) != len(counts) + 1:
                    raise ValueError
                counts.append(int(value))
            except ValueError:
                raise DomainError(f"row {lineno}: malformed histogram row {line!r}") from None
        h = cls(unit, max(len(counts), 1))
        if counts:
            h.bin_counts = np.asarray(counts, dtype=np.int64)
        h.overflow_count = overflow
        return h


def accumulate(events, unit: str = "gates", n_bins: int = DEFAULT_BINS,
               into: Optional[IntervalHistogram] = None) -> IntervalHistogram:
    """Histogram the intervals of an ordered event stream.

    ``events`` may be an :class:`~spadmon.simulate.EventStream`, an iterable
    of :class:`~spadmon.simulate.DetectionEvent`, or an array of positions.
    Passing ``into`` continues an existing histogram incrementally.
    """
    h = into if into is not None else IntervalHistogram(unit, n_bins)
    if hasattr(events, "positions"):
        positions = events.positions(h.unit)
    elif isinstance(events, np.ndarray):
        positions = events
    else:
        positions = np.fromiter((_event_position(e, h.unit) for e in events), dtype=np.int64)
    return h.feed(positions)


def _event_position(event, unit):
    if unit == "gates":
        return event.gate_index
    return event.absolute_sample


def normalize(h: IntervalHistogram) -> np.ndarray:
    """Empirical PMF: ``bin_counts / total``. The histogram is left untouched."""
    total = h.total
    if total == 0:
        raise EmptyHistogramError("cannot normalise an empty histogram")
    return h.bin_counts / total


def merge(h1: IntervalHistogram, h2: IntervalHistogram) -> IntervalHistogram:
    """Bin-wise sum of two histograms of the same unit and shape."""
    if h1.unit != h2.unit or h1.n_bins != h2.n_bins:
        raise IncompatibleHistogramError(
            f"cannot merge {h1.unit}/{h1.n_bins} with {h2.unit}/{h2.n_bins}"
        )
    out = IntervalHistogram(h1.unit, h1.n_bins)
    out.bin_counts = h1.bin_counts + h2.bin_counts
    out.overflow_count = h1.overflow_count + h2.overflow_count
    out.n_events = h1.n_events + h2.n_events
    out.n_segments = h1.n_segments + h2.n_segments
    return out


def merge_all(hists: Iterable[IntervalHistogram]) -> IntervalHistogram:
    hists = list(hists)
    if not hists:
        raise EmptyHistogramError("nothing to merge")
    out = hists[0].copy()
    out._last = None
    for h in hists[1:]:
        out = merge(out, h)
    return out

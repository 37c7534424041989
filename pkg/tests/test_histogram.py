from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spadmon.errors import DomainError, EmptyHistogramError, IncompatibleHistogramError, OrderingError
from spadmon.histogram import IntervalHistogram, accumulate, merge, merge_all, normalize

increasing = st.lists(st.integers(1, 40), min_size=1, max_size=200).map(lambda d: np.cumsum(d))


def test_intervals_counted_by_value():
    h = accumulate(np.array([3, 4, 7, 17]), n_bins=8)
    assert h.bin_counts.tolist() == [1, 0, 1, 0, 0, 0, 0, 0]
    assert h.overflow_count == 1
    assert h.total == 3
    assert h.n_events == 4


def test_incremental_feed_equals_batch():
    pos = np.cumsum(np.random.default_rng(0).integers(1, 30, size=500))
    batch = accumulate(pos, n_bins=64)
    inc = IntervalHistogram("gates", 64)
    for chunk in np.array_split(pos, 7):
        inc.feed(chunk)
    assert inc == batch


def test_new_segment_opens_no_interval():
    h = IntervalHistogram(n_bins=10)
    h.feed([1, 3])
    h.new_segment()
    h.feed([100, 101])
    assert h.total == 2
    assert h.bin_counts[0] == 1 and h.bin_counts[1] == 1
    assert h.n_segments == 2


def test_ordering_violation():
    with pytest.raises(OrderingError):
        accumulate(np.array([1, 5, 5]))
    h = accumulate(np.array([1, 5]))
    with pytest.raises(OrderingError):
        h.feed([4])


def test_normalize_and_empty():
    h = accumulate(np.array([1, 2, 4]), n_bins=4)
    np.testing.assert_allclose(normalize(h), [0.5, 0.5, 0, 0])
    with pytest.raises(EmptyHistogramError):
        normalize(IntervalHistogram())


def test_merge_rules():
    a = accumulate(np.array([1, 2, 5]), n_bins=4)
    b = accumulate(np.array([10, 13, 30]), n_bins=4)
    m = merge(a, b)
    assert m.bin_counts.tolist() == [1, 0, 2, 0]
    assert m.overflow_count == 1
    with pytest.raises(IncompatibleHistogramError):
        merge(a, IntervalHistogram("samples", 4))
    with pytest.raises(IncompatibleHistogramError):
        merge(a, IntervalHistogram("gates", 5))
    with pytest.raises(EmptyHistogramError):
        merge_all([])


def test_bad_construction():
    with pytest.raises(DomainError):
        IntervalHistogram("seconds")
    with pytest.raises(DomainError):
        IntervalHistogram(n_bins=0)


def test_csv_round_trip(tmp_path):
    h = accumulate(np.array([2, 3, 9, 40]), unit="samples", n_bins=16)
    path = tmp_path / "h.csv"
    h.to_csv(path)
    back = IntervalHistogram.from_csv(path)
    assert back == h
    assert back.unit == "samples"


def test_csv_malformed_row_named():
    text = "# unit=gates\ninterval,count\n1,4\n2,x\noverflow,0\n"
    with pytest.raises(DomainError, match="row 4"):
        IntervalHistogram.from_csv(text)


@settings(max_examples=100, deadline=None)
@given(pos=increasing, n_bins=st.integers(1, 50))
def test_total_is_events_minus_one(pos, n_bins):
    h = accumulate(pos, n_bins=n_bins)
    assert h.total == len(pos) - 1
    assert np.all(h.bin_counts >= 0)


@settings(max_examples=100, deadline=None)
@given(pos=increasing, cut=st.integers(0, 200))
def test_merge_of_halves_matches_whole(pos, cut):
    cut = min(cut, len(pos))
    whole = accumulate(pos, n_bins=20)
    left = accumulate(pos[:cut], n_bins=20) if cut else IntervalHistogram(n_bins=20)
    right = accumulate(pos[cut:], n_bins=20) if cut < len(pos) else IntervalHistogram(n_bins=20)
    merged = merge(left, right)
    # the interval spanning the cut is the only one lost
    lost = whole.total - merged.total
    assert lost == (1 if 0 < cut < len(pos) else 0)


@settings(max_examples=50, deadline=None)
@given(pos=increasing)
def test_pmf_sums_to_at_most_one(pos):
    h = accumulate(pos, n_bins=30)
    if h.total:
        s = normalize(h).sum()
        assert s <= 1.0 + 1e-12
        assert s == pytest.approx(1 - h.overflow_count / h.total)

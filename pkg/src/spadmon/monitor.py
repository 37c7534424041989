"""
Detector health monitoring.

A :class:`Baseline` stores the nominal parameters of a characterised
detector plus alarm thresholds. :func:`compare` turns a fresh
:class:`~spadmon.estimate.ParameterEstimate` into a :class:`Verdict`;
:func:`detect_timing_peaks` looks for extra arrival-time peaks inside each
gate period; :func:`hop_schedule` draws the random parameter switching
that keeps an attacker from replaying fixed statistics.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.signal import find_peaks

from .errors import (
    DegenerateScheduleError,
    DomainError,
    InsufficientDataError,
    UnitMismatchError,
)
from .estimate import FitConfig, ParameterEstimate, estimate_deadtime, estimate_parameters
from .histogram import IntervalHistogram, accumulate
from .model import DetectorParams

DEFAULT_AFTERPULSE_THRESHOLD = 0.005
DEFAULT_RATE_TOLERANCE = 0.10
DEFAULT_BAND = 0.25  # relative afterpulse band used when the deadtime is off


@dataclass(frozen=True)
class TimingExpectation:
    """Where the single arrival peak should sit inside each gate period."""

    offset_samples: int = 0
    jitter_samples: int = 1

    def __post_init__(self):
        if self.jitter_samples < 0:
            raise DomainError("jitter_samples must be >= 0")


@dataclass(frozen=True)
class Baseline:
    """Nominal detector behaviour and the alarm rules applied against it.

    ``tolerances`` holds relative bounds per checked quantity (``"rate"`` is
    the per-gate event rate ``-ln q_total``). ``afterpulse_band``, when set,
    adds a two-sided relative band around the nominal afterpulse
    probability, which catches attacks that lower afterpulsing.
    """

    nominal: ParameterEstimate
    tolerances: dict = field(default_factory=lambda: {"rate": DEFAULT_RATE_TOLERANCE})
    afterpulse_alarm_threshold: float = DEFAULT_AFTERPULSE_THRESHOLD
    afterpulse_band: Optional[float] = None
    timing: Optional[TimingExpectation] = TimingExpectation()
    min_samples: int = 1000
    period_samples: Optional[int] = None

    def __post_init__(self):
        for key, tol in self.tolerances.items():
            if not tol > 0:
                raise DomainError(f"tolerance {key!r} must be positive, got {tol}")
        if not self.afterpulse_alarm_threshold > self.nominal.p_after_live:
            raise DomainError(
                f"afterpulse threshold {self.afterpulse_alarm_threshold:.4g} must exceed the nominal "
                f"afterpulse probability {self.nominal.p_after_live:.4g}"
            )
        if self.afterpulse_band is not None and not self.afterpulse_band > 0:
            raise DomainError("afterpulse_band must be positive")

    @classmethod
    def from_estimate(cls, nominal: ParameterEstimate, **overrides) -> "Baseline":
        """Baseline around a measured or analytic nominal estimate.

        With the deadtime switched off the afterpulse level may no longer be
        negligible, so the threshold defaults to twice the nominal value
        (never below the global default). A two-sided band is enabled when
        the nominal level itself reaches the global threshold, since a
        relative band around a near-zero level would only track noise.
        """
        kw = {}
        if nominal.deadtime_units == 0:
            kw["afterpulse_alarm_threshold"] = max(DEFAULT_AFTERPULSE_THRESHOLD, 2.0 * nominal.p_after_live)
            if nominal.p_after_live >= DEFAULT_AFTERPULSE_THRESHOLD:
                kw["afterpulse_band"] = DEFAULT_BAND
        kw.update(overrides)
        return cls(nominal=nominal, **kw)

    @classmethod
    def from_params(cls, params: DetectorParams, **overrides) -> "Baseline":
        """Baseline from known detector parameters (no measurement noise)."""
        nominal = ParameterEstimate(
            q_total=params.q_total, p0_hat=params.p0, tau_hat=params.tau_trap,
            gate_period=params.gate_period, deadtime_units=int(params.deadtime_gates),
            r_squared=1.0, n_samples=0, p_dark_assumed=params.p_dark, method="nominal",
        )
        overrides.setdefault("period_samples", params.period_samples)
        return cls.from_estimate(nominal, **overrides)

    def fit_config(self, base: FitConfig = FitConfig()) -> FitConfig:
        """Estimator settings for this detector: the trap lifetime is taken as known."""
        if base.tau_fixed is not None:
            return base
        return replace(base, tau_fixed=self.nominal.tau_hat)

    def to_dict(self) -> dict:
        return {
            "nominal": self.nominal.to_dict(),
            "tolerances": dict(self.tolerances),
            "afterpulse_alarm_threshold": self.afterpulse_alarm_threshold,
            "afterpulse_band": self.afterpulse_band,
            "timing": None if self.timing is None else {
                "offset_samples": self.timing.offset_samples,
                "jitter_samples": self.timing.jitter_samples,
            },
            "min_samples": self.min_samples,
            "period_samples": self.period_samples,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Baseline":
        timing = doc.get("timing", {})
        return cls(
            nominal=ParameterEstimate.from_dict(doc["nominal"]),
            tolerances=dict(doc.get("tolerances", {"rate": DEFAULT_RATE_TOLERANCE})),
            afterpulse_alarm_threshold=doc.get("afterpulse_alarm_threshold", DEFAULT_AFTERPULSE_THRESHOLD),
            afterpulse_band=doc.get("afterpulse_band"),
            timing=None if timing is None else TimingExpectation(**timing),
            min_samples=doc.get("min_samples", 1000),
            period_samples=doc.get("period_samples"),
        )


@dataclass(frozen=True)
class TimingWindow:
    period_index: int
    counts: int
    offsets: tuple
    heights: tuple
    usable: bool


@dataclass(frozen=True)
class TimingReport:
    """Peaks found per gate-period window of a sample-unit interval histogram."""

    status: str  # "ok" or "inconclusive"
    windows: tuple
    timing_alarm: bool
    central_to_side_ratio: Optional[float]
    period_samples: int

    @property
    def peaks_per_window(self) -> list:
        return [len(w.offsets) for w in self.windows if w.usable]

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "timing_alarm": self.timing_alarm,
            "central_to_side_ratio": self.central_to_side_ratio,
            "period_samples": self.period_samples,
            "peaks_per_window": self.peaks_per_window,
            "windows": [
                {"period_index": w.period_index, "counts": w.counts, "offsets": list(w.offsets),
                 "heights": list(w.heights), "usable": w.usable}
                for w in self.windows
            ],
        }


@dataclass(frozen=True)
class Verdict:
    afterpulse_alarm: bool
    efficiency_alarm: bool
    deadtime_alarm: bool
    timing_alarm: bool = False
    afterpulse_band_alarm: bool = False
    evidence: dict = field(default_factory=dict)

    @property
    def overall(self) -> bool:
        return bool(self.afterpulse_alarm or self.efficiency_alarm or self.deadtime_alarm
                    or self.timing_alarm or self.afterpulse_band_alarm)

    @property
    def raised(self) -> list:
        names = ("afterpulse_alarm", "afterpulse_band_alarm", "efficiency_alarm", "deadtime_alarm", "timing_alarm")
        return [n for n in names if getattr(self, n)]

    def to_dict(self) -> dict:
        return {
            "overall": self.overall,
            "afterpulse_alarm": self.afterpulse_alarm,
            "afterpulse_band_alarm": self.afterpulse_band_alarm,
            "efficiency_alarm": self.efficiency_alarm,
            "deadtime_alarm": self.deadtime_alarm,
            "timing_alarm": self.timing_alarm,
            "evidence": self.evidence,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def compare(baseline: Baseline, estimate: ParameterEstimate,
            timing: Optional[TimingReport] = None) -> Verdict:
    """Check an estimate against the baseline and report every alarm with its evidence."""
    nom = baseline.nominal
    if estimate.unit != nom.unit:
        raise UnitMismatchError(f"estimate in {estimate.unit!r}, baseline in {nom.unit!r}")
    if not math.isclose(estimate.gate_period, nom.gate_period, rel_tol=1e-9):
        raise UnitMismatchError(
            f"estimate gate period {estimate.gate_period} s differs from baseline {nom.gate_period} s"
        )
    if 0 < estimate.n_samples < baseline.min_samples:
        raise InsufficientDataError(
            f"estimate from {estimate.n_samples} intervals, baseline requires {baseline.min_samples}"
        )
    evidence = {}

    p_live = estimate.p_after_live
    ap = p_live > baseline.afterpulse_alarm_threshold
    evidence["afterpulse"] = {"measured": p_live, "threshold": baseline.afterpulse_alarm_threshold,
                              "nominal": nom.p_after_live, "method": estimate.method}

    band_alarm = False
    if baseline.afterpulse_band is not None:
        ref = nom.p_after_live
        dev = (p_live - ref) / ref if ref > 0 else math.inf
        band_alarm = abs(dev) > baseline.afterpulse_band
        evidence["afterpulse_band"] = {
            "measured": p_live, "nominal": ref, "relative_deviation": dev,
            "band": baseline.afterpulse_band, "direction": "decrease" if dev < 0 else "increase",
        }

    rate, nom_rate = estimate.rate, nom.rate
    rate_dev = (rate - nom_rate) / nom_rate
    tol = baseline.tolerances.get("rate", DEFAULT_RATE_TOLERANCE)
    eff = abs(rate_dev) > tol
    evidence["efficiency"] = {"measured_rate": rate, "nominal_rate": nom_rate,
                              "relative_deviation": rate_dev, "tolerance": tol}
    if estimate.mu_eta is not None:
        evidence["efficiency"]["measured_mu_eta"] = estimate.mu_eta

    dead = estimate.deadtime_units != nom.deadtime_units
    evidence["deadtime"] = {"measured": estimate.deadtime_units, "nominal": nom.deadtime_units}

    timing_alarm = False
    if timing is not None:
        timing_alarm = timing.timing_alarm
        evidence["timing"] = {"status": timing.status, "peaks_per_window": timing.peaks_per_window,
                              "central_to_side_ratio": timing.central_to_side_ratio}
    return Verdict(bool(ap), bool(eff), bool(dead), bool(timing_alarm), bool(band_alarm), evidence)


def detect_timing_peaks(h: IntervalHistogram, period_samples: int, min_peak_fraction: float = 0.05,
                        n_windows: int = 10, expected: Optional[TimingExpectation] = None,
                        min_counts: int = 100) -> TimingReport:
    """Locate arrival-time peaks in each gate-period window of a sample-unit histogram.

    Window ``k`` covers intervals ``[k*P - P/2, k*P + P/2)``. The first
    ``n_windows`` windows holding any counts are examined; a window with
    fewer than ``min_counts`` counts is reported but not judged. A peak is a
    local maximum carrying at least ``min_peak_fraction`` of its window's
    counts. The alarm is raised when a judged window shows more than one
    peak, or a single peak off the expected offset by more than the jitter.
    """
    if h.unit != "samples":
        raise DomainError("timing analysis needs a sample-unit histogram")
    if int(period_samples) != period_samples or period_samples < 2:
        raise DomainError("period_samples must be an integer >= 2")
    expected = expected or TimingExpectation()
    P = int(period_samples)
    half = P // 2
    counts = h.bin_counts
    windows = []
    k = 0
    k_max = (h.n_bins + half) // P
    while len(windows) < n_windows and k <= k_max:
        lo, hi = k * P - half, k * P - half + P  # interval values, hi exclusive
        lo_c = max(lo, 1)
        hi_c = min(hi, h.n_bins + 1)
        k += 1
        if hi_c <= lo_c:
            continue
        seg = counts[lo_c - 1:hi_c - 1]
        mass = int(seg.sum())
        if mass == 0:
            continue
        padded = np.concatenate(([0], seg, [0]))
        idx, props = find_peaks(padded, height=min_peak_fraction * mass)
        offsets = tuple(int(lo_c + i - 1 - (k - 1) * P) for i in idx)
        heights = tuple(int(v) for v in props["peak_heights"])
        windows.append(TimingWindow(k - 1, mass, offsets, heights, mass >= min_counts))
    usable = [w for w in windows if w.usable]
    if not usable:
        return TimingReport("inconclusive", tuple(windows), False, None, P)
    alarm = False
    central, side = [], []
    for w in usable:
        if len(w.offsets) != 1:
            alarm = True
        elif abs(w.offsets[0] - expected.offset_samples) > expected.jitter_samples:
            alarm = True
        if w.offsets:
            j = int(np.argmin([abs(o - expected.offset_samples) for o in w.offsets]))
            central.append(w.heights[j])
            side.extend(hh for i, hh in enumerate(w.heights) if i != j)
    ratio = float(np.mean(central) / np.mean(side)) if side else None
    return TimingReport("ok", tuple(windows), alarm, ratio, P)


def timeshift_efficiency_ratio(central_to_side: float) -> float:
    """Low-to-high efficiency ratio implied by the three-peak height ratio.

    With delays chosen by a fair coin, a fraction ``a`` of the counts sit
    at one offset and ``1 - a`` at the other. Consecutive pairs at equal
    offsets fill the central peak, mixed pairs the two side peaks, so
    ``central/side = (a^2 + (1-a)^2) / (a (1-a))``.
    """
    if not central_to_side >= 2.0:
        raise DomainError("central-to-side ratio below 2 has no two-level solution")
    a = 0.5 * (1.0 + math.sqrt(1.0 - 4.0 / (central_to_side + 2.0)))
    return (1.0 - a) / a


def timing_histogram(stream, n_windows: int = 10) -> IntervalHistogram:
    """Sample-unit interval histogram long enough to hold ``n_windows`` gate periods past the deadtime."""
    P = int(stream.period_samples)
    if stream.mode == "gated" and len(stream) > 1:
        min_gap = int(np.min(np.diff(stream.gate_index)))
    else:
        min_gap = 1
    n_bins = P * (min_gap + n_windows + 1)
    return accumulate(stream, "samples", n_bins)


@dataclass(frozen=True)
class Assessment:
    estimate: ParameterEstimate
    timing: Optional[TimingReport]
    verdict: Verdict

    def to_dict(self) -> dict:
        return {
            "estimate": self.estimate.to_dict(),
            "timing": None if self.timing is None else self.timing.to_dict(),
            "verdict": self.verdict.to_dict(),
        }


def assess(stream, baseline: Baseline, config: FitConfig = FitConfig(), method: str = "auto",
           n_bins: int = 4096, min_peak_fraction: float = 0.05, n_windows: int = 10) -> Assessment:
    """Histogram a gated stream, estimate its parameters and judge it against ``baseline``."""
    if stream.mode != "gated":
        raise DomainError("assess needs a gated event stream")
    h = accumulate(stream, "gates", n_bins)
    est = estimate_parameters(h, baseline.nominal.gate_period, method=method,
                              p_dark_assumed=baseline.nominal.p_dark_assumed,
                              config=baseline.fit_config(config))
    timing = None
    if baseline.timing is not None and stream.period_samples >= 2:
        timing = detect_timing_peaks(timing_histogram(stream, n_windows), stream.period_samples,
                                     min_peak_fraction, n_windows, expected=baseline.timing)
    return Assessment(est, timing, compare(baseline, est, timing))


def deadtime_verdict(h: IntervalHistogram, nominal_deadtime: int) -> Verdict:
    """Deadtime check for free-running detectors, where no gate model applies."""
    measured = estimate_deadtime(h)
    return Verdict(False, False, measured != nominal_deadtime, evidence={
        "deadtime": {"measured": measured, "nominal": nominal_deadtime, "unit": h.unit},
    })


# ---------------------------------------------------------------------------
# parameter hopping


@dataclass(frozen=True)
class Hop:
    start: int  # index of the first estimate taken under these parameters
    params: DetectorParams


def hop_schedule(options: Sequence[DetectorParams], mean_dwell: float, seed: int,
                 n_estimates: int) -> list:
    """Random switching between detector settings.

    Dwell lengths (in estimates) are geometric with mean ``mean_dwell``;
    each switch moves to a different option chosen uniformly. The schedule
    covers ``n_estimates`` estimates and is fixed by ``seed``.
    """
    options = list(options)
    if len(options) < 2 or all(o == options[0] for o in options[1:]):
        raise DegenerateScheduleError("hopping needs at least two distinct options")
    if not mean_dwell >= 1:
        raise DomainError("mean_dwell must be >= 1")
    if n_estimates < 1:
        raise DomainError("n_estimates must be >= 1")
    rng = np.random.default_rng(seed)
    current = int(rng.integers(len(options)))
    hops = []
    t = 0
    while t < n_estimates:
        hops.append(Hop(t, options[current]))
        t += int(rng.geometric(1.0 / mean_dwell))
        step = int(rng.integers(1, len(options)))
        current = (current + step) % len(options)
    return hops


def params_at(schedule: Sequence[Hop], index: int) -> DetectorParams:
    """Detector settings in force for estimate ``index``."""
    active = schedule[0].params
    for hop in schedule:
        if hop.start > index:
            break
        active = hop.params
    return active

"""Time-shift attack: three peaks per gate period.

Eve delays half of the photons by 60 ns so they see a lower efficiency. At
10 ns sampling the intervals cluster at the gate period and 6 samples on
either side of it.
"""
from __future__ import annotations

from spadmon import Baseline, DetectorParams, TimeShift, assess, detect_timing_peaks, simulate_gated
from spadmon.model import mutual_information_timeshift
from spadmon.monitor import timeshift_efficiency_ratio, timing_histogram

params = DetectorParams(gate_period=10e-6, deadtime_gates=0)
stream = simulate_gated(params, TimeShift(), 200_000, seed=3)

report = detect_timing_peaks(timing_histogram(stream), params.period_samples)
for w in report.windows[:3]:
    print(f"period {w.period_index}: offsets {w.offsets} heights {w.heights}")

ratio = timeshift_efficiency_ratio(report.central_to_side_ratio)
print(f"central/side = {report.central_to_side_ratio:.3f} -> efficiency ratio {ratio:.3f}")
print(f"information leaked per click: {mutual_information_timeshift(ratio):.4f} bits")

result = assess(stream, Baseline.from_params(params))
print(f"efficiency seen by the monitor: {result.estimate.efficiency(params.mu):.4f} (nominal {params.eta})")
print(f"alarms: {result.verdict.raised}")

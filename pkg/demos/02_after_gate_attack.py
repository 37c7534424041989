"""Bright pulses just after the gate leave their mark in the interval histogram.

Each fraction of intercepted gates is run through the same monitor. The
afterpulse excess above the tail line grows with the attacked fraction.
"""
from __future__ import annotations

from spadmon import AfterGate, Baseline, DetectorParams, NoAttack, accumulate, assess, simulate_gated
from spadmon.estimate import FitConfig, estimate_deadtime, tail_line_afterpulse

params = DetectorParams()
baseline = Baseline.from_params(params)
print(f"alarm threshold on surviving afterpulse: {baseline.afterpulse_alarm_threshold}")

for label, scenario in [("no attack", NoAttack())] + [
    (f"f = {f}", AfterGate(fraction_attacked=f)) for f in (1.0, 0.5, 0.1, 0.01)
]:
    stream = simulate_gated(params, scenario, 200_000, seed=7)
    h = accumulate(stream, "gates")
    d = estimate_deadtime(h)
    p_line = tail_line_afterpulse(h, FitConfig().tail_start(params.gate_period, d), first_live=d + 1)
    verdict = assess(stream, baseline).verdict
    print(f"{label:10s} tail-line afterpulse {p_line:7.4f}  alarms: {', '.join(verdict.raised) or 'none'}")

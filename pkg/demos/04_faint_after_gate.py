"""Faint pulses at the end of the gate: fewer clicks and less afterpulsing.

Without deadtime the honest detector shows about 5% afterpulsing. The faint
attack lowers both the click rate and the afterpulse level, so the monitor
needs the two-sided band around the nominal afterpulse value.
"""
from __future__ import annotations

from spadmon import Baseline, DetectorParams, FaintAfterGate, NoAttack, assess, simulate_gated

params = DetectorParams(gate_period=2e-6, deadtime_gates=0, p0=0.1425)
baseline = Baseline.from_params(params)
print(f"nominal afterpulse {params.p_after:.4f}, band +-{baseline.afterpulse_band:.0%}")

for label, scenario in (("no attack", NoAttack()), ("faint", FaintAfterGate())):
    result = assess(simulate_gated(params, scenario, 200_000, seed=2), baseline)
    est = result.estimate
    print(f"{label:9s} efficiency {est.efficiency(params.mu):.4f}  afterpulse {est.p_after:.4f}  "
          f"alarms: {', '.join(result.verdict.raised) or 'none'}")

"""Interval statistics of an honest gated detector.

Simulate a detector at 400 kHz gating with a 10 us deadtime, histogram the
gaps between detections, and fit the first-order interval model.
"""
from __future__ import annotations

import numpy as np

from spadmon import DetectorParams, NoAttack, accumulate, interval_pmf_exact, normalize, simulate_gated
from spadmon.estimate import FitConfig, estimate_deadtime, fit_interval_model

params = DetectorParams()
print(f"per-gate survival q = {params.q_total:.5f}, afterpulsing without deadtime = {params.p_after:.4f}")

stream = simulate_gated(params, NoAttack(), n_detections=200_000, seed=1)
h = accumulate(stream, "gates")
print(f"{h.total} intervals, deadtime read off the histogram: {estimate_deadtime(h)} gates")

# the first few bins against the exact survival product
m = np.arange(1, 13)
for k, emp, exact in zip(m, normalize(h)[:12], interval_pmf_exact(m, params)):
    print(f"  m={k:2d}  measured {emp:.5f}  model {exact:.5f}")

# only q_total is identifiable, so mu*eta needs the dark level from a source-off run
est = fit_interval_model(h, params.gate_period, p_dark_assumed=params.p_dark,
                         config=FitConfig(tau_fixed=params.tau_trap))
print(f"fit: R^2 = {est.r_squared:.4f}, efficiency = {est.efficiency(params.mu):.4f}, "
      f"surviving afterpulse = {est.p_after_live:.2e}")

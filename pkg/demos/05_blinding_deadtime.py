"""A free-running detector and a blinding laser that stretches its deadtime.

The histogram's first populated bin gives the deadtime at the sampling
resolution. Continuous blinding enforces a much longer gap.
"""
from __future__ import annotations

import numpy as np

from spadmon import CWBlinding, NoAttack, accumulate, simulate_free_running
from spadmon.monitor import deadtime_verdict

clean = simulate_free_running(1e5, 40e-9, NoAttack(), duration_seconds=2.0, seed=0)
h_clean = accumulate(clean, "samples", 2048)
nominal = int(np.flatnonzero(h_clean.bin_counts)[0])  # empty bins below the first count
print(f"{len(clean)} counts, shortest gap {np.diff(clean.absolute_sample).min()} samples")

blind = simulate_free_running(1e5, 40e-9, CWBlinding(500e-9), duration_seconds=2.0, seed=0)
verdict = deadtime_verdict(accumulate(blind, "samples", 2048), nominal)
print(f"under blinding: {verdict.evidence['deadtime']}  alarm={verdict.deadtime_alarm}")

"""Random parameter hopping as a countermeasure.

Bob switches efficiency or deadtime at random and updates the baseline to
match. An honest detector follows every switch. An attacker who replays
fixed statistics falls out of step at the next switch.
"""
from __future__ import annotations

from spadmon import Baseline, DetectorParams, NoAttack, assess, hop_schedule, simulate_gated
from spadmon.monitor import params_at

options = [DetectorParams(), DetectorParams(eta=0.10), DetectorParams(deadtime_gates=6)]
schedule = hop_schedule(options, mean_dwell=3, seed=2, n_estimates=12)
replayed = schedule[0].params

for i in range(12):
    expected = params_at(schedule, i)
    honest = assess(simulate_gated(expected, NoAttack(), 30_000, seed=100 + i), Baseline.from_params(expected))
    fake = assess(simulate_gated(replayed, NoAttack(), 30_000, seed=100 + i), Baseline.from_params(expected))
    print(f"estimate {i:2d}  eta={expected.eta:.2f} d={expected.deadtime_gates}  "
          f"honest: {honest.verdict.overall!s:5s}  replayed: {fake.verdict.overall}")

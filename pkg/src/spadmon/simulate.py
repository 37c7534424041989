"""
Seeded Monte-Carlo generation of detection events for gated and
free-running SPADs, with or without an eavesdropper acting on the detector.

The gated simulator is event driven: instead of visiting every gate it
draws the next gate holding a state-independent outcome (bright pulse,
photon, dark count) from a geometric law and races it against the
afterpulse hazard of the current trap population. Per-gate semantics are
unchanged: outcomes are tried in the order bright pulse, photon, dark,
afterpulse, and the first success wins.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Optional, Union

import numba
import numpy as np

from .errors import ConfigError, DomainError, InsufficientDataError, NoEventSourceError
from .model import DetectorParams

CAUSES = ("photon", "dark", "afterpulse", "forced_click")
PHOTON, DARK, AFTERPULSE, FORCED = range(4)
CAUSE_CODE = {name: i for i, name in enumerate(CAUSES)}

DEFAULT_GATE_BUDGET = 10**12


def _check_unit(name, value):
    if not 0.0 <= value <= 1.0:
        raise DomainError(f"{name} must lie in [0, 1], got {value}")


@dataclass(frozen=True)
class NoAttack:
    kind = "none"


@dataclass(frozen=True)
class AfterGate:
    """Bright pulses sent just after Bob's gate.

    ``fraction_attacked`` of the gates are intercepted. Eve fires when her
    own detector clicks (boosted by ``rate_compensation``); a basis match
    forces a click at ``pulse_offset_samples``, a mismatch only fills traps.
    With ``charge_in_deadtime`` Eve's pulses keep filling traps while Bob's
    gates are masked, since she cannot see his deadtime.
    """

    fraction_attacked: float = 1.0
    eve_efficiency: float = 0.15
    basis_match_prob: float = 0.5
    subthreshold_seed: float = 20.0
    forced_seed: float = 3000.0
    pulse_offset_samples: int = 2
    rate_compensation: Optional[float] = None
    charge_in_deadtime: bool = True
    kind = "after_gate"

    def __post_init__(self):
        _check_unit("fraction_attacked", self.fraction_attacked)
        _check_unit("eve_efficiency", self.eve_efficiency)
        _check_unit("basis_match_prob", self.basis_match_prob)
        for name in ("subthreshold_seed", "forced_seed"):
            v = getattr(self, name)
            if not (v >= 0.0 and math.isfinite(v)):
                raise DomainError(f"{name} must be a finite amplitude >= 0, got {v}")
        if int(self.pulse_offset_samples) != self.pulse_offset_samples or self.pulse_offset_samples < 1:
            raise DomainError("pulse_offset_samples must be an integer past the gate end (>= 1)")
        if self.rate_compensation is not None and self.rate_compensation < 1.0:
            raise DomainError("rate_compensation must be >= 1")

    @property
    def compensation(self) -> float:
        if self.rate_compensation is not None:
            return self.rate_compensation
        return 1.0 / self.basis_match_prob if self.basis_match_prob > 0 else 1.0


@dataclass(frozen=True)
class FaintAfterGate:
    """Weak end-of-gate pulses at two power levels.

    Bob's effective efficiency is ``eta_match`` on basis agreement and
    ``eta_mismatch`` otherwise. End-of-gate avalanches seed only
    ``seed_factor * p0`` of trap population.
    """

    eta_match: float = 0.00649
    eta_mismatch: float = 0.00151
    seed_factor: float = 0.55
    basis_match_prob: float = 0.5
    kind = "faint_after_gate"

    def __post_init__(self):
        _check_unit("eta_match", self.eta_match)
        _check_unit("eta_mismatch", self.eta_mismatch)
        _check_unit("seed_factor", self.seed_factor)
        _check_unit("basis_match_prob", self.basis_match_prob)
        if not self.eta_match > self.eta_mismatch:
            raise DomainError("eta_match must exceed eta_mismatch")

    @property
    def net_efficiency(self) -> float:
        b = self.basis_match_prob
        return b * self.eta_match + (1 - b) * self.eta_mismatch


@dataclass(frozen=True)
class TimeShift:
    """Random trigger delay of ``delay_samples`` applied with ``delay_prob``."""

    delay_samples: int = 6
    delay_prob: float = 0.5
    eta_early: float = 0.15
    eta_late: float = 0.075
    kind = "time_shift"

    def __post_init__(self):
        if int(self.delay_samples) != self.delay_samples or self.delay_samples < 1:
            raise DomainError("delay_samples must be an integer >= 1")
        _check_unit("delay_prob", self.delay_prob)
        _check_unit("eta_early", self.eta_early)
        _check_unit("eta_late", self.eta_late)


@dataclass(frozen=True)
class CWBlinding:
    """Continuous blinding light gap enforced after each count (free-running only)."""

    enforced_gap_seconds: float = 500e-9
    kind = "cw_blinding"

    def __post_init__(self):
        if not self.enforced_gap_seconds > 0:
            raise DomainError("enforced_gap_seconds must be > 0")


AttackScenario = Union[NoAttack, AfterGate, FaintAfterGate, TimeShift, CWBlinding]
SCENARIO_TYPES = {cls.kind: cls for cls in (NoAttack, AfterGate, FaintAfterGate, TimeShift, CWBlinding)}


class DetectionEvent(NamedTuple):
    gate_index: Optional[int]
    sub_gate_sample: int
    cause: str
    absolute_sample: Optional[int] = None


@dataclass(frozen=True)
class TrapState:
    last_charge_gate: int
    seed_amplitude: float

    def hazard(self, gate: int, decay_per_gate: float) -> float:
        """Afterpulse probability at ``gate``; amplitudes above one saturate."""
        return min(1.0, self.seed_amplitude * decay_per_gate ** (gate - self.last_charge_gate))


@dataclass
class EventStream:
    """Columnar store of detection events.

    Gated streams carry ``gate_index`` and ``sub_gate_sample``; free-running
    streams carry ``absolute_sample`` only. ``cause`` holds integer codes
    into :data:`CAUSES`.
    """

    mode: str
    cause: np.ndarray
    gate_index: Optional[np.ndarray] = None
    sub_gate_sample: Optional[np.ndarray] = None
    absolute_sample_: Optional[np.ndarray] = None
    period_samples: int = 1
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return int(self.cause.size)

    def __iter__(self) -> Iterator[DetectionEvent]:
        if self.mode == "gated":
            for g, s, c in zip(self.gate_index.tolist(), self.sub_gate_sample.tolist(), self.cause.tolist()):
                yield DetectionEvent(g, s, CAUSES[c], g * self.period_samples + s)
        else:
            for a, c in zip(self.absolute_sample_.tolist(), self.cause.tolist()):
                yield DetectionEvent(None, 0, CAUSES[c], a)

    @property
    def absolute_sample(self) -> np.ndarray:
        if self.mode == "gated":
            return self.gate_index * self.period_samples + self.sub_gate_sample
        return self.absolute_sample_

    def positions(self, unit: str) -> np.ndarray:
        """Event positions in ``"gates"`` or ``"samples"``."""
        if unit == "gates":
            if self.mode != "gated":
                raise DomainError("free-running streams have no gate index")
            return self.gate_index
        if unit == "samples":
            return self.absolute_sample
        raise DomainError(f"unknown unit {unit!r}")

    def __getitem__(self, sl: slice) -> "EventStream":
        def cut(a):
            return None if a is None else a[sl]

        return EventStream(
            self.mode, self.cause[sl], cut(self.gate_index), cut(self.sub_gate_sample),
            cut(self.absolute_sample_), self.period_samples, dict(self.meta),
        )

    def cause_fraction(self, cause: str) -> float:
        return float(np.mean(self.cause == CAUSE_CODE[cause])) if len(self) else 0.0

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        if self.mode == "gated":
            buf.write("gate_index,sub_gate_sample,cause\n")
            for g, s, c in zip(self.gate_index.tolist(), self.sub_gate_sample.tolist(), self.cause.tolist()):
                buf.write(f"{g},{s},{CAUSES[c]}\n")
        else:
            buf.write("absolute_sample,cause\n")
            for a, c in zip(self.absolute_sample_.tolist(), self.cause.tolist()):
                buf.write(f"{a},{CAUSES[c]}\n")
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8", newline="")
        return text

    @classmethod
    def from_csv(cls, source, period_samples: int = 1) -> "EventStream":
        """Parse an event CSV (path or text). Errors name the offending row."""
        text = Path(source).read_text(encoding="utf-8") if _looks_like_path(source) else source
        reader = csv.reader(io.StringIO(text))
        try:
            header = next(reader)
        except StopIteration:
            raise ConfigError("empty event CSV") from None
        header = [h.strip() for h in header]
        if header == ["gate_index", "sub_gate_sample", "cause"]:
            mode, width = "gated", 3
        elif header == ["absolute_sample", "cause"]:
            mode, width = "free", 2
        else:
            raise ConfigError(f"row 1: unrecognised event CSV header {header}")
        cols = [[] for _ in range(width)]
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise ConfigError(f"row {lineno}: expected {width} fields, got {len(row)}")
            try:
                for i in range(width - 1):
                    cols[i].append(int(row[i]))
                cols[-1].append(CAUSE_CODE[row[-1].strip()])
            except (ValueError, KeyError):
                raise ConfigError(f"row {lineno}: malformed event {row}") from None
        cause = np.asarray(cols[-1], dtype=np.int8)
        if mode == "gated":
            return cls("gated", cause, np.asarray(cols[0], dtype=np.int64),
                       np.asarray(cols[1], dtype=np.int64), period_samples=period_samples)
        return cls("free", cause, absolute_sample_=np.asarray(cols[0], dtype=np.int64))


def _looks_like_path(source) -> bool:
    if isinstance(source, Path):
        return True
    return isinstance(source, str) and "\n" not in source and "," not in source


# ---------------------------------------------------------------------------
# gated simulation


@dataclass(frozen=True)
class _OutcomeTable:
    """Per-live-gate outcomes that do not depend on the trap state."""

    prob: np.ndarray  # unconditional per-gate probability of each outcome
    click: np.ndarray  # outcome registers a count
    cause: np.ndarray
    amp: np.ndarray  # trap amplitude left behind
    ap_amp: np.ndarray  # amplitude if an afterpulse fires in a non-click outcome gate
    sub: np.ndarray  # sub-gate sample of the count
    dead_fire_p: float = 0.0  # trap charging per masked gate
    dead_amp: float = 0.0
    ap_delay_prob: float = 0.0  # afterpulse lands in a delayed gate
    ap_delay: int = 0


def _outcome_table(params: DetectorParams, scenario: AttackScenario) -> _OutcomeTable:
    p_np = params.p_np
    pd = params.p_dark
    p0 = params.p0
    rows = []  # (prob, click, cause, amp, ap_amp, sub)
    extra = {}
    if isinstance(scenario, NoAttack):
        rows.append((1 - p_np, True, PHOTON, p0, p0, 0))
        rows.append((p_np * pd, True, DARK, p0, p0, 0))
    elif isinstance(scenario, AfterGate):
        f = scenario.fraction_attacked
        eve_click = -math.expm1(-params.mu * scenario.eve_efficiency)
        p_fire = f * min(1.0, scenario.compensation * eve_click)
        bm = scenario.basis_match_prob
        s_sub, s_forced = scenario.subthreshold_seed, scenario.forced_seed
        charged = max(p0, s_sub)
        rows.append((p_fire * bm, True, FORCED, s_forced, s_forced, scenario.pulse_offset_samples))
        rows.append((p_fire * (1 - bm) * pd, True, DARK, charged, charged, 0))
        rows.append((p_fire * (1 - bm) * (1 - pd), False, DARK, s_sub, charged, 0))
        rows.append(((1 - f) * (1 - p_np), True, PHOTON, p0, p0, 0))
        rows.append(((1 - p_fire - (1 - f) * (1 - p_np)) * pd, True, DARK, p0, p0, 0))
        if scenario.charge_in_deadtime:
            extra = dict(dead_fire_p=p_fire, dead_amp=s_sub)
    elif isinstance(scenario, FaintAfterGate):
        b = scenario.basis_match_prob
        c_hi = -math.expm1(-params.mu * scenario.eta_match)
        c_lo = -math.expm1(-params.mu * scenario.eta_mismatch)
        seed = scenario.seed_factor * p0
        rows.append((b * c_hi, True, PHOTON, seed, seed, 0))
        rows.append(((1 - b) * c_lo, True, PHOTON, seed, seed, 0))
        rows.append(((1 - b * c_hi - (1 - b) * c_lo) * pd, True, DARK, p0, p0, 0))
    elif isinstance(scenario, TimeShift):
        dp, delay = scenario.delay_prob, scenario.delay_samples
        c_e = -math.expm1(-params.mu * scenario.eta_early)
        c_l = -math.expm1(-params.mu * scenario.eta_late)
        rows.append(((1 - dp) * c_e, True, PHOTON, p0, p0, 0))
        rows.append(((1 - dp) * (1 - c_e) * pd, True, DARK, p0, p0, 0))
        rows.append((dp * c_l, True, PHOTON, p0, p0, delay))
        rows.append((dp * (1 - c_l) * pd, True, DARK, p0, p0, delay))
        quiet_late = dp * (1 - c_l) * (1 - pd)
        quiet = quiet_late + (1 - dp) * (1 - c_e) * (1 - pd)
        extra = dict(ap_delay_prob=quiet_late / quiet if quiet > 0 else 0.0, ap_delay=delay)
    elif isinstance(scenario, CWBlinding):
        raise DomainError("CWBlinding applies to free-running detectors only")
    else:
        raise DomainError(f"unknown scenario {scenario!r}")
    prob, click, cause, amp, ap_amp, sub = (np.array(c) for c in zip(*rows))
    return _OutcomeTable(
        prob.astype(float), click.astype(np.bool_), cause.astype(np.int8),
        amp.astype(float), ap_amp.astype(float), sub.astype(np.int64), **extra,
    )


@numba.njit(cache=True)
def _geometric(rng, p, cap):
    """Number of Bernoulli(p) trials up to and including the first success, capped."""
    if p <= 0.0:
        return cap
    if p >= 1.0:
        return 1
    u = 1.0 - rng.random()
    g = math.floor(math.log(u) / math.log1p(-p)) + 1.0
    if g >= cap:
        return cap
    return np.int64(g)


@numba.njit(cache=True)
def _gated_kernel(rng, n_target, max_gates, d, decay, p0_ap,
                  prob, click, cause, amp, ap_amp, sub,
                  dead_fire_p, dead_amp, ap_delay_prob, ap_delay,
                  out_gate, out_sub, out_cause):
    n_out = prob.size
    a = 0.0
    for i in range(n_out):
        a += prob[i]
    cap = max_gates + 1
    g = np.int64(0)
    dead_until = np.int64(0)
    trap_gate = np.int64(0)
    trap_amp = 0.0
    n = 0
    while n < n_target:
        if g < dead_until:
            if dead_fire_p > 0.0:
                fire = g + _geometric(rng, dead_fire_p, cap) - 1
                if fire < dead_until:
                    trap_gate = fire
                    trap_amp = dead_amp
                    g = fire + 1
                    continue
            g = dead_until
        # next gate holding a trap-independent outcome
        t1 = cap
        if a > 0.0:
            t1 = g + _geometric(rng, a, cap) - 1
            if t1 > cap:
                t1 = cap
        # race the afterpulse hazard over gates g..t1
        t2 = np.int64(-1)
        if trap_amp > 0.0:
            log_v = math.log(1.0 - rng.random())
            h = trap_amp * decay ** (g - trap_gate)
            acc = 0.0
            j = g
            while j <= t1:
                if h < 1e-18:
                    break
                if h >= 1.0:
                    # saturated trap population: release is certain
                    t2 = j
                    break
                acc += math.log1p(-h)
                if acc < log_v:
                    t2 = j
                    break
                h *= decay
                j += 1
        if t2 >= 0 and t2 < t1:
            s = 0
            if ap_delay_prob > 0.0 and rng.random() < ap_delay_prob:
                s = ap_delay
            out_gate[n] = t2
            out_sub[n] = s
            out_cause[n] = 2
            n += 1
            trap_gate = t2
            trap_amp = p0_ap
            dead_until = t2 + d + 1
            g = t2 + 1
            continue
        if t1 >= cap:
            return n, g
        u = rng.random() * a
        k = 0
        acc_p = prob[0]
        while u >= acc_p and k < n_out - 1:
            k += 1
            acc_p += prob[k]
        if click[k]:
            out_gate[n] = t1
            out_sub[n] = sub[k]
            out_cause[n] = cause[k]
            n += 1
            trap_gate = t1
            trap_amp = amp[k]
            dead_until = t1 + d + 1
        elif t2 == t1:
            out_gate[n] = t1
            out_sub[n] = 0
            out_cause[n] = 2
            n += 1
            trap_gate = t1
            trap_amp = ap_amp[k]
            dead_until = t1 + d + 1
        else:
            trap_gate = t1
            trap_amp = amp[k]
        g = t1 + 1
    return n, g


def simulate_gated(
    params: DetectorParams,
    scenario: AttackScenario = NoAttack(),
    n_detections: int = 200_000,
    seed: int = 0,
    max_gates: int = DEFAULT_GATE_BUDGET,
) -> EventStream:
    """Simulate ``n_detections`` counts of a gated SPAD under ``scenario``.

    The stream is a deterministic function of ``(params, scenario, seed)``.
    Raises :class:`NoEventSourceError` if the gate budget runs out first.
    """
    if int(n_detections) != n_detections or n_detections < 1:
        raise DomainError("n_detections must be a positive integer")
    table = _outcome_table(params, scenario)
    n_detections = int(n_detections)
    out_gate = np.empty(n_detections, dtype=np.int64)
    out_sub = np.empty(n_detections, dtype=np.int64)
    out_cause = np.empty(n_detections, dtype=np.int8)
    rng = np.random.default_rng(seed)
    n, last_gate = _gated_kernel(
        rng, n_detections, np.int64(max_gates), np.int64(params.deadtime_gates),
        params.decay_per_gate, params.p0,
        table.prob, table.click, table.cause, table.amp, table.ap_amp, table.sub,
        table.dead_fire_p, table.dead_amp, table.ap_delay_prob, np.int64(table.ap_delay),
        out_gate, out_sub, out_cause,
    )
    if n < n_detections:
        raise NoEventSourceError(
            f"only {n} of {n_detections} detections within the budget of {max_gates} gates; "
            "the configuration has no (or too little) event source"
        )
    return EventStream(
        "gated", out_cause, out_gate, out_sub, period_samples=params.period_samples,
        meta={"n_gates": int(last_gate), "scenario": scenario.kind, "seed": seed},
    )


# ---------------------------------------------------------------------------
# free-running simulation


def simulate_free_running(
    count_rate: float,
    deadtime_seconds: float,
    scenario: AttackScenario = NoAttack(),
    duration_seconds: float = 1.0,
    sample_period: float = 10e-9,
    seed: int = 0,
) -> EventStream:
    """Poisson arrivals at ``count_rate`` behind a non-paralyzable deadtime.

    For a memoryless source the time between registered counts is the
    deadtime plus an exponential wait. Timestamps are floored to whole
    sample periods, and counts that land in the same sample merge.
    """
    if not count_rate > 0:
        raise DomainError("count_rate must be > 0")
    if deadtime_seconds < 0:
        raise DomainError("deadtime must be >= 0")
    if not sample_period > 0 or not duration_seconds > 0:
        raise DomainError("sample_period and duration must be > 0")
    if isinstance(scenario, CWBlinding):
        dead = max(deadtime_seconds, scenario.enforced_gap_seconds)
    elif isinstance(scenario, NoAttack):
        dead = deadtime_seconds
    else:
        raise DomainError(f"{type(scenario).__name__} needs a gated detector")
    rng = np.random.default_rng(seed)
    # work in sample units; rounding keeps e.g. 40 ns / 10 ns at exactly 4
    dead_s = round(dead / sample_period, 9)
    mean_wait = round(1.0 / (count_rate * sample_period), 9)
    horizon = duration_seconds / sample_period
    chunk = int(min(max(horizon / (mean_wait + dead_s) * 1.1 + 64, 64), 1 << 22))
    pieces = []
    t = 0.0
    first = True
    while t <= horizon:
        steps = rng.exponential(mean_wait, size=chunk) + dead_s
        if first:
            steps[0] -= dead_s
            first = False
        pos = t + np.cumsum(steps)
        pieces.append(pos[pos <= horizon])
        t = pos[-1]
    times = np.concatenate(pieces) if pieces else np.empty(0)
    # the digitiser holds at most one count per sample
    samples = np.unique(np.floor(times).astype(np.int64))
    if samples.size < 2:
        raise InsufficientDataError("duration too short for two detections")
    return EventStream(
        "free", np.zeros(samples.size, dtype=np.int8), absolute_sample_=samples,
        meta={"scenario": scenario.kind, "seed": seed, "dead_samples": dead_s},
    )


# ---------------------------------------------------------------------------
# (de)serialisation helpers used by the config layer


def scenario_to_dict(scenario: AttackScenario) -> dict:
    out = {"type": scenario.kind}
    for name in getattr(scenario, "__dataclass_fields__", {}):
        out[name] = getattr(scenario, name)
    if isinstance(scenario, CWBlinding):
        out["enforced_gap_s"] = out.pop("enforced_gap_seconds")
    return out


def scenario_from_dict(doc: Optional[dict]) -> AttackScenario:
    if not doc:
        return NoAttack()
    doc = dict(doc)
    kind = doc.pop("type", "none")
    try:
        cls = SCENARIO_TYPES[kind]
    except KeyError:
        raise ConfigError(f"scenario.type: unknown attack {kind!r}") from None
    if cls is CWBlinding and "enforced_gap_s" in doc:
        doc["enforced_gap_seconds"] = doc.pop("enforced_gap_s")
    allowed = set(getattr(cls, "__dataclass_fields__", {}))
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"scenario: unknown field(s) {sorted(unknown)} for {kind}")
    try:
        return cls(**doc)
    except (TypeError, DomainError) as exc:
        raise ConfigError(f"scenario: {exc}") from None

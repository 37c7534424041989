"""
Closed-form probability model for the times between consecutive detections
of a gated single-photon avalanche detector.

Intervals are counted in gates. A detection at gate 0 followed by the next
one at gate m gives an interval of m. The afterpulse clock counts gates since
the last avalanche and keeps running through the deadtime.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import DomainError, ModelValidityError


@dataclass(frozen=True)
class DetectorParams:
    """Physical and operational parameters of one gated SPAD.

    Times are in seconds. ``deadtime_gates`` is the number of gates masked
    after each avalanche.
    """

    mu: float = 0.4
    eta: float = 0.15
    p_dark: float = 1e-5
    p0: float = 0.0769
    tau_trap: float = 1.5e-6
    gate_period: float = 2.5e-6
    deadtime_gates: int = 4
    sample_period: float = 10e-9

    def __post_init__(self):
        if self.mu < 0:
            raise DomainError(f"mu must be >= 0, got {self.mu}")
        if not 0.0 <= self.eta <= 1.0:
            raise DomainError(f"eta must lie in [0, 1], got {self.eta}")
        if not 0.0 <= self.p_dark < 1.0:
            raise DomainError(f"p_dark must lie in [0, 1), got {self.p_dark}")
        if not 0.0 <= self.p0 < 1.0:
            raise DomainError(f"p0 must lie in [0, 1), got {self.p0}")
        if not self.tau_trap > 0:
            raise DomainError(f"tau_trap must be > 0, got {self.tau_trap}")
        if not self.gate_period > 0:
            raise DomainError(f"gate_period must be > 0, got {self.gate_period}")
        if not self.sample_period > 0:
            raise DomainError(f"sample_period must be > 0, got {self.sample_period}")
        if int(self.deadtime_gates) != self.deadtime_gates or self.deadtime_gates < 0:
            raise DomainError(f"deadtime_gates must be a non-negative integer, got {self.deadtime_gates}")

    @property
    def p_np(self) -> float:
        return zero_photon_probability(self.mu, self.eta)

    @property
    def q_total(self) -> float:
        """Per-gate probability of no photon and no dark count."""
        return self.p_np * (1.0 - self.p_dark)

    @property
    def decay_per_gate(self) -> float:
        return math.exp(-self.gate_period / self.tau_trap)

    @property
    def period_samples(self) -> int:
        return int(round(self.gate_period / self.sample_period))

    @property
    def p_after(self) -> float:
        return total_afterpulse(self.p0, self.tau_trap, self.gate_period)

    def with_(self, **changes) -> "DetectorParams":
        return replace(self, **changes)


def zero_photon_probability(mu: float, eta: float) -> float:
    """Probability of no detected photon in a gate for Poissonian light, exp(-mu*eta)."""
    if mu < 0:
        raise DomainError(f"mu must be >= 0, got {mu}")
    if not 0.0 <= eta <= 1.0:
        raise DomainError(f"eta must lie in [0, 1], got {eta}")
    return math.exp(-mu * eta)


def afterpulse_at(m, p0: float, tau_trap: float, gate_period: float):
    """Afterpulse probability ``m`` gates after the last avalanche.

    Single-exponential detrapping: ``p0 * exp(-m * T / tau)``. Accepts a
    scalar or an integer array for ``m``.
    """
    m_arr = np.asarray(m)
    if np.any(m_arr < 1):
        raise DomainError("gate interval m must be >= 1")
    if tau_trap <= 0 or gate_period <= 0:
        raise DomainError("tau_trap and gate_period must be > 0")
    out = p0 * np.exp(-m_arr * (gate_period / tau_trap))
    return float(out) if out.ndim == 0 else out


def total_afterpulse(p0: float, tau_trap: float, gate_period: float) -> float:
    """Sum of ``afterpulse_at`` over all m >= 1, i.e. p0 / (exp(T/tau) - 1)."""
    if tau_trap <= 0 or gate_period <= 0:
        raise DomainError("T/tau must be > 0")
    return p0 / math.expm1(gate_period / tau_trap)


def _interval_args(m, params: DetectorParams):
    m_arr = np.asarray(m, dtype=np.int64)
    if np.any(m_arr < 1):
        raise DomainError("gate interval m must be >= 1")
    return m_arr


def interval_pmf_exact(m, params: DetectorParams):
    """Probability that the next detection comes exactly ``m`` gates later.

    Exact survival product: zero inside the deadtime, then
    ``(1 - q_m) * prod_{k=d+1}^{m-1} q_k`` with
    ``q_k = P_np (1 - P_dark) (1 - P_a(k))``.
    """
    m_arr = _interval_args(m, params)
    scalar = m_arr.ndim == 0
    m_flat = np.atleast_1d(m_arr)
    d = int(params.deadtime_gates)
    m_max = int(m_flat.max()) if m_flat.size else 0
    k = np.arange(1, m_max + 1)
    q = params.q_total
    p_a = afterpulse_at(k, params.p0, params.tau_trap, params.gate_period)
    log_keep = np.log1p(-p_a)
    log_keep[:d] = 0.0
    # trap_surv[j-1] = prod_{k=d+1}^{j-1} (1 - P_a(k)); exactly 1 when p0 == 0
    trap_surv = np.exp(np.concatenate(([0.0], np.cumsum(log_keep)[:-1])))
    live = k > d
    pmf = np.zeros(k.size + 1)
    n = (k[live] - 1 - d).astype(float)
    pmf[1:][live] = (1.0 - q * (1.0 - p_a[live])) * q ** n * trap_surv[live]
    out = pmf[m_flat]
    return float(out[0]) if scalar else out


def model_bracket(m, q_total: float, p0: float, tau_trap: float, gate_period: float, deadtime_gates: int = 0):
    """First-order survival correction ``1 - alpha + beta`` for interval ``m``."""
    m_arr = np.asarray(m, dtype=float)
    r = math.exp(-gate_period / tau_trap)
    one_minus_r = -math.expm1(-gate_period / tau_trap)
    alpha = p0 * r ** (deadtime_gates + 1) / one_minus_r
    beta = p0 * r ** m_arr / one_minus_r
    return 1.0 - alpha + beta


def interval_pmf_model_q(m, q_total: float, p0: float, tau_trap: float, gate_period: float, deadtime_gates: int = 0):
    """Closed-form interval model in terms of the per-gate survival ``q_total``.

    This is the fit model: the exact survival product with the afterpulse
    product expanded to first order in ``p0``.
    """
    m_arr = np.asarray(m, dtype=np.int64)
    d = int(deadtime_gates)
    r = math.exp(-gate_period / tau_trap)
    alpha = p0 * r ** (d + 1) / -math.expm1(-gate_period / tau_trap)
    if alpha > 1.0:
        raise ModelValidityError(
            f"first-order afterpulse correction is negative (alpha={alpha:.4g} > 1); "
            "p0 too large for the expansion"
        )
    mf = m_arr.astype(float)
    n = np.maximum(mf - 1 - d, 0.0)
    p_a = p0 * r ** mf
    head = 1.0 - q_total * (1.0 - p_a)
    out = head * q_total ** n * model_bracket(mf, q_total, p0, tau_trap, gate_period, d)
    out = np.where(m_arr > d, out, 0.0)
    return float(out) if out.ndim == 0 else out


def interval_pmf_model(m, params: DetectorParams):
    """First-order (alpha/beta) version of :func:`interval_pmf_exact`."""
    m_arr = _interval_args(m, params)
    return interval_pmf_model_q(
        m_arr, params.q_total, params.p0, params.tau_trap, params.gate_period, params.deadtime_gates
    )


def truncation_horizon(params: DetectorParams, tail_mass: float = 1e-12) -> int:
    """Smallest M with q**M below ``tail_mass`` (plus the deadtime offset)."""
    q = params.q_total
    if q >= 1.0:
        raise DomainError("per-gate survival must be < 1 for a finite horizon")
    if q <= 0.0:
        return params.deadtime_gates + 1
    return int(math.ceil(math.log(tail_mass) / math.log(q))) + params.deadtime_gates


def binary_entropy(p):
    """Binary entropy in bits, with H(0) = H(1) = 0."""
    p = np.asarray(p, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -(p * np.log2(p) + (1 - p) * np.log2(1 - p))
    h = np.where((p <= 0) | (p >= 1), 0.0, h)
    return float(h) if h.ndim == 0 else h


def mutual_information_timeshift(ratio: float) -> float:
    """Eve-Bob mutual information (bits) for a time-shift attack.

    ``ratio`` is the low-to-high efficiency ratio seen by the delayed photons.
    Bob's click lands on the favoured detector with probability 1/(1+ratio).
    """
    if not 0.0 <= ratio <= 1.0:
        raise DomainError(f"efficiency ratio must lie in [0, 1], got {ratio}")
    return 1.0 - binary_entropy(ratio / (1.0 + ratio))

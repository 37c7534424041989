"""
Detector parameter extraction from interval histograms.

Two routes are available. :func:`fit_interval_model` fits the first-order
interval model over (q_total, p0, tau) by weighted Levenberg-Marquardt.
:func:`tail_line_afterpulse` measures the afterpulse probability as the
histogram mass above a straight line fitted to the log tail; it stays valid
when trap seeding no longer follows the model (bright-pulse attacks).
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import (
    ConvergenceError,
    DomainError,
    EmptyHistogramError,
    InsufficientDataError,
    ModelValidityError,
)
from .histogram import IntervalHistogram, accumulate, normalize
from .model import interval_pmf_model_q


@dataclass(frozen=True)
class FitConfig:
    min_samples: int = 1000
    weight_floor: float = 1e-9
    max_iter: int = 200
    rel_tol: float = 1e-9
    step_tol: float = 1e-10  # relative parameter change that counts as stalled
    tau_fixed: Optional[float] = None  # known trap lifetime (s); fit only q_total and p0
    tau_hint: float = 2.5e-6
    min_count: int = 5  # fitted / R^2 range ends at the last bin with this many counts
    min_tail_bins: int = 10
    min_r_squared: float = 0.99  # "auto" falls back to the tail line below this

    def tail_start(self, gate_period: float, deadtime_units: int = 0) -> int:
        start = int(math.ceil(10.0 * self.tau_hint / gate_period - 1e-9))
        return max(start, deadtime_units + 2, 1)


@dataclass(frozen=True)
class ParameterEstimate:
    """Fitted detector parameters.

    ``p0_hat`` is the afterpulse amplitude on the clock that counts gates
    since the last avalanche, so ``p_after`` is the total afterpulse
    probability as if no deadtime were imposed and ``p_after_live`` the part
    that survives the deadtime.
    """

    q_total: float
    p0_hat: float
    tau_hat: float
    gate_period: float
    deadtime_units: int
    r_squared: float
    n_samples: int
    p_dark_assumed: Optional[float] = None
    method: str = "model"
    unit: str = "gates"
    objective_history: tuple = field(default=(), compare=False, repr=False)

    @property
    def mu_eta(self) -> Optional[float]:
        if self.p_dark_assumed is None:
            return None
        return -math.log(self.q_total / (1.0 - self.p_dark_assumed))

    @property
    def rate(self) -> float:
        """Per-gate event rate implied by the tail slope, -ln(q_total)."""
        return -math.log(self.q_total)

    @property
    def p_after(self) -> float:
        x = self.gate_period / self.tau_hat
        return self.p0_hat * math.exp(-x) / -math.expm1(-x)

    @property
    def p_after_live(self) -> float:
        x = self.gate_period / self.tau_hat
        return self.p0_hat * math.exp(-(self.deadtime_units + 1) * x) / -math.expm1(-x)

    def efficiency(self, mu: float) -> Optional[float]:
        me = self.mu_eta
        return None if me is None else me / mu

    def to_dict(self) -> dict:
        return {
            "q_total": self.q_total,
            "mu_eta": self.mu_eta,
            "p_dark_assumed": self.p_dark_assumed,
            "p0_hat": self.p0_hat,
            "tau_hat": self.tau_hat,
            "p_after": self.p_after,
            "p_after_live": self.p_after_live,
            "deadtime_units": self.deadtime_units,
            "r_squared": self.r_squared,
            "n_samples": self.n_samples,
            "gate_period": self.gate_period,
            "method": self.method,
            "unit": self.unit,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> "ParameterEstimate":
        keys = ("q_total", "p0_hat", "tau_hat", "gate_period", "deadtime_units", "r_squared",
                "n_samples", "p_dark_assumed", "method", "unit")
        return cls(**{k: doc[k] for k in keys if k in doc})


# ---------------------------------------------------------------------------
# helpers


def _as_pmf(data, n_samples=None):
    """Return (pmf, counts-or-None, n_samples) from a histogram or a PMF array."""
    if isinstance(data, IntervalHistogram):
        return normalize(data), data.bin_counts, data.total
    pmf = np.asarray(data, dtype=float)
    counts = None if n_samples is None else pmf * n_samples
    return pmf, counts, n_samples


def estimate_deadtime(h: IntervalHistogram) -> int:
    """Largest interval with no observed counts below the first populated bin."""
    if h.total == 0:
        raise EmptyHistogramError("cannot estimate deadtime from an empty histogram")
    nz = np.flatnonzero(h.bin_counts)
    if nz.size == 0:
        return h.n_bins
    return int(nz[0])


def _first_live(pmf, deadtime):
    if deadtime is not None:
        return int(deadtime) + 1
    nz = np.flatnonzero(pmf > 0)
    if nz.size == 0:
        raise InsufficientDataError("PMF has no populated bins")
    return int(nz[0]) + 1


def _range_end(pmf, counts, min_count):
    """Last interval (1-based) of the fit range."""
    if counts is None:
        nz = np.flatnonzero(pmf > 0)
        return int(nz[-1]) + 1 if nz.size else 0
    ok = np.flatnonzero(counts >= min_count)
    return int(ok[-1]) + 1 if ok.size else 0


def _tail_bins(pmf, counts, tail_start, min_count):
    """Tail bins for the log-line: ``tail_start`` through the last bin holding ``min_count`` counts."""
    m = np.arange(1, pmf.size + 1)
    good = pmf > 0 if counts is None else counts >= min_count
    ok = np.flatnonzero(good & (m >= tail_start))
    if ok.size == 0:
        return ok
    idx = np.arange(max(tail_start, 1) - 1, ok[-1] + 1)
    if counts is None:
        idx = idx[pmf[idx] > 0]
    return idx


def _line_fit(pmf, counts, tail_start, min_count, min_bins):
    """Straight line through ``ln pmf`` over the tail bins.

    With counts available the line is the Poisson maximum-likelihood fit
    (log-linear regression on the raw counts), which avoids the downward
    bias of taking logs of sparse bins. Without counts it is plain least
    squares on the log PMF.
    """
    idx = _tail_bins(pmf, counts, tail_start, min_count)
    populated = idx.size if counts is None else int(np.count_nonzero(counts[idx] >= min_count))
    if populated < min_bins:
        raise InsufficientDataError(
            f"only {populated} populated tail bins beyond interval {tail_start} (need {min_bins})"
        )
    x = idx + 1.0
    pos = pmf[idx] > 0
    slope, intercept = np.polyfit(x[pos], np.log(pmf[idx][pos]), 1)
    if counts is None:
        return slope, intercept, idx
    c = np.asarray(counts, dtype=float)[idx]
    scale = c.sum() / pmf[idx].sum() if pmf[idx].sum() > 0 else 1.0
    # Newton iterations on the Poisson log-likelihood, centred for conditioning
    xc = x - x.mean()
    a = intercept + slope * x.mean() + math.log(scale)
    b = slope
    for _ in range(100):
        mu = np.exp(a + b * xc)
        g = np.array([np.sum(c - mu), np.sum((c - mu) * xc)])
        hess = np.array([[mu.sum(), (mu * xc).sum()], [(mu * xc).sum(), (mu * xc * xc).sum()]])
        step = np.linalg.solve(hess, g)
        a, b = a + step[0], b + step[1]
        if np.max(np.abs(step)) < 1e-12:
            break
    return b, a - b * x.mean() - math.log(scale), idx


# ---------------------------------------------------------------------------
# tail line


def tail_line_afterpulse(pmf, tail_start: int, first_live: Optional[int] = None,
                         n_samples: Optional[int] = None, min_count: int = 5,
                         min_tail_bins: int = 10) -> float:
    """Afterpulse probability from the mass above the extrapolated log-tail line.

    A least-squares line is fitted to ``ln pmf`` over populated bins from
    ``tail_start`` on and extrapolated back to the first live bin. The
    excess of the early bins over that line, relative to the total PMF
    mass, is returned (clipped at zero).
    """
    pmf, counts, n_samples = _as_pmf(pmf, n_samples)
    total_mass = pmf.sum()
    if total_mass <= 0:
        raise InsufficientDataError("empty PMF")
    slope, intercept, _ = _line_fit(pmf, counts, tail_start, min_count, min_tail_bins)
    first = _first_live(pmf, None if first_live is None else first_live - 1)
    m = np.arange(first, tail_start)
    if m.size == 0:
        return 0.0
    excess = pmf[m - 1] - np.exp(intercept + slope * m)
    return max(0.0, float(excess.sum()) / float(total_mass))


# ---------------------------------------------------------------------------
# model fit


def _model_and_jacobian(m, theta, gate_period, d):
    """First-order interval model and its derivatives in (q, p0, s = tau/T)."""
    q, p0, s = theta
    r = math.exp(-1.0 / s)
    one_r = -math.expm1(-1.0 / s)
    mf = m.astype(float)
    n = mf - 1.0 - d
    rm = r ** mf
    rd1 = r ** (d + 1)
    head = 1.0 - q * (1.0 - p0 * rm)
    body = q ** n
    diff = rd1 - rm
    brk = 1.0 - p0 * diff / one_r
    f = head * body * brk

    d_head_q = -(1.0 - p0 * rm)
    d_body_q = n * q ** (n - 1.0)
    dq = d_head_q * body * brk + head * d_body_q * brk

    dp0 = q * rm * body * brk + head * body * (-diff / one_r)

    # dr/ds = r / s^2
    drm = mf * r ** (mf - 1.0)
    drd1 = (d + 1) * r ** d
    d_head_r = q * p0 * drm
    d_brk_r = -p0 * ((drd1 - drm) * one_r + diff) / one_r**2
    dfr = d_head_r * body * brk + head * body * d_brk_r
    ds = dfr * r / s**2
    return f, np.column_stack((dq, dp0, ds))


def _initial_guess(pmf, counts, first, end, gate_period, config):
    tail_start = max(config.tail_start(gate_period, first - 1), first + 1)
    try:
        slope, intercept, _ = _line_fit(pmf, counts, tail_start, config.min_count, config.min_tail_bins)
    except InsufficientDataError:
        raise InsufficientDataError("degenerate tail: fewer than 10 populated tail bins") from None
    q0 = float(np.clip(math.exp(slope), 1e-6, 1 - 1e-9))
    s0 = config.tau_hint / gate_period
    p00 = 1e-3
    m = np.arange(first, min(tail_start, end + 1))
    if m.size >= 2:
        line = np.exp(intercept + slope * m)
        excess = pmf[m - 1] / line - 1.0
        pos = excess > 0
        if pos.sum() >= 2:
            b, a = np.polyfit(m[pos], np.log(excess[pos]), 1)
            if b < 0:
                s0 = float(np.clip(-1.0 / b, 0.05, 1e3))
            amp = math.exp(a)
            p00 = float(np.clip(amp * (1 - q0) / max(q0, 1e-9), 1e-6, 0.5))
        elif pos.sum() == 1:
            p00 = float(np.clip(excess[pos][0] * (1 - q0) * math.exp(m[pos][0] / s0), 1e-6, 0.5))
    return np.array([q0, p00, s0])


_LOWER = np.array([1e-12, 0.0, 0.05])
_UPPER = np.array([1 - 1e-12, np.inf, np.inf])


def _project(theta):
    return np.clip(theta, _LOWER, _UPPER)


def _lm_step(jac, res, lam, free, theta):
    """Damped Gauss-Newton step; parameters pinned at a bound and pushed outward sit out."""
    active = np.ones(int(free.sum()), dtype=bool)
    cols = np.flatnonzero(free)
    for _ in range(2):
        j = jac[:, active]
        jtj = j.T @ j
        g = j.T @ res
        diag = np.diag(jtj).copy()
        diag = np.where(diag > 0, diag, 1e-12 * max(diag.max(), 1e-300))
        a = jtj + lam * np.diag(diag)
        try:
            step = np.linalg.solve(a, -g)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(a, -g, rcond=None)[0]
        full = np.zeros(3)
        full[cols[active]] = step
        pinned = ((theta <= _LOWER) & (full < 0)) | ((theta >= _UPPER) & (full > 0))
        drop = pinned[cols] & active
        if not drop.any() or drop.sum() == active.sum():
            break
        active &= ~drop
    return full


def _deviance_terms(y, f):
    """Per-bin Poisson deviance ``y ln(y/f) - (y - f)``, accurate when ``y`` is close to ``f``."""
    out = np.array(f, dtype=float, copy=True)  # value at y == 0
    nz = y > 0
    u = (y[nz] - f[nz]) / f[nz]
    small = np.abs(u) < 1e-3
    t = np.zeros_like(u)
    us = u[small]
    t[small] = us * us * (0.5 - us / 6.0 + us * us / 12.0)
    out[nz] = f[nz] * t
    yl, fl = y[nz][~small], f[nz][~small]
    out[np.flatnonzero(nz)[~small]] = yl * np.log(yl / fl) - (yl - fl)
    return out


# ten accepted steps that improve the count-scale deviance by less than this
# are statistically meaningless; along an unidentifiable ridge they never end
_NEGLIGIBLE_DEVIANCE = 0.1


def _lm_minimize(m, y, theta, free, valid, gate_period, d, config, n_samples=None):
    """Levenberg-Marquardt with 1/model weights; accepted objective values never increase.

    Each step solves the weighted least-squares problem with weights
    ``1/max(model, weight_floor)`` at the current iterate. The step is
    accepted when it lowers the Poisson deviance, the objective whose
    stationary point those reweighted steps converge to.
    """

    def evaluate(th):
        f, jac = _model_and_jacobian(m, th, gate_period, d)
        w = np.maximum(f, config.weight_floor)
        sw = np.sqrt(w)
        obj = 2.0 * float(np.sum(_deviance_terms(y, w)))
        return obj, (y - f) / sw, -jac[:, free] / sw[:, None]

    obj, res, jac = evaluate(theta)
    history = [obj]
    lam = 1e-3
    for _ in range(config.max_iter):
        full = _lm_step(jac, res, lam, free, theta)
        trial = _project(theta + full)
        trial[~free] = theta[~free]
        obj_t = math.inf
        if valid(trial):
            obj_t, res_t, jac_t = evaluate(trial)
            if not math.isfinite(obj_t):
                obj_t = math.inf
        if obj_t <= obj:
            rel = (obj - obj_t) / obj if obj > 0 else 0.0
            moved = float(np.max(np.abs(trial - theta) / np.maximum(np.abs(theta), 1e-12)))
            theta, res, jac, obj = trial, res_t, jac_t, obj_t
            history.append(obj)
            lam = max(lam / 3.0, 1e-12)
            if rel < config.rel_tol or obj <= 0.0 or moved < config.step_tol:
                return theta, history, True
            # creeping along a bound or a flat ridge: ten accepted steps gained almost nothing
            if len(history) > 10:
                gain = history[-11] - obj
                if gain < 1e-5 * history[-11] or (n_samples and gain * n_samples < _NEGLIGIBLE_DEVIANCE):
                    return theta, history, True
        else:
            lam *= 4.0
            if lam > 1e14:
                # no descent direction left at working precision
                return theta, history, True
    return theta, history, False


def fit_interval_model(pmf, gate_period: float, deadtime: Optional[int] = None,
                       n_samples: Optional[int] = None, p_dark_assumed: Optional[float] = None,
                       config: FitConfig = FitConfig(), initial=None) -> ParameterEstimate:
    """Weighted least-squares fit of the first-order interval model.

    ``pmf`` is an :class:`IntervalHistogram` or an array indexed from
    interval 1 (pass ``n_samples`` with an array to set the count-based
    R^2 range). Every bin past the deadtime enters the fit with weight
    ``1/max(model, weight_floor)``. The accepted objective values of the
    Levenberg-Marquardt iteration never increase and are returned in
    ``objective_history``.
    """
    if gate_period <= 0:
        raise DomainError("gate_period must be > 0")
    if isinstance(pmf, IntervalHistogram) and deadtime is None:
        deadtime = estimate_deadtime(pmf)
    y_all, counts, n_samples = _as_pmf(pmf, n_samples)
    if n_samples is not None and n_samples < config.min_samples:
        raise InsufficientDataError(f"{n_samples} samples below the floor of {config.min_samples}")
    first = _first_live(y_all, deadtime)
    d = first - 1
    end = _range_end(y_all, counts, config.min_count)
    if end - first + 1 < config.min_tail_bins:
        raise InsufficientDataError("too few populated bins for a model fit")
    # the fit runs over every bin past the deadtime, empty tail bins included;
    # cutting at the last well-filled bin would select an upward fluctuation
    m = np.arange(first, y_all.size + 1)
    y = y_all[m - 1]

    theta = _initial_guess(y_all, counts, first, end, gate_period, config) if initial is None \
        else np.array([initial[0], initial[1], initial[2] / gate_period], dtype=float)
    free = np.array([True, True, True])
    if config.tau_fixed is not None:
        if config.tau_fixed <= 0:
            raise DomainError("tau_fixed must be > 0")
        theta[2] = config.tau_fixed / gate_period
        free[2] = False

    def valid(th):
        q, p0, s = th
        one_r = -math.expm1(-1.0 / s)
        return p0 * math.exp(-(d + 1) / s) / one_r <= 1.0

    theta = _project(theta)
    if not free[2]:
        theta[2] = config.tau_fixed / gate_period
    if not valid(theta):
        theta[1] = 1e-4

    theta, history, converged = _lm_minimize(m, y, theta, free, valid, gate_period, d, config, n_samples)
    q, p0, s = theta
    m_r2 = np.arange(first, end + 1)
    y_r2 = y_all[m_r2 - 1]
    fit, _ = _model_and_jacobian(m_r2, theta, gate_period, d)
    ss_res = float(np.sum((y_r2 - fit) ** 2))
    ss_tot = float(np.sum((y_r2 - y_r2.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    est = ParameterEstimate(
        q_total=float(q), p0_hat=float(p0), tau_hat=float(s * gate_period), gate_period=gate_period,
        deadtime_units=d, r_squared=r2, n_samples=int(n_samples) if n_samples is not None else 0,
        p_dark_assumed=p_dark_assumed, method="model", objective_history=tuple(history),
    )
    if not converged:
        raise ConvergenceError(f"no convergence after {config.max_iter} iterations", est)
    return est


# ---------------------------------------------------------------------------
# tail-line estimate and the automatic pipeline


def tail_line_estimate(h: IntervalHistogram, gate_period: float, deadtime: Optional[int] = None,
                       p_dark_assumed: Optional[float] = None,
                       config: FitConfig = FitConfig()) -> ParameterEstimate:
    """Estimate from the tail line alone: slope gives q_total, excess gives afterpulsing.

    The afterpulse excess is stored as an equivalent single-exponential
    amplitude with lifetime ``config.tau_hint`` so the usual derived
    quantities (``p_after``, ``p_after_live``) stay consistent.
    """
    if deadtime is None:
        deadtime = estimate_deadtime(h)
    pmf = normalize(h)
    tail_start = config.tail_start(gate_period, deadtime)
    slope, intercept, idx = _line_fit(pmf, h.bin_counts, tail_start, config.min_count, config.min_tail_bins)
    live = tail_line_afterpulse(h, tail_start, first_live=deadtime + 1,
                                min_count=config.min_count, min_tail_bins=config.min_tail_bins)
    tau = config.tau_hint
    p0 = live * math.expm1(gate_period / tau) * math.exp(deadtime * gate_period / tau)
    x = idx + 1.0
    y = pmf[idx]
    fit = np.exp(intercept + slope * x)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum((y - fit) ** 2)) / ss_tot if ss_tot > 0 else 1.0
    return ParameterEstimate(
        q_total=float(min(math.exp(slope), 1 - 1e-12)), p0_hat=p0, tau_hat=tau, gate_period=gate_period,
        deadtime_units=int(deadtime), r_squared=r2, n_samples=h.total, p_dark_assumed=p_dark_assumed,
        method="tail_line",
    )


def estimate_parameters(h: IntervalHistogram, gate_period: float, method: str = "auto",
                        deadtime: Optional[int] = None, p_dark_assumed: Optional[float] = None,
                        config: FitConfig = FitConfig()) -> ParameterEstimate:
    """Estimate detector parameters from a gate-unit histogram.

    ``method="auto"`` tries the model fit and falls back to the tail line
    when the fit fails or its R^2 is below ``config.min_r_squared``.
    """
    if h.unit != "gates":
        raise DomainError("parameter estimation needs a gate-unit histogram")
    if deadtime is None:
        deadtime = estimate_deadtime(h)
    if method == "tail_line":
        return tail_line_estimate(h, gate_period, deadtime, p_dark_assumed, config)
    if method not in ("model", "auto"):
        raise DomainError(f"unknown method {method!r}")
    try:
        est = fit_interval_model(h, gate_period, deadtime, p_dark_assumed=p_dark_assumed, config=config)
    except (ConvergenceError, ModelValidityError) as exc:
        if method == "model":
            raise
        return tail_line_estimate(h, gate_period, deadtime, p_dark_assumed, config)
    if method == "auto" and est.r_squared < config.min_r_squared:
        return tail_line_estimate(h, gate_period, deadtime, p_dark_assumed, config)
    return est


# ---------------------------------------------------------------------------
# resampling


def resampling_uncertainty(stream, series_length: int, n_series: int,
                           extractor: Callable) -> float:
    """Relative standard deviation of ``extractor`` over disjoint consecutive segments."""
    if series_length < 2 or n_series < 2:
        raise DomainError("need series_length >= 2 and n_series >= 2")
    if len(stream) < series_length * n_series:
        raise InsufficientDataError(
            f"stream of {len(stream)} events is too short for {n_series} x {series_length}"
        )
    values = np.array([extractor(stream[i * series_length:(i + 1) * series_length])
                       for i in range(n_series)], dtype=float)
    mean = values.mean()
    if mean == 0:
        return 0.0 if np.all(values == 0) else math.inf
    return float(values.std(ddof=1) / abs(mean))


def afterpulse_extractor(gate_period: float, config: FitConfig = FitConfig(),
                         deadtime: Optional[int] = None, n_bins: int = 4096) -> Callable:
    """Segment -> tail-line afterpulse probability."""
    def extract(segment):
        h = accumulate(segment, "gates", n_bins)
        d = estimate_deadtime(h) if deadtime is None else deadtime
        return tail_line_afterpulse(h, config.tail_start(gate_period, d), first_live=d + 1,
                                    min_count=config.min_count, min_tail_bins=config.min_tail_bins)
    return extract


def mu_eta_extractor(gate_period: float, p_dark_assumed: float, config: FitConfig = FitConfig(),
                     deadtime: Optional[int] = None, n_bins: int = 4096) -> Callable:
    """Segment -> fitted mu*eta."""
    def extract(segment):
        h = accumulate(segment, "gates", n_bins)
        return fit_interval_model(h, gate_period, deadtime, p_dark_assumed=p_dark_assumed,
                                  config=config).mu_eta
    return extract

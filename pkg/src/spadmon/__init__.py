"""Interval statistics of gated single-photon detectors: model, simulation, estimation and attack monitoring."""
from .errors import *  # noqa: F401,F403
from .estimate import (
    FitConfig,
    ParameterEstimate,
    estimate_deadtime,
    estimate_parameters,
    fit_interval_model,
    resampling_uncertainty,
    tail_line_afterpulse,
)
from .histogram import IntervalHistogram, accumulate, merge, normalize
from .model import (
    DetectorParams,
    afterpulse_at,
    interval_pmf_exact,
    interval_pmf_model,
    mutual_information_timeshift,
    total_afterpulse,
    zero_photon_probability,
)
from .monitor import Baseline, Verdict, assess, compare, detect_timing_peaks, hop_schedule
from .simulate import (
    AfterGate,
    CWBlinding,
    EventStream,
    FaintAfterGate,
    NoAttack,
    TimeShift,
    simulate_free_running,
    simulate_gated,
)

__version__ = "0.1.0"

"""
Command-line scenario runner.

``spadmon simulate|analyze|monitor|suite --config cfg.json`` drives the
library from one JSON document. Physical quantities carry their SI unit in
the field name (``gate_period_s``, ``deadtime_s``, ``count_rate_hz``).

Exit codes: 0 clean, 2 alarm raised, 1 error (including failed suite rows).
"""
from __future__ import annotations

import argparse
import datetime as _dt
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigError, SpadMonError
from .estimate import FitConfig, estimate_deadtime, estimate_parameters, tail_line_afterpulse
from .histogram import IntervalHistogram, accumulate, normalize
from .model import DetectorParams, mutual_information_timeshift
from .monitor import (
    Assessment,
    Baseline,
    TimingExpectation,
    assess,
    compare,
    deadtime_verdict,
    timeshift_efficiency_ratio,
    timing_histogram,
)
from .simulate import (
    CWBlinding,
    EventStream,
    NoAttack,
    scenario_from_dict,
    scenario_to_dict,
    simulate_free_running,
    simulate_gated,
)

EXIT_CLEAN, EXIT_ERROR, EXIT_ALARM = 0, 1, 2
FIXED_CLOCK = "1970-01-01T00:00:00Z"

_DETECTOR_FIELDS = {
    "mu": "mu", "eta": "eta", "p_dark": "p_dark", "p0": "p0",
    "tau_trap_s": "tau_trap", "gate_period_s": "gate_period", "sample_period_s": "sample_period",
}


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class FreeRunning:
    count_rate_hz: float
    deadtime_s: float
    duration_s: float
    sample_period_s: float = 10e-9


@dataclass
class ScenarioConfig:
    detector: DetectorParams
    scenario: object = NoAttack()
    n_detections: int = 200_000
    seed: int = 0
    analysis: FitConfig = FitConfig()
    method: str = "auto"
    n_bins: int = 4096
    min_peak_fraction: float = 0.05
    n_windows: int = 10
    baseline: Optional[Baseline] = None
    free_running: Optional[FreeRunning] = None
    source: dict = field(default_factory=dict)


def _number(doc, key, where, kind=float, default=None, required=False):
    if key not in doc:
        if required:
            raise ConfigError(f"{where}.{key}: missing required field")
        return default
    value = doc[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{where}.{key}: expected a number, got {value!r}")
    if kind is int:
        if int(value) != value:
            raise ConfigError(f"{where}.{key}: expected an integer, got {value!r}")
        return int(value)
    return float(value)


def _check_keys(doc, allowed, where):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where}: expected an object")
    unknown = sorted(set(doc) - set(allowed))
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {unknown}")


def detector_from_dict(doc: dict) -> DetectorParams:
    _check_keys(doc, set(_DETECTOR_FIELDS) | {"deadtime_s"}, "detector")
    kw = {}
    for key, name in _DETECTOR_FIELDS.items():
        v = _number(doc, key, "detector")
        if v is not None:
            kw[name] = v
    period = kw.get("gate_period", DetectorParams.gate_period)
    dead_s = _number(doc, "deadtime_s", "detector")
    if dead_s is not None:
        gates = dead_s / period
        if abs(gates - round(gates)) > 1e-6 or gates < 0:
            raise ConfigError(f"detector.deadtime_s: {dead_s} s is not a whole number of {period} s gates")
        kw["deadtime_gates"] = int(round(gates))
    try:
        return DetectorParams(**kw)
    except SpadMonError as exc:
        raise ConfigError(f"detector: {exc}") from None


def detector_to_dict(p: DetectorParams) -> dict:
    out = {key: getattr(p, name) for key, name in _DETECTOR_FIELDS.items()}
    out["deadtime_s"] = p.deadtime_gates * p.gate_period
    return out


def _analysis_from_dict(doc: dict):
    allowed = {"method", "tau_hint_s", "tau_fixed_s", "n_bins", "min_peak_fraction", "n_windows",
               "min_samples", "weight_floor", "max_iter", "rel_tol"}
    _check_keys(doc, allowed, "analysis")
    kw = {}
    if "tau_hint_s" in doc:
        kw["tau_hint"] = _number(doc, "tau_hint_s", "analysis")
    if "tau_fixed_s" in doc:
        kw["tau_fixed"] = _number(doc, "tau_fixed_s", "analysis")
    for key, kind in (("min_samples", int), ("weight_floor", float), ("max_iter", int), ("rel_tol", float)):
        if key in doc:
            kw[key] = _number(doc, key, "analysis", kind)
    method = doc.get("method", "auto")
    if method not in ("auto", "model", "tail_line"):
        raise ConfigError(f"analysis.method: unknown method {method!r}")
    return (FitConfig(**kw), method, _number(doc, "n_bins", "analysis", int, 4096),
            _number(doc, "min_peak_fraction", "analysis", float, 0.05),
            _number(doc, "n_windows", "analysis", int, 10))


def _baseline_from(doc, detector: DetectorParams, base_dir: Path) -> Optional[Baseline]:
    if doc is None:
        return None
    if isinstance(doc, str):
        path = (base_dir / doc) if not Path(doc).is_absolute() else Path(doc)
        return Baseline.from_dict(load_json(path))
    _check_keys(doc, {"from_detector", "afterpulse_alarm_threshold", "afterpulse_band", "rate_tolerance",
                      "timing_offset_samples", "timing_jitter_samples", "min_samples", "nominal"},
                "baseline")
    kw = {}
    if "afterpulse_alarm_threshold" in doc:
        kw["afterpulse_alarm_threshold"] = _number(doc, "afterpulse_alarm_threshold", "baseline")
    if "afterpulse_band" in doc:
        kw["afterpulse_band"] = doc["afterpulse_band"] and _number(doc, "afterpulse_band", "baseline")
    if "rate_tolerance" in doc:
        kw["tolerances"] = {"rate": _number(doc, "rate_tolerance", "baseline")}
    if "min_samples" in doc:
        kw["min_samples"] = _number(doc, "min_samples", "baseline", int)
    if "timing_offset_samples" in doc or "timing_jitter_samples" in doc:
        kw["timing"] = TimingExpectation(_number(doc, "timing_offset_samples", "baseline", int, 0),
                                         _number(doc, "timing_jitter_samples", "baseline", int, 1))
    try:
        if "nominal" in doc:
            full = dict(doc)
            full.pop("from_detector", None)
            return Baseline.from_dict(full)
        return Baseline.from_params(detector, **kw)
    except (SpadMonError, KeyError, TypeError) as exc:
        raise ConfigError(f"baseline: {exc}") from None


def load_json(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read ({exc.strerror})") from None
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None


def config_from_dict(doc: dict, base_dir: Path = Path(".")) -> ScenarioConfig:
    _check_keys(doc, {"detector", "scenario", "n_detections", "seed", "analysis", "baseline",
                      "free_running", "name", "expect"}, "config")
    detector = detector_from_dict(doc.get("detector", {}))
    scenario = scenario_from_dict(doc.get("scenario"))
    n = _number(doc, "n_detections", "config", int, 200_000)
    if n < 1:
        raise ConfigError(f"config.n_detections: must be >= 1, got {n}")
    seed = _number(doc, "seed", "config", int, 0)
    fit, method, n_bins, frac, n_win = _analysis_from_dict(doc.get("analysis", {}))
    free = None
    if "free_running" in doc:
        fr = doc["free_running"]
        _check_keys(fr, {"count_rate_hz", "deadtime_s", "duration_s", "sample_period_s"}, "free_running")
        free = FreeRunning(
            _number(fr, "count_rate_hz", "free_running", required=True),
            _number(fr, "deadtime_s", "free_running", required=True),
            _number(fr, "duration_s", "free_running", required=True),
            _number(fr, "sample_period_s", "free_running", default=detector.sample_period),
        )
    elif isinstance(scenario, CWBlinding):
        raise ConfigError("scenario: cw_blinding needs a free_running section")
    baseline = _baseline_from(doc.get("baseline"), detector, base_dir)
    return ScenarioConfig(detector, scenario, n, seed, fit, method, n_bins, frac, n_win, baseline, free, doc)


def load_config(path) -> ScenarioConfig:
    path = Path(path)
    return config_from_dict(load_json(path), path.parent)


# ---------------------------------------------------------------------------
# operations


def run_simulate(cfg: ScenarioConfig) -> EventStream:
    if cfg.free_running is not None:
        fr = cfg.free_running
        return simulate_free_running(fr.count_rate_hz, fr.deadtime_s, cfg.scenario, fr.duration_s,
                                     fr.sample_period_s, cfg.seed)
    return simulate_gated(cfg.detector, cfg.scenario, cfg.n_detections, cfg.seed)


def _plot_lines(h: IntervalHistogram) -> str:
    pmf = normalize(h)
    nz = np.flatnonzero(h.bin_counts)
    head = f"# interval_{h.unit}\tprobability\n"
    return head + "".join(f"{i + 1}\t{pmf[i]:.9e}\n" for i in nz.tolist())


def _write(out: Optional[Path], name: str, text: str):
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / name).write_text(text, encoding="utf-8", newline="")


def run_analyze(cfg: ScenarioConfig, stream: Optional[EventStream] = None,
                histogram: Optional[IntervalHistogram] = None, out: Optional[Path] = None) -> dict:
    """Analyse a stream or a gate-unit histogram; returns the report and writes data files to ``out``."""
    report = {"scenario": scenario_to_dict(cfg.scenario), "detector": detector_to_dict(cfg.detector)}
    if stream is None and histogram is None:
        stream = run_simulate(cfg)
    if stream is not None:
        report["n_events"] = len(stream)
        report["cause_fractions"] = {c: stream.cause_fraction(c)
                                     for c in ("photon", "dark", "afterpulse", "forced_click")}
    if stream is not None and stream.mode == "free":
        return _analyze_free(cfg, stream, report, out)

    if histogram is None:
        histogram = accumulate(stream, "gates", cfg.n_bins)
    _write(out, "histogram.csv", histogram.to_csv())
    _write(out, "pmf_gates.tsv", _plot_lines(histogram))
    baseline = cfg.baseline or Baseline.from_params(cfg.detector)
    deadtime = estimate_deadtime(histogram)
    tail = tail_line_afterpulse(histogram, cfg.analysis.tail_start(cfg.detector.gate_period, deadtime),
                                first_live=deadtime + 1, min_count=cfg.analysis.min_count,
                                min_tail_bins=cfg.analysis.min_tail_bins)
    report["tail_line_p_after"] = tail
    if stream is not None:
        assessment = assess(stream, baseline, cfg.analysis, cfg.method, cfg.n_bins,
                            cfg.min_peak_fraction, cfg.n_windows)
    else:
        est = estimate_parameters(histogram, cfg.detector.gate_period, cfg.method, deadtime,
                                  cfg.detector.p_dark, baseline.fit_config(cfg.analysis))
        assessment = Assessment(est, None, compare(baseline, est))
    report["estimate"] = assessment.estimate.to_dict()
    report["efficiency_estimate"] = assessment.estimate.efficiency(cfg.detector.mu)
    if assessment.timing is not None:
        report["timing"] = assessment.timing.to_dict()
        th = timing_histogram(stream, cfg.n_windows)
        _write(out, "pmf_samples.tsv", _plot_lines(th))
        c = assessment.timing.central_to_side_ratio
        if c is not None and c >= 2.0:
            ratio = timeshift_efficiency_ratio(c)
            report["timing"]["efficiency_ratio"] = ratio
            report["timing"]["mutual_information_bits"] = mutual_information_timeshift(ratio)
    if cfg.baseline is not None:
        report["verdict"] = assessment.verdict.to_dict()
    report["alarm"] = bool(cfg.baseline is not None and assessment.verdict.overall)
    return report


def _analyze_free(cfg, stream, report, out):
    fr = cfg.free_running
    sample = fr.sample_period_s if fr is not None else cfg.detector.sample_period
    gaps = np.diff(stream.absolute_sample)
    n_bins = int(max(cfg.n_bins, np.percentile(gaps, 99.9) + 1)) if gaps.size else cfg.n_bins
    h = accumulate(stream, "samples", n_bins)
    _write(out, "histogram.csv", h.to_csv())
    _write(out, "pmf_samples.tsv", _plot_lines(h))
    dead = estimate_deadtime(h)
    report["deadtime_samples"] = dead
    report["min_interval_samples"] = dead + 1
    report["mean_interval_s"] = float(gaps.mean() * sample) if gaps.size else None
    alarm = False
    if fr is not None:
        nominal = int(round(fr.deadtime_s / sample)) - 1
        nominal = max(nominal, 0)
        verdict = deadtime_verdict(h, nominal)
        report["verdict"] = verdict.to_dict()
        alarm = verdict.overall
    report["alarm"] = bool(alarm)
    return report


def run_suite(suite: dict, base_dir: Path = Path("."), seed: Optional[int] = None) -> list:
    """Run every named scenario and compare its report against the expected bands."""
    _check_keys(suite, {"scenarios", "name"}, "suite")
    rows = []
    for i, entry in enumerate(suite.get("scenarios", [])):
        name = entry.get("name", f"scenario_{i}")
        try:
            doc = dict(entry)
            if "config_path" in doc:
                inner = load_json(base_dir / doc.pop("config_path"))
                inner.update({k: v for k, v in doc.items() if k not in ("name", "expect")})
                doc = inner
            expect = doc.pop("expect", entry.get("expect", {}))
            doc.pop("name", None)
            if seed is not None:
                doc["seed"] = seed
            cfg = config_from_dict(doc, base_dir)
            report = run_analyze(cfg)
        except SpadMonError as exc:
            raise type(exc)(f"scenario {name!r}: {exc}") from None
        checks = _check_expectations(report, expect, cfg)
        rows.append({
            "name": name,
            "p_after": report.get("tail_line_p_after"),
            "p_after_live": report.get("estimate", {}).get("p_after_live"),
            "efficiency": report.get("efficiency_estimate"),
            "deadtime": report.get("estimate", {}).get("deadtime_units", report.get("deadtime_samples")),
            "alarms": sorted(k for k, v in report.get("verdict", {}).items()
                             if k.endswith("_alarm") and v),
            "checks": checks,
            "passed": all(c["passed"] for c in checks),
        })
    return rows


def _check_expectations(report, expect, cfg) -> list:
    checks = []

    def band(name, value, lo, hi):
        ok = value is not None and lo <= value <= hi
        checks.append({"check": name, "value": value, "expected": [lo, hi], "passed": bool(ok)})

    for key, wanted in expect.items():
        if key == "tail_line_p_after":
            band(key, report.get("tail_line_p_after"), *wanted)
        elif key == "efficiency":
            band(key, report.get("efficiency_estimate"), *wanted)
        elif key == "deadtime":
            value = report.get("estimate", {}).get("deadtime_units", report.get("deadtime_samples"))
            checks.append({"check": key, "value": value, "expected": wanted, "passed": value == wanted})
        elif key == "alarm":
            checks.append({"check": key, "value": report["alarm"], "expected": wanted,
                           "passed": report["alarm"] == wanted})
        elif key == "peaks_per_window":
            got = report.get("timing", {}).get("windows", [])
            counts = [len(w["offsets"]) for w in got if w["usable"]]
            ok = bool(counts) and all(c == wanted for c in counts)
            checks.append({"check": key, "value": counts, "expected": wanted, "passed": ok})
        elif key in ("afterpulse_alarm", "afterpulse_band_alarm", "efficiency_alarm", "deadtime_alarm",
                     "timing_alarm"):
            value = report.get("verdict", {}).get(key)
            checks.append({"check": key, "value": value, "expected": wanted, "passed": value == wanted})
        else:
            raise ConfigError(f"expect.{key}: unknown expectation")
    return checks


# ---------------------------------------------------------------------------
# command line


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


def _stamp(report: dict, fixed: bool) -> dict:
    now = FIXED_CLOCK if fixed else _dt.datetime.now(_dt.timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
    return {"generated_at": now, **report}


def _table(rows) -> str:
    lines = ["name\tpassed\tp_after\tefficiency\tdeadtime\talarms"]
    for r in rows:
        fmt = lambda v: "" if v is None else (f"{v:.6g}" if isinstance(v, float) else str(v))
        lines.append("\t".join([r["name"], "PASS" if r["passed"] else "FAIL", fmt(r["p_after"]),
                                fmt(r["efficiency"]), fmt(r["deadtime"]), ",".join(r["alarms"])]))
    return "\n".join(lines) + "\n"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spadmon", description="SPAD interval-statistics monitor")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (("simulate", "write a simulated event CSV"),
                       ("analyze", "estimate parameters and write report and plot data"),
                       ("monitor", "judge a run against its baseline"),
                       ("suite", "run a list of scenarios against expected bands")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, help="JSON configuration file")
        p.add_argument("--seed", type=int, default=None, help="override the configured seed")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--fixed-clock", action="store_true", help="stamp reports with a constant time")
        if name in ("analyze", "monitor"):
            p.add_argument("--input", default=None, help="event CSV or histogram CSV instead of simulating")
    return parser


def _read_input(path: Path, cfg: ScenarioConfig):
    text = path.read_text(encoding="utf-8")
    first = next((ln for ln in text.splitlines() if ln.strip()), "")
    if first.startswith("#") or first.strip() == "interval,count":
        return None, IntervalHistogram.from_csv(text)
    return EventStream.from_csv(text, period_samples=cfg.detector.period_samples), None


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out = Path(args.out) if args.out else None
    try:
        if args.command == "suite":
            path = Path(args.config)
            rows = run_suite(load_json(path), path.parent, args.seed)
            summary = {"suite": str(path.name), "rows": rows, "passed": all(r["passed"] for r in rows)}
            text = _dump(_stamp(summary, args.fixed_clock))
            _write(out, "suite_report.json", text)
            _write(out, "suite_summary.tsv", _table(rows))
            sys.stdout.write(_table(rows))
            for r in rows:
                if not r["passed"]:
                    sys.stderr.write(f"suite: scenario {r['name']!r} outside its expected bands\n")
            return EXIT_CLEAN if summary["passed"] else EXIT_ERROR

        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.command == "simulate":
            stream = run_simulate(cfg)
            text = stream.to_csv()
            if out is None:
                sys.stdout.write(text)
            else:
                _write(out, "events.csv", text)
            return EXIT_CLEAN

        stream = hist = None
        if getattr(args, "input", None):
            stream, hist = _read_input(Path(args.input), cfg)
        if args.command == "monitor" and cfg.baseline is None:
            cfg.baseline = Baseline.from_params(cfg.detector)
        report = run_analyze(cfg, stream, hist, out)
        text = _dump(_stamp(report, args.fixed_clock))
        _write(out, "report.json" if args.command == "analyze" else "verdict.json", text)
        if out is None:
            sys.stdout.write(text)
        return EXIT_ALARM if report["alarm"] else EXIT_CLEAN
    except (SpadMonError, OSError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_ERROR


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

"""
Frequency-guided input selection: find the maxima of a model's Bode gain
and drive transients there, where the output swing (and so its range
coverage) is largest.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from core.bins import Bin
from core.circuit_sim import OUTPUT, BodePlot, LtiModel, Sine, ac_analysis, transient
from core.coverage_engine import range_coverage
from core.trace import Trace

logger = logging.getLogger(__name__)

PEAK = "peak"
TROUGH = "trough"

# periods simulated beyond the settling window
STEADY_PERIODS = 5
SAMPLES_PER_PERIOD = 100


@dataclass(frozen=True)
class Peak:
    frequency: float
    gain_db: float
    index: int
    endpoint: bool = False


@dataclass(frozen=True)
class PeakSet:
    peaks: tuple[Peak, ...]

    @property
    def global_peak(self) -> Peak:
        return self.peaks[0]

    def __len__(self) -> int:
        return len(self.peaks)

    def __iter__(self):
        return iter(self.peaks)


def _refine(log_f: np.ndarray, gain: np.ndarray, i: int) -> tuple[float, float]:
    """Vertex of the parabola through points i-1, i, i+1 (log-frequency axis)."""
    x0, x1, x2 = log_f[i - 1: i + 2]
    y0, y1, y2 = gain[i - 1: i + 2]
    denom = (x0 - x1) * (x0 - x2) * (x1 - x2)
    a = (x2 * (y1 - y0) + x1 * (y0 - y2) + x0 * (y2 - y1)) / denom
    b = (x2 * x2 * (y0 - y1) + x1 * x1 * (y2 - y0) + x0 * x0 * (y1 - y2)) / denom
    if a == 0:
        return x1, y1
    xv = -b / (2 * a)
    xv = min(max(xv, x0), x2)
    c = y1 - a * x1 * x1 - b * x1
    return xv, a * xv * xv + b * xv + c


def local_maxima(gain: Sequence[float]) -> list[int]:
    """Indices i with gain[i-1] < gain[i] > gain[i+1]."""
    g = np.asarray(gain, dtype=np.float64)
    if g.size < 3:
        return []
    return list(np.nonzero((g[1:-1] > g[:-2]) & (g[1:-1] > g[2:]))[0] + 1)


def _extrema(frequencies: np.ndarray, gain: np.ndarray) -> PeakSet:
    if gain.size < 3:
        raise ValueError("Peak search needs at least 3 grid points")
    log_f = np.log10(frequencies)
    peaks = []
    for i in local_maxima(gain):
        xv, yv = _refine(log_f, gain, i)
        peaks.append(Peak(float(10 ** xv), float(yv), i))

    # monotone edges: the larger endpoint competes when it beats every interior peak
    edge = 0 if gain[0] >= gain[-1] else gain.size - 1
    if not peaks or gain[edge] > max(p.gain_db for p in peaks):
        peaks.append(Peak(float(frequencies[edge]), float(gain[edge]), edge, endpoint=True))

    peaks.sort(key=lambda p: (-p.gain_db, p.frequency))
    return PeakSet(tuple(peaks))


def find_peaks(b: BodePlot) -> PeakSet:
    """Local maxima of the Bode gain, highest first (ties go to the lower frequency)."""
    return _extrema(np.asarray(b.frequencies), np.asarray(b.gain_db))


def find_troughs(b: BodePlot) -> PeakSet:
    """Local minima of the Bode gain, deepest first; ``gain_db`` holds the actual gain."""
    found = _extrema(np.asarray(b.frequencies), -np.asarray(b.gain_db))
    return PeakSet(tuple(Peak(p.frequency, -p.gain_db, p.index, p.endpoint) for p in found))


@dataclass(frozen=True)
class ExplorationRun:
    frequency: float
    output_range: Bin
    is_target: bool
    expected_amplitude: float
    trace: Trace

    @property
    def range_width(self) -> float:
        return self.output_range.length


@dataclass(frozen=True)
class ExplorationReport:
    model_label: str
    target: str
    amplitude: float
    bode: BodePlot
    peaks: PeakSet
    runs: tuple[ExplorationRun, ...]

    @property
    def target_run(self) -> ExplorationRun:
        return next(r for r in self.runs if r.is_target)


def choose_dt(m: LtiModel, frequency: float) -> float:
    """Largest step that respects the stability guard and resolves ``frequency``."""
    return min(m.max_step, 1.0 / (SAMPLES_PER_PERIOD * frequency))


def _run_one(m: LtiModel, frequency: float, amplitude: float, dt: Optional[float],
             duration: Optional[float], settle: float, is_target: bool) -> ExplorationRun:
    step = dt if dt is not None else choose_dt(m, frequency)
    span = duration if duration is not None else settle + STEADY_PERIODS / frequency
    tr = transient(m, Sine(amplitude, frequency), step, span)
    if settle >= tr.end:
        logger.warning(
            "Run at %.6g Hz ends at %.6gs, inside the %.6gs settling window; using the whole trace",
            frequency, tr.end, settle,
        )
        settled = tr
    else:
        settled = tr.window(settle)
    return ExplorationRun(
        frequency=frequency,
        output_range=range_coverage(settled, OUTPUT),
        is_target=is_target,
        expected_amplitude=amplitude * m.gain(frequency),
        trace=tr,
    )


def explore(
    m: LtiModel,
    amplitude: float = 1.0,
    comparison_freqs: Sequence[float] = (),
    dt: Optional[float] = None,
    duration: Optional[float] = None,
    f_lo: float = 1.0,
    f_hi: float = 1e6,
    points_per_decade: int = 100,
    target: str = PEAK,
    settle_constants: float = 10.0,
    max_workers: int = 1,
) -> ExplorationReport:
    """Bode analysis, extremum search, then one sine transient per frequency.

    ``target="peak"`` drives the global gain maximum (widest output range);
    ``"trough"`` drives the deepest minimum (narrowest). Each run's output
    range is measured after ``settle_constants`` slowest-pole time constants.
    """
    if target not in (PEAK, TROUGH):
        raise ValueError(f"target must be '{PEAK}' or '{TROUGH}', got {target!r}")
    bode = ac_analysis(m, f_lo, f_hi, points_per_decade)
    extrema = find_peaks(bode) if target == PEAK else find_troughs(bode)
    chosen = extrema.global_peak
    logger.info("%s: %s at %.6g Hz (%.3f dB)%s", m, target, chosen.frequency, chosen.gain_db,
                " [endpoint]" if chosen.endpoint else "")

    settle = m.settling_time(settle_constants)
    if math.isinf(settle):
        raise ValueError(f"Model {m} is not stable; transient ranges would not settle")
    jobs = [(chosen.frequency, True)] + [(float(f), False) for f in comparison_freqs]
    jobs.sort(key=lambda j: j[0])

    def work(job):
        freq, is_target = job
        return _run_one(m, freq, amplitude, dt, duration, settle, is_target)

    if max_workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            runs = list(pool.map(work, jobs))
    else:
        runs = [work(j) for j in jobs]

    return ExplorationReport(m.label, target, amplitude, bode, extrema, tuple(runs))


def exploration_rows(report: ExplorationReport) -> list[dict[str, str]]:
    return [
        {
            "frequency_hz": repr(r.frequency),
            "range": str(r.output_range),
            "range_width": repr(r.range_width),
            "expected_width": repr(2 * r.expected_amplitude),
            "marker": report.target if r.is_target else "",
        }
        for r in report.runs
    ]


def format_exploration(report: ExplorationReport) -> str:
    header = f"{'frequency_hz':>14}  {'range_width':>12}  {'expected':>12}  range"
    lines = [f"model {report.model_label or '-'}  target={report.target}  amplitude={report.amplitude}",
             header, "-" * len(header)]
    for r in report.runs:
        mark = f"  <- {report.target}" if r.is_target else ""
        lines.append(
            f"{r.frequency:>14.6g}  {r.range_width:>12.6g}  {2 * r.expected_amplitude:>12.6g}  {r.output_range}{mark}"
        )
    return "\n".join(lines) + "\n"

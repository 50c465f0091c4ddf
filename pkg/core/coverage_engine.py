"""
Coverage artifacts over traces: range, de-glitched range, level, ddt,
delay and frequency, plus the dispatcher that maps an artifact's output
onto the cells of a target grid.

All functions are pure; a trace is never modified.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from core.bins import Bin, BinGrid, BinSet
from core.trace import Event, Trace, crossing_times, event_times, sample_many

logger = logging.getLogger(__name__)

RANGE = "range"
DEGLITCHED_RANGE = "deglitched_range"
LEVEL = "level"
DDT = "ddt"
DELAY = "delay"
FREQUENCY = "frequency"

KINDS = (RANGE, DEGLITCHED_RANGE, LEVEL, DDT, DELAY, FREQUENCY)

# parameters each kind needs; anything else is rejected
_REQUIRED_PARAMS = {
    RANGE: (),
    DEGLITCHED_RANGE: ("deglitching_time",),
    LEVEL: ("deglitching_time", "level_time", "bin_granularity"),
    DDT: ("time_granularity",),
    DELAY: (),
    FREQUENCY: ("reference", "window"),
}
_OPTIONAL_PARAMS = {FREQUENCY: ("halve_crossings",)}
_POSITIVE = ("deglitching_time", "level_time", "bin_granularity", "time_granularity", "window")

# uniform resampling cap used by de-glitching
_MAX_RESAMPLE = 400_000


class ArtifactError(Exception):
    """Base class for artifact evaluation failures."""


class TraceTooShort(ArtifactError):
    def __init__(self, what: str, needed: float, available: float):
        self.needed = needed
        self.available = available
        super().__init__(f"Trace span {available!r}s is shorter than {what} {needed!r}s")


class NoPairs(ArtifactError):
    """No occurrence of the first event is followed by the second one."""


@dataclass(frozen=True)
class ArtifactParams:
    deglitching_time: Optional[float] = None
    level_time: Optional[float] = None
    bin_granularity: Optional[float] = None
    time_granularity: Optional[float] = None
    reference: Optional[float] = None
    window: Optional[float] = None
    halve_crossings: Optional[bool] = None

    def present(self) -> set[str]:
        return {k for k, v in self.__dict__.items() if v is not None}


@dataclass(frozen=True)
class CoverPoint:
    """One artifact instance: kind + signal (or event pair) + parameters."""

    id: str
    kind: str
    signal: Optional[str] = None
    params: ArtifactParams = field(default_factory=ArtifactParams)
    events: Optional[tuple[Event, Event]] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ArtifactError(f"Coverpoint '{self.id}': unknown kind {self.kind!r}")
        required = set(_REQUIRED_PARAMS[self.kind])
        allowed = required | set(_OPTIONAL_PARAMS.get(self.kind, ()))
        present = self.params.present()
        missing = required - present
        extra = present - allowed
        if missing:
            raise ArtifactError(f"Coverpoint '{self.id}' ({self.kind}) is missing {sorted(missing)}")
        if extra:
            raise ArtifactError(f"Coverpoint '{self.id}' ({self.kind}) does not take {sorted(extra)}")
        for name in _POSITIVE:
            value = getattr(self.params, name)
            if value is not None and not value > 0:
                raise ArtifactError(f"Coverpoint '{self.id}': {name} must be > 0, got {value!r}")
        if self.kind == DELAY:
            if not self.events or len(self.events) != 2:
                raise ArtifactError(f"Coverpoint '{self.id}': delay needs an (E1, E2) event pair")
        elif not self.signal:
            raise ArtifactError(f"Coverpoint '{self.id}': {self.kind} needs a signal")

    @property
    def signals(self) -> tuple[str, ...]:
        if self.kind == DELAY:
            return tuple(dict.fromkeys(e.signal for e in self.events))
        return (self.signal,)


@dataclass(frozen=True)
class CoverageResult:
    coverpoint_id: str
    cells: tuple[Bin, ...]
    sample_count: int
    output: tuple[Bin, ...] = ()
    untargeted: BinSet = field(default_factory=BinSet)
    note: Optional[str] = None

    @property
    def covered(self) -> BinSet:
        return BinSet(self.cells)


# ---------------------------------------------------------------------------
# Range / de-glitched range
# ---------------------------------------------------------------------------

def range_coverage(t: Trace, signal: str) -> Bin:
    """Closed bin spanning every sampled value of ``signal``."""
    values = t.signal(signal)
    return Bin.closed(float(values.min()), float(values.max()))


def _sparse_table(values: np.ndarray) -> np.ndarray:
    n = values.size
    levels = max(1, int(math.floor(math.log2(n))) + 1)
    table = np.full((levels, n), np.inf)
    table[0] = values
    span = 1
    for k in range(1, levels):
        table[k, : n - 2 * span + 1] = np.minimum(table[k - 1, : n - 2 * span + 1], table[k - 1, span: n - span + 1])
        span *= 2
    return table


def _range_min(table: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """min(values[lo:hi]) per query; +inf where the range is empty."""
    length = hi - lo
    out = np.full(lo.shape, np.inf)
    ok = length > 0
    if np.any(ok):
        k = np.floor(np.log2(length[ok])).astype(int)
        left = table[k, lo[ok]]
        right = table[k, hi[ok] - (1 << k)]
        out[ok] = np.minimum(left, right)
    return out


def _window_min(times, values, table, starts, width) -> np.ndarray:
    """Exact min of the interpolated signal over [s, s + width] for each start s."""
    ends = np.minimum(starts + width, times[-1])
    v_start = np.interp(starts, times, values)
    v_end = np.interp(ends, times, values)
    lo = np.searchsorted(times, starts, side="right")
    hi = np.searchsorted(times, ends, side="left")
    inner = _range_min(table, lo, hi)
    return np.minimum(np.minimum(v_start, v_end), inner)


def _max_window_min(times: np.ndarray, values: np.ndarray, width: float) -> float:
    """max over window starts s of (min of the signal over [s, s + width]).

    Between consecutive breakpoints (sample times and sample times - width)
    the window min is the min of a constant and two straight lines, so its
    maximum sits at a breakpoint or where two of those three meet.
    """
    last_start = times[-1] - width
    table = _sparse_table(values)
    bps = np.concatenate((times, times - width, [times[0], last_start]))
    bps = np.unique(bps[(bps >= times[0]) & (bps <= last_start)])

    candidates = [bps]
    if bps.size > 1:
        a, b = bps[:-1], bps[1:]
        mid = 0.5 * (a + b)
        seg_l = np.clip(np.searchsorted(times, mid, side="right") - 1, 0, times.size - 2)
        seg_r = np.clip(np.searchsorted(times, mid + width, side="right") - 1, 0, times.size - 2)
        dt = np.diff(times)
        slope_l = (values[seg_l + 1] - values[seg_l]) / dt[seg_l]
        slope_r = (values[seg_r + 1] - values[seg_r]) / dt[seg_r]
        l_mid = values[seg_l] + slope_l * (mid - times[seg_l])
        r_mid = values[seg_r] + slope_r * (mid + width - times[seg_r])
        lo = np.searchsorted(times, mid, side="right")
        hi = np.searchsorted(times, mid + width, side="left")
        c = _range_min(table, lo, hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            kinks = (
                mid + (r_mid - l_mid) / (slope_l - slope_r),
                mid + (c - l_mid) / slope_l,
                mid + (c - r_mid) / slope_r,
            )
        for k in kinks:
            keep = np.isfinite(k) & (k > a) & (k < b)
            candidates.append(k[keep])
    starts = np.concatenate(candidates)
    return float(np.max(_window_min(times, values, table, starts, width)))


def deglitched_range_coverage(t: Trace, signal: str, deglitching_time: float) -> Bin:
    """Range of levels the signal sustains for at least ``deglitching_time``.

    Upper boundary: max over windows of the window minimum; lower boundary:
    min over windows of the window maximum. Excursions narrower than the
    window can never hold a window's min/max, so they drop out.
    """
    values = t.signal(signal)
    if deglitching_time > t.duration:
        raise TraceTooShort("deglitching time", deglitching_time, t.duration)
    times = t.times
    upper = _max_window_min(times, values, deglitching_time)
    lower = -_max_window_min(times, -values, deglitching_time)
    return Bin.closed(lower, upper)


# ---------------------------------------------------------------------------
# Level
# ---------------------------------------------------------------------------

def _uniform(t: Trace, signal: str) -> tuple[np.ndarray, np.ndarray]:
    times = t.times
    steps = np.diff(times)
    h = float(steps.min())
    if np.allclose(steps, steps[0], rtol=1e-9, atol=0.0):
        return times, t.signal(signal)
    n = min(int(math.ceil(t.duration / h)) + 1, _MAX_RESAMPLE)
    grid = np.linspace(t.start, t.end, n)
    return grid, sample_many(t, signal, grid)


def deglitch_signal(t: Trace, signal: str, deglitching_time: float) -> tuple[np.ndarray, np.ndarray]:
    """The signal with excursions narrower than ``deglitching_time`` removed.

    Grey opening (drops narrow peaks) followed by grey closing (fills narrow
    troughs) over a window spanning ``deglitching_time`` on a uniform grid.
    """
    if deglitching_time > t.duration:
        raise TraceTooShort("deglitching time", deglitching_time, t.duration)
    times, values = _uniform(t, signal)
    h = (times[-1] - times[0]) / (times.size - 1)
    size = int(round(deglitching_time / h)) + 1
    if size <= 1:
        return times, values.copy()
    opened = ndimage.grey_opening(values, size=size, mode="nearest")
    return times, ndimage.grey_closing(opened, size=size, mode="nearest")


def _dwell_levels(times: np.ndarray, values: np.ndarray, level_time: float, k: float) -> list[float]:
    levels: list[float] = []
    n = values.size
    i = 0
    while i < n:
        lo = hi = values[i]
        j = i + 1
        while j < n:
            v = values[j]
            new_lo, new_hi = min(lo, v), max(hi, v)
            if new_hi - new_lo > k:
                break
            lo, hi = new_lo, new_hi
            j += 1
        if times[j - 1] - times[i] >= level_time:
            levels.append(0.5 * (lo + hi))
        i = j
    return levels


def _merge_levels(levels: list[float], k: float) -> list[float]:
    groups: list[list[float]] = []
    for level in levels:
        for g in groups:
            if abs(np.mean(g) - level) <= k / 2:
                g.append(level)
                break
        else:
            groups.append([level])
    return sorted(float(np.mean(g)) for g in groups)


def level_coverage(
    t: Trace, signal: str, deglitching_time: float, level_time: float, bin_granularity: float
) -> list[float]:
    """Values the de-glitched signal dwells at (within a ``bin_granularity``
    band) for at least ``level_time``.

    The band floats: it is the running min/max since the dwell began, and a
    new dwell starts at the first sample that breaks it. Each long-enough
    dwell yields the band midpoint; levels closer than half a band merge.

    Levels are reported as found. One that falls outside the exact
    de-glitched range is logged, since the two de-glitching paths should
    agree on any trace whose glitches fit inside the window.
    """
    times, values = deglitch_signal(t, signal, deglitching_time)
    levels = _merge_levels(_dwell_levels(times, values, level_time, bin_granularity), bin_granularity)
    if not levels:
        return []
    hull = deglitched_range_coverage(t, signal, deglitching_time)
    tol = 1e-9 * max(1.0, abs(hull.lower), abs(hull.upper))
    stray = [v for v in levels if not hull.lower - tol <= v <= hull.upper + tol]
    if stray:
        logger.warning(
            "Signal %s: %d level(s) %s lie outside the de-glitched range %s",
            signal, len(stray), stray, hull,
        )
    return levels


# ---------------------------------------------------------------------------
# ddt / delay / frequency
# ---------------------------------------------------------------------------

def ddt_coverage(t: Trace, signal: str, time_granularity: float) -> Bin:
    """[min, max] of forward-difference slopes taken every ``time_granularity`` seconds."""
    t.signal(signal)
    n = int(math.floor(t.duration / time_granularity + 1e-9))
    if n < 1:
        raise TraceTooShort("time granularity", time_granularity, t.duration)
    anchors = t.start + np.arange(n) * time_granularity
    ahead = np.minimum(anchors + time_granularity, t.end)
    slopes = (sample_many(t, signal, ahead) - sample_many(t, signal, anchors)) / time_granularity
    return Bin.closed(float(slopes.min()), float(slopes.max()))


def pair_delays(first: list[float], second: list[float]) -> list[float]:
    """FIFO pairing: each E1 takes the earliest unconsumed E2 strictly after it."""
    delays = []
    j = 0
    for t1 in sorted(first):
        while j < len(second) and second[j] <= t1:
            j += 1
        if j == len(second):
            break
        delays.append(second[j] - t1)
        j += 1
    return delays


def delay_coverage(t: Trace, e1: Event, e2: Event) -> Bin:
    delays = pair_delays(event_times(t, e1), sorted(event_times(t, e2)))
    if not delays:
        raise NoPairs(f"No {e1.signal} {e1.direction}@{e1.threshold} is followed by "
                      f"{e2.signal} {e2.direction}@{e2.threshold}")
    return Bin.closed(min(delays), max(delays))


def window_crossing_counts(t: Trace, signal: str, reference: float, window: float) -> np.ndarray:
    """Crossings of ``reference`` (either direction) in consecutive tumbling windows."""
    n_windows = int(math.floor(t.duration / window + 1e-9))
    if n_windows < 1:
        raise TraceTooShort("window", window, t.duration)
    crossings = crossing_times(t, signal, reference)
    idx = np.floor((crossings - t.start) / window).astype(int)
    idx = idx[(idx >= 0) & (idx < n_windows)]
    return np.bincount(idx, minlength=n_windows)


def frequency_coverage(
    t: Trace, signal: str, reference: float, window: float, halve_crossings: bool = False
) -> Bin:
    """[min, max] crossings-per-second of ``reference`` over tumbling windows.

    Counts every crossing, so a sinusoid reads as twice its frequency unless
    ``halve_crossings`` is set.
    """
    counts = window_crossing_counts(t, signal, reference, window)
    scale = 2.0 * window if halve_crossings else window
    return Bin.closed(float(counts.min()) / scale, float(counts.max()) / scale)


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------

def artifact_output(cp: CoverPoint, t: Trace, halve_crossings: bool = False) -> list[Bin]:
    """Raw artifact output as bins (one degenerate bin per level)."""
    p = cp.params
    if cp.kind == RANGE:
        return [range_coverage(t, cp.signal)]
    if cp.kind == DEGLITCHED_RANGE:
        return [deglitched_range_coverage(t, cp.signal, p.deglitching_time)]
    if cp.kind == LEVEL:
        levels = level_coverage(t, cp.signal, p.deglitching_time, p.level_time, p.bin_granularity)
        return [Bin.point(v) for v in levels]
    if cp.kind == DDT:
        return [ddt_coverage(t, cp.signal, p.time_granularity)]
    if cp.kind == DELAY:
        return [delay_coverage(t, *cp.events)]
    halve = halve_crossings if p.halve_crossings is None else p.halve_crossings
    return [frequency_coverage(t, cp.signal, p.reference, p.window, halve)]


def evaluate(cp: CoverPoint, t: Trace, grid: BinGrid, halve_crossings: bool = False) -> CoverageResult:
    """Run ``cp`` on ``t`` and quantize its output onto ``grid``.

    Empty outcomes (no delay pairs, no levels) give an empty result with a
    note instead of an error.
    """
    for name in cp.signals:
        t.signal(name)
    note = None
    try:
        output = artifact_output(cp, t, halve_crossings)
    except NoPairs as exc:
        output, note = [], f"no pairs: {exc}"
    if not output and note is None:
        note = "no levels"
    if note:
        logger.warning("Coverpoint %s produced no coverage (%s)", cp.id, note)

    cells: dict[Bin, None] = {}
    for b in output:
        for c in grid.cells_covering(b):
            cells.setdefault(c, None)
    ordered = tuple(sorted(cells, key=lambda c: c.lower_key))
    untargeted = BinSet(output).difference(BinSet([grid.domain]))
    return CoverageResult(cp.id, ordered, t.n_samples, tuple(output), untargeted, note)

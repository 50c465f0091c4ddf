"""
Time-stamped simulation traces: CSV ingestion/emission, interpolation and
threshold-crossing events.

A trace is immutable once built. Between samples a signal is the straight
line through the bracketing samples.
"""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

RISING = "rising"
FALLING = "falling"


class TraceError(Exception):
    """Base class for trace problems."""


class TraceParseError(TraceError):
    """Raised when a trace file is malformed."""

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        self.path = path
        self.line = line
        where = f"{path}:{line}: " if path and line else (f"{path}: " if path else "")
        super().__init__(f"{where}{message}")


class UnknownSignal(TraceError):
    def __init__(self, signal: str, available: Sequence[str] = ()):
        self.signal = signal
        self.available = list(available)
        super().__init__(f"Unknown signal '{signal}' (available: {', '.join(self.available) or 'none'})")


class OutOfRange(TraceError):
    def __init__(self, time: float, first: float, last: float):
        self.time = time
        super().__init__(f"Time {time!r} outside trace span [{first!r}, {last!r}]")


@dataclass(frozen=True)
class Event:
    """A directed threshold crossing of one signal."""

    signal: str
    threshold: float
    direction: str = RISING

    def __post_init__(self):
        if self.direction not in (RISING, FALLING):
            raise ValueError(f"Event direction must be '{RISING}' or '{FALLING}', got {self.direction!r}")
        object.__setattr__(self, "threshold", float(self.threshold))


class Trace:
    """Samples of one or more signals at strictly increasing times."""

    __slots__ = ("_names", "_times", "_values", "_index")

    def __init__(self, signal_names: Sequence[str], times, values):
        names = [str(n) for n in signal_names]
        times = np.array(times, dtype=np.float64)
        values = np.array(values, dtype=np.float64)
        if values.ndim == 1 and len(names) == 1:
            values = values.reshape(-1, 1)
        if len(set(names)) != len(names):
            raise TraceError(f"Duplicate signal names: {names}")
        if times.ndim != 1 or times.size < 2:
            raise TraceError("A trace needs at least 2 samples")
        if values.shape != (times.size, len(names)):
            raise TraceError(
                f"Value matrix shape {values.shape} does not match {times.size} samples x {len(names)} signals"
            )
        if not np.all(np.isfinite(times)) or not np.all(np.isfinite(values)):
            raise TraceError("Trace contains non-finite numbers")
        if times[0] < 0:
            raise TraceError("Trace times must be >= 0")
        if np.any(np.diff(times) <= 0):
            raise TraceError("Trace times must be strictly increasing")
        times.setflags(write=False)
        values.setflags(write=False)
        self._names = tuple(names)
        self._times = times
        self._values = values
        self._index = {n: i for i, n in enumerate(names)}

    @classmethod
    def from_arrays(cls, times, signals: Mapping[str, Iterable[float]]) -> "Trace":
        names = list(signals)
        values = np.column_stack([np.asarray(signals[n], dtype=np.float64) for n in names])
        return cls(names, times, values)

    @property
    def signal_names(self) -> tuple[str, ...]:
        return self._names

    @property
    def times(self) -> np.ndarray:
        return self._times

    @property
    def values(self) -> np.ndarray:
        return self._values

    @property
    def n_samples(self) -> int:
        return int(self._times.size)

    @property
    def start(self) -> float:
        return float(self._times[0])

    @property
    def end(self) -> float:
        return float(self._times[-1])

    @property
    def duration(self) -> float:
        return self.end - self.start

    def has_signal(self, name: str) -> bool:
        return name in self._index

    def signal(self, name: str) -> np.ndarray:
        try:
            return self._values[:, self._index[name]]
        except KeyError:
            raise UnknownSignal(name, self._names) from None

    def window(self, t_start: float, t_end: float | None = None) -> "Trace":
        """Sub-trace over [t_start, t_end], with interpolated samples at both ends."""
        t_end = self.end if t_end is None else t_end
        t_start = max(t_start, self.start)
        t_end = min(t_end, self.end)
        if t_end <= t_start:
            raise OutOfRange(t_start, self.start, self.end)
        inner = (self._times > t_start) & (self._times < t_end)
        times = np.concatenate(([t_start], self._times[inner], [t_end]))
        cols = [sample_many(self, n, times) for n in self._names]
        return Trace(self._names, times, np.column_stack(cols))

    def reversed(self) -> "Trace":
        """Time-reversed copy: sample at t moves to (start + end - t)."""
        times = (self.start + self.end) - self._times[::-1]
        times[0] = self.start
        times[-1] = self.end
        return Trace(self._names, times, self._values[::-1])

    def __eq__(self, other) -> bool:
        if not isinstance(other, Trace):
            return NotImplemented
        return (
            self._names == other._names
            and np.array_equal(self._times, other._times)
            and np.array_equal(self._values, other._values)
        )

    def __repr__(self) -> str:
        return f"Trace(signals={list(self._names)}, samples={self.n_samples}, span=[{self.start}, {self.end}])"


def load_trace(path: str, format: str = "csv") -> Trace:
    """Load a trace CSV (``time,<name>,...`` header, one sample per line).

    Leading ``#`` comment lines are skipped so emitted traces re-load.
    """
    if format != "csv":
        raise TraceParseError(f"Unsupported trace format {format!r}", path)
    if not os.path.exists(path):
        raise TraceParseError("File not found", path)

    times: list[float] = []
    rows: list[list[float]] = []
    header: list[str] | None = None
    with open(path, "r", encoding="utf-8", newline="") as handle:
        for line_no, row in enumerate(csv.reader(handle), start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if header is None:
                if row[0].lstrip().startswith("#"):
                    continue
                header = [c.strip() for c in row]
                if header[0] != "time" or len(header) < 2:
                    raise TraceParseError("Header must be 'time,<signal>,...'", path, line_no)
                continue
            if len(row) != len(header):
                raise TraceParseError(
                    f"Ragged row: expected {len(header)} columns, got {len(row)}", path, line_no
                )
            try:
                numbers = [float(c) for c in row]
            except ValueError:
                raise TraceParseError(f"Non-numeric value in row {row}", path, line_no) from None
            if times and numbers[0] <= times[-1]:
                raise TraceParseError(
                    f"Non-increasing time {numbers[0]!r} after {times[-1]!r}", path, line_no
                )
            times.append(numbers[0])
            rows.append(numbers[1:])

    if header is None:
        raise TraceParseError("File is empty", path)
    try:
        trace = Trace(header[1:], times, np.array(rows, dtype=np.float64).reshape(len(rows), len(header) - 1))
    except TraceError as exc:
        raise TraceParseError(str(exc), path) from exc
    logger.info("Loaded trace %s: %d samples, signals %s", path, trace.n_samples, ", ".join(trace.signal_names))
    return trace


def trace_rows(t: Trace) -> list[dict[str, float]]:
    """Rows for CSV emission, one dict per sample, full float precision."""
    rows = []
    for i, time in enumerate(t.times):
        row = {"time": repr(float(time))}
        for j, name in enumerate(t.signal_names):
            row[name] = repr(float(t.values[i, j]))
        rows.append(row)
    return rows


def write_trace(t: Trace, path: str) -> str:
    """Write ``t`` in the trace CSV format; returns the path."""
    from utils.export_manager import ResultsExporter

    ResultsExporter().export_to_csv(trace_rows(t), path)
    return path


def sample_many(t: Trace, signal: str, times) -> np.ndarray:
    """Vectorized :func:`sample_at` without range checks (values are clamped at the ends)."""
    values = t.signal(signal)
    times = np.asarray(times, dtype=np.float64)
    out = np.interp(times, t.times, values)
    idx = np.searchsorted(t.times, times)
    idx = np.clip(idx, 0, t.n_samples - 1)
    exact = t.times[idx] == times
    out[exact] = values[idx[exact]]
    return out


def sample_at(t: Trace, signal: str, time: float) -> float:
    """Linearly interpolated value of ``signal`` at ``time``; exact at sample times."""
    t.signal(signal)
    if not (t.start <= time <= t.end):
        raise OutOfRange(time, t.start, t.end)
    return float(sample_many(t, signal, [time])[0])


def _crossings(times: np.ndarray, values: np.ndarray, threshold: float, direction: str) -> np.ndarray:
    above = values >= threshold
    v0, v1 = values[:-1], values[1:]
    t0, t1 = times[:-1], times[1:]
    if direction == RISING:
        idx = np.nonzero(~above[:-1] & above[1:])[0]
    else:
        idx = np.nonzero(above[:-1] & ~above[1:])[0]
    frac = (threshold - v0[idx]) / (v1[idx] - v0[idx])
    out = t0[idx] + frac * (t1[idx] - t0[idx])
    # a sample sitting on the threshold owns the crossing
    on_right = v1[idx] == threshold
    on_left = v0[idx] == threshold
    out[on_right] = t1[idx][on_right]
    out[on_left] = t0[idx][on_left]
    return out


def event_times(t: Trace, e: Event) -> list[float]:
    """Times at which ``e.signal`` crosses ``e.threshold`` in ``e.direction``.

    Rising: from below the threshold to at-or-above it. Falling is the exact
    complement (at-or-above to below), so the two alternate.
    """
    values = t.signal(e.signal)
    return [float(x) for x in _crossings(t.times, values, e.threshold, e.direction)]


def crossing_times(t: Trace, signal: str, threshold: float) -> np.ndarray:
    """Sorted times of crossings of ``threshold`` in either direction."""
    values = t.signal(signal)
    both = np.concatenate((
        _crossings(t.times, values, threshold, RISING),
        _crossings(t.times, values, threshold, FALLING),
    ))
    return np.sort(both)

"""
Behavioral circuit simulation.

* ``LtiModel``: rational transfer function H(s), realized in controllable
  canonical state-space form, with AC (Bode) and fixed-step RK4 transient
  analyses.
* ``StaticMapModel``: a black-box input parameter -> observable map (LDO
  output vs load current, oscillator frequency vs supply) rendered as a
  trace so coverage artifacts apply to it.

Transient traces carry two signals, ``input`` and ``output``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
from scipy import signal

from core.bins import Bin, OutOfDomain
from core.trace import Trace
from utils.quantity import parse_quantity

logger = logging.getLogger(__name__)

INPUT = "input"
OUTPUT = "output"

# dt must stay below this fraction of 1/max|eig(A)|
STABILITY_FACTOR = 0.1


class SimulationError(Exception):
    """Base class for simulation failures."""


class StepTooLarge(SimulationError):
    def __init__(self, dt: float, dt_max: float):
        self.dt = dt
        self.dt_max = dt_max
        super().__init__(f"Time step {dt!r}s exceeds the RK4 stability guard {dt_max!r}s")


def _trim(coeffs: Sequence[float]) -> np.ndarray:
    c = np.asarray(coeffs, dtype=np.float64).ravel()
    nz = np.nonzero(c)[0]
    return c[: nz[-1] + 1] if nz.size else c[:1]


# ---------------------------------------------------------------------------
# Waveforms
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Sine:
    amplitude: float
    frequency: float
    phase: float = 0.0      # degrees
    offset: float = 0.0

    def __call__(self, t: np.ndarray) -> np.ndarray:
        return self.offset + self.amplitude * np.sin(2 * np.pi * self.frequency * t + np.radians(self.phase))


@dataclass(frozen=True)
class Step:
    amplitude: float
    delay: float = 0.0
    offset: float = 0.0

    def __call__(self, t: np.ndarray) -> np.ndarray:
        return self.offset + np.where(t >= self.delay, self.amplitude, 0.0)


@dataclass(frozen=True)
class Ramp:
    slope: float
    delay: float = 0.0
    offset: float = 0.0

    def __call__(self, t: np.ndarray) -> np.ndarray:
        return self.offset + self.slope * np.maximum(t - self.delay, 0.0)


@dataclass(frozen=True)
class Pwl:
    """Piecewise-linear source through ``(time, value)`` points, held flat outside."""

    points: tuple[tuple[float, float], ...]

    def __post_init__(self):
        pts = tuple((float(a), float(b)) for a, b in self.points)
        if not pts or any(b[0] <= a[0] for a, b in zip(pts, pts[1:])):
            raise SimulationError("PWL points need strictly increasing times")
        object.__setattr__(self, "points", pts)

    def __call__(self, t: np.ndarray) -> np.ndarray:
        times, values = zip(*self.points)
        return np.interp(t, times, values)


Waveform = Callable[[np.ndarray], np.ndarray]

_WAVEFORMS = {"sine": Sine, "step": Step, "ramp": Ramp}


def parse_stimulus(text: str) -> Waveform:
    """``sine:amplitude=1,frequency=728`` / ``step:amplitude=1`` / ``pwl:0=0,1e-3=1``."""
    kind, _, args = text.partition(":")
    kind = kind.strip().lower()
    pairs = []
    for item in filter(None, (a.strip() for a in args.split(","))):
        key, eq, value = item.partition("=")
        if not eq:
            raise SimulationError(f"Stimulus argument {item!r} is not key=value")
        pairs.append((key.strip(), value.strip()))
    try:
        if kind == "pwl":
            return Pwl(tuple((parse_quantity(k), parse_quantity(v)) for k, v in pairs))
        if kind not in _WAVEFORMS:
            raise SimulationError(f"Unknown stimulus kind {kind!r} (sine, step, ramp, pwl)")
        return _WAVEFORMS[kind](**{k: parse_quantity(v) for k, v in pairs})
    except (TypeError, ValueError) as exc:
        raise SimulationError(f"Bad stimulus {text!r}: {exc}") from None


# ---------------------------------------------------------------------------
# LTI models
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BodePlot:
    frequencies: np.ndarray
    gain_db: np.ndarray
    phase_deg: np.ndarray
    unstable: bool = False

    def __post_init__(self):
        if not (len(self.frequencies) == len(self.gain_db) == len(self.phase_deg)):
            raise SimulationError("Bode plot columns differ in length")
        if np.any(np.diff(self.frequencies) <= 0):
            raise SimulationError("Bode plot frequencies must be strictly ascending")

    def rows(self) -> list[dict[str, str]]:
        return [
            {"frequency_hz": repr(float(f)), "gain_db": repr(float(g)), "phase_deg": repr(float(p))}
            for f, g, p in zip(self.frequencies, self.gain_db, self.phase_deg)
        ]


class LtiModel:
    """H(s) = (b0 + b1 s + ... + bm s^m) / (a0 + a1 s + ... + an s^n), m <= n."""

    def __init__(self, numerator: Sequence[float], denominator: Sequence[float], label: str = ""):
        num = _trim(numerator)
        den = _trim(denominator)
        if den[-1] == 0:
            raise SimulationError("Denominator is identically zero")
        if num.size > den.size:
            raise SimulationError(
                f"Improper transfer function: numerator degree {num.size - 1} > denominator degree {den.size - 1}"
            )
        self.numerator = num
        self.denominator = den
        self.label = label
        self.order = den.size - 1
        if self.order == 0:
            self.A = np.zeros((0, 0))
            self.B = np.zeros((0, 1))
            self.C = np.zeros((1, 0))
            self.D = np.array([[num[0] / den[0]]])
        else:
            self.A, self.B, self.C, self.D = signal.tf2ss(num[::-1], den[::-1])

    def __repr__(self) -> str:
        return f"LtiModel({self.label or 'H(s)'}, order={self.order})"

    def poles(self) -> np.ndarray:
        if self.order == 0:
            return np.zeros(0, dtype=complex)
        return np.roots(self.denominator[::-1])

    @property
    def is_stable(self) -> bool:
        return bool(np.all(self.poles().real < 0))

    @property
    def max_step(self) -> float:
        """Largest dt accepted by :func:`transient`."""
        poles = self.poles()
        if poles.size == 0:
            return math.inf
        return STABILITY_FACTOR / float(np.max(np.abs(poles)))

    def settling_time(self, n_constants: float = 10.0) -> float:
        """``n_constants`` time constants of the slowest pole (0 for a static gain)."""
        poles = self.poles()
        if poles.size == 0:
            return 0.0
        slowest = float(np.min(np.abs(poles.real)))
        if slowest == 0 or not self.is_stable:
            return math.inf
        return n_constants / slowest

    def frequency_response(self, frequencies) -> np.ndarray:
        f = np.atleast_1d(np.asarray(frequencies, dtype=np.float64))
        _, h = signal.freqs(self.numerator[::-1], self.denominator[::-1], worN=2 * np.pi * f)
        return h

    def gain(self, frequency: float) -> float:
        return float(np.abs(self.frequency_response([frequency])[0]))


def ac_analysis(m: LtiModel, f_lo: float, f_hi: float, points_per_decade: int = 100) -> BodePlot:
    """Gain (dB) and phase (degrees) of ``m`` on a log-spaced grid over [f_lo, f_hi]."""
    if not (0 < f_lo < f_hi):
        raise SimulationError(f"Need 0 < f_lo < f_hi, got {f_lo!r}, {f_hi!r}")
    if points_per_decade < 1:
        raise SimulationError("points_per_decade must be >= 1")
    n = max(3, int(round(math.log10(f_hi / f_lo) * points_per_decade)) + 1)
    freqs = np.logspace(math.log10(f_lo), math.log10(f_hi), n)
    h = m.frequency_response(freqs)
    unstable = not m.is_stable
    if unstable:
        logger.warning("Model %s has poles with nonnegative real part; Bode plot is not a steady-state response", m)
    return BodePlot(
        frequencies=freqs,
        gain_db=20.0 * np.log10(np.abs(h)),
        phase_deg=np.degrees(np.unwrap(np.angle(h))),
        unstable=unstable,
    )


def rk4_propagator(A: np.ndarray, B: np.ndarray, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """One classical RK4 step of x' = Ax + Bu as x+ = Phi x + G [u(t), u(t+dt/2), u(t+dt)]."""
    n = A.shape[0]
    eye = np.eye(n)
    M = dt * A
    M2 = M @ M
    M3 = M2 @ M
    b = dt * B
    phi = eye + M + M2 / 2 + M3 / 6 + (M2 @ M2) / 24
    g0 = (eye + M + M2 / 2 + M3 / 4) @ b / 6
    gh = (4 * eye + 2 * M + M2 / 2) @ b / 6
    g1 = b / 6
    return phi, np.hstack((g0, gh, g1))


def _time_grid(dt: float, duration: float) -> np.ndarray:
    if not (dt > 0 and duration > 10 * dt):
        raise SimulationError(f"Need dt > 0 and duration > 10*dt, got dt={dt!r}, duration={duration!r}")
    n = int(round(duration / dt))
    return np.arange(n + 1) * dt


def transient(m: LtiModel, input: Waveform, dt: float, duration: float) -> Trace:
    """Fixed-step RK4 transient from zero initial state; columns ``input``, ``output``."""
    if dt > m.max_step:
        raise StepTooLarge(dt, m.max_step)
    times = _time_grid(dt, duration)
    u = np.asarray(input(times), dtype=np.float64)
    if m.order == 0:
        y = m.D[0, 0] * u
    else:
        phi, gamma = rk4_propagator(m.A, m.B, dt)
        stages = np.column_stack((u, input(times + dt / 2), input(times + dt)))
        d = np.hstack((m.D, np.zeros((1, 2))))
        _, y, _ = signal.dlsim((phi, gamma, m.C, d, dt), stages)
        y = np.asarray(y).ravel()
    logger.debug("Transient %s: %d steps of %gs", m, times.size - 1, dt)
    return Trace((INPUT, OUTPUT), times, np.column_stack((u, y)))


# ---------------------------------------------------------------------------
# Static-map models
# ---------------------------------------------------------------------------

def _ldo(p):
    v_nom, v_droop, i_knee, r_out = p["v_nominal"], p["v_droop"], p["i_knee"], p.get("r_out", 0.0)
    return lambda x: v_nom - v_droop * (1.0 - np.exp(-x / i_knee)) - r_out * x


def _power(p):
    offset, scale, ref, exp = p.get("offset", 0.0), p["scale"], p["reference"], p["exponent"]
    return lambda x: offset + scale * np.power(x / ref, exp)


def _forrester(p):
    scale, offset = p.get("scale", 1.0), p.get("offset", 0.0)
    return lambda x: scale * (6 * x - 2) ** 2 * np.sin(12 * x - 4) + offset


def _polynomial(p):
    coeffs = np.asarray(p["coefficients"], dtype=np.float64)
    return lambda x: np.polynomial.polynomial.polyval(x, coeffs)


def _piecewise_linear(p):
    xs, ys = zip(*p["points"])
    return lambda x: np.interp(x, xs, ys)


MAP_TYPES: dict[str, Callable[[Mapping], Callable]] = {
    "ldo": _ldo,
    "power": _power,
    "forrester": _forrester,
    "polynomial": _polynomial,
    "piecewise_linear": _piecewise_linear,
}

LEVEL = "level"
OSCILLATION = "oscillation"


@dataclass(frozen=True)
class StaticMapModel:
    """Input parameter x -> observable y = map(x) over a closed input domain.

    ``render`` picks how a transient shows y: ``level`` settles first-order
    from map(operating_point) to map(x); ``oscillation`` is a sinusoid of
    frequency map(x) around ``offset`` whose amplitude builds up first-order.
    """

    map_type: str
    params: Mapping[str, float]
    domain: Bin
    time_constant: float = 0.0
    render: str = LEVEL
    operating_point: Optional[float] = None
    amplitude: float = 1.0
    offset: float = 0.0
    label: str = ""
    _fn: Callable = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.map_type not in MAP_TYPES:
            raise SimulationError(f"Unknown map type {self.map_type!r} ({', '.join(MAP_TYPES)})")
        if self.render not in (LEVEL, OSCILLATION):
            raise SimulationError(f"Unknown render mode {self.render!r}")
        if self.time_constant < 0:
            raise SimulationError("time_constant must be >= 0")
        try:
            fn = MAP_TYPES[self.map_type](self.params)
        except KeyError as exc:
            raise SimulationError(f"Map '{self.map_type}' is missing parameter {exc}") from None
        object.__setattr__(self, "_fn", fn)
        if self.operating_point is not None and not self.domain.contains(self.operating_point):
            raise OutOfDomain(self.operating_point, self.domain)

    @property
    def resting_input(self) -> float:
        return self.domain.lower if self.operating_point is None else self.operating_point

    def __call__(self, x: float) -> float:
        return eval_static(self, x)


def eval_static(m: StaticMapModel, x: float) -> float:
    if not m.domain.contains(x):
        raise OutOfDomain(x, m.domain)
    return float(m._fn(float(x)))


def transient_static(m: StaticMapModel, x: float, dt: float, duration: float) -> Trace:
    """Trace of the observable after the input steps from the operating point to ``x``."""
    y = eval_static(m, x)
    times = _time_grid(dt, duration)
    tau = m.time_constant
    if m.render == LEVEL:
        if tau == 0:
            out = np.full(times.shape, y)
        else:
            y0 = eval_static(m, m.resting_input)
            out = y + (y0 - y) * np.exp(-times / tau)
    else:
        envelope = np.ones_like(times) if tau == 0 else 1.0 - np.exp(-times / tau)
        out = m.offset + m.amplitude * envelope * np.sin(2 * np.pi * y * times)
    return Trace((INPUT, OUTPUT), times, np.column_stack((np.full(times.shape, float(x)), out)))

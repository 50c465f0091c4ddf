"""Tests for core/circuit_sim.py"""
import math
import os
import subprocess
import sys

import numpy as np
import pytest
from scipy import signal
from scipy.linalg import expm

from core.bins import Bin, OutOfDomain
from core.circuit_sim import (
    INPUT, LEVEL, OSCILLATION, OUTPUT, LtiModel, Pwl, Ramp, Sine, SimulationError, StaticMapModel,
    Step, StepTooLarge, ac_analysis, eval_static, parse_stimulus, rk4_propagator, transient,
    transient_static,
)
from core.coverage_engine import range_coverage


def _peaking_lowpass(peak_hz=728.0, q=2.0):
    w0 = 2 * math.pi * peak_hz / math.sqrt(1 - 1 / (2 * q * q))
    return LtiModel([w0 * w0], [w0 * w0, w0 / q, 1.0], label="lpf")


LDO = StaticMapModel(
    map_type="ldo",
    params={"v_nominal": 1.825, "v_droop": 0.1, "i_knee": 0.05, "r_out": 0.02},
    domain=Bin.closed(0.0, 0.5),
    time_constant=2e-6,
    operating_point=0.0,
)


class TestWaveforms:
    def test_sine_phase_in_degrees(self):
        s = Sine(2.0, 1.0, phase=90.0, offset=1.0)
        assert s(np.array([0.0]))[0] == pytest.approx(3.0)

    def test_step_and_ramp(self):
        t = np.array([0.0, 1.0, 2.0])
        assert list(Step(1.0, delay=1.0)(t)) == [0.0, 1.0, 1.0]
        assert list(Ramp(2.0, delay=1.0)(t)) == [0.0, 0.0, 2.0]

    def test_pwl_holds_outside(self):
        p = Pwl(((0.0, 0.0), (1.0, 2.0)))
        assert list(p(np.array([-1.0, 0.5, 3.0]))) == [0.0, 1.0, 2.0]

    def test_pwl_needs_increasing_times(self):
        with pytest.raises(SimulationError):
            Pwl(((0.0, 0.0), (0.0, 1.0)))


class TestParseStimulus:
    def test_sine(self):
        assert parse_stimulus("sine:amplitude=1,frequency=728") == Sine(1.0, 728.0)

    def test_quantities(self):
        assert parse_stimulus("step:amplitude=500m,delay=1ms") == Step(0.5, 1e-3)

    def test_pwl(self):
        p = parse_stimulus("pwl:0=0,1m=1")
        assert p.points == ((0.0, 0.0), (1e-3, 1.0))

    @pytest.mark.parametrize("text", ["noise:amplitude=1", "sine:amplitude", "sine:bogus=1", "step:amplitude=x"])
    def test_rejects(self, text):
        with pytest.raises(SimulationError):
            parse_stimulus(text)


class TestLtiModel:
    def test_improper_rejected(self):
        with pytest.raises(SimulationError, match="Improper"):
            LtiModel([0.0, 0.0, 1.0], [1.0, 1.0])

    def test_zero_denominator(self):
        with pytest.raises(SimulationError):
            LtiModel([1.0], [0.0])

    def test_poles_and_stability(self):
        m = _peaking_lowpass()
        assert m.order == 2
        assert m.is_stable
        w0 = 2 * math.pi * 728 / math.sqrt(0.875)
        assert np.abs(m.poles()) == pytest.approx([w0, w0])

    def test_max_step(self):
        assert _peaking_lowpass().max_step == pytest.approx(2.045e-5, rel=1e-3)

    def test_settling_time(self):
        assert _peaking_lowpass().settling_time() == pytest.approx(10 / 1222.5, rel=1e-3)

    def test_unstable_never_settles(self):
        m = LtiModel([1.0], [-1.0, 1.0])
        assert not m.is_stable
        assert math.isinf(m.settling_time())

    def test_gain(self):
        m = LtiModel([1.0], [1.0, 1.0 / (2 * math.pi * 100)])
        assert m.gain(100.0) == pytest.approx(1 / math.sqrt(2))


class TestAcAnalysis:
    def test_grid(self):
        b = ac_analysis(_peaking_lowpass(), 10.0, 1e5, 100)
        assert len(b.frequencies) == 401
        assert b.frequencies[0] == pytest.approx(10.0)
        assert b.frequencies[-1] == pytest.approx(1e5)

    def test_peaking_lowpass(self):
        b = ac_analysis(_peaking_lowpass(), 10.0, 1e5, 100)
        i = int(np.argmax(b.gain_db))
        assert b.gain_db[i] == pytest.approx(6.30, abs=0.02)
        assert b.frequencies[i] == pytest.approx(728.0, rel=0.03)
        assert b.gain_db[0] == pytest.approx(0.0, abs=0.01)
        assert b.phase_deg[0] == pytest.approx(0.0, abs=1.0)
        assert b.phase_deg[-1] == pytest.approx(-180.0, abs=2.0)

    def test_phase_is_unwrapped(self):
        m = LtiModel([1.0], [1.0, 3e-3, 3e-6, 1e-9])
        b = ac_analysis(m, 1.0, 1e6, 50)
        assert np.all(np.abs(np.diff(b.phase_deg)) < 90)
        assert b.phase_deg[-1] == pytest.approx(-270.0, abs=3.0)

    def test_unstable_flagged(self):
        b = ac_analysis(LtiModel([1.0], [-1.0, 1.0]), 0.01, 100.0, 10)
        assert b.unstable

    def test_bad_band(self):
        with pytest.raises(SimulationError):
            ac_analysis(_peaking_lowpass(), 100.0, 10.0)

    def test_rows(self):
        rows = ac_analysis(_peaking_lowpass(), 10.0, 100.0, 2).rows()
        assert set(rows[0]) == {"frequency_hz", "gain_db", "phase_deg"}


class TestTransient:
    def test_rk4_propagator_matches_expm(self):
        A = np.array([[0.0, 1.0], [-4.0, -0.4]])
        B = np.array([[0.0], [1.0]])
        phi, gamma = rk4_propagator(A, B, 0.01)
        assert np.allclose(phi, expm(A * 0.01), atol=1e-8)
        assert gamma.shape == (2, 3)

    def test_first_order_step_response(self):
        tau = 1e-3
        m = LtiModel([1.0], [1.0, tau])
        tr = transient(m, Step(1.0), 1e-5, 5e-3)
        expected = 1.0 - np.exp(-tr.times / tau)
        assert np.max(np.abs(tr.signal(OUTPUT) - expected)) < 1e-6
        assert tr.signal_names == (INPUT, OUTPUT)

    def test_order_zero_is_a_gain(self):
        m = LtiModel([2.0], [1.0])
        tr = transient(m, Sine(1.0, 10.0), 1e-3, 0.1)
        assert np.allclose(tr.signal(OUTPUT), 2.0 * tr.signal(INPUT))

    def test_resonant_amplitude(self):
        m = _peaking_lowpass()
        tr = transient(m, Sine(1.0, 728.0), 1e-5, 50e-3)
        settled = tr.window(30e-3)
        expected = m.gain(728.0)
        assert expected == pytest.approx(2.0656, rel=1e-3)
        assert np.max(settled.signal(OUTPUT)) == pytest.approx(expected, rel=0.01)
        assert np.min(settled.signal(OUTPUT)) == pytest.approx(-expected, rel=0.01)

    def test_step_too_large(self):
        with pytest.raises(StepTooLarge):
            transient(_peaking_lowpass(), Step(1.0), 1e-4, 10e-3)

    def test_duration_too_short(self):
        with pytest.raises(SimulationError):
            transient(LtiModel([1.0], [1.0, 1e-3]), Step(1.0), 1e-5, 5e-5)

    def test_deterministic(self):
        m = _peaking_lowpass()
        a = transient(m, Sine(1.0, 500.0), 1e-5, 5e-3)
        b = transient(m, Sine(1.0, 500.0), 1e-5, 5e-3)
        assert a == b


class TestStaticMap:
    def test_ldo_values(self):
        assert LDO(0.0) == pytest.approx(1.825)
        assert LDO(0.12) == pytest.approx(1.73167, abs=1e-5)

    def test_ldo_is_monotone_decreasing(self):
        xs = np.linspace(0.0, 0.5, 51)
        ys = [eval_static(LDO, x) for x in xs]
        assert np.all(np.diff(ys) < 0)

    def test_out_of_domain(self):
        with pytest.raises(OutOfDomain):
            LDO(0.6)

    def test_forrester_minimum(self):
        m = StaticMapModel("forrester", {}, Bin.closed(0.0, 1.0))
        assert m(0.7572) == pytest.approx(-6.0207, abs=1e-3)

    def test_polynomial_and_piecewise_linear(self):
        poly = StaticMapModel("polynomial", {"coefficients": [1.0, 0.0, 2.0]}, Bin.closed(-1.0, 1.0))
        assert poly(0.5) == pytest.approx(1.5)
        pwl = StaticMapModel("piecewise_linear", {"points": [[0, 0], [1, 10]]}, Bin.closed(0.0, 1.0))
        assert pwl(0.25) == pytest.approx(2.5)

    def test_unknown_map(self):
        with pytest.raises(SimulationError):
            StaticMapModel("spline", {}, Bin.closed(0.0, 1.0))

    def test_missing_parameter(self):
        with pytest.raises(SimulationError, match="v_nominal"):
            StaticMapModel("ldo", {"v_droop": 0.1, "i_knee": 0.05}, Bin.closed(0.0, 1.0))

    def test_operating_point_outside_domain(self):
        with pytest.raises(OutOfDomain):
            StaticMapModel("forrester", {}, Bin.closed(0.0, 1.0), operating_point=2.0)

    def test_level_transient_settles(self):
        tr = transient_static(LDO, 0.12, 1e-6, 100e-6)
        out = tr.signal(OUTPUT)
        assert out[0] == pytest.approx(1.825)
        assert out[-1] == pytest.approx(LDO(0.12), abs=1e-9)
        assert np.all(tr.signal(INPUT) == 0.12)

    def test_instant_level(self):
        m = StaticMapModel("forrester", {}, Bin.closed(0.0, 1.0), render=LEVEL)
        tr = transient_static(m, 0.5, 1e-3, 20e-3)
        assert np.all(tr.signal(OUTPUT) == m(0.5))

    def test_oscillation_render(self):
        m = StaticMapModel("power", {"scale": 50.0, "reference": 1.2, "exponent": 2.2769},
                           Bin.closed(1.2, 3.3), render=OSCILLATION, amplitude=0.9, offset=0.9)
        tr = transient_static(m, 1.2, 50e-6, 0.2)
        out = tr.signal(OUTPUT)
        assert np.min(out) >= 0.0 - 1e-12
        assert np.max(out) <= 1.8 + 1e-12
        # 50 Hz for 0.2 s: 10 periods
        rising = np.count_nonzero((out[:-1] < 0.9) & (out[1:] >= 0.9))
        assert rising in (9, 10)


def _second_order_lowpass(f0, q):
    w0 = 2 * math.pi * f0
    return LtiModel([w0 * w0], [w0 * w0, w0 / q, 1.0], label=f"lpf_q{q}")


class TestAcAccuracy:
    def test_first_order_corner(self):
        b = ac_analysis(LtiModel([1.0], [1.0, 1.0]), 1 / (2 * math.pi), 10.0, 100)
        assert b.gain_db[0] == pytest.approx(-3.0103, abs=0.01)
        assert b.phase_deg[0] == pytest.approx(-45.0, abs=0.01)

    @pytest.mark.parametrize("q", [1.0, 2.0, 5.0, 10.0])
    def test_resonance_location_and_height(self, q):
        f0 = 1000.0
        # 1000 points per decade from 120 Hz to 12 kHz
        b = ac_analysis(_second_order_lowpass(f0, q), 120.0, 12000.0, 1000)
        step = math.log10(b.frequencies[1] / b.frequencies[0])
        assert step == pytest.approx(1e-3)

        i = int(np.argmax(b.gain_db))
        f_peak = f0 * math.sqrt(1 - 1 / (2 * q * q))
        assert abs(math.log10(b.frequencies[i] / f_peak)) <= step / 2 + 1e-12

        peak_db = 20 * math.log10(q / math.sqrt(1 - 1 / (4 * q * q)))
        assert b.gain_db[i] == pytest.approx(peak_db, abs=0.01)
        assert b.gain_db[i] <= peak_db + 1e-9

    def test_reproducible(self):
        a = ac_analysis(_second_order_lowpass(1000.0, 5.0), 10.0, 1e5, 50)
        b = ac_analysis(_second_order_lowpass(1000.0, 5.0), 10.0, 1e5, 50)
        assert np.array_equal(a.gain_db, b.gain_db)
        assert np.array_equal(a.phase_deg, b.phase_deg)


class TestRk4Convergence:
    @staticmethod
    def _step_error(dt):
        tr = transient(LtiModel([1.0], [1.0, 1.0]), Step(1.0), dt, 5.0)
        return float(np.max(np.abs(tr.signal(OUTPUT) - (1.0 - np.exp(-tr.times)))))

    def test_error_shrinks_fourth_order(self):
        coarse = self._step_error(0.05)
        fine = self._step_error(0.025)
        assert coarse > 1e-12
        assert 8.0 <= coarse / fine <= 32.0

    def test_analytic_step_at_five_seconds(self):
        tr = transient(LtiModel([1.0], [1.0, 1.0]), Step(1.0), 0.01, 10.0)
        i = int(round(5.0 / 0.01))
        assert tr.times[i] == pytest.approx(5.0)
        assert tr.signal(OUTPUT)[i] == pytest.approx(1 - math.exp(-5.0), abs=1e-4)


def _butterworth3(fc):
    b, a = signal.butter(3, 2 * math.pi * fc, analog=True)
    return LtiModel(b[::-1], a[::-1], label="butter3")


def _bandpass(f0, q):
    w0 = 2 * math.pi * f0
    return LtiModel([0.0, w0 / q], [w0 * w0, w0 / q, 1.0], label="bandpass")


class TestSteadyState:
    @pytest.mark.parametrize("model, frequency", [
        (LtiModel([1.0], [1.0, 1 / (2 * math.pi * 100)]), 100.0),
        (LtiModel([1.0], [1.0, 1 / (2 * math.pi * 100)]), 1000.0),
        (_second_order_lowpass(1000.0, 2.0), 935.4),
        (_second_order_lowpass(1000.0, 10.0), 200.0),
        (_bandpass(1000.0, 5.0), 1000.0),
        (_butterworth3(500.0), 500.0),
    ])
    def test_settled_amplitude_and_range(self, model, frequency):
        amplitude = 0.8
        settle = model.settling_time()
        dt = min(0.5 * model.max_step, 1 / (200 * frequency))
        tr = transient(model, Sine(amplitude, frequency), dt, settle + 5 / frequency)
        settled = tr.window(settle)
        expected = amplitude * model.gain(frequency)

        assert np.max(np.abs(settled.signal(OUTPUT))) == pytest.approx(expected, rel=0.02)
        r = range_coverage(settled, OUTPUT)
        assert r.lower == pytest.approx(-expected, rel=0.02)
        assert r.upper == pytest.approx(expected, rel=0.02)


class TestImports:
    def test_simulator_does_not_load_coverage_modules(self):
        root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
        code = (
            "import sys\n"
            "import core.circuit_sim\n"
            "loaded = [m for m in ('core.coverpoint_spec', 'core.coverage_space', 'core.coverage_engine')"
            " if m in sys.modules]\n"
            "assert not loaded, loaded\n"
        )
        result = subprocess.run([sys.executable, "-c", code], cwd=root, capture_output=True, text=True)
        assert result.returncode == 0, result.stderr

"""Shared fixtures for amscov tests"""
import os
import sys
import json

import numpy as np
import pytest

# Ensure the project root is on the path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from core.trace import Trace  # noqa: E402


@pytest.fixture
def tmp_dir(tmp_path):
    """Provide a clean temporary directory"""
    return tmp_path


@pytest.fixture
def ramp_trace():
    """output rises linearly 0 -> 1 over 1 s, sampled every 10 ms"""
    t = np.linspace(0.0, 1.0, 101)
    return Trace.from_arrays(t, {"output": t.copy()})


@pytest.fixture
def glitch_trace():
    """Signal sitting at 0.5 with a 1 ms spike to 1.9 and a 1 ms dip to -1.1.

    The glitches are far shorter than 10 ms, so the de-glitched range stays
    near the plateaus [-0.5:1.4] while the raw range spans [-1.1:1.9].
    """
    times = [0.0, 0.010, 0.0105, 0.011, 0.020, 0.030, 0.040, 0.0405, 0.041, 0.050, 0.060, 0.070]
    values = [0.5, 0.5, 1.9, 1.4, 1.4, 1.4, -0.5, -1.1, -0.5, -0.5, -0.5, 0.5]
    return Trace.from_arrays(times, {"output": values})


@pytest.fixture
def sine_trace():
    """input and output sines; output lags input by 1 ms (f = 50 Hz)"""
    t = np.linspace(0.0, 0.1, 10001)
    return Trace.from_arrays(t, {
        "input": np.sin(2 * np.pi * 50 * t),
        "output": np.sin(2 * np.pi * 50 * (t - 1e-3)),
    })


@pytest.fixture
def sample_trace_content():
    """A small two-signal trace CSV with a comment line"""
    return (
        "# generated: 2024-01-01 00:00:00\n"
        "time,input,output\n"
        "0.0,0.0,0.0\n"
        "0.001,1.0,0.5\n"
        "0.002,1.0,0.9\n"
        "0.003,0.0,0.7\n"
    )


@pytest.fixture
def sample_trace_file(tmp_path, sample_trace_content):
    """Write the sample trace to a temp file and return the path"""
    path = tmp_path / "trace.csv"
    path.write_text(sample_trace_content)
    return str(path)


@pytest.fixture
def sample_spec_doc():
    """A coverpoint spec with a range and a ddt coverpoint on 'output'"""
    return {
        "version": 1,
        "name": "sample",
        "coverpoints": [
            {
                "id": "out_range",
                "kind": "range",
                "signal": "output",
                "grid": {"granularity": 0.1, "domain": "[0:1]"},
                "illegal": ["[0.85:0.95]"],
            },
            {
                "id": "out_slope",
                "kind": "ddt",
                "signal": "output",
                "params": {"time_granularity": "1ms"},
                "grid": {"granularity": 100, "domain": "[-1000:1000]"},
            },
        ],
    }


@pytest.fixture
def sample_spec_file(tmp_path, sample_spec_doc):
    """Write the sample spec to a temp file and return the path"""
    path = tmp_path / "spec.json"
    path.write_text(json.dumps(sample_spec_doc))
    return str(path)


@pytest.fixture
def sample_config(tmp_path):
    """Write a sample amscov.json and return its path"""
    config = {
        "database_path": "db/coverage.amsdb",
        "output_dir": "runs",
        "seed": 7,
        "log_level": "info",
        "bo_candidates": 256,
    }
    config_path = tmp_path / "amscov.json"
    config_path.write_text(json.dumps(config))
    return str(config_path)

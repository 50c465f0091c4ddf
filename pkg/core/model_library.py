"""
Model configuration files and the bundled model library.

LTI config::

    {"name": "lpf_728", "kind": "lti", "form": "second_order_lowpass",
     "peak_frequency": 728, "q": 2, "gain": 1}

Static-map config::

    {"name": "ldo", "kind": "static", "map": {"type": "ldo", ...},
     "domain": "[0:0.5]", "time_constant": "2us", "render": "level",
     "transient": {"dt": "1us", "duration": "500us"}}

Coefficients are listed in ascending powers of s.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Union

from core.bins import BinError, parse_bin
from core.circuit_sim import (
    LEVEL, LtiModel, SimulationError, StaticMapModel, Waveform, transient, transient_static,
)
from core.trace import Trace
from utils.quantity import parse_quantity

logger = logging.getLogger(__name__)

MODELS_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "resources", "models")

_LTI_KEYS = {"name", "kind", "form", "description", "units", "transient",
             "numerator", "denominator", "fc", "f0", "peak_frequency", "q", "gain",
             "dc_gain", "f1", "f2"}
_STATIC_KEYS = {"name", "kind", "description", "units", "transient", "map", "domain",
                "time_constant", "render", "operating_point", "amplitude", "offset"}
_TRANSIENT_KEYS = {"dt", "duration"}


class ModelConfigError(Exception):
    """Raised when a model config cannot be loaded."""

    def __init__(self, message: str, path: Optional[str] = None):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


@dataclass(frozen=True)
class ModelConfig:
    """A loaded model plus its declared transient defaults."""

    name: str
    model: Union[LtiModel, StaticMapModel]
    description: str = ""
    dt: Optional[float] = None
    duration: Optional[float] = None
    units: dict = field(default_factory=dict)

    @property
    def is_static(self) -> bool:
        return isinstance(self.model, StaticMapModel)


def _q(doc: dict, key: str, default: Any = None) -> float:
    if key not in doc:
        if default is None:
            raise ModelConfigError(f"missing '{key}'")
        return default
    try:
        return parse_quantity(doc[key])
    except ValueError as exc:
        raise ModelConfigError(f"'{key}': {exc}") from None


def _w(f: float) -> float:
    return 2 * math.pi * f


def _first_order_lowpass(doc):
    wc, g = _w(_q(doc, "fc")), _q(doc, "gain", 1.0)
    return [g * wc], [wc, 1.0]


def _second_order_lowpass(doc):
    q, g = _q(doc, "q"), _q(doc, "gain", 1.0)
    if "peak_frequency" in doc:
        # resonant peak sits at f0*sqrt(1 - 1/(2q^2)), which needs q > 1/sqrt(2)
        if q <= 1 / math.sqrt(2):
            raise ModelConfigError("peak_frequency needs q > 0.7071 (no resonant peak otherwise)")
        f0 = _q(doc, "peak_frequency") / math.sqrt(1 - 1 / (2 * q * q))
    else:
        f0 = _q(doc, "f0")
    w0 = _w(f0)
    return [g * w0 * w0], [w0 * w0, w0 / q, 1.0]


def _bandpass(doc):
    w0, q, g = _w(_q(doc, "f0")), _q(doc, "q"), _q(doc, "gain", 1.0)
    return [0.0, g * w0 / q], [w0 * w0, w0 / q, 1.0]


def _two_pole_follower(doc):
    # unity feedback around A0 / ((1 + s/w1)(1 + s/w2))
    a0, w1, w2 = _q(doc, "dc_gain"), _w(_q(doc, "f1")), _w(_q(doc, "f2"))
    return [a0 * w1 * w2], [w1 * w2 * (1 + a0), w1 + w2, 1.0]


def _coefficients(doc):
    try:
        return [float(c) for c in doc["numerator"]], [float(c) for c in doc["denominator"]]
    except KeyError as exc:
        raise ModelConfigError(f"missing {exc}") from None


LTI_FORMS: dict[str, Callable[[dict], tuple[list, list]]] = {
    "coefficients": _coefficients,
    "first_order_lowpass": _first_order_lowpass,
    "second_order_lowpass": _second_order_lowpass,
    "bandpass": _bandpass,
    "two_pole_follower": _two_pole_follower,
}


def _check_keys(doc: dict, allowed: set, where: str):
    unknown = sorted(set(doc) - allowed)
    if unknown:
        raise ModelConfigError(f"unknown key(s) {unknown} in {where}")


def _build_lti(doc: dict, name: str) -> LtiModel:
    _check_keys(doc, _LTI_KEYS, "lti model")
    form = doc.get("form", "coefficients")
    if form not in LTI_FORMS:
        raise ModelConfigError(f"unknown LTI form {form!r} ({', '.join(LTI_FORMS)})")
    num, den = LTI_FORMS[form](doc)
    return LtiModel(num, den, label=name)


def _build_static(doc: dict, name: str) -> StaticMapModel:
    _check_keys(doc, _STATIC_KEYS, "static model")
    raw_map = dict(doc.get("map") or {})
    map_type = raw_map.pop("type", None)
    if not map_type:
        raise ModelConfigError("static model needs map.type")
    params = {}
    for key, value in raw_map.items():
        params[key] = value if isinstance(value, list) else _q(raw_map, key)
    try:
        domain = parse_bin(doc.get("domain", ""))
    except BinError as exc:
        raise ModelConfigError(f"domain: {exc}") from None
    op = doc.get("operating_point")
    return StaticMapModel(
        map_type=map_type,
        params=params,
        domain=domain,
        time_constant=_q(doc, "time_constant", 0.0),
        render=doc.get("render", LEVEL),
        operating_point=None if op is None else _q(doc, "operating_point"),
        amplitude=_q(doc, "amplitude", 1.0),
        offset=_q(doc, "offset", 0.0),
        label=name,
    )


def build_model(doc: dict, path: Optional[str] = None) -> ModelConfig:
    if not isinstance(doc, dict):
        raise ModelConfigError("model config must be a JSON object", path)
    name = str(doc.get("name") or os.path.splitext(os.path.basename(path or "model"))[0])
    try:
        kind = doc.get("kind")
        if kind == "lti":
            model = _build_lti(doc, name)
        elif kind == "static":
            model = _build_static(doc, name)
        else:
            raise ModelConfigError(f"kind must be 'lti' or 'static', got {kind!r}")
        tr = doc.get("transient") or {}
        _check_keys(tr, _TRANSIENT_KEYS, "transient")
        dt = _q(tr, "dt") if "dt" in tr else None
        duration = _q(tr, "duration") if "duration" in tr else None
    except ModelConfigError as exc:
        raise ModelConfigError(str(exc), path) from None
    except (SimulationError, BinError) as exc:
        raise ModelConfigError(str(exc), path) from exc
    return ModelConfig(name, model, str(doc.get("description", "")), dt, duration, dict(doc.get("units") or {}))


def list_bundled_models() -> list[str]:
    if not os.path.isdir(MODELS_DIR):
        return []
    return sorted(os.path.splitext(f)[0] for f in os.listdir(MODELS_DIR) if f.endswith(".json"))


def resolve_model_path(path_or_name: str) -> str:
    if os.path.exists(path_or_name):
        return path_or_name
    bundled = os.path.join(MODELS_DIR, f"{path_or_name}.json")
    if os.path.exists(bundled):
        return bundled
    raise ModelConfigError(
        f"No model file or bundled model named '{path_or_name}' (bundled: {', '.join(list_bundled_models())})"
    )


def load_model(path_or_name: str) -> ModelConfig:
    """Load a model config file, or a bundled model by name."""
    path = resolve_model_path(path_or_name)
    try:
        with open(path, "r", encoding="utf-8") as handle:
            doc = json.load(handle)
    except json.JSONDecodeError as exc:
        raise ModelConfigError(f"Invalid JSON: {exc}", path) from None
    config = build_model(doc, path)
    logger.info("Loaded model %s from %s", config.name, path)
    return config


def simulate(config: ModelConfig, x: Optional[float] = None, stimulus: Optional[Waveform] = None,
             dt: Optional[float] = None, duration: Optional[float] = None) -> Trace:
    """One transient of ``config``: static models take ``x``, LTI models a ``stimulus``."""
    dt = dt if dt is not None else config.dt
    duration = duration if duration is not None else config.duration
    if dt is None or duration is None:
        raise ModelConfigError(f"Model '{config.name}' declares no transient dt/duration; pass them explicitly")
    if config.is_static:
        if x is None:
            raise SimulationError(f"Static model '{config.name}' needs an input value")
        return transient_static(config.model, x, dt, duration)
    if stimulus is None:
        raise SimulationError(f"LTI model '{config.name}' needs a stimulus")
    return transient(config.model, stimulus, dt, duration)


def make_simulator(config: ModelConfig, dt: Optional[float] = None,
                   duration: Optional[float] = None) -> Callable[[Any], Trace]:
    """x -> Trace binding of a static model, as used by the optimizer."""
    if not config.is_static:
        raise ModelConfigError(f"Model '{config.name}' is not a static map; optimization needs one")

    def run(x) -> Trace:
        value = float(x[0]) if hasattr(x, "__len__") else float(x)
        return simulate(config, x=value, dt=dt, duration=duration)

    return run

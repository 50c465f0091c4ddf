"""
SPICE-style quantity parsing shared by the coverpoint file loader, the model
library and the waveform parser.

Quantities are SI numbers or strings with a scale suffix
(f p n u m k meg g t) and an optional unit: ``"5us"``, ``"10mV"``,
``"2.5meg"``.
"""

import re
from typing import Any

_SCALE = {
    "f": 1e-15, "p": 1e-12, "n": 1e-9, "u": 1e-6, "m": 1e-3,
    "k": 1e3, "meg": 1e6, "g": 1e9, "t": 1e12,
}
_QUANTITY_RE = re.compile(
    r"^\s*([-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)\s*(meg|[fpnumkgt])?([a-z]*)\s*$",
    re.IGNORECASE,
)


def parse_quantity(value: Any) -> float:
    """``"5us"`` -> 5e-6, ``"10mV"`` -> 0.01, ``"2.5meg"`` -> 2.5e6, ``3`` -> 3.0."""
    if isinstance(value, bool):
        raise ValueError(f"Expected a quantity, got boolean {value!r}")
    if isinstance(value, (int, float)):
        return float(value)
    if not isinstance(value, str):
        raise ValueError(f"Expected a quantity, got {type(value).__name__}")
    match = _QUANTITY_RE.match(value)
    if not match:
        raise ValueError(f"Unparseable quantity {value!r}")
    number, suffix, _unit = match.groups()
    return float(number) * (_SCALE[suffix.lower()] if suffix else 1.0)

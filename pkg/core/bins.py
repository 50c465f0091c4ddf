"""
Bins: real intervals with open/closed boundaries, canonical bin sets, and
the fixed-granularity grids that coverage is accumulated on.

Boundaries are compared through small ``(value, tag)`` keys so closure is
handled by tuple ordering instead of special cases:

* lower key: ``(lower, 0)`` when closed, ``(lower, 1)`` when open
* upper key: ``(upper, 0)`` when closed, ``(upper, -1)`` when open
* a point ``x`` is ``(x, 0)``
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

logger = logging.getLogger(__name__)

_NUMBER = r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?"
_BIN_RE = re.compile(
    rf"^\s*([\[(])\s*({_NUMBER})\s*([:,])\s*({_NUMBER})\s*([\])])\s*$"
)

Key = tuple[float, int]


class BinError(Exception):
    """Raised for invalid (empty, non-finite, reversed) bins."""


class BinParseError(BinError):
    """Raised when bin text does not follow the ``[a:b]`` syntax."""

    def __init__(self, text: str, reason: str):
        self.text = text
        super().__init__(f"Cannot parse bin {text!r}: {reason}")


class OutOfDomain(BinError):
    """Raised when a value falls outside a grid or model domain."""

    def __init__(self, value: float, domain: "Bin"):
        self.value = value
        self.domain = domain
        super().__init__(f"{value!r} is outside domain {domain}")


def _succ(upper_key: Key) -> Key:
    """Lower key of the first point strictly after an upper boundary."""
    value, tag = upper_key
    return (value, 1) if tag == 0 else (value, 0)


def _pred(lower_key: Key) -> Key:
    """Upper key of the last point strictly before a lower boundary."""
    value, tag = lower_key
    return (value, -1) if tag == 0 else (value, 0)


@dataclass(frozen=True)
class Bin:
    """A nonempty convex subset of the reals with finite boundaries."""

    lower: float
    upper: float
    lower_closed: bool = True
    upper_closed: bool = True

    def __post_init__(self):
        lo, hi = float(self.lower), float(self.upper)
        if not (math.isfinite(lo) and math.isfinite(hi)):
            raise BinError(f"Bin boundaries must be finite reals, got {lo!r}, {hi!r}")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        if self.lower_key > self.upper_key:
            raise BinError(f"Empty bin {self}")

    # ---- construction -------------------------------------------------

    @classmethod
    def point(cls, x: float) -> "Bin":
        return cls(x, x, True, True)

    @classmethod
    def closed(cls, lower: float, upper: float) -> "Bin":
        return cls(lower, upper, True, True)

    @classmethod
    def from_keys(cls, lower_key: Key, upper_key: Key) -> "Bin | None":
        """Build a bin from boundary keys, or ``None`` if the keys describe an empty set."""
        if lower_key > upper_key:
            return None
        return cls(lower_key[0], upper_key[0], lower_key[1] == 0, upper_key[1] == 0)

    @staticmethod
    def hull(bins: Iterable["Bin"]) -> "Bin":
        bins = list(bins)
        if not bins:
            raise BinError("Hull of an empty collection is undefined")
        lo = min(b.lower_key for b in bins)
        hi = max(b.upper_key for b in bins)
        return Bin(lo[0], hi[0], lo[1] == 0, hi[1] == 0)

    # ---- keys and measures --------------------------------------------

    @property
    def lower_key(self) -> Key:
        return (self.lower, 0 if self.lower_closed else 1)

    @property
    def upper_key(self) -> Key:
        return (self.upper, 0 if self.upper_closed else -1)

    @property
    def length(self) -> float:
        return self.upper - self.lower

    @property
    def midpoint(self) -> float:
        return 0.5 * (self.lower + self.upper)

    @property
    def is_degenerate(self) -> bool:
        return self.lower == self.upper

    # ---- predicates -----------------------------------------------------

    def contains(self, x: float) -> bool:
        return self.lower_key <= (x, 0) <= self.upper_key

    def __contains__(self, x: float) -> bool:
        return self.contains(x)

    def contains_bin(self, other: "Bin") -> bool:
        return self.lower_key <= other.lower_key and other.upper_key <= self.upper_key

    def intersection(self, other: "Bin") -> "Bin | None":
        return Bin.from_keys(
            max(self.lower_key, other.lower_key),
            min(self.upper_key, other.upper_key),
        )

    def intersects(self, other: "Bin") -> bool:
        return max(self.lower_key, other.lower_key) <= min(self.upper_key, other.upper_key)

    def clip(self, x: float) -> float:
        """Nearest value to ``x`` inside the closure of the bin."""
        return min(max(x, self.lower), self.upper)

    def __str__(self) -> str:
        return format_bin(self)


def contains(b: Bin, x: float) -> bool:
    """True iff ``x`` lies within ``b`` respecting boundary closure."""
    return b.contains(x)


def parse_bin(text: str) -> Bin:
    """Parse ``[a:b]``, ``(a:b)``, ``[a:b)`` or ``(a:b]``.

    The comma separator (``[a,b)``) is accepted as well; it appears in some
    hand-written target files but the colon form is canonical.
    """
    match = _BIN_RE.match(text or "")
    if not match:
        raise BinParseError(text, "expected [a:b], (a:b), [a:b) or (a:b]")
    open_br, lo, sep, hi, close_br = match.groups()
    if sep == ",":
        logger.debug("Non-canonical comma separator in bin %r", text)
    try:
        return Bin(float(lo), float(hi), open_br == "[", close_br == "]")
    except BinError as exc:
        raise BinParseError(text, str(exc)) from exc


def format_bin(b: Bin) -> str:
    left = "[" if b.lower_closed else "("
    right = "]" if b.upper_closed else ")"
    return f"{left}{b.lower!r}:{b.upper!r}{right}"


def _normalize(bins: Iterable[Bin]) -> tuple[Bin, ...]:
    ordered = sorted(bins, key=lambda b: (b.lower_key, b.upper_key))
    merged: list[tuple[Key, Key]] = []
    for b in ordered:
        if merged and b.lower_key <= _succ(merged[-1][1]):
            lo, hi = merged[-1]
            merged[-1] = (lo, max(hi, b.upper_key))
        else:
            merged.append((b.lower_key, b.upper_key))
    return tuple(Bin.from_keys(lo, hi) for lo, hi in merged)


class BinSet:
    """A finite union of bins held in canonical form (disjoint, sorted, merged)."""

    __slots__ = ("_bins",)

    def __init__(self, bins: Iterable[Bin] = ()):
        self._bins = _normalize(bins)

    @classmethod
    def parse(cls, texts: Iterable[str]) -> "BinSet":
        return cls(parse_bin(t) for t in texts)

    @property
    def bins(self) -> tuple[Bin, ...]:
        return self._bins

    @property
    def is_empty(self) -> bool:
        return not self._bins

    def __iter__(self) -> Iterator[Bin]:
        return iter(self._bins)

    def __len__(self) -> int:
        return len(self._bins)

    def __bool__(self) -> bool:
        return bool(self._bins)

    def __eq__(self, other) -> bool:
        if not isinstance(other, BinSet):
            return NotImplemented
        return self._bins == other._bins

    def __hash__(self) -> int:
        return hash(self._bins)

    def __repr__(self) -> str:
        return f"BinSet({self.to_strings()})"

    def to_strings(self) -> list[str]:
        return [format_bin(b) for b in self._bins]

    def contains(self, x: float) -> bool:
        return any(b.contains(x) for b in self._bins)

    def measure(self) -> float:
        return float(sum(b.length for b in self._bins))

    def hull(self) -> Bin:
        return Bin.hull(self._bins)

    def normalized(self) -> "BinSet":
        return BinSet(self._bins)

    def union(self, other: "BinSet") -> "BinSet":
        return BinSet((*self._bins, *other._bins))

    def intersect(self, other: "BinSet") -> "BinSet":
        out: list[Bin] = []
        i = j = 0
        a, b = self._bins, other._bins
        while i < len(a) and j < len(b):
            piece = a[i].intersection(b[j])
            if piece is not None:
                out.append(piece)
            if a[i].upper_key < b[j].upper_key:
                i += 1
            else:
                j += 1
        return BinSet(out)

    def difference(self, other: "BinSet") -> "BinSet":
        out: list[Bin] = []
        for a in self._bins:
            pieces = [a]
            for cut in other._bins:
                if cut.lower_key > a.upper_key:
                    break
                next_pieces: list[Bin] = []
                for p in pieces:
                    if not p.intersects(cut):
                        next_pieces.append(p)
                        continue
                    left = Bin.from_keys(p.lower_key, min(p.upper_key, _pred(cut.lower_key)))
                    right = Bin.from_keys(max(p.lower_key, _succ(cut.upper_key)), p.upper_key)
                    next_pieces.extend(x for x in (left, right) if x is not None)
                pieces = next_pieces
            out.extend(pieces)
        return BinSet(out)

    __or__ = union
    __and__ = intersect
    __sub__ = difference


def set_union(a: BinSet, b: BinSet) -> BinSet:
    return a.union(b)


def set_difference(a: BinSet, b: BinSet) -> BinSet:
    return a.difference(b)


def set_intersect(a: BinSet, b: BinSet) -> BinSet:
    return a.intersect(b)


@dataclass(frozen=True)
class BinGrid:
    """Fixed-granularity partition of ``domain``.

    Cells are ``[origin + i*g, origin + (i+1)*g)`` for any integer ``i``
    (negative when the origin sits inside or above the domain), clipped to
    the domain; the last cell takes the domain's upper closure so every
    domain point maps to exactly one cell.
    """

    origin: float
    granularity: float
    domain: Bin

    def __post_init__(self):
        if not (math.isfinite(self.granularity) and self.granularity > 0):
            raise BinError(f"Grid granularity must be > 0, got {self.granularity!r}")
        if not math.isfinite(self.origin):
            raise BinError(f"Grid origin must be finite, got {self.origin!r}")

    @classmethod
    def over(cls, domain: Bin, granularity: float, origin: float | None = None) -> "BinGrid":
        return cls(domain.lower if origin is None else float(origin), float(granularity), domain)

    def _raw_cell(self, i: int) -> tuple[float, float]:
        return self.origin + i * self.granularity, self.origin + (i + 1) * self.granularity

    def _locate(self, x: float) -> int:
        i = int(math.floor((x - self.origin) / self.granularity))
        # the rounded quotient can land one cell off
        lo, hi = self._raw_cell(i)
        if x < lo:
            return i - 1
        if x >= hi:
            return i + 1
        return i

    @property
    def first_index(self) -> int:
        return self._locate(self.domain.lower)

    @property
    def last_index(self) -> int:
        first = self.first_index
        i = self._locate(self.domain.upper)
        if self._raw_cell(i)[0] >= self.domain.upper:
            i -= 1
        return max(i, first)

    @property
    def n_cells(self) -> int:
        return self.last_index - self.first_index + 1

    def _clamp(self, i: int) -> int:
        return min(max(i, self.first_index), self.last_index)

    def cell(self, i: int) -> Bin:
        lo, hi = self._raw_cell(i)
        lo_key = max((lo, 0), self.domain.lower_key)
        if i == self.last_index:
            hi_key = self.domain.upper_key
        else:
            hi_key = min((hi, -1), self.domain.upper_key)
        cell = Bin.from_keys(lo_key, hi_key)
        if cell is None:
            raise BinError(f"Grid cell {i} is empty")
        return cell

    def cells(self) -> list[Bin]:
        return [self.cell(i) for i in range(self.first_index, self.last_index + 1)]

    def quantize(self, x: float) -> Bin:
        """Return the unique cell containing ``x``."""
        if not self.domain.contains(x):
            raise OutOfDomain(x, self.domain)
        return self.cell(self._clamp(self._locate(x)))

    def cells_covering(self, b: Bin) -> tuple[Bin, ...]:
        """All cells intersecting ``b``, in ascending order (empty if ``b`` misses the domain)."""
        clipped = b.intersection(self.domain)
        if clipped is None:
            return ()
        i0 = self._clamp(self._locate(clipped.lower) - 1)
        i1 = self._clamp(self._locate(clipped.upper) + 1)
        return tuple(c for c in (self.cell(i) for i in range(i0, i1 + 1)) if c.intersects(clipped))


def quantize(g: BinGrid, x: float) -> Bin:
    return g.quantize(x)


def as_binset(bins: Sequence[Bin] | BinSet) -> BinSet:
    return bins if isinstance(bins, BinSet) else BinSet(bins)

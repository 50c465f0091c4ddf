"""
Coverage accounting across tests: target bins, the accumulated covered
space per coverpoint, gap and bug reporting, and the on-disk database.

Database file layout (UTF-8, one item per line)::

    AMSCOV-DB 1
    {"record": "coverpoint", "id": ..., "covered": [...], ...}
    {"record": "test", "test_id": ..., ...}
    sha256 <hex digest of every preceding byte>
"""

from __future__ import annotations

import copy
import json
import logging
import os
import threading
from dataclasses import dataclass, field
from datetime import datetime
from typing import Any, Iterable, Iterator, Mapping, Optional, Sequence

from core.bins import Bin, BinGrid, BinSet, format_bin, parse_bin, BinError
from core.coverage_engine import CoverageResult
from utils.export_manager import ExportError, write_atomic
from utils.hash_utils import HashVerificationError, verify_sha256, sha256_bytes

logger = logging.getLogger(__name__)

DB_MAGIC = "AMSCOV-DB"
DB_VERSION = 1


class CoverageSpaceError(Exception):
    """Base class for coverage database problems."""


class UnknownCoverPoint(CoverageSpaceError):
    def __init__(self, coverpoint_id: str):
        self.coverpoint_id = coverpoint_id
        super().__init__(f"Coverpoint '{coverpoint_id}' is not registered in the database")


class InvalidTarget(CoverageSpaceError):
    """Legal and illegal bins overlap or stray outside the grid domain."""


class DatabaseIOError(CoverageSpaceError, OSError):
    pass


class CorruptDatabase(CoverageSpaceError):
    def __init__(self, path: str, reason: str):
        self.path = path
        super().__init__(f"Corrupt coverage database {path}: {reason}")


@dataclass(frozen=True)
class CoverpointTarget:
    """Target bins of one coverpoint: its grid plus legal and illegal regions."""

    grid: BinGrid
    legal: BinSet
    illegal: BinSet = field(default_factory=BinSet)

    def __post_init__(self):
        domain = BinSet([self.grid.domain])
        if self.legal.intersect(self.illegal):
            raise InvalidTarget(f"Legal and illegal bins overlap: {self.legal.intersect(self.illegal)!r}")
        for name, region in (("legal", self.legal), ("illegal", self.illegal)):
            if region.difference(domain):
                raise InvalidTarget(f"{name} bins {region!r} extend outside grid domain {self.grid.domain}")

    @classmethod
    def over(cls, grid: BinGrid, legal: Optional[BinSet] = None, illegal: Optional[BinSet] = None) -> "CoverpointTarget":
        """Target whose legal region defaults to the grid domain minus the illegal bins."""
        illegal = illegal or BinSet()
        if legal is None:
            legal = BinSet([grid.domain]).difference(illegal)
        return cls(grid, legal, illegal)


@dataclass(frozen=True)
class TargetSpec:
    targets: Mapping[str, CoverpointTarget]

    def __getitem__(self, coverpoint_id: str) -> CoverpointTarget:
        try:
            return self.targets[coverpoint_id]
        except KeyError:
            raise UnknownCoverPoint(coverpoint_id) from None

    def __contains__(self, coverpoint_id: str) -> bool:
        return coverpoint_id in self.targets

    def __iter__(self) -> Iterator[str]:
        return iter(self.targets)

    @property
    def ids(self) -> list[str]:
        return list(self.targets)


@dataclass(frozen=True)
class CoverpointGap:
    coverpoint_id: str
    legal: BinSet
    covered: BinSet
    gap: BinSet
    gap_fraction: float
    bug_hits: BinSet
    bug_tests: tuple[str, ...]
    untargeted: BinSet

    @property
    def covered_fraction(self) -> float:
        return 1.0 - self.gap_fraction

    @property
    def has_bug(self) -> bool:
        return not self.bug_hits.is_empty


@dataclass(frozen=True)
class GapReport:
    entries: Mapping[str, CoverpointGap]

    def __getitem__(self, coverpoint_id: str) -> CoverpointGap:
        return self.entries[coverpoint_id]

    def __iter__(self) -> Iterator[CoverpointGap]:
        return iter(self.entries.values())

    @property
    def has_bugs(self) -> bool:
        return any(e.has_bug for e in self.entries.values())


@dataclass
class _Record:
    covered: BinSet = field(default_factory=BinSet)
    hit_counts: dict[str, int] = field(default_factory=dict)
    untargeted: BinSet = field(default_factory=BinSet)


def _gap_fraction(gap: BinSet, legal: BinSet) -> float:
    total = legal.measure()
    if total == 0:
        # legal region is a set of points: fraction of the points still open
        return 1.0 if not gap.is_empty else 0.0
    return gap.measure() / total


class CoverageDatabase:
    """
    Covered bins per coverpoint accumulated over tests.

    Mutations take an instance lock; each ``accumulate`` is all-or-nothing.
    """

    def __init__(self, coverpoint_ids: Iterable[str] = ()):
        self._lock = threading.Lock()
        self._records: dict[str, _Record] = {}
        self._test_log: list[dict[str, Any]] = []
        self.register(coverpoint_ids)

    # ---- registration / access ----------------------------------------

    def register(self, coverpoint_ids: Iterable[str]) -> None:
        """Add coverpoints; already-known ids keep their coverage."""
        with self._lock:
            for cp_id in coverpoint_ids:
                self._records.setdefault(cp_id, _Record())

    @property
    def coverpoint_ids(self) -> list[str]:
        return list(self._records)

    @property
    def test_log(self) -> list[dict[str, Any]]:
        return copy.deepcopy(self._test_log)

    def _record(self, coverpoint_id: str) -> _Record:
        try:
            return self._records[coverpoint_id]
        except KeyError:
            raise UnknownCoverPoint(coverpoint_id) from None

    def covered(self, coverpoint_id: str) -> BinSet:
        return self._record(coverpoint_id).covered

    def hit_count(self, coverpoint_id: str, cell: Bin) -> int:
        return self._record(coverpoint_id).hit_counts.get(format_bin(cell), 0)

    def untargeted(self, coverpoint_id: str) -> BinSet:
        return self._record(coverpoint_id).untargeted

    # ---- accumulation ---------------------------------------------------

    def accumulate(
        self,
        test_id: str,
        results: Sequence[CoverageResult],
        inputs: Optional[Mapping[str, Any]] = None,
    ) -> dict[str, BinSet]:
        """Fold one test's results in; returns the newly covered bins per coverpoint."""
        with self._lock:
            for r in results:
                self._record(r.coverpoint_id)

            added: dict[str, BinSet] = {}
            hits: dict[str, list[str]] = {}
            for r in results:
                rec = self._records[r.coverpoint_id]
                new = r.covered.difference(rec.covered)
                rec.covered = rec.covered.union(r.covered)
                for cell in r.cells:
                    key = format_bin(cell)
                    rec.hit_counts[key] = rec.hit_counts.get(key, 0) + 1
                if r.untargeted:
                    rec.untargeted = rec.untargeted.union(r.untargeted)
                added[r.coverpoint_id] = added.get(r.coverpoint_id, BinSet()).union(new)
                hits.setdefault(r.coverpoint_id, []).extend(format_bin(c) for c in r.cells)

            self._test_log.append({
                "test_id": str(test_id),
                "timestamp": datetime.now().isoformat(timespec="seconds"),
                "inputs": dict(inputs or {}),
                "cells_hit": hits,
                "cells_added": {k: v.to_strings() for k, v in added.items()},
            })
        logger.info(
            "Accumulated test %s: %d coverpoint(s), %d new bin(s)",
            test_id, len(results), sum(len(v) for v in added.values()),
        )
        return added

    def replay(self) -> dict[str, BinSet]:
        """Covered sets rebuilt from the test log alone."""
        rebuilt = {cp_id: BinSet() for cp_id in self._records}
        for entry in self._test_log:
            for cp_id, cells in entry["cells_hit"].items():
                rebuilt[cp_id] = rebuilt.get(cp_id, BinSet()).union(BinSet.parse(cells))
        return rebuilt

    # ---- reporting -----------------------------------------------------

    def gap_report(self, spec: TargetSpec) -> GapReport:
        with self._lock:
            entries = {}
            for cp_id in spec:
                target = spec[cp_id]
                rec = self._records.get(cp_id, _Record())
                gap = target.legal.difference(rec.covered)
                bug_hits = rec.covered.intersect(target.illegal)
                bug_tests = tuple(
                    e["test_id"] for e in self._test_log
                    if BinSet.parse(e["cells_hit"].get(cp_id, [])).intersect(target.illegal)
                )
                outside = rec.covered.difference(target.legal.union(target.illegal))
                entries[cp_id] = CoverpointGap(
                    coverpoint_id=cp_id,
                    legal=target.legal,
                    covered=rec.covered,
                    gap=gap,
                    gap_fraction=_gap_fraction(gap, target.legal),
                    bug_hits=bug_hits,
                    bug_tests=bug_tests,
                    untargeted=outside.union(rec.untargeted),
                )
        return GapReport(entries)

    # ---- persistence ---------------------------------------------------

    def _lines(self) -> list[str]:
        lines = [f"{DB_MAGIC} {DB_VERSION}"]
        for cp_id, rec in self._records.items():
            lines.append(json.dumps({
                "record": "coverpoint",
                "id": cp_id,
                "covered": rec.covered.to_strings(),
                "hit_counts": rec.hit_counts,
                "untargeted": rec.untargeted.to_strings(),
            }, sort_keys=True))
        for entry in self._test_log:
            lines.append(json.dumps({"record": "test", **entry}, sort_keys=True))
        return lines

    def persist(self, path: str) -> None:
        if not path:
            raise DatabaseIOError("No database path given")
        with self._lock:
            body = "".join(line + "\n" for line in self._lines())
            text = body + f"sha256 {sha256_bytes(body)}\n"
            try:
                write_atomic(path, text)
            except ExportError as exc:
                raise DatabaseIOError(str(exc)) from exc
        logger.info("Persisted coverage database %s (%d coverpoints, %d tests)",
                    path, len(self._records), len(self._test_log))

    @classmethod
    def restore(cls, path: str) -> "CoverageDatabase":
        if not path:
            raise DatabaseIOError("No database path given")
        try:
            with open(path, "r", encoding="utf-8", newline="") as handle:
                text = handle.read()
        except OSError as exc:
            raise DatabaseIOError(f"Cannot read coverage database {path}: {exc}") from exc

        body, sep, tail = text.rpartition("sha256 ")
        if not sep or not tail.endswith("\n") or not body.endswith("\n"):
            raise CorruptDatabase(path, "missing checksum line (truncated?)")
        try:
            verify_sha256(body, tail, path)
        except HashVerificationError as exc:
            raise CorruptDatabase(path, "checksum mismatch") from exc

        lines = body.splitlines()
        if not lines or lines[0] != f"{DB_MAGIC} {DB_VERSION}":
            raise CorruptDatabase(path, f"unsupported header {lines[0] if lines else ''!r}")

        db = cls()
        try:
            for line in lines[1:]:
                item = json.loads(line)
                kind = item.pop("record")
                if kind == "coverpoint":
                    db._records[item["id"]] = _Record(
                        covered=BinSet.parse(item["covered"]),
                        hit_counts={k: int(v) for k, v in item["hit_counts"].items()},
                        untargeted=BinSet.parse(item["untargeted"]),
                    )
                elif kind == "test":
                    db._test_log.append(item)
                else:
                    raise CorruptDatabase(path, f"unknown record type {kind!r}")
        except (ValueError, KeyError, TypeError, BinError) as exc:
            raise CorruptDatabase(path, f"unreadable record: {exc}") from exc
        logger.info("Restored coverage database %s (%d coverpoints, %d tests)",
                    path, len(db._records), len(db._test_log))
        return db

    @classmethod
    def open(cls, path: str, coverpoint_ids: Iterable[str] = ()) -> "CoverageDatabase":
        """Restore ``path`` if it exists, else start empty; then register ``coverpoint_ids``."""
        db = cls.restore(path) if path and os.path.exists(path) else cls()
        db.register(coverpoint_ids)
        return db

    def __eq__(self, other) -> bool:
        if not isinstance(other, CoverageDatabase):
            return NotImplemented
        return self._lines() == other._lines()

    def __repr__(self) -> str:
        return f"CoverageDatabase(coverpoints={len(self._records)}, tests={len(self._test_log)})"


def accumulate(db: CoverageDatabase, test_id: str, results: Sequence[CoverageResult],
               inputs: Optional[Mapping[str, Any]] = None) -> CoverageDatabase:
    db.accumulate(test_id, results, inputs)
    return db


def gap_report(db: CoverageDatabase, spec: TargetSpec) -> GapReport:
    return db.gap_report(spec)


def persist(db: CoverageDatabase, path: str) -> None:
    db.persist(path)


def restore(path: str) -> CoverageDatabase:
    return CoverageDatabase.restore(path)


def _fmt_set(s: BinSet, limit: int = 4) -> str:
    if s.is_empty:
        return "-"
    parts = s.to_strings()
    more = f" (+{len(parts) - limit} more)" if len(parts) > limit else ""
    return " ".join(parts[:limit]) + more


def format_gap_report(report: GapReport) -> str:
    """Plain-text table, one row per coverpoint."""
    header = f"{'coverpoint':<20} {'gap_fraction':>12} {'covered':>8}  {'bug_hits':<30} gap"
    lines = [header, "-" * len(header)]
    for e in report:
        lines.append(
            f"{e.coverpoint_id:<20} {e.gap_fraction:>12.4f} {e.covered_fraction:>8.1%}  "
            f"{_fmt_set(e.bug_hits):<30} {_fmt_set(e.gap)}"
        )
        if e.bug_tests:
            lines.append(f"{'':<20} BUG: illegal bins hit by test(s) {', '.join(e.bug_tests)}")
        if e.untargeted:
            lines.append(f"{'':<20} untargeted: {_fmt_set(e.untargeted)}")
    return "\n".join(lines) + "\n"


def gap_report_records(report: GapReport) -> list[dict[str, Any]]:
    """One flat key/value record per coverpoint."""
    return [
        {
            "coverpoint": e.coverpoint_id,
            "gap_fraction": repr(e.gap_fraction),
            "covered_fraction": repr(e.covered_fraction),
            "gap": ";".join(e.gap.to_strings()),
            "bug_hits": ";".join(e.bug_hits.to_strings()),
            "bug_tests": ";".join(e.bug_tests),
            "untargeted": ";".join(e.untargeted.to_strings()),
        }
        for e in report
    ]


def format_records(records: Sequence[Mapping[str, Any]]) -> str:
    """``key=value`` lines, records separated by a blank line."""
    blocks = ["\n".join(f"{k}={v}" for k, v in r.items()) for r in records]
    return "\n\n".join(blocks) + "\n"

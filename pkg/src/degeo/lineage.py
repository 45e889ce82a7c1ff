"""Cell lineage trees built from per-cell fluorescence tables.

Cells are linked purely by their Sulston-style names: a child's name is the
parent's name plus one division-axis letter, and the founder cells follow a
fixed map (AB and P1 from P0, EMS and P2 from P1, ...).
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass
from typing import IO, Iterable, Iterator

import numpy as np

FOUNDERS = ("P0", "AB", "P1", "EMS", "P2", "E", "MS", "C", "P3", "D", "P4", "Z2", "Z3")
FOUNDER_PARENT = {
    "AB": "P0", "P1": "P0",
    "EMS": "P1", "P2": "P1",
    "E": "EMS", "MS": "EMS",
    "C": "P2", "P3": "P2",
    "D": "P3", "P4": "P3",
    "Z2": "P4", "Z3": "P4",
}
AXIS_LETTERS = frozenset("aplrdv")

# longest founder first so that "EMS" is never read as "E" + "MS"
_FOUNDERS_BY_LENGTH = sorted(FOUNDERS, key=len, reverse=True)

MIN_CANDIDATE_DESCENDANTS = 6
MAX_CANDIDATE_DESCENDANTS = 30


class FormatError(ValueError):
    """Raised when an input table cannot be turned into a lineage tree."""


class CellNameError(FormatError):
    def __init__(self, names):
        self.names = sorted(set(names))
        super().__init__("unparseable cell name(s): " + ", ".join(self.names))


def split_name(name: str) -> tuple[str, str]:
    """Split a cell name into ``(founder, suffix)``.

    Raises ``CellNameError`` if the name does not follow the nomenclature.
    """
    for founder in _FOUNDERS_BY_LENGTH:
        if name.startswith(founder):
            suffix = name[len(founder):]
            if all(ch in AXIS_LETTERS for ch in suffix):
                return founder, suffix
    raise CellNameError([name])


def is_valid_name(name: str) -> bool:
    try:
        split_name(name)
    except CellNameError:
        return False
    return True


def parent_name(name: str) -> str | None:
    founder, suffix = split_name(name)
    if suffix:
        return founder + suffix[:-1]
    return FOUNDER_PARENT.get(founder)


@dataclass(frozen=True)
class CellRecord:
    name: str
    times: np.ndarray
    intensities: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.int64)
        values = np.asarray(self.intensities, dtype=float)
        if times.ndim != 1 or times.shape != values.shape:
            raise FormatError(f"{self.name}: times and intensities differ in shape")
        if len(times) == 0:
            raise FormatError(f"{self.name}: no time points")
        if np.any(np.diff(times) <= 0):
            raise FormatError(f"{self.name}: times are not strictly increasing")
        times.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "intensities", values)

    def __len__(self):
        return len(self.times)

    def __eq__(self, other):
        if not isinstance(other, CellRecord):
            return NotImplemented
        return (self.name == other.name
                and np.array_equal(self.times, other.times)
                and np.array_equal(self.intensities, other.intensities))

    __hash__ = None

    @property
    def lifetime(self) -> int:
        return len(self.times)


class Topology:
    """Parent/child links derived from cell names.

    Subclasses only need to provide the ordered collection of names; both the
    raw ``LineageTree`` and the ``ScoreTree`` share these queries.
    """

    def _build_links(self, names: Iterable[str]) -> None:
        names = sorted(names)
        bad = [n for n in names if not is_valid_name(n)]
        if bad:
            raise CellNameError(bad)
        present = set(names)
        parent = {}
        children = {n: [] for n in names}
        for n in names:
            p = parent_name(n)
            if p is not None and p in present:
                parent[n] = p
                children[p].append(n)
        crowded = [p for p, ch in children.items() if len(ch) > 2]
        if crowded:
            raise FormatError("cells with more than two children: " + ", ".join(crowded))
        self._names = tuple(names)
        self._parent = parent
        self._children = {n: tuple(ch) for n, ch in children.items()}
        self._roots = tuple(n for n in names if n not in parent)

    @property
    def names(self) -> tuple[str, ...]:
        return self._names

    @property
    def roots(self) -> tuple[str, ...]:
        return self._roots

    def __len__(self):
        return len(self._names)

    def __iter__(self) -> Iterator[str]:
        return iter(self._names)

    def __contains__(self, name) -> bool:
        return name in self._children

    def _check(self, name):
        if name not in self._children:
            raise KeyError(f"unknown cell {name!r}")

    def parent(self, name: str) -> str | None:
        self._check(name)
        return self._parent.get(name)

    def children(self, name: str) -> tuple[str, ...]:
        self._check(name)
        return self._children[name]

    def is_leaf(self, name: str) -> bool:
        return not self.children(name)

    def descendants(self, name: str) -> list[str]:
        """Strict descendants in pre-order."""
        self._check(name)
        out = []
        stack = list(reversed(self._children[name]))
        while stack:
            n = stack.pop()
            out.append(n)
            stack.extend(reversed(self._children[n]))
        return out

    def ancestors(self, name: str) -> list[str]:
        """Ancestors from the parent up to the root."""
        self._check(name)
        out = []
        while name in self._parent:
            name = self._parent[name]
            out.append(name)
        return out

    def depth(self, name: str) -> int:
        return len(self.ancestors(name))

    def descendant_counts(self) -> dict[str, int]:
        counts = {}

        def count(n):
            if n not in counts:
                counts[n] = sum(1 + count(c) for c in self._children[n])
            return counts[n]
        for n in self._names:
            count(n)
        return counts


class LineageTree(Topology):
    """Rooted binary forest of cells, each carrying its raw time series."""

    def __init__(self, records: Iterable[CellRecord]):
        records = list(records)
        by_name = {}
        for rec in records:
            if rec.name in by_name:
                raise FormatError(f"duplicate cell {rec.name!r}")
            by_name[rec.name] = rec
        self._build_links(by_name)
        self._records = {n: by_name[n] for n in self._names}

    def __getitem__(self, name: str) -> CellRecord:
        self._check(name)
        return self._records[name]

    def records(self) -> list[CellRecord]:
        return [self._records[n] for n in self._names]

    def __eq__(self, other):
        if not isinstance(other, LineageTree):
            return NotImplemented
        return self._names == other._names and all(
            self._records[n] == other._records[n] for n in self._names)

    __hash__ = None

    def without(self, names: Iterable[str]) -> "LineageTree":
        drop = set(names)
        return LineageTree(r for n, r in self._records.items() if n not in drop)

    def subset(self, names: Iterable[str]) -> "LineageTree":
        keep = set(names)
        return LineageTree(r for n, r in self._records.items() if n in keep)


def _open_text(path_or_stream) -> tuple[IO[str], bool]:
    if isinstance(path_or_stream, (str, os.PathLike)):
        return open(path_or_stream, newline=""), True
    if isinstance(path_or_stream, (io.RawIOBase, io.BufferedIOBase)) or (
            hasattr(path_or_stream, "mode") and "b" in getattr(path_or_stream, "mode", "")):
        return io.TextIOWrapper(path_or_stream, newline=""), False
    return path_or_stream, False


def _parse_time(raw: str) -> int:
    value = float(raw)
    if not value.is_integer():
        raise ValueError(raw)
    return int(value)


def parse_file(path_or_stream, column: str = "blot") -> LineageTree:
    """Read a comma-separated table with columns ``cell``, ``time`` and ``column``.

    Extra columns are ignored. Rows are grouped by cell and sorted by time.
    """
    stream, owned = _open_text(path_or_stream)
    try:
        reader = csv.DictReader(stream)
        header = [h.strip() for h in (reader.fieldnames or [])]
        missing = [c for c in ("cell", "time", column) if c not in header]
        if missing:
            raise FormatError("missing column(s): " + ", ".join(missing))
        reader.fieldnames = header
        rows: dict[str, dict[int, float]] = {}
        for lineno, row in enumerate(reader, start=2):
            name = (row["cell"] or "").strip()
            try:
                t = _parse_time(row["time"])
                y = float(row[column])
            except (TypeError, ValueError):
                raise FormatError(f"line {lineno}: bad time or {column!r} value") from None
            cell_rows = rows.setdefault(name, {})
            if t in cell_rows:
                raise FormatError(f"line {lineno}: duplicate row for cell {name!r} at time {t}")
            cell_rows[t] = y
    finally:
        if owned:
            stream.close()

    bad = [n for n in rows if not is_valid_name(n)]
    if bad:
        raise CellNameError(bad)
    records = []
    for name, cell_rows in rows.items():
        times = sorted(cell_rows)
        records.append(CellRecord(name, times, [cell_rows[t] for t in times]))
    return LineageTree(records)


def write_file(tree: LineageTree, path_or_stream, column: str = "blot") -> None:
    """Canonical serialization: one row per (cell, time), sorted by name then time."""
    if isinstance(path_or_stream, (str, os.PathLike)):
        with open(path_or_stream, "w", newline="") as fh:
            write_file(tree, fh, column)
        return
    writer = csv.writer(path_or_stream, lineterminator="\n")
    writer.writerow(["cell", "time", column])
    for rec in tree.records():
        for t, y in zip(rec.times.tolist(), rec.intensities.tolist()):
            writer.writerow([rec.name, t, repr(y)])


def descendants_count(tree: Topology, cell: str) -> int:
    return len(tree.descendants(cell))


def candidate_set(tree: Topology,
                  lo: int = MIN_CANDIDATE_DESCENDANTS,
                  hi: int = MAX_CANDIDATE_DESCENDANTS) -> frozenset[str]:
    """Cells that may be a change point: ``lo <= #descendants <= hi``."""
    counts = tree.descendant_counts()
    return frozenset(n for n, c in counts.items() if lo <= c <= hi)


def paths_to_leaves(tree: Topology, root: str) -> list[list[str]]:
    """One ancestor-to-descendant path per leaf of ``root``'s subtree."""
    tree._check(root)
    paths = []
    stack = [[root]]
    while stack:
        path = stack.pop()
        kids = tree.children(path[-1])
        if not kids:
            paths.append(path)
        for c in reversed(kids):
            stack.append(path + [c])
    return paths

"""Cell scores: one robust number per cell from its fluorescence series."""

from __future__ import annotations

from typing import Iterable, Mapping

import numpy as np

from .lineage import CellRecord, LineageTree, Topology


def truncate_series(record: CellRecord) -> CellRecord:
    """Drop the division-adjacent points at both ends of a cell's series.

    More than 8 points lose two at each end, 5 to 8 points lose one, and
    shorter series are kept whole.
    """
    n = len(record)
    if n > 8:
        cut = 2
    elif n >= 5:
        cut = 1
    else:
        cut = 0
    if cut == 0:
        return record
    return CellRecord(record.name, record.times[cut:n - cut], record.intensities[cut:n - cut])


def cell_score(valid) -> float:
    """Midpoint of the 5% and 95% quantiles (linear interpolation)."""
    values = np.asarray(valid, dtype=float)
    if values.size == 0:
        raise ValueError("cannot score an empty series")
    lo, hi = np.quantile(values, [0.05, 0.95])
    return float((lo + hi) / 2.0)


class ScoreTree(Topology):
    """Lineage topology with one score and one lifetime per cell.

    ``valid`` holds the truncated raw series when the tree came from data; it
    is empty for trees generated directly in score space.
    """

    def __init__(self, scores: Mapping[str, float], lifetimes: Mapping[str, int],
                 valid: Mapping[str, CellRecord] | None = None):
        if set(scores) != set(lifetimes):
            raise ValueError("scores and lifetimes must cover the same cells")
        self._build_links(scores)
        self._scores = {n: float(scores[n]) for n in self._names}
        self._lifetimes = {n: int(lifetimes[n]) for n in self._names}
        self._valid = dict(valid) if valid else {}

    def score(self, name: str) -> float:
        self._check(name)
        return self._scores[name]

    def lifetime(self, name: str) -> int:
        self._check(name)
        return self._lifetimes[name]

    def valid(self, name: str) -> CellRecord | None:
        self._check(name)
        return self._valid.get(name)

    @property
    def has_series(self) -> bool:
        return bool(self._valid)

    def score_array(self, names: Iterable[str] | None = None) -> np.ndarray:
        names = self._names if names is None else names
        return np.array([self._scores[n] for n in names], dtype=float)

    def lifetime_array(self, names: Iterable[str] | None = None) -> np.ndarray:
        names = self._names if names is None else names
        return np.array([self._lifetimes[n] for n in names], dtype=float)

    def without(self, names: Iterable[str]) -> "ScoreTree":
        drop = set(names)
        keep = [n for n in self._names if n not in drop]
        return ScoreTree({n: self._scores[n] for n in keep},
                         {n: self._lifetimes[n] for n in keep},
                         {n: v for n, v in self._valid.items() if n not in drop})

    def with_scores(self, scores: Mapping[str, float]) -> "ScoreTree":
        merged = dict(self._scores)
        merged.update(scores)
        return ScoreTree(merged, self._lifetimes, self._valid)

    def __eq__(self, other):
        if not isinstance(other, ScoreTree):
            return NotImplemented
        return (self._names == other._names and self._scores == other._scores
                and self._lifetimes == other._lifetimes)

    __hash__ = None


def score_tree(tree: LineageTree) -> ScoreTree:
    if len(tree) == 0:
        raise ValueError("empty lineage tree")
    scores, lifetimes, valid = {}, {}, {}
    for rec in tree.records():
        kept = truncate_series(rec)
        try:
            scores[rec.name] = cell_score(kept.intensities)
        except ValueError as exc:
            raise ValueError(f"{rec.name}: {exc}") from exc
        lifetimes[rec.name] = rec.lifetime
        valid[rec.name] = kept
    return ScoreTree(scores, lifetimes, valid)


def write_scores(tree: ScoreTree, stream) -> None:
    """Debug dump: ``cell,score`` rows in name order."""
    stream.write("cell,score\n")
    for n in tree:
        stream.write(f"{n},{tree.score(n)!r}\n")

"""Exact onset and end time points inside accepted branches.

Valid data points outside the accepted branches define a Gaussian noise
model; a point is extreme when it exceeds that model's 97.5% quantile.  Along
every path from a branch's change point to a leaf the valid points of
successive cells are concatenated, and expression segments are the stretches
of at least 10 points of which at least 97.5% are extreme.  The first segment
point on a path is its onset, the last one its end.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import kernels
from .lineage import paths_to_leaves
from .scoring import ScoreTree

Z_975 = 1.959964
MIN_SEGMENT = 10
# extreme fraction >= 39/40, kept as integers so the comparison is exact
FRACTION_NUM, FRACTION_DEN = 39, 40
MAX_GAP = 2


class RefinementError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseModel:
    mu_hat: float
    sigma_hat_sq: float
    n_points: int

    @property
    def extreme_threshold(self) -> float:
        return self.mu_hat + Z_975 * math.sqrt(self.sigma_hat_sq)


@dataclass(frozen=True)
class PathPoints:
    """Valid points along a path, in ancestor-to-descendant order."""
    cells: tuple
    times: np.ndarray
    values: np.ndarray

    def __len__(self):
        return self.values.size


@dataclass(frozen=True)
class ExpressionSegment:
    start: tuple          # (cell, time)
    end: tuple
    n_valid_points: int
    n_extreme_points: int
    path_leaf: str | None = None


@dataclass
class BranchOnsets:
    root: str
    onsets: list = field(default_factory=list)     # distinct (cell, time)
    ends: list = field(default_factory=list)
    segments: list = field(default_factory=list)


@dataclass
class OnsetReport:
    noise: NoiseModel
    branches: list = field(default_factory=list)

    def write_points(self, stream) -> None:
        stream.write("branch,cell,time,kind,segment\n")
        for br in self.branches:
            seg_id = {(s.start, s.end): k for k, s in enumerate(br.segments)}
            for kind, points in (("onset", br.onsets), ("end", br.ends)):
                for cell, time in points:
                    k = next((i for (st, en), i in seg_id.items()
                              if (kind == "onset" and st == (cell, time))
                              or (kind == "end" and en == (cell, time))), "")
                    stream.write(f"{br.root},{cell},{time},{kind},{k}\n")

    def write_segments(self, stream) -> None:
        stream.write("branch,segment,start_cell,start_time,end_cell,end_time,"
                     "n_valid,n_extreme,leaf\n")
        for br in self.branches:
            for k, s in enumerate(br.segments):
                stream.write(f"{br.root},{k},{s.start[0]},{s.start[1]},{s.end[0]},{s.end[1]},"
                             f"{s.n_valid_points},{s.n_extreme_points},{s.path_leaf or ''}\n")


def _valid_values(tree: ScoreTree, cells: Iterable[str]) -> np.ndarray:
    parts = [tree.valid(c).intensities for c in cells if tree.valid(c) is not None]
    return np.concatenate(parts) if parts else np.zeros(0)


def _noise_from_values(x: np.ndarray) -> NoiseModel:
    if x.size < 2:
        raise RefinementError(f"need at least two background points, have {x.size}")
    var = float(np.var(x, ddof=1))
    if not var > 0:
        raise RefinementError("background points have zero variance")
    return NoiseModel(float(x.mean()), var, int(x.size))


def branch_cells(tree: ScoreTree, roots: Iterable[str]) -> set:
    """Strict descendants of the given change points."""
    out = set()
    for r in roots:
        out.update(tree.descendants(r))
    return out


def fit_noise(tree: ScoreTree, accepted_roots: Iterable[str]) -> NoiseModel:
    """Mean and variance of the valid points outside the accepted branches."""
    if not tree.has_series:
        raise RefinementError("the tree carries no time series")
    inside = branch_cells(tree, accepted_roots)
    return _noise_from_values(_valid_values(tree, (c for c in tree if c not in inside)))


def fit_noise_early(tree: ScoreTree, fraction: float = 0.2) -> NoiseModel:
    """Noise from valid points in the earliest ``fraction`` of the observed time span."""
    if not tree.has_series:
        raise RefinementError("the tree carries no time series")
    times = np.concatenate([tree.valid(c).times for c in tree if tree.valid(c) is not None])
    t0, t1 = times.min(), times.max()
    cut = t0 + fraction * (t1 - t0)
    vals = [tree.valid(c).intensities[tree.valid(c).times <= cut]
            for c in tree if tree.valid(c) is not None]
    return _noise_from_values(np.concatenate(vals))


def path_points(tree: ScoreTree, path: Sequence[str]) -> PathPoints:
    cells, times, values = [], [], []
    for c in path:
        rec = tree.valid(c)
        if rec is None:
            continue
        cells.extend([c] * len(rec))
        times.append(rec.times)
        values.append(rec.intensities)
    if not values:
        return PathPoints((), np.zeros(0, dtype=np.int64), np.zeros(0))
    return PathPoints(tuple(cells), np.concatenate(times), np.concatenate(values))


def qualifying_windows(extreme) -> list[tuple[int, int]]:
    """Maximal windows (inclusive index pairs) meeting the length and fraction rules.

    A window starts and ends on an extreme point; it is maximal when no other
    qualifying window contains it.
    """
    far = kernels.farthest_ends(np.asarray(extreme, dtype=np.int64), MIN_SEGMENT,
                                FRACTION_NUM, FRACTION_DEN)
    out = []
    reach = -1
    for i in np.flatnonzero(far >= 0):
        j = int(far[i])
        if j > reach:
            out.append((int(i), j))
            reach = j
    return out


def merge_windows(windows: Sequence[tuple[int, int]], max_gap: int = MAX_GAP):
    """Merge windows separated by at most ``max_gap`` intervening points (or overlapping)."""
    out = []
    for s, e in sorted(windows):
        if out and s - out[-1][1] - 1 <= max_gap:
            out[-1] = (out[-1][0], max(out[-1][1], e))
        else:
            out.append((s, e))
    return out


def find_segments(points: PathPoints, noise: NoiseModel | float, merge: bool = True,
                  leaf: str | None = None) -> list[ExpressionSegment]:
    thr = noise.extreme_threshold if isinstance(noise, NoiseModel) else float(noise)
    extreme = (points.values > thr).astype(np.int64)
    windows = qualifying_windows(extreme)
    if merge:
        windows = merge_windows(windows)
    return [ExpressionSegment((points.cells[s], int(points.times[s])),
                              (points.cells[e], int(points.times[e])),
                              e - s + 1, int(extreme[s:e + 1].sum()), leaf)
            for s, e in windows]


def _branch_onsets(tree: ScoreTree, root: str, noise: NoiseModel) -> BranchOnsets:
    out = BranchOnsets(root)
    seen_seg = set()
    for path in paths_to_leaves(tree, root):
        segs = find_segments(path_points(tree, path), noise, leaf=path[-1])
        if not segs:
            continue
        onset, end = segs[0].start, segs[-1].end
        if onset not in out.onsets:
            out.onsets.append(onset)
        if end not in out.ends:
            out.ends.append(end)
        for s in segs:
            if (s.start, s.end) not in seen_seg:
                seen_seg.add((s.start, s.end))
                out.segments.append(s)
    return out


def refine_onsets(tree: ScoreTree, accepted_roots: Sequence[str],
                  noise: NoiseModel | None = None) -> OnsetReport:
    """Onsets, ends and segments on every path below each accepted change point."""
    roots = list(accepted_roots)
    if noise is None:
        noise = fit_noise(tree, roots)
    return OnsetReport(noise, [_branch_onsets(tree, r, noise) for r in roots])


def refine_whole_tree(tree: ScoreTree, fraction: float = 0.2) -> OnsetReport:
    """Fallback for broadly expressed genes: skip branch detection and search every path,
    with noise fitted from the earliest ``fraction`` of the time span."""
    noise = fit_noise_early(tree, fraction)
    return OnsetReport(noise, [_branch_onsets(tree, r, noise) for r in tree.roots])


def segment_cells(report: OnsetReport, tree: ScoreTree) -> set:
    """Cells holding at least one point of a reported segment."""
    out = set()
    for br in report.branches:
        for path in paths_to_leaves(tree, br.root):
            pts = path_points(tree, path)
            segs = find_segments(pts, report.noise)
            for s in segs:
                i0 = _index_of(pts, s.start)
                i1 = _index_of(pts, s.end)
                out.update(pts.cells[i0:i1 + 1])
    return out


def _index_of(pts: PathPoints, point) -> int:
    cell, time = point
    for k, (c, t) in enumerate(zip(pts.cells, pts.times)):
        if c == cell and t == time:
            return k
    raise KeyError(point)

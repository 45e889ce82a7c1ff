"""Cell- and branch-level scoring of detections against ground truth, and the
global-threshold baseline."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .lineage import LineageTree, Topology
from .scoring import ScoreTree, score_tree

STRATA = ("None", "One", "Two", "Three", "Four")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.tn + other.tn, self.fn + other.fn)

    @property
    def tpr(self) -> float | None:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else None

    @property
    def fpr(self) -> float | None:
        return self.fp / (self.fp + self.tn) if self.fp + self.tn else None

    @property
    def ppv(self) -> float | None:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else None


def confusion(predicted: Iterable[str], truth_cells: Iterable[str],
              universe: Iterable[str]) -> ConfusionCounts:
    universe = set(universe)
    pred = set(predicted)
    if not pred <= universe:
        raise ValueError("predicted cells outside the universe: "
                         + ", ".join(sorted(pred - universe)[:5]))
    truth = set(truth_cells) & universe
    tp = len(pred & truth)
    fp = len(pred - truth)
    fn = len(truth - pred)
    return ConfusionCounts(tp, fp, len(universe) - tp - fp - fn, fn)


def cell_metrics(predicted, truth_cells, universe):
    """(TPR, FPR, PPV); a rate with an empty denominator is ``None``."""
    c = confusion(predicted, truth_cells, universe)
    return c.tpr, c.fpr, c.ppv


def apm_baseline(tree: LineageTree | ScoreTree, threshold_quantile: float = 0.95) -> set:
    """Cells whose score is strictly above the given quantile of all scores in the tree."""
    scores = tree if isinstance(tree, ScoreTree) else score_tree(tree)
    x = scores.score_array()
    cut = float(np.quantile(x, threshold_quantile))
    return {n for n, v in zip(scores.names, x) if v > cut}


def stratum(n_true: int) -> str:
    return STRATA[n_true] if n_true < len(STRATA) else str(n_true)


@dataclass
class BranchCounts:
    detected: int = 0
    false_positive: int = 0
    false_negative: int = 0

    @property
    def false_total(self) -> int:
        return self.false_positive + self.false_negative

    def __add__(self, other):
        return BranchCounts(self.detected + other.detected,
                            self.false_positive + other.false_positive,
                            self.false_negative + other.false_negative)


def branch_is_true(M_star: str, tree: Topology, true_branches: Sequence[set]) -> bool:
    """Whether the detected branch's cells intersect any true branch's cells."""
    cells = set(tree.descendants(M_star)) if M_star in tree else set()
    return any(cells & tb for tb in true_branches)


def label_branches(branches, tree: Topology, truth) -> list[bool]:
    """Truth label of each detected branch, judged on the full tree."""
    true_sets = list(truth.branch_cells(tree).values())
    return [branch_is_true(b.M_star, tree, true_sets) for b in branches]


def branch_misclassification(detected, tree: Topology, truth) -> tuple[str, BranchCounts]:
    """Stratum of the tree and its classifier errors over all detected branches.

    A false positive is an accepted branch with no true cells; a false
    negative is a rejected branch that does overlap a true branch.
    """
    labels = label_branches(detected, tree, truth)
    counts = BranchCounts(detected=len(detected))
    for b, lab in zip(detected, labels):
        if b.accepted and not lab:
            counts.false_positive += 1
        elif not b.accepted and lab:
            counts.false_negative += 1
    return stratum(len(truth.roots)), counts


def summarize_strata(rows: Iterable[tuple[str, BranchCounts]]) -> dict:
    out: dict = {}
    for key, counts in rows:
        out[key] = out.get(key, BranchCounts()) + counts
    out["Overall"] = sum(out.values(), BranchCounts())
    return out


def write_metrics(rows: Iterable[dict], stream) -> None:
    """Rows are dicts with keys experiment, stratum, method and metric values."""
    rows = list(rows)
    keys = ["experiment", "stratum", "method"]
    extra = []
    for r in rows:
        for k in r:
            if k not in keys and k not in extra:
                extra.append(k)
    stream.write(",".join(keys + extra) + "\n")
    for r in rows:
        vals = []
        for k in keys + extra:
            v = r.get(k)
            vals.append("" if v is None else (f"{v:.6g}" if isinstance(v, float) else str(v)))
        stream.write(",".join(vals) + "\n")

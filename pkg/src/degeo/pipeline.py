"""End-to-end runs: detection plus refinement on one tree, training-row
collection for the stopping classifier, and the experiment loops used by the
command line and the acceptance suite."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import detector, refine
from .detector import BranchFeatures, DetectionResult, SvrConfig, SvrModel, SvrStopping
from .evaluation import label_branches
from .lineage import LineageTree
from .model import Hyperparams
from .sampler import ChainConfig
from .scoring import ScoreTree, score_tree
from .synth import GroundTruth


class OracleStopping:
    """Accepts exactly the branches that overlap the truth (training only)."""

    def __init__(self, truth: GroundTruth, full_tree):
        self.true_sets = list(truth.branch_cells(full_tree).values())

    def judge(self, branch, tree, history) -> bool:
        branch.features = detector.extract_features(branch, tree)
        cells = set(tree.descendants(branch.M_star))
        return any(cells & tb for tb in self.true_sets)


@dataclass
class TreeRun:
    scores: ScoreTree
    detection: DetectionResult
    report: refine.OnsetReport | None = None
    refine_error: str | None = None

    @property
    def accepted_roots(self) -> list:
        return [b.M_star for b in self.detection.accepted]


def run_tree(tree: LineageTree | ScoreTree, stopping, config: ChainConfig,
             hyper: Hyperparams | None = None, do_refine: bool = True,
             whole_tree: bool = False) -> TreeRun:
    scores = tree if isinstance(tree, ScoreTree) else score_tree(tree)
    if whole_tree:
        return TreeRun(scores, DetectionResult(), refine.refine_whole_tree(scores))
    result = detector.detect_branches(scores, hyper, config, stopping)
    run = TreeRun(scores, result)
    if do_refine and scores.has_series and result.accepted:
        try:
            run.report = refine.refine_onsets(scores, run.accepted_roots)
        except refine.RefinementError as exc:
            run.refine_error = str(exc)
    return run


def predicted_cells(run: TreeRun) -> set:
    """Cells called expressing: those holding points of a reported segment when the
    tree has series, otherwise every cell of an accepted branch."""
    if run.report is not None:
        return refine.segment_cells(run.report, run.scores)
    if run.scores.has_series:
        return set()
    return refine.branch_cells(run.scores, run.accepted_roots)


# -- classifier training --------------------------------------------------------

@dataclass
class TrainingSet:
    rows: list = field(default_factory=list)          # (features, label)
    tree_index: list = field(default_factory=list)    # tree of each row
    failures: list = field(default_factory=list)      # (tree, error)

    def by_tree(self):
        out: dict = {}
        for (f, lab), t in zip(self.rows, self.tree_index):
            out.setdefault(t, []).append((f, lab))
        return [out[k] for k in sorted(out)]


def collect_training_rows(data: Sequence[tuple[ScoreTree, GroundTruth]],
                          config: ChainConfig) -> TrainingSet:
    """Detect with oracle stopping and label every detected branch by overlap with truth."""
    ts = TrainingSet()
    for i, (tree, truth) in enumerate(data):
        res = detector.detect_branches(tree, None, config, OracleStopping(truth, tree))
        if not res.complete:
            ts.failures.append((i, res.error))
        for b, lab in zip(res.branches, label_branches(res.branches, tree, truth)):
            ts.rows.append((b.features, int(lab)))
            ts.tree_index.append(i)
    return ts


@dataclass
class TrainedModel:
    model: SvrModel
    threshold: float
    rates: dict
    training: TrainingSet


def train_stopping_model(data, config: ChainConfig, svr: SvrConfig = SvrConfig(),
                         grid=detector.THRESHOLD_GRID) -> TrainedModel:
    ts = collect_training_rows(data, config)
    model = detector.svr_train(ts.rows, svr)
    outputs = [[(detector.svr_predict(model, f), lab) for f, lab in rows]
               for rows in ts.by_tree()]
    thr, rates = detector.select_threshold(outputs, grid)
    return TrainedModel(model.with_threshold(thr), thr, rates, ts)


def features_matrix(rows) -> np.ndarray:
    return np.array([f.vector() for f, _ in rows]) if rows else np.zeros((0, len(BranchFeatures.names())))

import math

import numpy as np
import pytest
from scipy import stats

from degeo.lineage import CellRecord, LineageTree
from degeo.model import Hyperparams, ModelState
from degeo.scoring import ScoreTree


def subtree_names(root, depth):
    """Complete binary subtree below ``root`` (a/p daughters), ``depth`` generations deep."""
    names = [root]
    level = [root]
    for _ in range(depth):
        level = [n + s for n in level for s in "ap"]
        names.extend(level)
    return names


def make_score_tree(names, scores=None, lifetimes=None, default_life=10):
    scores = scores or {}
    lifetimes = lifetimes or {}
    return ScoreTree({n: float(scores.get(n, 0.0)) for n in names},
                     {n: int(lifetimes.get(n, default_life)) for n in names})


def make_lineage(series: dict, start: dict | None = None) -> LineageTree:
    start = start or {}
    return LineageTree(CellRecord(n, start.get(n, 0) + np.arange(len(v)), v)
                       for n, v in series.items())


def fixture_25(seed=11, lift=0.15):
    """25-cell forest: AB to depth 3, MS to depth 2, C with its two daughters.

    Scores below ABa are raised by ``lift`` per minute of cumulative lifetime
    so the change point conditional is not flat.
    """
    names = subtree_names("AB", 3) + subtree_names("MS", 2) + subtree_names("C", 1)
    rng = np.random.default_rng(seed)
    scores = {n: float(rng.normal(0.0, 1.0)) for n in names}
    lifetimes = {n: int(rng.integers(8, 20)) for n in names}
    for n in names:
        if n.startswith("ABa") and n != "ABa":
            scores[n] += lift * lifetimes[n] * len(n[3:])
    return make_score_tree(names, scores, lifetimes)


# -- independent oracle for the joint density ------------------------------------

def oracle_log_joint(state: ModelState, tree: ScoreTree, hyper: Hyperparams) -> float:
    """Log joint density of scores and parameters, coded directly from the model
    with scipy densities (no shared code with degeo.model)."""
    branch = set(tree.descendants(state.M))
    lp = 0.0
    lp += stats.invgamma.logpdf(state.sigma1_sq, hyper.g, scale=hyper.h)
    lp += stats.invgamma.logpdf(state.sigma2_sq, hyper.a, scale=hyper.b)
    lp += stats.norm.logpdf(state.beta, hyper.r, math.sqrt(hyper.s))
    lp += stats.norm.logpdf(state.mu, hyper.p, math.sqrt(hyper.q))
    lp += stats.beta.logpdf(state.rho, hyper.u, hyper.v)
    sd1 = math.sqrt(state.sigma1_sq)
    for n in tree:
        if n not in branch:
            lp += stats.norm.logpdf(tree.score(n), state.mu, sd1)
    cov = state.sigma2_sq * np.array([[1.0, state.rho], [state.rho, 1.0]])
    for mother in [state.M] + sorted(branch):
        kids = tree.children(mother)
        if not kids:
            continue
        x0 = tree.score(mother)
        means = [x0 + state.beta * tree.lifetime(k) for k in kids]
        xs = [tree.score(k) for k in kids]
        if len(kids) == 2:
            lp += stats.multivariate_normal.logpdf(xs, means, cov)
        else:
            lp += stats.norm.logpdf(xs[0], means[0], math.sqrt(state.sigma2_sq))
    return float(lp)


@pytest.fixture
def tree25():
    return fixture_25()


# -- acceptance report ------------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


def report_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)

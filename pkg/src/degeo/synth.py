"""Synthetic lineages with known expression branches.

Three generators share one default topology (about 700 cells):

* mimic score trees: background scores resampled from a template's
  non-expression cells, with 0-4 of the template's expression branches pasted
  back at their original places;
* model trees: scores drawn from the change-point-in-tree model itself with
  0-10 planted branches;
* planted time-series trees: raw points resampled from the template's
  non-expression cells, with template branch series pasted verbatim.

The template is synthetic as well: a fixed-seed time-series lineage where a
handful of annotated branches switch on expression a few minutes after their
first division.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .lineage import CellRecord, LineageTree, Topology, candidate_set
from .scoring import ScoreTree, score_tree

# (founder, depth of the complete subtree below it)
DEFAULT_SUBLINEAGES = (("AB", 8), ("MS", 5), ("E", 4), ("C", 5), ("D", 4))
FOUNDER_CHILDREN = {"P0": ("AB", "P1"), "P1": ("EMS", "P2"), "EMS": ("E", "MS"),
                    "P2": ("C", "P3"), "P3": ("D", "P4"), "P4": ("Z2", "Z3")}
# lifetimes in minutes: gamma with quartiles near 20 / 27 / 35
LIFETIME_SHAPE, LIFETIME_SCALE = 4.9, 5.8
LIFETIME_MIN, LIFETIME_MAX = 6, 90

# stream keys for the generators, so one seed can drive all of them
KEY_TOPOLOGY, KEY_TEMPLATE, KEY_MIMIC, KEY_MODEL, KEY_PLANTED = range(5)


class SynthError(ValueError):
    pass


def stream_rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=key)))


# -- topology ---------------------------------------------------------------

def _axis(level: int) -> tuple[str, str]:
    return ("l", "r") if level == 1 else ("a", "p")


def default_cell_names(sublineages=DEFAULT_SUBLINEAGES) -> list[str]:
    names = list(FOUNDER_CHILDREN) + ["Z2", "Z3"]
    for founder, depth in sublineages:
        level = [founder]
        names.append(founder)
        for d in range(1, depth + 1):
            a, b = _axis(d)
            level = [n + s for n in level for s in (a, b)]
            names.extend(level)
    return sorted(set(names))


def birth_times(topology: Topology, lifetimes: Mapping[str, int]) -> dict:
    """Absolute birth minute per cell: roots at 0, children one minute after the mother's last."""
    births = {}
    for n in sorted(topology.names, key=topology.depth):
        par = topology.parent(n)
        births[n] = 0 if par is None else births[par] + int(lifetimes[par])
    return births


def default_lifetimes(names: Sequence[str], rng: np.random.Generator) -> dict:
    t = rng.gamma(LIFETIME_SHAPE, LIFETIME_SCALE, size=len(names))
    t = np.clip(np.rint(t), LIFETIME_MIN, LIFETIME_MAX).astype(int)
    return dict(zip(names, t.tolist()))


def default_topology(seed: int = 0) -> ScoreTree:
    """The ~700-cell topology with gamma lifetimes; scores are all zero."""
    names = default_cell_names()
    life = default_lifetimes(names, stream_rng(seed, KEY_TOPOLOGY))
    return ScoreTree({n: 0.0 for n in names}, life)


# -- ground truth -----------------------------------------------------------

@dataclass
class GroundTruth:
    roots: frozenset = frozenset()
    onsets: dict = field(default_factory=dict)    # root -> onset minute
    params: dict = field(default_factory=dict)

    def expressing(self, tree: Topology) -> set:
        out = set()
        for r in self.roots:
            if r in tree:
                out.update(tree.descendants(r))
        return out

    def flags(self, tree: Topology) -> dict:
        expr = self.expressing(tree)
        return {n: n in expr for n in tree}

    def branch_cells(self, tree: Topology) -> dict:
        return {r: set(tree.descendants(r)) for r in sorted(self.roots)}


def write_truth(truth: GroundTruth, tree: Topology, path_or_stream) -> None:
    """Side-car table: ``cell,flag,root,onset_time`` (root and onset empty for background)."""
    if not hasattr(path_or_stream, "write"):
        with open(path_or_stream, "w", newline="") as fh:
            write_truth(truth, tree, fh)
        return
    owner = {}
    for r in sorted(truth.roots):
        for c in tree.descendants(r):
            owner[c] = r
    w = csv.writer(path_or_stream, lineterminator="\n")
    w.writerow(["cell", "flag", "root", "onset_time"])
    for n in tree:
        r = owner.get(n, "")
        onset = truth.onsets.get(r, "") if r else ""
        w.writerow([n, int(bool(r)), r, onset])


def read_truth(path_or_stream) -> tuple[GroundTruth, dict]:
    """Returns the truth and the per-cell flags read from a side-car table."""
    if not hasattr(path_or_stream, "read"):
        with open(path_or_stream, newline="") as fh:
            return read_truth(fh)
    roots, onsets, flags = set(), {}, {}
    for row in csv.DictReader(path_or_stream):
        flags[row["cell"]] = row["flag"] == "1"
        if row["root"]:
            roots.add(row["root"])
            if row["onset_time"]:
                onsets[row["root"]] = int(row["onset_time"])
    return GroundTruth(frozenset(roots), onsets), flags


# -- root placement ---------------------------------------------------------

def _subtree(tree: Topology, root: str) -> set:
    return {root, *tree.descendants(root)}


def draw_disjoint_roots(tree: Topology, k: int, rng: np.random.Generator,
                        pool: Sequence[str] | None = None, attempts: int = 100) -> list:
    """``k`` roots from ``pool`` (default: the candidate set) with disjoint subtrees."""
    pool = sorted(candidate_set(tree) if pool is None else pool)
    if k == 0:
        return []
    for _ in range(attempts):
        chosen, used = [], set()
        order = rng.permutation(len(pool))
        for idx in order:
            r = pool[idx]
            sub = _subtree(tree, r)
            if sub & used:
                continue
            chosen.append(r)
            used |= sub
            if len(chosen) == k:
                return sorted(chosen)
    raise SynthError(f"could not place {k} disjoint branch roots")


# -- template ---------------------------------------------------------------

@dataclass(frozen=True)
class TemplateSpec:
    seed: int = 0
    noise_mean: float = 500.0
    noise_sd: float = 100.0
    jump_sd: float = 5.0          # intensity step at the onset, in noise sd
    slope_sd: float = 0.05        # further rise per minute, in noise sd
    onset_delays: tuple = (2, 3, 4)
    n_small: int = 4              # annotated roots with 14 descendants
    n_large: int = 4              # annotated roots with 30 descendants


@dataclass
class Template:
    lineage: LineageTree
    scores: ScoreTree
    truth: GroundTruth

    @property
    def roots(self) -> list:
        return sorted(self.truth.roots)

    def background_cells(self) -> list:
        expr = self.truth.expressing(self.scores)
        return [n for n in self.scores if n not in expr]


def make_template(spec: TemplateSpec = TemplateSpec()) -> Template:
    """Annotated time-series template on the default topology."""
    topo = default_topology(spec.seed)
    rng = stream_rng(spec.seed, KEY_TEMPLATE)
    counts = topo.descendant_counts()
    small = [n for n, c in counts.items() if c == 14]
    large = [n for n, c in counts.items() if c == 30]
    roots = draw_disjoint_roots(topo, spec.n_large, rng, pool=large)
    used = set().union(*(_subtree(topo, r) for r in roots)) if roots else set()
    small = [n for n in small if not (_subtree(topo, n) & used)]
    roots += draw_disjoint_roots(topo, spec.n_small, rng, pool=small)
    roots = sorted(roots)
    life = {n: topo.lifetime(n) for n in topo}
    births = birth_times(topo, life)
    onsets, owner = {}, {}
    for r in roots:
        kids = topo.children(r)
        onsets[r] = births[kids[0]] + int(rng.choice(spec.onset_delays))
        for c in topo.descendants(r):
            owner[c] = r
    records = []
    for n in topo:
        t = births[n] + np.arange(life[n])
        y = spec.noise_mean + spec.noise_sd * rng.standard_normal(t.size)
        if n in owner:
            k = onsets[owner[n]]
            on = t >= k
            y = y + on * spec.noise_sd * (spec.jump_sd + spec.slope_sd * (t - k))
        records.append(CellRecord(n, t, y))
    lineage = LineageTree(records)
    truth = GroundTruth(frozenset(roots), onsets,
                        {"noise_mean": spec.noise_mean, "noise_sd": spec.noise_sd})
    return Template(lineage, score_tree(lineage), truth)


# -- data set 1: mimic score trees -------------------------------------------

def _count_for(i: int, rng, n_max: int, balanced: bool) -> int:
    return i % (n_max + 1) if balanced else int(rng.integers(0, n_max + 1))


def gen_mimic_score_trees(template: Template, n: int, seed: int = 0, max_branches: int = 4,
                          balanced: bool = False) -> list[tuple[ScoreTree, GroundTruth]]:
    """Resampled background scores plus 0..``max_branches`` pasted template branches."""
    if not template.truth.roots:
        raise SynthError("template has no annotated expression branch")
    bg_cells = template.background_cells()
    if len(bg_cells) < 30:
        raise SynthError("template needs at least 30 non-expression cells")
    src = template.scores
    pool = src.score_array(bg_cells)
    names = list(src.names)
    life = {c: src.lifetime(c) for c in names}
    roots_all = template.roots
    out = []
    for i in range(n):
        rng = stream_rng(seed, KEY_MIMIC, i)
        k = min(_count_for(i, rng, max_branches, balanced), len(roots_all))
        scores = dict(zip(names, rng.choice(pool, size=len(names)).tolist()))
        picked = sorted(rng.choice(roots_all, size=k, replace=False).tolist()) if k else []
        for r in picked:
            for c in src.descendants(r):
                scores[c] = src.score(c)
        out.append((ScoreTree(scores, life),
                    GroundTruth(frozenset(picked), {r: template.truth.onsets[r] for r in picked})))
    return out


# -- data set 2: model trees -------------------------------------------------

@dataclass(frozen=True)
class GenerationPrior:
    """Distributions the true parameters are drawn from.

    Per tree: mu ~ N(mu_mean, mu_sd^2), sigma1_sq ~ InvGamma(var_shape, var_scale).
    Per branch: beta ~ N(beta_mean, beta_sd^2) truncated below at beta_min,
    sigma2_sq ~ InvGamma(var_shape, var_scale), rho ~ Beta(rho_u, rho_v).
    """
    mu_mean: float = 0.0
    mu_sd: float = 1.0
    var_shape: float = 10.0
    var_scale: float = 9.0
    beta_mean: float = 0.25
    beta_sd: float = 0.05
    beta_min: float = 0.05
    rho_u: float = 2.0
    rho_v: float = 2.0


def _inv_gamma(rng, shape, scale):
    return scale / rng.standard_gamma(shape)


def plant_branch(scores: dict, tree: Topology, lifetimes: Mapping[str, int], root: str,
                 beta: float, sigma2_sq: float, rho: float, rng) -> None:
    """Overwrite the strict descendants of ``root`` by the sibling-pair growth law."""
    sd = math.sqrt(sigma2_sq)
    stack = [root]
    while stack:
        mother = stack.pop()
        kids = tree.children(mother)
        if not kids:
            continue
        x0 = scores[mother]
        z1 = rng.standard_normal()
        if len(kids) == 2:
            z2 = rho * z1 + math.sqrt(1.0 - rho * rho) * rng.standard_normal()
            scores[kids[0]] = x0 + beta * lifetimes[kids[0]] + sd * z1
            scores[kids[1]] = x0 + beta * lifetimes[kids[1]] + sd * z2
        else:
            scores[kids[0]] = x0 + beta * lifetimes[kids[0]] + sd * z1
        stack.extend(reversed(kids))


def gen_model_trees(topology: ScoreTree, n: int, seed: int = 0,
                    prior: GenerationPrior = GenerationPrior(), max_branches: int = 10,
                    counts: Sequence[int] | None = None) -> list[tuple[ScoreTree, GroundTruth]]:
    """Score trees drawn from the model; tree ``i`` has ``i mod (max_branches+1)`` roots
    unless ``counts`` is given."""
    names = list(topology.names)
    life = {c: topology.lifetime(c) for c in names}
    out = []
    for i in range(n):
        rng = stream_rng(seed, KEY_MODEL, i)
        k = counts[i] if counts is not None else i % (max_branches + 1)
        roots = draw_disjoint_roots(topology, k, rng)
        mu = prior.mu_mean + prior.mu_sd * rng.standard_normal()
        s1 = _inv_gamma(rng, prior.var_shape, prior.var_scale)
        x = mu + math.sqrt(s1) * rng.standard_normal(len(names))
        scores = dict(zip(names, x.tolist()))
        branches = {}
        for r in roots:
            beta = prior.beta_mean + prior.beta_sd * rng.standard_normal()
            beta = max(beta, prior.beta_min)
            s2 = _inv_gamma(rng, prior.var_shape, prior.var_scale)
            rho = rng.beta(prior.rho_u, prior.rho_v)
            plant_branch(scores, topology, life, r, beta, s2, rho, rng)
            branches[r] = {"beta": beta, "sigma2_sq": s2, "rho": rho}
        truth = GroundTruth(frozenset(roots), {},
                            {"mu": mu, "sigma1_sq": s1, "branches": branches})
        out.append((ScoreTree(scores, life), truth))
    return out


# -- data set 3: planted time-series trees -----------------------------------

def gen_planted_timeseries_trees(template: Template, n: int, seed: int = 0,
                                 max_branches: int = 4, balanced: bool = False
                                 ) -> list[tuple[LineageTree, GroundTruth]]:
    """Raw points resampled from non-expression cells; template branch series pasted."""
    if not template.truth.roots:
        raise SynthError("template has no annotated expression branch")
    lin = template.lineage
    bg_cells = template.background_cells()
    pool = np.concatenate([lin[c].intensities for c in bg_cells])
    roots_all = template.roots
    out = []
    for i in range(n):
        rng = stream_rng(seed, KEY_PLANTED, i)
        k = min(_count_for(i, rng, max_branches, balanced), len(roots_all))
        picked = sorted(rng.choice(roots_all, size=k, replace=False).tolist()) if k else []
        planted = set()
        for r in picked:
            planted.update(lin.descendants(r))
        records = []
        for name in lin:
            rec = lin[name]
            if name in planted:
                records.append(rec)
            else:
                records.append(CellRecord(name, rec.times, rng.choice(pool, size=len(rec))))
        out.append((LineageTree(records),
                    GroundTruth(frozenset(picked), {r: template.truth.onsets[r] for r in picked})))
    return out


# -- score trees as files -----------------------------------------------------

def score_tree_as_lineage(tree: ScoreTree) -> LineageTree:
    """Constant series at each cell's score over its lifetime.

    Scoring such a lineage gives back the same scores and lifetimes exactly.
    """
    life = {n: tree.lifetime(n) for n in tree}
    births = birth_times(tree, life)
    return LineageTree(CellRecord(n, births[n] + np.arange(life[n]),
                                  np.full(life[n], tree.score(n))) for n in tree)

"""Change-point-in-tree model.

Cells outside the expression branch have i.i.d. ``N(mu, sigma1_sq)`` scores.
Inside the branch every sibling pair is bivariate normal around the mother's
score plus ``beta`` times each child's lifetime, with common variance
``sigma2_sq`` and correlation ``rho``.  The change point ``M`` is itself a
background cell; the branch is its strict descendants.

A mother with a single observed child contributes the marginal univariate
density ``N(x0 + beta * t, sigma2_sq)``.  To keep one quadratic form for the
whole branch such a single is stored in ``J`` as ``(1 - rho**2) * resid**2``
so that ``J / (2 (1 - rho**2) sigma2_sq)`` is still the exponent.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields, replace

import numpy as np
from scipy.special import betaln, gammaln

from .scoring import ScoreTree

LOG_2PI = math.log(2.0 * math.pi)


def robust_variance(x) -> float:
    """Squared normal-consistent MAD; falls back to the sample variance, then 1."""
    x = np.asarray(x, dtype=float)
    if x.size < 2:
        return 1.0
    mad = 1.482602218505602 * float(np.median(np.abs(x - np.median(x))))
    var = mad * mad
    if not var > 0:
        var = float(np.var(x, ddof=1))
    return var if var > 0 else 1.0


@dataclass(frozen=True)
class Hyperparams:
    g: float = 2.0   # sigma1_sq ~ InvGamma(g, h)
    h: float = 1.0
    a: float = 2.0   # sigma2_sq ~ InvGamma(a, b)
    b: float = 1.0
    r: float = 0.0   # beta ~ N(r, s)
    s: float = 100.0
    p: float = 0.0   # mu ~ N(p, q)
    q: float = 100.0
    u: float = 2.0   # rho ~ Beta(u, v)
    v: float = 2.0

    def __post_init__(self):
        for name in ("g", "h", "a", "b", "s", "q", "u", "v"):
            value = getattr(self, name)
            if not value > 0:
                raise ValueError(f"hyperparameter {name} must be positive, got {value}")

    @classmethod
    def from_scores(cls, scores) -> "Hyperparams":
        """Weakly informative defaults on the scale of the observed scores.

        Equivalent to ``g=a=2, h=b=1, r=0, s=100, q=100`` after standardizing
        the scores to unit variance, with ``p`` the sample median.  The
        variance is the MAD-based estimate so that expression branches do not
        inflate the background scale.
        """
        x = np.asarray(scores, dtype=float)
        var = robust_variance(x)
        return cls(g=2.0, h=var, a=2.0, b=var, r=0.0, s=100.0 * var,
                   p=float(np.median(x)), q=100.0 * var, u=2.0, v=2.0)

    def replace(self, **changes) -> "Hyperparams":
        return replace(self, **changes)


def read_hyperparams(path, base: Hyperparams | None = None) -> Hyperparams:
    """Read ``key = value`` lines; ``#`` starts a comment. Unset keys keep ``base``."""
    known = {f.name for f in fields(Hyperparams)}
    values = asdict(base or Hyperparams())
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in known:
                raise ValueError(f"{path}:{lineno}: unknown hyperparameter {key!r}")
            values[key] = float(value)
    return Hyperparams(**values)


def write_hyperparams(hyper: Hyperparams, path) -> None:
    with open(path, "w") as fh:
        for key, value in asdict(hyper).items():
            fh.write(f"{key} = {value!r}\n")


@dataclass(frozen=True)
class ModelState:
    M: str
    mu: float
    sigma1_sq: float
    sigma2_sq: float
    beta: float
    rho: float

    def validate(self) -> None:
        if not (self.sigma1_sq > 0 and self.sigma2_sq > 0):
            raise ValueError("variances must be positive")
        if not 0.0 < self.rho < 1.0:
            raise ValueError("rho must lie in (0, 1)")
        if not all(math.isfinite(v) for v in (self.mu, self.beta)):
            raise ValueError("mu and beta must be finite")


@dataclass(frozen=True)
class SiblingPair:
    mother: float
    x1: float
    t1: float
    x2: float | None = None
    t2: float | None = None

    @property
    def is_single(self) -> bool:
        return self.x2 is None


@dataclass(frozen=True)
class BranchPartition:
    M: str
    background: tuple[str, ...]
    branch: tuple[str, ...]
    pairs: tuple[SiblingPair, ...]
    background_scores: np.ndarray

    @property
    def n_full(self) -> int:
        return sum(1 for p in self.pairs if not p.is_single)

    @property
    def n_single(self) -> int:
        return sum(1 for p in self.pairs if p.is_single)


def partition(tree: ScoreTree, M: str) -> BranchPartition:
    # score trees are immutable, so partitions are cached on the tree
    cache = tree.__dict__.setdefault("_partitions", {})
    part = cache.get(M)
    if part is None:
        part = cache[M] = _partition(tree, M)
    return part


def _partition(tree: ScoreTree, M: str) -> BranchPartition:
    branch = tree.descendants(M)
    inside = set(branch)
    background = tuple(n for n in tree if n not in inside)
    pairs = []
    for mother in [M] + branch:
        kids = tree.children(mother)
        if not kids:
            continue
        x0 = tree.score(mother)
        first = kids[0]
        if len(kids) == 1:
            pairs.append(SiblingPair(x0, tree.score(first), tree.lifetime(first)))
        else:
            second = kids[1]
            pairs.append(SiblingPair(x0, tree.score(first), tree.lifetime(first),
                                     tree.score(second), tree.lifetime(second)))
    bg = tree.score_array(background)
    bg.flags.writeable = False
    return BranchPartition(M, background, tuple(branch), tuple(pairs), bg)


def j_statistic(part: BranchPartition, beta: float, rho: float) -> float:
    total = 0.0
    for pr in part.pairs:
        e1 = pr.x1 - pr.mother - beta * pr.t1
        if pr.is_single:
            total += (1.0 - rho * rho) * e1 * e1
        else:
            e2 = pr.x2 - pr.mother - beta * pr.t2
            total += e1 * e1 + e2 * e2 - 2.0 * rho * e1 * e2
    return total


def k_statistic(part: BranchPartition, rho: float, sigma2_sq: float, r: float, s: float) -> float:
    total = 0.0
    for pr in part.pairs:
        d1 = pr.x1 - pr.mother
        if pr.is_single:
            total += (1.0 - rho * rho) * pr.t1 * d1
        else:
            d2 = pr.x2 - pr.mother
            total += (pr.t1 - rho * pr.t2) * d1 + (pr.t2 - rho * pr.t1) * d2
    return total / ((1.0 - rho * rho) * sigma2_sq) + r / s


def lifetime_quadratic(part: BranchPartition, rho: float) -> float:
    """Sum over pairs of ``t1^2 + t2^2 - 2 rho t1 t2`` (singles: ``(1-rho^2) t^2``)."""
    total = 0.0
    for pr in part.pairs:
        if pr.is_single:
            total += (1.0 - rho * rho) * pr.t1 * pr.t1
        else:
            total += pr.t1 * pr.t1 + pr.t2 * pr.t2 - 2.0 * rho * pr.t1 * pr.t2
    return total


def pair_coefficients(part: BranchPartition) -> np.ndarray:
    """Polynomial-in-rho coefficients of the branch sums.

    Row 0 holds the lifetime quadratic ``A``, row 1 the cross term ``B`` (the
    numerator of ``K`` before scaling), row 2 the residual quadratic ``C`` at
    ``beta = 0``; column ``k`` multiplies ``rho**k``.  Then
    ``J(beta, rho) = C - 2 beta B + beta^2 A``.
    """
    coef = np.zeros((3, 3))
    for pr in part.pairs:
        d1 = pr.x1 - pr.mother
        t1 = pr.t1
        if pr.is_single:
            coef[0, 0] += t1 * t1
            coef[0, 2] -= t1 * t1
            coef[1, 0] += t1 * d1
            coef[1, 2] -= t1 * d1
            coef[2, 0] += d1 * d1
            coef[2, 2] -= d1 * d1
        else:
            d2 = pr.x2 - pr.mother
            t2 = pr.t2
            coef[0, 0] += t1 * t1 + t2 * t2
            coef[0, 1] -= 2.0 * t1 * t2
            coef[1, 0] += t1 * d1 + t2 * d2
            coef[1, 1] -= t2 * d1 + t1 * d2
            coef[2, 0] += d1 * d1 + d2 * d2
            coef[2, 1] -= 2.0 * d1 * d2
    return coef


def log_prior(state: ModelState, hyper: Hyperparams) -> float:
    g, h, a, b = hyper.g, hyper.h, hyper.a, hyper.b
    s1, s2 = state.sigma1_sq, state.sigma2_sq
    lp = g * math.log(h) - gammaln(g) - (g + 1.0) * math.log(s1) - h / s1
    lp += a * math.log(b) - gammaln(a) - (a + 1.0) * math.log(s2) - b / s2
    lp += -0.5 * (LOG_2PI + math.log(hyper.s)) - (state.beta - hyper.r) ** 2 / (2.0 * hyper.s)
    lp += -0.5 * (LOG_2PI + math.log(hyper.q)) - (state.mu - hyper.p) ** 2 / (2.0 * hyper.q)
    lp += ((hyper.u - 1.0) * math.log(state.rho) + (hyper.v - 1.0) * math.log1p(-state.rho)
           - betaln(hyper.u, hyper.v))
    return float(lp)


def log_likelihood(state: ModelState, part: BranchPartition) -> float:
    s1, s2, rho = state.sigma1_sq, state.sigma2_sq, state.rho
    resid = part.background_scores - state.mu
    n_bg = resid.size
    ll = -0.5 * n_bg * (LOG_2PI + math.log(s1)) - float(resid @ resid) / (2.0 * s1)
    n_full, n_single = part.n_full, part.n_single
    one_m_r2 = 1.0 - rho * rho
    ll -= n_full * (LOG_2PI + math.log(s2) + 0.5 * math.log(one_m_r2))
    ll -= 0.5 * n_single * (LOG_2PI + math.log(s2))
    ll -= j_statistic(part, state.beta, rho) / (2.0 * one_m_r2 * s2)
    return float(ll)


def log_posterior(state: ModelState, tree: ScoreTree, hyper: Hyperparams) -> float:
    """Unnormalized log joint posterior (the uniform prior on M is dropped)."""
    try:
        state.validate()
    except ValueError as exc:
        raise ValueError(f"invalid model state: {exc}") from None
    if state.M not in tree:
        raise ValueError(f"change point {state.M!r} is not in the tree")
    return log_prior(state, hyper) + log_likelihood(state, partition(tree, state.M))

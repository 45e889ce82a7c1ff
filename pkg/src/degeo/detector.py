"""Iterative branch detection with a learned stopping rule.

Each round fits the change-point model, summarizes the detected branch as a
feature vector and asks a classifier whether it is a real expression branch.
Accepted branches are cut out of the tree (the change point and everything
below it) and the search repeats on what is left.

The classifier is an epsilon-insensitive support vector regressor with an RBF
kernel, trained on 0/1 labels by sequential minimal optimization.
"""

from __future__ import annotations

import math
from dataclasses import astuple, dataclass, field, fields
from typing import Iterable, Sequence

import numpy as np

from .lineage import candidate_set
from .model import Hyperparams
from .sampler import (ChainConfig, ChainError, ConvergenceError, DetectedBranch,
                      DetectionError, PosteriorSample, fit)
from .scoring import ScoreTree

__all__ = [
    "BranchFeatures", "SvrConfig", "SvrModel", "TrainingError", "extract_features",
    "svr_train", "svr_predict", "beta_criterion", "SvrStopping", "BetaStopping",
    "DetectionResult", "detect_branches", "DetectedBranch", "DEFAULT_THRESHOLD",
    "THRESHOLD_GRID", "select_threshold", "read_model", "write_model", "load_default_model",
]

DEFAULT_THRESHOLD = 0.15
THRESHOLD_GRID = tuple(round(0.05 * k, 2) for k in range(1, 11))
Z_975 = 1.959964


class TrainingError(ValueError):
    pass


@dataclass(frozen=True)
class BranchFeatures:
    # beta_hat is the fitted growth rate in units of the fitted background
    # standard deviation per minute, so models transfer across intensity scales
    beta_hat: float
    n_branch_cells: int
    n_pairs: int
    posterior_prob_M: float
    mean_elevation: float
    rho_hat: float
    frac_extreme: float

    def vector(self) -> np.ndarray:
        return np.array(astuple(self), dtype=float)

    @classmethod
    def names(cls) -> tuple[str, ...]:
        return tuple(f.name for f in fields(cls))


def extract_features(branch: DetectedBranch, tree: ScoreTree) -> BranchFeatures:
    cells = tree.descendants(branch.M_star)
    if not cells:
        raise ValueError(f"{branch.M_star} has no descendants")
    sd = math.sqrt(branch.sigma1_sq)
    x = tree.score_array(cells)
    n_pairs = sum(1 for c in [branch.M_star] + cells if tree.children(c))
    return BranchFeatures(
        beta_hat=branch.beta / sd,
        n_branch_cells=len(cells),
        n_pairs=n_pairs,
        posterior_prob_M=branch.posterior_prob_M,
        mean_elevation=(float(x.mean()) - branch.mu) / sd,
        rho_hat=branch.rho,
        frac_extreme=float(np.mean(x > branch.mu + Z_975 * sd)),
    )


# -- support vector regression ------------------------------------------------

@dataclass(frozen=True)
class SvrConfig:
    epsilon: float = 0.1
    C: float = 10.0
    bandwidth: float | None = None    # None: median pairwise standardized distance
    tol: float = 1e-3
    max_iter: int = 1_000_000


@dataclass(frozen=True)
class SvrModel:
    feature_names: tuple
    mean: np.ndarray
    scale: np.ndarray
    support: np.ndarray      # standardized support vectors, (k, d)
    coef: np.ndarray         # alpha - alpha*, (k,)
    bias: float
    bandwidth: float
    epsilon: float
    C: float
    threshold: float = DEFAULT_THRESHOLD

    def standardize(self, X) -> np.ndarray:
        return (np.atleast_2d(np.asarray(X, dtype=float)) - self.mean) / self.scale

    def decision(self, X) -> np.ndarray:
        Z = self.standardize(X)
        if self.support.shape[0] == 0:
            return np.full(Z.shape[0], self.bias)
        return _rbf(Z, self.support, self.bandwidth) @ self.coef + self.bias

    def with_threshold(self, threshold: float) -> "SvrModel":
        return SvrModel(self.feature_names, self.mean, self.scale, self.support, self.coef,
                        self.bias, self.bandwidth, self.epsilon, self.C, threshold)


def _rbf(A, B, bandwidth):
    d2 = (np.sum(A * A, axis=1)[:, None] + np.sum(B * B, axis=1)[None, :] - 2.0 * A @ B.T)
    return np.exp(-np.maximum(d2, 0.0) / (2.0 * bandwidth * bandwidth))


def _median_distance(Z) -> float:
    n = Z.shape[0]
    iu = np.triu_indices(n, k=1)
    d2 = (np.sum(Z * Z, axis=1)[:, None] + np.sum(Z * Z, axis=1)[None, :] - 2.0 * Z @ Z.T)
    d = np.sqrt(np.maximum(d2[iu], 0.0))
    d = d[d > 0]
    return float(np.median(d)) if d.size else 1.0


def _smo(K, target, epsilon, C, tol, max_iter):
    """Solve the epsilon-SVR dual; returns (alpha - alpha*, bias).

    Variables t < l carry y=+1 (alpha), t >= l carry y=-1 (alpha*).  Working
    pairs are chosen by maximal violation for i and second-order gain for j.
    """
    l = K.shape[0]
    y = np.concatenate([np.ones(l), -np.ones(l)])
    base = np.concatenate([np.arange(l), np.arange(l)])
    p = np.concatenate([epsilon - target, epsilon + target])
    alpha = np.zeros(2 * l)
    grad = p.copy()
    diag = np.diag(K)[base]
    tau = 1e-12
    for _ in range(max_iter):
        up = ((y > 0) & (alpha < C)) | ((y < 0) & (alpha > 0))
        low = ((y > 0) & (alpha > 0)) | ((y < 0) & (alpha < C))
        score = -y * grad
        if not up.any() or not low.any():
            break
        up_idx = np.flatnonzero(up)
        i = int(up_idx[np.argmax(score[up_idx])])
        gmax = score[i]
        gmin = score[low].min()
        if gmax - gmin < tol:
            break
        k_i = K[base[i], base]
        cand = np.flatnonzero(low & (score < gmax))
        b = gmax - score[cand]
        a = diag[i] + diag[cand] - 2.0 * k_i[cand]
        a = np.where(a > 0, a, tau)
        j = int(cand[np.argmin(-(b * b) / a)])
        # two-variable update (same clipping as the classic solver)
        q_i = y[i] * y * k_i
        q_ij = q_i[j]
        ai, aj = alpha[i], alpha[j]
        if y[i] != y[j]:
            quad = max(diag[i] + diag[j] + 2.0 * q_ij, tau)
            delta = (-grad[i] - grad[j]) / quad
            diff = ai - aj
            ni, nj = ai + delta, aj + delta
            if diff > 0:
                if nj < 0:
                    nj, ni = 0.0, diff
            elif ni < 0:
                ni, nj = 0.0, -diff
            if diff > 0:
                if ni > C:
                    ni, nj = C, C - diff
            elif nj > C:
                nj, ni = C, C + diff
        else:
            quad = max(diag[i] + diag[j] - 2.0 * q_ij, tau)
            delta = (grad[i] - grad[j]) / quad
            total = ai + aj
            ni, nj = ai - delta, aj + delta
            if total > C:
                if ni > C:
                    ni, nj = C, total - C
            elif nj < 0:
                nj, ni = 0.0, total
            if total > C:
                if nj > C:
                    nj, ni = C, total - C
            elif ni < 0:
                ni, nj = 0.0, total
        q_j = y[j] * y * K[base[j], base]
        grad += q_i * (ni - ai) + q_j * (nj - aj)
        alpha[i], alpha[j] = ni, nj
    else:
        raise TrainingError(f"SMO did not reach tolerance {tol} in {max_iter} iterations")
    # bias from free variables, else midpoint of the feasible interval
    score = -y * grad
    free = (alpha > 0) & (alpha < C)
    if free.any():
        rho = float(np.mean(y[free] * grad[free]))
    else:
        up = ((y > 0) & (alpha < C)) | ((y < 0) & (alpha > 0))
        low = ((y > 0) & (alpha > 0)) | ((y < 0) & (alpha < C))
        hi = -score[up].max() if up.any() else math.inf
        lo = -score[low].min() if low.any() else -math.inf
        rho = 0.5 * (hi + lo) if math.isfinite(hi + lo) else (hi if math.isfinite(hi) else lo)
    return alpha[:l] - alpha[l:], -rho


def svr_train(rows: Sequence[tuple[BranchFeatures, int]], config: SvrConfig = SvrConfig(),
              threshold: float = DEFAULT_THRESHOLD) -> SvrModel:
    """Fit the regressor to 0/1 labels.

    Rows are put in a canonical order first, so the model does not depend on
    the order in which they were supplied.
    """
    if len(rows) < 2:
        raise TrainingError("need at least two training rows")
    X = np.array([f.vector() if isinstance(f, BranchFeatures) else np.asarray(f, float)
                  for f, _ in rows])
    y = np.array([float(lab) for _, lab in rows])
    if len(set(y.tolist())) < 2:
        raise TrainingError("training rows carry a single label")
    order = np.lexsort(np.column_stack([X, y]).T[::-1])
    X, y = X[order], y[order]
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[~(scale > 0)] = 1.0
    Z = (X - mean) / scale
    bw = config.bandwidth if config.bandwidth is not None else _median_distance(Z)
    K = _rbf(Z, Z, bw)
    coef, bias = _smo(K, y, config.epsilon, config.C, config.tol, config.max_iter)
    keep = coef != 0.0
    return SvrModel(BranchFeatures.names(), mean, scale, Z[keep], coef[keep], float(bias),
                    float(bw), config.epsilon, config.C, threshold)


def svr_predict(model: SvrModel, features) -> float:
    x = features.vector() if isinstance(features, BranchFeatures) else features
    return float(model.decision(x)[0])


def select_threshold(outputs_per_tree: Iterable[Sequence[tuple[float, int]]],
                     grid: Sequence[float] = THRESHOLD_GRID) -> tuple[float, dict]:
    """Threshold on ``grid`` minimizing the mean per-tree false classification rate.

    ``outputs_per_tree`` holds (svr_output, label) for the branches detected
    in each tree.  Ties go to the smallest threshold.
    """
    trees = [list(t) for t in outputs_per_tree if len(t)]
    if not trees:
        raise TrainingError("no detected branches to select a threshold from")
    rates = {}
    for thr in grid:
        per_tree = [np.mean([(out >= thr) != bool(lab) for out, lab in t]) for t in trees]
        rates[thr] = float(np.mean(per_tree))
    best = min(grid, key=lambda t: (rates[t], t))
    return best, rates


_MAGIC = "degeo-svr 1"


def write_model(model: SvrModel, stream) -> None:
    def row(values):
        return " ".join(repr(float(v)) for v in values)

    stream.write(_MAGIC + "\n")
    stream.write("features " + " ".join(model.feature_names) + "\n")
    stream.write("mean " + row(model.mean) + "\n")
    stream.write("scale " + row(model.scale) + "\n")
    for key in ("bandwidth", "epsilon", "C", "bias", "threshold"):
        stream.write(f"{key} {float(getattr(model, key))!r}\n")
    stream.write(f"support {model.support.shape[0]}\n")
    for c, z in zip(model.coef, model.support):
        stream.write(row([c, *z]) + "\n")


def read_model(stream) -> SvrModel:
    lines = [ln.strip() for ln in stream if ln.strip()]
    if not lines or lines[0] != _MAGIC:
        raise ValueError("not a degeo SVR model file")
    head = {}
    k = 1
    while not lines[k].startswith("support "):
        key, _, rest = lines[k].partition(" ")
        head[key] = rest
        k += 1
    n_sv = int(lines[k].split()[1])
    body = np.array([[float(v) for v in ln.split()] for ln in lines[k + 1:k + 1 + n_sv]])
    names = tuple(head["features"].split())
    d = len(names)
    body = body.reshape(n_sv, d + 1)
    return SvrModel(names,
                    np.array([float(v) for v in head["mean"].split()]),
                    np.array([float(v) for v in head["scale"].split()]),
                    body[:, 1:], body[:, 0], float(head["bias"]), float(head["bandwidth"]),
                    float(head["epsilon"]), float(head["C"]),
                    float(head.get("threshold", DEFAULT_THRESHOLD)))


def load_default_model() -> SvrModel:
    """The model shipped with the package (trained on mimic trees, seed 0)."""
    from importlib.resources import files
    with files("degeo").joinpath("data/default_svr.txt").open() as fh:
        return read_model(fh)


# -- stopping rules and the detection loop ------------------------------------

def beta_criterion(history: Sequence[float], new_beta: float) -> bool:
    """True to continue: stop once a branch grows slower than a third of the mean so far."""
    if not len(history):
        return True
    return not new_beta < float(np.mean(history)) / 3.0


@dataclass(frozen=True)
class SvrStopping:
    model: SvrModel
    threshold: float = DEFAULT_THRESHOLD

    def judge(self, branch: DetectedBranch, tree: ScoreTree, history) -> bool:
        branch.features = extract_features(branch, tree)
        branch.svr_output = svr_predict(self.model, branch.features)
        return branch.svr_output >= self.threshold


@dataclass(frozen=True)
class BetaStopping:
    """Accept while the growth rate stays above a third of the accepted mean.

    The first branch is always accepted.
    """

    def judge(self, branch: DetectedBranch, tree: ScoreTree, history) -> bool:
        branch.features = extract_features(branch, tree)
        return beta_criterion(history, branch.beta)


@dataclass
class DetectionResult:
    branches: list = field(default_factory=list)
    complete: bool = True
    error: str | None = None
    samples: list = field(default_factory=list)

    @property
    def accepted(self) -> list:
        return [b for b in self.branches if b.accepted]

    def accepted_cells(self, tree) -> set:
        out = set()
        for b in self.accepted:
            out.add(b.M_star)
            out.update(tree.descendants(b.M_star))
        return out


def detect_branches(tree: ScoreTree, hyper: Hyperparams | None, config: ChainConfig,
                    stopping, max_rounds: int = 50, keep_samples: bool = False,
                    on_round=None) -> DetectionResult:
    """Fit, classify and delete until a branch is rejected or no candidate is left.

    Hyperparameters default to ``Hyperparams.from_scores`` on the full tree
    and stay fixed across rounds.  Round ``k`` uses RNG stream key ``k``.
    """
    if hyper is None:
        hyper = Hyperparams.from_scores(tree.score_array())
    result = DetectionResult()
    current = tree
    history: list[float] = []
    for rnd in range(max_rounds):
        cands = candidate_set(current)
        if not cands:
            break
        try:
            sample, branch = fit(current, hyper, cands, config, stream=(rnd,))
        except (ConvergenceError, ChainError, DetectionError) as exc:
            result.complete = False
            result.error = f"round {rnd}: {exc}"
            break
        if keep_samples:
            result.samples.append(sample)
        branch.accepted = bool(stopping.judge(branch, current, history))
        result.branches.append(branch)
        if on_round is not None:
            on_round(rnd, branch, current)
        if not branch.accepted:
            break
        history.append(branch.beta)
        current = current.without([branch.M_star] + current.descendants(branch.M_star))
    return result

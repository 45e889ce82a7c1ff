"""Gibbs sampling for the change-point-in-tree model.

The public ``draw_*`` functions take a ``ModelState`` and work from an explicit
partition of the tree; they are the readable form of each conditional.  Chains
run through ``kernels.run_gibbs`` instead, which uses per-candidate sufficient
statistics so one scan costs O(#candidates + grid size).
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import kernels
from .model import (BranchPartition, Hyperparams, ModelState, j_statistic, k_statistic,
                    lifetime_quadratic, log_posterior, pair_coefficients, partition)
from .scoring import ScoreTree

PARAMS = ("mu", "sigma1_sq", "sigma2_sq", "beta", "rho")


class DetectionError(RuntimeError):
    """The tree cannot host a change point (empty candidate set)."""


class ChainError(RuntimeError):
    def __init__(self, chain, iteration, message):
        self.chain = chain
        self.iteration = iteration
        super().__init__(f"chain {chain}, iteration {iteration}: {message}")


class ConvergenceError(RuntimeError):
    def __init__(self, rhat, iterations, sample=None):
        self.rhat = dict(rhat)
        self.iterations = iterations
        self.sample = sample
        worst = ", ".join(f"{k}={v:.3f}" for k, v in self.rhat.items())
        super().__init__(f"no convergence after {iterations} iterations (R-hat: {worst})")


@dataclass(frozen=True)
class ChainConfig:
    n_chains: int = 4
    max_iterations: int = 5000
    burn_in: int = 1000
    thinning: int = 1
    rng_seed: int = 0
    rhat_tolerance: float = 0.2
    rho_grid_size: int = 200
    check_every: int = 500
    n_jobs: int | None = None
    collapse_beta: bool = True  # draw M with beta integrated out (blocked M, beta step)

    def __post_init__(self):
        if self.n_chains < 2:
            raise ValueError("need at least two chains")
        if not 0 <= self.burn_in < self.max_iterations:
            raise ValueError("burn_in must be smaller than max_iterations")
        if self.thinning < 1 or self.check_every < 1:
            raise ValueError("thinning and check_every must be positive")
        if not self.rhat_tolerance > 0:
            raise ValueError("rhat_tolerance must be positive")


@dataclass
class DetectedBranch:
    M_star: str
    mu: float
    sigma1_sq: float
    sigma2_sq: float
    beta: float
    rho: float
    posterior_prob_M: float
    rhat: dict = field(default_factory=dict)
    iterations: int = 0
    features: object = None
    svr_output: float | None = None
    accepted: bool | None = None

    def params(self) -> dict:
        return {k: getattr(self, k) for k in PARAMS}


# -- conditionals -----------------------------------------------------------

def sigma1_sq_conditional(part: BranchPartition, mu: float, hyper: Hyperparams):
    """Inverse-gamma ``(shape, scale)`` of the background variance."""
    resid = part.background_scores - mu
    return hyper.g + 0.5 * resid.size, hyper.h + 0.5 * float(resid @ resid)


def sigma2_sq_conditional(part: BranchPartition, beta: float, rho: float, hyper: Hyperparams):
    shape = hyper.a + part.n_full + 0.5 * part.n_single
    return shape, hyper.b + j_statistic(part, beta, rho) / (2.0 * (1.0 - rho * rho))


def beta_conditional(part: BranchPartition, rho: float, sigma2_sq: float, hyper: Hyperparams):
    """Normal ``(mean, variance)`` of the growth rate."""
    precision = 1.0 / hyper.s + lifetime_quadratic(part, rho) / ((1.0 - rho * rho) * sigma2_sq)
    return k_statistic(part, rho, sigma2_sq, hyper.r, hyper.s) / precision, 1.0 / precision


def mu_conditional(part: BranchPartition, sigma1_sq: float, hyper: Hyperparams):
    x = part.background_scores
    precision = 1.0 / hyper.q + x.size / sigma1_sq
    return (hyper.p / hyper.q + float(x.sum()) / sigma1_sq) / precision, 1.0 / precision


def rho_log_density(part: BranchPartition, rho, beta: float, sigma2_sq: float,
                    hyper: Hyperparams):
    """Unnormalized log conditional density of rho (vectorized over ``rho``)."""
    rho = np.asarray(rho, dtype=float)
    (a0, a1, a2), (b0, b1, b2), (c0, c1, c2) = pair_coefficients(part)
    j = ((c0 - 2.0 * beta * b0 + beta * beta * a0)
         + rho * (c1 - 2.0 * beta * b1 + beta * beta * a1)
         + rho * rho * (c2 - 2.0 * beta * b2 + beta * beta * a2))
    one_m_r2 = 1.0 - rho * rho
    return ((hyper.u - 1.0) * np.log(rho) + (hyper.v - 1.0) * np.log1p(-rho)
            - 0.5 * part.n_full * np.log(one_m_r2) - j / (2.0 * one_m_r2 * sigma2_sq))


def m_log_weights(state: ModelState, tree: ScoreTree, candidates: Iterable[str]) -> dict:
    """Log conditional weight of each candidate, up to a shared constant."""
    out = {}
    s1, s2, rho = state.sigma1_sq, state.sigma2_sq, state.rho
    one_m_r2 = 1.0 - rho * rho
    for c in sorted(candidates):
        part = partition(tree, c)
        resid = part.background_scores - state.mu
        out[c] = (-0.5 * resid.size * math.log(s1) - float(resid @ resid) / (2.0 * s1)
                  - part.n_full * (math.log(s2) + 0.5 * math.log(one_m_r2))
                  - 0.5 * part.n_single * math.log(s2)
                  - j_statistic(part, state.beta, rho) / (2.0 * one_m_r2 * s2))
    return out


def _inv_gamma(rng, shape, scale):
    return scale / rng.standard_gamma(shape)


def draw_sigma1_sq(state, tree, hyper, rng) -> float:
    shape, scale = sigma1_sq_conditional(partition(tree, state.M), state.mu, hyper)
    return _inv_gamma(rng, shape, scale)


def draw_sigma2_sq(state, tree, hyper, rng) -> float:
    shape, scale = sigma2_sq_conditional(partition(tree, state.M), state.beta, state.rho, hyper)
    return _inv_gamma(rng, shape, scale)


def draw_beta(state, tree, hyper, rng) -> float:
    mean, var = beta_conditional(partition(tree, state.M), state.rho, state.sigma2_sq, hyper)
    return mean + math.sqrt(var) * rng.standard_normal()


def draw_mu(state, tree, hyper, rng) -> float:
    mean, var = mu_conditional(partition(tree, state.M), state.sigma1_sq, hyper)
    return mean + math.sqrt(var) * rng.standard_normal()


def draw_rho(state, tree, hyper, rng, grid_size: int = 200) -> float:
    """Grid-Gibbs draw: pick a grid cell by its density, then jitter inside it."""
    grid = (np.arange(grid_size) + 0.5) / grid_size
    logd = rho_log_density(partition(tree, state.M), grid, state.beta, state.sigma2_sq, hyper)
    cell = kernels.sample_log_weights(logd, rng.random())
    if cell < 0:
        raise ArithmeticError("rho conditional density is not finite anywhere on the grid")
    return min(max((cell + rng.random()) / grid_size, 1e-12), 1.0 - 1e-12)


def draw_M(state, tree, hyper, candidate_set, rng) -> str:
    if not candidate_set:
        raise DetectionError("empty candidate set: the tree is too small")
    weights = m_log_weights(state, tree, candidate_set)
    names = list(weights)
    idx = kernels.sample_log_weights(np.fromiter(weights.values(), float), rng.random())
    if idx < 0:
        raise ArithmeticError("change-point weights are not finite")
    return names[idx]


# -- chains -----------------------------------------------------------------

@dataclass(frozen=True)
class CandidateTable:
    """Per-candidate sufficient statistics on mean-centered scores."""
    names: tuple
    table: np.ndarray
    totals: tuple
    center: float


def build_candidate_table(tree: ScoreTree, candidates: Iterable[str]) -> CandidateTable:
    names = tuple(sorted(candidates))
    if not names:
        raise DetectionError("empty candidate set: the tree is too small")
    x = tree.score_array()
    center = float(x.mean())
    xc = x - center
    index = {n: i for i, n in enumerate(tree.names)}
    table = np.zeros((len(names), kernels.TABLE_WIDTH))
    for row, name in enumerate(names):
        part = partition(tree, name)
        xb = xc[[index[n] for n in part.branch]] if part.branch else np.zeros(0)
        table[row, kernels.NB] = xb.size
        table[row, kernels.SX] = xb.sum()
        table[row, kernels.SXX] = xb @ xb
        table[row, kernels.NFULL] = part.n_full
        table[row, kernels.NSINGLE] = part.n_single
        table[row, kernels.COEF:] = pair_coefficients(part).ravel()
    totals = (float(xc.size), float(xc.sum()), float(xc @ xc))
    return CandidateTable(names, table, totals, center)


def _hyper_vector(hyper: Hyperparams, center: float) -> tuple:
    return (hyper.g, hyper.h, hyper.a, hyper.b, hyper.r, hyper.s,
            hyper.p - center, hyper.q, hyper.u, hyper.v)


def chain_seed(seed: int, chain: int, *stream: int) -> np.random.SeedSequence:
    """Independent stream for ``chain``; ``stream`` adds outer keys (e.g. detection round)."""
    return np.random.SeedSequence(seed, spawn_key=(*stream, chain))


class _Chain:
    def __init__(self, ctab: CandidateTable, hyper: Hyperparams, seed, grid_size: int,
                 index: int = 0, collapse: bool = True):
        self.ctab = ctab
        self.collapse = collapse
        self.index = index
        self.grid_size = grid_size
        self.hyper_vec = _hyper_vector(hyper, ctab.center)
        if not isinstance(seed, np.random.SeedSequence):
            seed = np.random.SeedSequence(seed)
        self.rng = np.random.Generator(np.random.PCG64(seed))
        rng = self.rng
        # prior draws, M uniform over the candidates
        m = min(int(rng.random() * len(ctab.names)), len(ctab.names) - 1)
        mu = hyper.p + math.sqrt(hyper.q) * rng.standard_normal() - ctab.center
        s1 = hyper.h / rng.standard_gamma(hyper.g)
        beta = hyper.r + math.sqrt(hyper.s) * rng.standard_normal()
        s2 = hyper.b / rng.standard_gamma(hyper.a)
        rho = min(max(rng.beta(hyper.u, hyper.v), 1e-12), 1.0 - 1e-12)
        self.state = np.array([m, mu, s1, beta, s2, rho], dtype=float)
        self.done = 0

    def advance(self, n_iter: int):
        try:
            m, cont = kernels.run_gibbs(self.rng, self.ctab.table, self.ctab.totals,
                                        self.hyper_vec, self.state, n_iter, self.grid_size,
                                        self.collapse)
        except kernels.KernelError as exc:
            raise ChainError(self.index, self.done + exc.iteration, str(exc)) from None
        cont[:, 0] += self.ctab.center
        self.done += n_iter
        return m, cont


@dataclass
class PosteriorSample:
    """Post-burn-in draws: ``m`` is (chains, draws) candidate indices, ``cont``
    is (chains, draws, 5) in ``PARAMS`` order."""
    names: tuple
    m: np.ndarray
    cont: np.ndarray
    iterations: np.ndarray

    @property
    def n_chains(self):
        return self.m.shape[0]

    def states(self, chain: int) -> list[ModelState]:
        out = []
        for k in range(self.m.shape[1]):
            mu, s1, s2, beta, rho = self.cont[chain, k]
            out.append(ModelState(self.names[self.m[chain, k]], mu, s1, s2, beta, rho))
        return out

    def trace(self, param: str) -> np.ndarray:
        return self.cont[:, :, PARAMS.index(param)]

    def m_frequencies(self) -> dict:
        counts = np.bincount(self.m.ravel(), minlength=len(self.names))
        total = counts.sum()
        return {n: counts[i] / total for i, n in enumerate(self.names)}

    def write_table(self, stream) -> None:
        stream.write("iteration,chain,M," + ",".join(PARAMS) + "\n")
        for c in range(self.m.shape[0]):
            for k in range(self.m.shape[1]):
                vals = ",".join(repr(float(v)) for v in self.cont[c, k])
                stream.write(f"{int(self.iterations[k])},{c},{self.names[self.m[c, k]]},{vals}\n")


def _collect(m, cont, start_iter, config):
    """Keep post-burn-in, thinned rows of a block that began at ``start_iter``."""
    its = start_iter + np.arange(len(m))
    keep = (its >= config.burn_in) & ((its - config.burn_in) % config.thinning == 0)
    return its[keep], m[keep], cont[keep]


def run_chain(tree: ScoreTree, hyper: Hyperparams, candidate_set, config: ChainConfig,
              chain_seed) -> list[ModelState]:
    """One systematic-scan chain for ``max_iterations``; post-burn-in, thinned draws."""
    ctab = build_candidate_table(tree, candidate_set)
    chain = _Chain(ctab, hyper, chain_seed, config.rho_grid_size,
                   collapse=config.collapse_beta)
    m, cont = chain.advance(config.max_iterations)
    _, m, cont = _collect(m, cont, 0, config)
    return [ModelState(ctab.names[i], *row[[0, 1, 2, 3, 4]]) for i, row in zip(m, cont)]


def rhat(chains) -> float:
    """Gelman-Rubin potential scale reduction factor for one scalar parameter."""
    x = np.asarray(chains, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 2:
        raise ValueError("need at least two chains of at least two draws")
    n = x.shape[1]
    between = np.var(x.mean(axis=1), ddof=1)       # B / n
    within = np.mean(np.var(x, axis=1, ddof=1))    # W
    if within <= 0.0:
        return 1.0 if between <= 0.0 else math.inf
    return float(math.sqrt(((n - 1) / n * within + between) / within))


def _checkpoints(config: ChainConfig):
    points = list(range(config.burn_in + config.check_every, config.max_iterations,
                        config.check_every))
    points.append(config.max_iterations)
    return points


def _n_workers(config: ChainConfig) -> int:
    if kernels.BACKEND != "compiled":
        return 1
    if config.n_jobs is not None:
        return max(1, config.n_jobs)
    return max(1, min(config.n_chains, os.cpu_count() or 1))


def fit(tree: ScoreTree, hyper: Hyperparams, candidate_set, config: ChainConfig,
        stream: tuple = ()) -> tuple[PosteriorSample, DetectedBranch]:
    """Run the chains until every continuous parameter has ``|R-hat - 1| < tol``.

    R-hat is checked at fixed iteration counts (every ``check_every`` after
    burn-in, and at ``max_iterations``) on all post-burn-in draws so far.
    """
    ctab = build_candidate_table(tree, candidate_set)
    chains = [_Chain(ctab, hyper, chain_seed(config.rng_seed, c, *stream),
                     config.rho_grid_size, index=c, collapse=config.collapse_beta)
              for c in range(config.n_chains)]
    kept_its, kept_m, kept_cont = [], [[] for _ in chains], [[] for _ in chains]
    workers = _n_workers(config)
    done = 0
    converged = False
    rhats = {}
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        for target in _checkpoints(config):
            step = target - done
            if pool is None:
                blocks = [ch.advance(step) for ch in chains]
            else:
                blocks = list(pool.map(lambda ch: ch.advance(step), chains))
            for c, (m, cont) in enumerate(blocks):
                its, m, cont = _collect(m, cont, done, config)
                kept_m[c].append(m)
                kept_cont[c].append(cont)
            kept_its.append(its)
            done = target
            cont_all = np.stack([np.concatenate(kc) for kc in kept_cont])
            if cont_all.shape[1] < 2:
                continue
            rhats = {p: rhat(cont_all[:, :, i]) for i, p in enumerate(PARAMS)}
            if all(abs(v - 1.0) < config.rhat_tolerance for v in rhats.values()):
                converged = True
                break
    finally:
        if pool is not None:
            pool.shutdown()

    sample = PosteriorSample(ctab.names,
                             np.stack([np.concatenate(km) for km in kept_m]),
                             np.stack([np.concatenate(kc) for kc in kept_cont]),
                             np.concatenate(kept_its))
    if not converged:
        raise ConvergenceError(rhats, done, sample)
    return sample, summarize(sample, rhats, done)


def summarize(sample: PosteriorSample, rhats=None, iterations=0) -> DetectedBranch:
    """Posterior mode of M (ties to the smaller name) and conditional means given it."""
    counts = np.bincount(sample.m.ravel(), minlength=len(sample.names))
    best = int(np.argmax(counts))          # argmax keeps the first, i.e. smallest name
    mask = sample.m == best
    means = sample.cont[mask].mean(axis=0)
    return DetectedBranch(sample.names[best], *map(float, means),
                          posterior_prob_M=float(counts[best] / counts.sum()),
                          rhat=dict(rhats or {}), iterations=iterations)


def log_posterior_trace(sample: PosteriorSample, tree: ScoreTree, hyper: Hyperparams,
                        chain: int = 0) -> np.ndarray:
    return np.array([log_posterior(s, tree, hyper) for s in sample.states(chain)])

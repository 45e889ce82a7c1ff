import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from degeo import kernels
from degeo.lineage import candidate_set
from degeo.model import Hyperparams, ModelState
from degeo.sampler import _Chain, build_candidate_table, m_log_weights
from degeo.synth import default_topology, gen_model_trees

from conftest import fixture_25, oracle_log_joint

BACKENDS = kernels.backends()
needs_compiled = pytest.mark.skipif("compiled" not in BACKENDS,
                                    reason="compiled extension not built")


def model_tree(seed=1, k=2):
    return gen_model_trees(default_topology(), 1, seed=seed, counts=[k])[0][0]


def relative(w):
    w = np.asarray(w, dtype=float)
    return w - w[0]


# -- weights against independent references ----------------------------------------

@pytest.mark.parametrize("backend", sorted(BACKENDS))
def test_plain_weights_match_partition_route(backend):
    mod = BACKENDS[backend]
    tree = fixture_25()
    ctab = build_candidate_table(tree, candidate_set(tree))
    state = ModelState(ctab.names[0], 0.3, 1.2, 0.8, 0.07, 0.4)
    ref = m_log_weights(state, tree, ctab.names)
    got = mod.candidate_log_weights(ctab.table, ctab.totals, state.mu - ctab.center,
                                    state.sigma1_sq, state.beta, state.sigma2_sq, state.rho)
    np.testing.assert_allclose(relative(got), relative(list(ref.values())), atol=1e-9)


@pytest.mark.parametrize("backend", sorted(BACKENDS))
def test_beta_collapsed_weights_match_quadrature(backend):
    """log of the joint integrated over beta, by numerical quadrature of the oracle."""
    mod = BACKENDS[backend]
    tree = fixture_25()
    hyper = Hyperparams(r=0.1, s=2.0)
    ctab = build_candidate_table(tree, candidate_set(tree))
    mu, s1, s2, rho = 0.3, 1.2, 0.8, 0.4
    ref = []
    for c in ctab.names:
        peak = oracle_log_joint(ModelState(c, mu, s1, s2, 0.0, rho), tree, hyper)
        f = lambda b: math.exp(oracle_log_joint(ModelState(c, mu, s1, s2, b, rho), tree, hyper)
                               - peak)
        val, _ = integrate.quad(f, -3, 3, points=[0.0, 0.1, 0.2], limit=200)
        ref.append(peak + math.log(val))
    got = mod.candidate_log_weights(ctab.table, ctab.totals, mu - ctab.center, s1, 0.0, s2, rho,
                                    hyper.r, hyper.s, True)
    np.testing.assert_allclose(relative(got), relative(ref), atol=1e-6)


@pytest.mark.parametrize("backend", sorted(BACKENDS))
def test_sigma2_collapsed_weights_match_quadrature(backend):
    mod = BACKENDS[backend]
    tree = fixture_25()
    hyper = Hyperparams(a=2.5, b=0.8)
    ctab = build_candidate_table(tree, candidate_set(tree))
    mu, s1, beta, rho = 0.3, 1.2, 0.07, 0.4
    ref = []
    for c in ctab.names:
        peak = oracle_log_joint(ModelState(c, mu, s1, 1.0, beta, rho), tree, hyper)
        f = lambda v: math.exp(oracle_log_joint(ModelState(c, mu, s1, v, beta, rho), tree, hyper)
                               - peak)
        val, _ = integrate.quad(f, 1e-9, np.inf, limit=400)
        ref.append(peak + math.log(val))
    lg = kernels.shape_lgamma(ctab.table, hyper.a)
    got = mod.sigma2_collapsed_log_weights(ctab.table, ctab.totals, mu - ctab.center, s1, beta,
                                           rho, hyper.a, hyper.b, lg)
    np.testing.assert_allclose(relative(got), relative(ref), atol=1e-6)


def test_sample_log_weights_edges():
    for mod in BACKENDS.values():
        w = np.log(np.array([0.2, 0.3, 0.5]))
        assert mod.sample_log_weights(w, 0.0) == 0
        assert mod.sample_log_weights(w, 0.19) == 0
        assert mod.sample_log_weights(w, 0.21) == 1
        assert mod.sample_log_weights(w, 0.999999) == 2
        assert mod.sample_log_weights(np.array([-np.inf, -np.inf]), 0.5) == -1
        assert mod.sample_log_weights(np.array([-1e308, 0.0]), 0.5) == 1


# -- window search -------------------------------------------------------------------

def brute_farthest(extreme, min_len, num, den):
    e = list(extreme)
    out = []
    for i in range(len(e)):
        best = -1
        if e[i]:
            for j in range(i + min_len - 1, len(e)):
                if e[j] and sum(e[i:j + 1]) * den >= num * (j - i + 1):
                    best = j
        out.append(best)
    return out


@given(st.lists(st.integers(0, 1), max_size=120), st.integers(1, 15))
@settings(max_examples=200, deadline=None)
def test_farthest_ends_against_brute_force(bits, min_len):
    ref = brute_farthest(bits, min_len, 39, 40)
    for mod in BACKENDS.values():
        got = mod.farthest_ends(np.array(bits, dtype=np.int64), min_len, 39, 40)
        assert got.tolist() == ref


# -- backend equivalence -------------------------------------------------------------

@needs_compiled
@pytest.mark.parametrize("collapse", [True, False])
def test_gibbs_bit_identical_across_backends(collapse):
    tree = model_tree()
    ctab = build_candidate_table(tree, candidate_set(tree))
    hyper = Hyperparams.from_scores(tree.score_array())
    out = {}
    for name, mod in BACKENDS.items():
        chain = _Chain(ctab, hyper, 123, 200)
        m, cont = mod.run_gibbs(chain.rng, ctab.table, ctab.totals, chain.hyper_vec,
                                chain.state, 300, 200, collapse)
        out[name] = (m, cont, chain.state.copy(), chain.rng.bit_generator.state)
    py, cc = out["python"], out["compiled"]
    np.testing.assert_array_equal(py[0], cc[0])
    np.testing.assert_array_equal(py[1], cc[1])
    np.testing.assert_array_equal(py[2], cc[2])
    assert py[3] == cc[3]


@needs_compiled
def test_weights_identical_across_backends():
    tree = model_tree(seed=4, k=3)
    ctab = build_candidate_table(tree, candidate_set(tree))
    args = (ctab.table, ctab.totals, 0.1, 1.3, 0.2, 0.9, 0.35)
    py = BACKENDS["python"]
    cc = BACKENDS["compiled"]
    np.testing.assert_allclose(py.candidate_log_weights(*args), cc.candidate_log_weights(*args),
                               rtol=1e-13, atol=1e-10)
    np.testing.assert_allclose(py.candidate_log_weights(*args, 0.0, 4.0, True),
                               cc.candidate_log_weights(*args, 0.0, 4.0, True),
                               rtol=1e-13, atol=1e-10)


def test_kernel_error_reports_iteration():
    tree = fixture_25()
    ctab = build_candidate_table(tree, candidate_set(tree))
    hyper = Hyperparams.from_scores(tree.score_array())
    for mod in BACKENDS.values():
        chain = _Chain(ctab, hyper, 1, 200)
        bad = np.array(ctab.table)
        bad[:, kernels.COEF:] = np.nan
        with pytest.raises(kernels.KernelError) as err:
            mod.run_gibbs(chain.rng, bad, ctab.totals, chain.hyper_vec, chain.state, 10, 200)
        assert err.value.iteration == 0

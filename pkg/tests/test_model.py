import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from degeo.model import (Hyperparams, ModelState, j_statistic, k_statistic, log_posterior,
                         pair_coefficients, partition, read_hyperparams, robust_variance,
                         write_hyperparams)

from conftest import fixture_25, make_score_tree, oracle_log_joint, subtree_names


def test_partition_leaf_change_point():
    tree = make_score_tree(subtree_names("AB", 2))
    part = partition(tree, "ABaa")
    assert part.pairs == () and len(part.background) == len(tree)


def test_partition_two_children():
    tree = make_score_tree(subtree_names("AB", 2))
    part = partition(tree, "ABa")
    assert len(part.pairs) == 1
    assert set(part.background) == set(tree.names) - {"ABaa", "ABap"}
    assert "ABa" in part.background


def test_partition_depth_two():
    tree = make_score_tree(subtree_names("AB", 2))
    part = partition(tree, "AB")
    assert len(part.pairs) == 3
    assert part.background == ("AB",)


def test_partition_unknown_cell():
    with pytest.raises(KeyError):
        partition(make_score_tree(["AB"]), "MS")


def one_pair(x0, x1, x2, t1=1, t2=1):
    return make_score_tree(["AB", "ABa", "ABp"], {"AB": x0, "ABa": x1, "ABp": x2},
                           {"AB": 10, "ABa": t1, "ABp": t2})


def test_j_examples():
    assert j_statistic(partition(one_pair(0, 0, 0), "ABa"), 0.3, 0.5) == 0.0
    assert j_statistic(partition(one_pair(2, 2, 2), "AB"), 0.0, 0.0) == 0.0
    assert j_statistic(partition(one_pair(0, 1, 2), "AB"), 0.0, 0.0) == 5.0


def test_k_examples():
    empty = partition(one_pair(0, 1, 1), "ABa")
    assert k_statistic(empty, 0.3, 1.0, 0.0, 1.0) == 0.0
    assert k_statistic(empty, 0.3, 1.0, 3.0, 2.0) == 1.5
    assert k_statistic(partition(one_pair(0, 1, 1), "AB"), 0.0, 1.0, 0.0, 1e300) == \
        pytest.approx(2.0)


def test_single_child_pair_terms():
    tree = make_score_tree(["AB", "ABa"], {"AB": 1.0, "ABa": 4.0}, {"AB": 5, "ABa": 2})
    part = partition(tree, "AB")
    assert part.n_single == 1 and part.n_full == 0
    # univariate residual (4 - 1 - 0.5*2)^2 = 4, stored with the (1 - rho^2) factor
    assert j_statistic(part, 0.5, 0.6) == pytest.approx(4.0 * (1 - 0.36))


def test_pair_coefficients_reproduce_j():
    tree = fixture_25()
    rng = np.random.default_rng(1)
    for M in ("AB", "ABa", "MS", "C"):
        part = partition(tree, M)
        coef = pair_coefficients(part)
        for _ in range(5):
            beta, rho = rng.normal(), rng.uniform(0.01, 0.99)
            powers = np.array([1.0, rho, rho * rho])
            A, B, C = coef @ powers
            assert C - 2 * beta * B + beta * beta * A == pytest.approx(
                j_statistic(part, beta, rho), rel=1e-10, abs=1e-10)


def test_log_posterior_matches_oracle():
    # 5-cell tree: AB with daughters, ABa with daughters
    names = ["AB", "ABa", "ABp", "ABaa", "ABap"]
    tree = make_score_tree(names, dict(zip(names, [0.2, 1.1, -0.4, 2.5, 1.9])),
                           dict(zip(names, [12, 9, 14, 7, 8])))
    hyper = Hyperparams(g=2.5, h=1.3, a=3.0, b=0.7, r=0.1, s=4.0, p=0.2, q=9.0, u=2.0, v=3.0)
    for M in names:
        state = ModelState(M, 0.3, 1.4, 0.6, 0.15, 0.35)
        assert log_posterior(state, tree, hyper) == pytest.approx(
            oracle_log_joint(state, tree, hyper), rel=1e-12)
    single = make_score_tree(["AB", "ABa", "ABaa", "ABap"], {"ABa": 1.0, "ABaa": 0.5},
                             {"AB": 3, "ABa": 4, "ABaa": 5, "ABap": 6})
    state = ModelState("AB", 0.0, 1.0, 0.8, 0.2, 0.7)
    assert log_posterior(state, single, hyper) == pytest.approx(
        oracle_log_joint(state, single, hyper), rel=1e-12)


def test_log_posterior_mu_ratio():
    tree = fixture_25()
    hyper = Hyperparams()
    s1 = ModelState("ABa", 0.1, 1.5, 0.8, 0.1, 0.4)
    s2 = ModelState("ABa", 0.7, 1.5, 0.8, 0.1, 0.4)
    bg = partition(tree, "ABa").background_scores
    expected = (-np.sum((bg - 0.7) ** 2) + np.sum((bg - 0.1) ** 2)) / (2 * 1.5)
    expected += (-(0.7 - hyper.p) ** 2 + (0.1 - hyper.p) ** 2) / (2 * hyper.q)
    assert log_posterior(s2, tree, hyper) - log_posterior(s1, tree, hyper) == \
        pytest.approx(expected, rel=1e-10)


def test_log_posterior_decreases_with_j():
    tree = one_pair(0.0, 1.0, 1.0)
    hyper = Hyperparams()
    state = ModelState("AB", 0.0, 1.0, 1.0, 1.0, 0.3)
    base = log_posterior(state, tree, hyper)
    worse = log_posterior(state, tree.with_scores({"ABa": 3.0}), hyper)
    assert j_statistic(partition(tree.with_scores({"ABa": 3.0}), "AB"), 1.0, 0.3) > \
        j_statistic(partition(tree, "AB"), 1.0, 0.3)
    assert worse < base


def test_invalid_state_rejected():
    tree = one_pair(0, 1, 1)
    with pytest.raises(ValueError):
        log_posterior(ModelState("AB", 0, 1, 1, 0, 1.0), tree, Hyperparams())
    with pytest.raises(ValueError):
        log_posterior(ModelState("AB", 0, -1, 1, 0, 0.5), tree, Hyperparams())
    with pytest.raises(ValueError):
        Hyperparams(g=0.0)


def test_hyperparams_file_round_trip(tmp_path):
    h = Hyperparams(g=3.0, h=0.5, r=0.25)
    path = tmp_path / "hyper.txt"
    write_hyperparams(h, path)
    assert read_hyperparams(path) == h
    path.write_text("# comment\ns = 7  # trailing\n")
    assert read_hyperparams(path, h) == h.replace(s=7.0)
    path.write_text("zz = 1\n")
    with pytest.raises(ValueError, match="zz"):
        read_hyperparams(path)


def test_default_hyperparams_scale():
    x = np.random.default_rng(0).normal(5.0, 3.0, size=20000)
    h = Hyperparams.from_scores(x)
    assert h.h == pytest.approx(9.0, rel=0.05)
    assert h.p == pytest.approx(5.0, abs=0.1)
    assert h.q == pytest.approx(100 * h.h)
    assert robust_variance(np.ones(10)) == 1.0


# -- properties ---------------------------------------------------------------

@given(st.lists(st.tuples(st.floats(-50, 50), st.floats(-50, 50), st.floats(-50, 50)),
                min_size=1, max_size=6),
       st.floats(-5, 5), st.floats(0.0, 0.999))
@settings(max_examples=80)
def test_j_nonnegative(triples, beta, rho):
    names = ["AB"]
    scores, lifes = {"AB": 0.0}, {"AB": 5}
    mother = "AB"
    for k, (x0, x1, x2) in enumerate(triples):
        a, p = mother + "a", mother + "p"
        names += [a, p]
        scores[mother] = x0
        scores[a], scores[p] = x1, x2
        lifes[a], lifes[p] = k + 3, k + 4
        mother = a
    tree = make_score_tree(names, scores, lifes)
    assert j_statistic(partition(tree, "AB"), beta, rho) >= -1e-9


@given(st.sampled_from(["AB", "ABa", "ABp", "MS", "C"]))
@settings(max_examples=10, deadline=None)
def test_partition_sizes(M):
    tree = fixture_25()
    part = partition(tree, M)
    assert len(part.background) + len(part.branch) == len(tree)
    slots = sum(1 if p.is_single else 2 for p in part.pairs)
    assert slots == len(part.branch)


def test_relabeling_invariance():
    # swapping the a/p subtrees of AB relabels cells but keeps structure and data
    tree = fixture_25()
    swap = {}
    for n in tree:
        if n.startswith("ABa"):
            swap[n] = "ABp" + n[3:]
        elif n.startswith("ABp"):
            swap[n] = "ABa" + n[3:]
        else:
            swap[n] = n
    moved = make_score_tree([swap[n] for n in tree],
                            {swap[n]: tree.score(n) for n in tree},
                            {swap[n]: tree.lifetime(n) for n in tree})
    hyper = Hyperparams()
    for M in ("AB", "ABa", "ABp"):
        s = ModelState(M, 0.2, 1.1, 0.9, 0.05, 0.3)
        t = ModelState(swap[M], 0.2, 1.1, 0.9, 0.05, 0.3)
        assert log_posterior(s, tree, hyper) == pytest.approx(log_posterior(t, moved, hyper),
                                                              rel=1e-12)

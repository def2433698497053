import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from htn.htmm import (
    HtmmParameters,
    dataset_log_likelihood,
    em_step,
    fit_em,
    loglik_gradients,
    materialize,
    upward_downward,
    upward_log_likelihood,
)
from htn.oracle import (
    EnumerationTooLarge,
    brute_force_joint,
    brute_force_marginal,
    brute_force_posteriors,
)
from htn.trees import LabeledTree, LabelVocab, SkeletonSpec, SyntheticSpec, generate_synthetic, parse_tree

from conftest import random_instance, random_params, random_tree


def _tree(text, symbols="abc"):
    return parse_tree(text, LabelVocab(list(symbols)), grow_vocab=False)


# -- materialize -----------------------------------------------------------------


def test_zero_parameters_give_uniform_tables():
    t = materialize(HtmmParameters.uniform(3, 2, 4))
    assert np.allclose(t.pi, 1 / 3) and np.allclose(t.A, 1 / 3)
    assert np.allclose(t.b, 1 / 4) and np.allclose(t.phi, 1 / 2)


def test_softmax_of_ln3():
    p = HtmmParameters(np.zeros((2, 2, 1)), [0.0, math.log(3)], np.zeros((2, 2)), np.zeros(1))
    assert np.allclose(materialize(p).pi, [0.25, 0.75], atol=1e-15)


def test_tables_are_normalized_and_positive():
    p = random_params(np.random.default_rng(0), 3, 4, 5, std=3.0)
    t = materialize(p)
    assert np.allclose(t.A.sum(axis=0), 1, atol=1e-12)
    assert np.allclose(t.b.sum(axis=1), 1, atol=1e-12)
    assert abs(t.pi.sum() - 1) < 1e-12 and abs(t.phi.sum() - 1) < 1e-12
    for g in (t.A, t.pi, t.b, t.phi):
        assert (g > 0).all() and (g < 1).all()


def test_materialize_is_stable_for_large_parameters():
    p = HtmmParameters(np.full((2, 2, 1), 800.0), np.array([900.0, -900.0]), np.zeros((2, 2)), np.zeros(1))
    t = materialize(p)
    assert np.isfinite(t.pi).all() and np.allclose(t.A, 0.5)


@pytest.mark.parametrize("group", range(4))
def test_group_shift_leaves_tables_unchanged(group):
    rng = np.random.default_rng(group)
    p = random_params(rng, 3, 2, 4)
    gs = [g.copy() for g in p.groups()]
    gs[group] = gs[group] + 5.0
    a, b = materialize(p), materialize(HtmmParameters(*gs))
    for x, y in zip((a.A, a.pi, a.b, a.phi), (b.A, b.pi, b.b, b.phi)):
        np.testing.assert_allclose(x, y, rtol=1e-12)


def test_parameter_validation():
    with pytest.raises(ValueError):
        HtmmParameters(np.zeros((2, 3, 1)), np.zeros(2), np.zeros((2, 2)), np.zeros(1))
    with pytest.raises(ValueError):
        HtmmParameters(np.zeros((2, 2, 1)), [np.nan, 0], np.zeros((2, 2)), np.zeros(1))


def test_flat_round_trip():
    p = random_params(np.random.default_rng(1), 2, 3, 4)
    assert p.unflat(p.flat()) == p


# -- likelihood ------------------------------------------------------------------


def test_uniform_log_likelihood_is_minus_U_log_V(backend):
    rng = np.random.default_rng(0)
    for _ in range(20):
        V = int(rng.integers(1, 6))
        t = random_tree(rng, 30, 4, V)
        p = HtmmParameters.uniform(int(rng.integers(1, 5)), 4, V)
        assert abs(upward_log_likelihood(p, t) + t.n_nodes * math.log(V)) < 1e-12


def test_single_leaf_likelihood():
    b = np.array([[0.5, 0.5], [0.25, 0.75]])
    p = HtmmParameters.from_probs(np.full((2, 2, 1), 0.5), np.array([0.3, 0.7]), b, np.ones(1))
    t = LabeledTree([0], [[]])
    assert abs(upward_log_likelihood(p, t) - math.log(0.325)) < 1e-15


def test_likelihood_matches_enumeration(backend):
    rng = np.random.default_rng(42)
    for _ in range(40):
        p, t = random_instance(rng)
        ref = math.log(brute_force_marginal(p, t))
        # relative error of the probability
        assert abs(upward_log_likelihood(p, t) - ref) <= 1e-10


def test_likelihood_input_errors():
    p = HtmmParameters.uniform(2, 1, 2)
    with pytest.raises(ValueError, match="alphabet"):
        upward_log_likelihood(p, LabeledTree([2], [[]]))
    with pytest.raises(ValueError, match="arity"):
        upward_log_likelihood(p, _tree("(a (a) (b))"))


def test_long_chain_does_not_underflow():
    rng = np.random.default_rng(3)
    p = random_params(rng, 3, 2, 50)
    n = 3000
    t = LabeledTree(rng.integers(0, 50, n), [[u + 1] for u in range(n - 1)] + [[]])
    ll = upward_log_likelihood(p, t)
    assert np.isfinite(ll) and ll < -n


# -- posteriors ------------------------------------------------------------------


def _check_invariants(post, tree):
    np.testing.assert_allclose(post.eps_node.sum(axis=1), 1.0, atol=1e-10)
    for u in tree.internal:
        pairs = np.array([post.pair(u, l) for l in range(tree.arity(u))])
        assert abs(pairs.sum() - 1.0) < 1e-10
        np.testing.assert_allclose(pairs.sum(axis=(0, 2)), post.eps_node[u], atol=1e-10)
        assert (pairs >= 0).all()


def test_uniform_posteriors():
    t = _tree("(a (b (c) (a)) (c))")
    post = upward_downward(HtmmParameters.uniform(3, 2, 3), t)
    np.testing.assert_allclose(post.eps_node, 1 / 3, atol=1e-15)
    _check_invariants(post, t)


def test_posteriors_match_enumeration(backend):
    rng = np.random.default_rng(7)
    for _ in range(40):
        p, t = random_instance(rng, max_nodes=6, C_max=3)
        post = upward_downward(p, t)
        ref = brute_force_posteriors(p, t)
        np.testing.assert_allclose(post.eps_node, ref.eps_node, atol=1e-10)
        np.testing.assert_allclose(post.eps_edge, ref.eps_edge, atol=1e-10)
        assert abs(post.loglik - upward_log_likelihood(p, t)) < 1e-12
        _check_invariants(post, t)


def test_child_marginal_includes_non_switching_mass():
    # with two children, a child's marginal mixes its own subtree posterior
    # with the joint from the switch that selects it
    t = _tree("(a (b) (c))")
    p = random_params(np.random.default_rng(1), 2, 2, 3, std=2.0)
    post = upward_downward(p, t)
    for v in (1, 2):
        switched = post.eps_edge[v].sum()
        assert 0 < switched < 1
        np.testing.assert_allclose(
            post.eps_node[v], brute_force_posteriors(p, t).eps_node[v], atol=1e-12
        )


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=50, deadline=None)
def test_posterior_invariants_property(seed):
    rng = np.random.default_rng(seed)
    p, t = random_instance(rng, max_nodes=25, C_max=4, V_max=5, L_max=4, std=2.0)
    _check_invariants(upward_downward(p, t), t)


# -- enumeration oracle ----------------------------------------------------------


def test_joint_single_leaf():
    p = random_params(np.random.default_rng(2), 3, 1, 2)
    t = LabeledTree([1], [[]])
    tab = materialize(p)
    for i in range(3):
        assert math.isclose(brute_force_joint(p, t, [i], [None]), tab.pi[i] * tab.b[i, 1], rel_tol=1e-15)


def test_joint_sums_to_marginal_and_is_a_probability():
    rng = np.random.default_rng(9)
    p = random_params(rng, 2, 2, 3)
    t = _tree("(a (b (c)) (c))")
    total = 0.0
    switch_ranges = [range(t.arity(u)) if t.arity(u) else [None] for u in range(t.n_nodes)]
    for q in itertools.product(range(2), repeat=t.n_nodes):
        for s in itertools.product(*switch_ranges):
            v = brute_force_joint(p, t, q, s)
            assert 0.0 <= v <= 1.0
            total += v
    assert math.isclose(total, brute_force_marginal(p, t), rel_tol=1e-12)


def test_uniform_enumeration_gives_V_to_minus_U():
    t = _tree("(a (b (c) (a)) (c))")
    assert math.isclose(brute_force_marginal(HtmmParameters.uniform(2, 2, 3), t), 3.0**-5, rel_tol=1e-12)


def test_joint_assignment_errors():
    p = HtmmParameters.uniform(2, 2, 3)
    t = _tree("(a (b))")
    with pytest.raises(ValueError):
        brute_force_joint(p, t, [0], [0])
    with pytest.raises(ValueError):
        brute_force_joint(p, t, [0, 0], [None, None])
    with pytest.raises(ValueError):
        brute_force_joint(p, t, [0, 0], [0, 0])


def test_enumeration_guard():
    p = HtmmParameters.uniform(4, 1, 1)
    t = LabeledTree([0] * 13, [[u + 1] for u in range(12)] + [[]])
    with pytest.raises(EnumerationTooLarge):
        brute_force_marginal(p, t)


# -- gradients -------------------------------------------------------------------


def _fd_grad(p, t, step=1e-5):
    x = p.flat()
    out = np.empty_like(x)
    for i in range(x.size):
        e = x.copy()
        e[i] += step
        up = upward_log_likelihood(p.unflat(e), t)
        e[i] -= 2 * step
        out[i] = (up - upward_log_likelihood(p.unflat(e), t)) / (2 * step)
    return out


def _max_fd_error(a, n):
    mag = np.maximum(np.abs(a), np.abs(n))
    small = mag < 1e-3
    rel = (np.abs(a - n)[~small] / mag[~small]).max(initial=0.0)
    ab = np.abs(a - n)[small].max(initial=0.0)
    return rel, ab


def test_gradients_match_finite_differences(backend):
    rng = np.random.default_rng(123)
    for _ in range(20):
        p, t = random_instance(rng, max_nodes=10, C_max=3, V_max=4, L_max=3)
        rel, ab = _max_fd_error(loglik_gradients(p, t).flat(), _fd_grad(p, t))
        assert rel <= 1e-4 and ab <= 1e-7


def test_gradient_groups_sum_to_zero():
    rng = np.random.default_rng(5)
    p, t = random_params(rng, 3, 3, 4), random_tree(rng, 15, 3, 4)
    g = loglik_gradients(p, t)
    np.testing.assert_allclose(g.lambda_A.sum(axis=0), 0, atol=1e-12)
    assert abs(g.lambda_pi.sum()) < 1e-12
    np.testing.assert_allclose(g.lambda_b.sum(axis=1), 0, atol=1e-12)
    assert abs(g.lambda_phi.sum()) < 1e-12


def test_single_leaf_emission_gradient():
    rng = np.random.default_rng(8)
    p = random_params(rng, 3, 1, 4)
    t = LabeledTree([2], [[]])
    post = upward_downward(p, t)
    tau = np.eye(4)[2]
    expected = post.eps_node[0][:, None] * (tau[None, :] - materialize(p).b)
    np.testing.assert_allclose(loglik_gradients(p, t, post).lambda_b, expected, atol=1e-15)


def test_single_symbol_alphabet_has_zero_emission_gradient():
    rng = np.random.default_rng(8)
    p = random_params(rng, 3, 2, 1)
    t = random_tree(rng, 10, 2, 1)
    assert np.all(loglik_gradients(p, t).lambda_b == 0)


def test_printed_transition_form_disagrees_with_fd():
    rng = np.random.default_rng(0)
    p = random_params(rng, 2, 2, 3, std=1.5)
    t = _tree("(a (b (c) (a)) (c (b)))")
    fd = _fd_grad(p, t)[: p.lambda_A.size].reshape(p.lambda_A.shape)
    good = loglik_gradients(p, t).lambda_A
    printed = loglik_gradients(p, t, printed_transition=True).lambda_A
    assert np.abs(good - fd).max() < 1e-8
    assert np.abs(printed - fd).max() > 1e-3


def test_posterior_shape_mismatch():
    p = HtmmParameters.uniform(2, 2, 3)
    post = upward_downward(p, _tree("(a (b))"))
    with pytest.raises(ValueError):
        loglik_gradients(p, _tree("(a)"), post)


# -- EM --------------------------------------------------------------------------


def _synthetic(n=50, V=3, seed=0, C=2, L=2):
    rng = np.random.default_rng(seed)
    gen = random_params(rng, C, L, V, std=1.5)
    ds = generate_synthetic(SyntheticSpec([gen], SkeletonSpec(2, 12, L), n), seed)
    return gen, ds.trees


def test_em_step_does_not_decrease_likelihood():
    _, trees = _synthetic()
    p = HtmmParameters.random(3, 2, 3, np.random.default_rng(1))
    for _ in range(8):
        before = dataset_log_likelihood(p, trees)
        p = em_step(p, trees)
        assert dataset_log_likelihood(p, trees) - before >= -1e-9


def test_em_history_is_monotone():
    _, trees = _synthetic(seed=2)
    _, hist = fit_em(HtmmParameters.random(2, 2, 3, np.random.default_rng(3), std=0.5), trees, 12)
    assert np.all(np.diff(hist) >= -1e-9)


def test_em_near_generator_is_nearly_stationary():
    gen, trees = _synthetic(n=3000, seed=4)
    new = em_step(gen, trees)
    change = max(np.abs(x - y).max() for x, y in zip(
        (materialize(gen).pi, materialize(gen).b), (materialize(new).pi, materialize(new).b)
    ))
    assert change < 0.05
    assert dataset_log_likelihood(new, trees) - dataset_log_likelihood(gen, trees) >= -1e-9


def test_em_single_symbol_keeps_point_mass():
    _, trees = _synthetic(V=1, seed=5)
    p = em_step(HtmmParameters.random(3, 2, 1, np.random.default_rng(0)), trees)
    np.testing.assert_array_equal(materialize(p).b, 1.0)


def test_em_switch_update_handles_unused_slots():
    # L=3 but no node has more than one child: slots 1, 2 keep their mass
    trees = [_tree("(a (b (c)))"), _tree("(b (a))")]
    p = HtmmParameters.random(2, 3, 3, np.random.default_rng(0))
    new = em_step(p, trees)
    np.testing.assert_allclose(materialize(new).phi[1:], materialize(p).phi[1:], rtol=1e-12)


def test_em_needs_data():
    with pytest.raises(ValueError):
        em_step(HtmmParameters.uniform(2, 1, 2), [])

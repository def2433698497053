import math

import numpy as np
import pytest

from htn.htmm import HtmmParameters
from htn.network import (
    HtnModel,
    _forward_from_logliks,
    backward,
    forward,
    forward_backward,
    loss,
    pair_index,
    permute_modules,
    predict,
)
from htn.optim import OptimizerState, sgd_update

from conftest import random_tree


def test_pair_index_small():
    assert pair_index(2) == [(0, 1)]
    p4 = pair_index(4)
    assert len(p4) == 6 and p4[0] == (0, 1) and p4[-1] == (2, 3)
    assert p4 == sorted(p4)


def test_pair_index_large_width():
    assert len(pair_index(60)) == 1770


def test_pair_index_needs_two():
    with pytest.raises(ValueError):
        pair_index(1)


def test_contrastive_weights_are_fixed_signs():
    m = HtnModel.init(2, 2, 3, 4, 2, seed=0)
    assert set(np.unique(m.W_f)) == {-1.0, 0.0, 1.0}
    assert np.all((m.W_f == 1).sum(axis=1) == 1) and np.all((m.W_f == -1).sum(axis=1) == 1)


def _tree(rng=None):
    return random_tree(rng or np.random.default_rng(0), 8, 2, 4, min_nodes=3)


def test_identical_modules_give_uniform_output():
    rng = np.random.default_rng(1)
    mod = HtmmParameters.random(2, 2, 4, rng)
    model = HtnModel((mod, mod, mod), rng.normal(size=(3, 4)))
    tr = forward(model, _tree())
    assert np.all(tr.h == 0) and np.all(tr.net == 0)
    np.testing.assert_allclose(tr.p, 0.25, atol=1e-15)


def test_tanh_of_loglik_difference():
    model = HtnModel.init(2, 2, 4, 2, 2, seed=0)
    tr = _forward_from_logliks(model, np.array([-10.0, -10.5]), 5)
    assert abs(tr.h[0] - 0.46211715726000974) < 1e-12


def test_saturation_is_finite():
    model = HtnModel.init(2, 2, 4, 2, 2, seed=0)
    for diff in (20.5, 300.0, 1e6):
        tr = _forward_from_logliks(model, np.array([-1.0, -1.0 - diff]), 5)
        assert abs(tr.h[0] - 1.0) < 1e-12
        tr = _forward_from_logliks(model, np.array([-1.0 - diff, -1.0]), 5)
        assert abs(tr.h[0] + 1.0) < 1e-12
        assert np.isfinite(tr.log_p).all()


def test_probabilities_sum_to_one_under_large_weights():
    rng = np.random.default_rng(2)
    model = HtnModel.init(2, 2, 4, 4, 3, seed=1, std=3.0, w_std=50.0)
    for _ in range(10):
        tr = forward(model, _tree(rng))
        assert abs(tr.p.sum() - 1.0) < 1e-12 and np.isfinite(tr.net).all()
        assert np.all(np.abs(tr.h) <= 1)


def test_per_node_mode_scales_inputs():
    rng = np.random.default_rng(3)
    t = _tree(rng)
    raw = HtnModel.init(2, 2, 4, 3, 2, seed=4)
    pn = HtnModel(raw.modules, raw.W_o, "per-node")
    np.testing.assert_allclose(forward(pn, t).inputs, forward(raw, t).logliks / t.n_nodes, rtol=1e-15)


def _trace_with_p(p):
    model = HtnModel.init(2, 2, 4, 2, len(p), seed=0)
    tr = _forward_from_logliks(model, np.zeros(2), 1)
    with np.errstate(divide="ignore"):
        return tr.__class__(tr.logliks, tr.inputs, tr.h, tr.net, np.log(np.asarray(p)), 1)


def test_loss_examples():
    assert loss(_trace_with_p([1.0, 0.0]), np.array([1.0, 0.0])) == 0.0
    assert abs(loss(_trace_with_p([0.5, 0.5]), 1) - math.log(2)) < 1e-15
    assert abs(loss(_trace_with_p([0.7311, 0.2689]), np.array([1.0, 0.0])) - 0.313) < 5e-4


def test_zero_error_gives_zero_gradient():
    # K=1: p is identically 1 = d
    model = HtnModel.init(2, 2, 4, 3, 1, seed=0, std=1.0)
    t = _tree()
    tr, g = forward_backward(model, t, 0)
    assert loss(tr, 0) == 0.0
    assert np.all(g.flat() == 0)


def test_pair_without_module_contributes_nothing():
    rng = np.random.default_rng(5)
    model = HtnModel.init(2, 2, 4, 3, 2, seed=2, std=1.0)
    W = np.zeros_like(model.W_o)
    W[2] = rng.normal(size=2)  # only pair (1, 2) is wired to the output
    model = HtnModel(model.modules, W)
    _, g = forward_backward(model, _tree(rng), 1)
    assert np.all(g.modules[0].flat() == 0)
    assert np.any(g.modules[1].flat() != 0) and np.any(g.modules[2].flat() != 0)
    assert g.d_inputs[0] == 0 and g.d_inputs[1] == -g.d_inputs[2]


def _fd(model, tree, cls, step=1e-5):
    x = model.flat()
    out = np.empty_like(x)
    for i in range(x.size):
        e = x.copy()
        e[i] += step
        up = loss(forward(model.unflat(e), tree), cls)
        e[i] -= 2 * step
        out[i] = (up - loss(forward(model.unflat(e), tree), cls)) / (2 * step)
    return out


@pytest.mark.parametrize("mode", ["raw", "per-node"])
def test_backward_matches_finite_differences(mode, backend):
    rng = np.random.default_rng(11)
    for trial in range(4):
        model = HtnModel.init(2, 3, 3, 3, 3, seed=trial, normalization_mode=mode, std=1.0, w_std=1.0)
        t = random_tree(rng, 5, 3, 3, min_nodes=3)
        cls = int(rng.integers(0, 3))
        a = backward(model, t, forward(model, t), cls).flat()
        n = _fd(model, t, cls)
        mag = np.maximum(np.abs(a), np.abs(n))
        small = mag < 1e-3
        assert (np.abs(a - n)[~small] / mag[~small]).max(initial=0) <= 1e-4
        assert np.abs(a - n)[small].max(initial=0) <= 1e-7


def test_backward_rejects_mismatched_trace():
    m3 = HtnModel.init(2, 2, 4, 3, 2, seed=0)
    m2 = HtnModel.init(2, 2, 4, 2, 2, seed=0)
    t = _tree()
    with pytest.raises(ValueError):
        backward(m3, t, forward(m2, t), 0)


def test_module_permutation_preserves_output():
    rng = np.random.default_rng(6)
    model = HtnModel.init(2, 2, 4, 4, 3, seed=3, std=1.0, w_std=1.0)
    t = _tree(rng)
    base = forward(model, t).p
    for perm in ([1, 0, 2, 3], [3, 2, 1, 0], [2, 0, 3, 1]):
        np.testing.assert_allclose(forward(permute_modules(model, perm), t).p, base, atol=1e-12)


def test_predict_tie_breaks_low():
    rng = np.random.default_rng(0)
    mod = HtmmParameters.random(2, 2, 4, rng)
    model = HtnModel((mod, mod), np.zeros((1, 3)))
    k, p = predict(model, _tree())
    assert k == 0 and np.allclose(p, 1 / 3)


def test_predict_argmax():
    model = HtnModel.init(2, 2, 4, 2, 2, seed=0)
    tr = _forward_from_logliks(model, np.array([0.0, -3.0]), 1)
    k = int(np.argmax(tr.net))
    shifted = tr.net + 123.0
    assert int(np.argmax(shifted)) == k


def test_single_step_decreases_loss():
    rng = np.random.default_rng(9)
    for seed in range(5):
        model = HtnModel.init(2, 2, 4, 3, 2, seed=seed, std=1.0, w_std=1.0)
        t = _tree(rng)
        tr, g = forward_backward(model, t, 1)
        state = OptimizerState.for_model(model, lr0=1e-4, alpha0=0.0, alphaT=0.0)
        new, _ = sgd_update(model, g, state)
        assert loss(forward(new, t), 1) < loss(tr, 1)


def test_flat_round_trip_and_equality():
    m = HtnModel.init(3, 2, 4, 3, 2, seed=7)
    assert m.unflat(m.flat()) == m
    with pytest.raises(ValueError):
        m.unflat(np.zeros(3))


def test_model_validation():
    rng = np.random.default_rng(0)
    a = HtmmParameters.random(2, 2, 4, rng)
    b = HtmmParameters.random(3, 2, 4, rng)
    with pytest.raises(ValueError):
        HtnModel((a, b), np.zeros((1, 2)))
    with pytest.raises(ValueError):
        HtnModel((a,), np.zeros((0, 2)))
    with pytest.raises(ValueError):
        HtnModel((a, a), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        HtnModel((a, a), np.zeros((1, 2)), "log")

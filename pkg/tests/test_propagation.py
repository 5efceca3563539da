import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from conftest import central_diff, dense_normalized, make_snapshot, max_rel_err, random_pairs, with_passthrough
from graphsasa.errors import ConfigError, ContractError
from graphsasa.graph_store import normalized_adjacency
from graphsasa.propagation import (AUGMENTED, ORIGINAL, PropagationConfig, backward_through_layers,
                                   forward_all_layers, forward_eval, propagate_layer)


def _graph(rng, n_users=4, n_items=5, n_edges=9):
    pairs = random_pairs(rng, n_users, n_items, n_edges)
    return pairs, normalized_adjacency(make_snapshot(pairs, n_users, n_items))


def test_propagate_copies_single_neighbour():
    adj = normalized_adjacency(make_snapshot([(0, 0)], 1, 1))
    h = np.array([[0.0, 0.0], [2.0, 3.0]])
    np.testing.assert_array_equal(propagate_layer(h, adj)[0], [2.0, 3.0])


def test_propagate_empty_adjacency():
    adj = sp.csr_matrix((3, 3))
    np.testing.assert_array_equal(propagate_layer(np.ones((3, 2)), adj), np.zeros((3, 2)))


def test_propagate_example_graph(example_snapshot):
    adj = normalized_adjacency(example_snapshot)
    h = np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 1.0], [2.0, 0.0]])
    np.testing.assert_allclose(propagate_layer(h, adj)[0], [1.70710678, 0.70710678], atol=1e-8)


def test_propagate_dimension_mismatch(example_snapshot):
    with pytest.raises(ContractError):
        propagate_layer(np.ones((3, 2)), normalized_adjacency(example_snapshot))


def test_config_validation():
    with pytest.raises(ConfigError):
        PropagationConfig(num_layers=0)
    with pytest.raises(ConfigError):
        PropagationConfig(aug_prob=1.5)


@pytest.mark.parametrize("prob,flag", [(0.0, ORIGINAL), (1.0, AUGMENTED)])
def test_degenerate_probabilities(prob, flag):
    rng = np.random.default_rng(0)
    _, adj = _graph(rng)
    _, aug = _graph(rng)
    cfg = PropagationConfig(num_layers=4, aug_prob=prob)
    _, trace = forward_all_layers(rng.normal(size=(9, 3)), adj, aug, cfg, rng)
    assert trace.flags == [flag] * 4


def test_two_layer_polynomial_oracle(example_snapshot):
    pairs = [(0, 0), (0, 1), (1, 1)]
    dense = dense_normalized(pairs, 2, 2)
    adj = normalized_adjacency(example_snapshot)
    x0 = np.random.default_rng(1).normal(size=(4, 3))
    h, trace = forward_all_layers(x0, adj, None, PropagationConfig(num_layers=2, aug_prob=0.0))
    np.testing.assert_allclose(h, dense @ x0 + dense @ dense @ x0, atol=1e-12, rtol=0)
    assert len(trace) == 2 and len(trace.layers) == 2


def test_isolated_nodes_keep_embedding():
    snap = make_snapshot([(0, 0)], 2, 2)  # user 1 and item 1 isolated
    adj = normalized_adjacency(snap)
    x0 = np.arange(8, dtype=float).reshape(4, 2)
    h, _ = forward_all_layers(x0, adj, None, PropagationConfig(num_layers=3, aug_prob=0.0))
    np.testing.assert_allclose(h[1], 3 * x0[1])
    np.testing.assert_allclose(h[3], 3 * x0[3])
    h, _ = forward_all_layers(x0, adj, None, PropagationConfig(num_layers=3, aug_prob=0.0, keep_isolated=False))
    np.testing.assert_array_equal(h[1], 0.0)


def test_random_branches_match_operator_product_oracle():
    rng = np.random.default_rng(3)
    pairs, adj = _graph(rng, 5, 6, 8)
    aug_pairs = pairs + random_pairs(rng, 5, 6, 5)
    aug = normalized_adjacency(make_snapshot(aug_pairs, 5, 6))
    dense = {ORIGINAL: with_passthrough(adj.toarray()), AUGMENTED: with_passthrough(aug.toarray())}
    cfg = PropagationConfig(num_layers=4, aug_prob=0.5)
    x0 = rng.normal(size=(11, 3))
    h, trace = forward_all_layers(x0, adj, aug, cfg, rng)
    expected, cur = np.zeros_like(x0), x0
    for flag in trace.flags:
        cur = dense[flag] @ cur
        expected += cur
    np.testing.assert_allclose(h, expected, atol=1e-12)


def test_callable_augmentation_receives_layer_input():
    rng = np.random.default_rng(4)
    _, adj = _graph(rng)
    seen = []

    def aug(h, layer):
        seen.append((layer, h.copy()))
        return adj

    x0 = rng.normal(size=(9, 2))
    forward_all_layers(x0, adj, aug, PropagationConfig(num_layers=3, aug_prob=1.0))
    assert [s[0] for s in seen] == [0, 1, 2]
    np.testing.assert_array_equal(seen[0][1], x0)


def test_backward_single_layer(example_snapshot):
    adj = normalized_adjacency(example_snapshot)
    x0 = np.ones((4, 2))
    _, trace = forward_all_layers(x0, adj, None, PropagationConfig(num_layers=1, aug_prob=0.0))
    g = np.random.default_rng(0).normal(size=(4, 2))
    np.testing.assert_allclose(backward_through_layers(g, trace), adj.T @ g, atol=1e-14)
    np.testing.assert_array_equal(backward_through_layers(np.zeros((4, 2)), trace), 0.0)


def test_backward_shape_mismatch(example_snapshot):
    adj = normalized_adjacency(example_snapshot)
    _, trace = forward_all_layers(np.ones((4, 2)), adj, None, PropagationConfig(num_layers=1))
    with pytest.raises(ContractError):
        backward_through_layers(np.ones((5, 2)), trace)


def test_replay_layer_count_mismatch(example_snapshot):
    adj = normalized_adjacency(example_snapshot)
    _, trace = forward_all_layers(np.ones((4, 2)), adj, None, PropagationConfig(num_layers=2))
    with pytest.raises(ContractError):
        forward_all_layers(np.ones((4, 2)), adj, None, PropagationConfig(num_layers=3), replay=trace)


@pytest.mark.parametrize("seed", range(5))
def test_backward_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    pairs, adj = _graph(rng, 4, 5, 7)
    aug = normalized_adjacency(make_snapshot(pairs + random_pairs(rng, 4, 5, 4), 4, 5))
    cfg = PropagationConfig(num_layers=3, aug_prob=0.5)
    x0 = rng.normal(size=(9, 3))
    probe = rng.normal(size=(9, 3))
    _, trace = forward_all_layers(x0, adj, aug, cfg, rng)

    def loss(x):
        h, _ = forward_all_layers(x, adj, aug, cfg, replay=trace)
        return float((probe * h).sum() + 0.5 * (h ** 2).sum())

    h, _ = forward_all_layers(x0, adj, aug, cfg, replay=trace)
    analytic = backward_through_layers(probe + h, trace)
    assert max_rel_err(analytic, central_diff(loss, x0)) <= 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.floats(-3, 3), st.floats(-3, 3))
def test_linearity_under_replay(seed, alpha, beta):
    rng = np.random.default_rng(seed)
    _, adj = _graph(rng, 4, 4, 6)
    _, aug = _graph(rng, 4, 4, 6)
    cfg = PropagationConfig(num_layers=3, aug_prob=0.5)
    x, y = rng.normal(size=(8, 2)), rng.normal(size=(8, 2))
    _, trace = forward_all_layers(x, adj, aug, cfg, rng)
    fx, _ = forward_all_layers(x, adj, aug, cfg, replay=trace)
    fy, _ = forward_all_layers(y, adj, aug, cfg, replay=trace)
    fxy, _ = forward_all_layers(alpha * x + beta * y, adj, aug, cfg, replay=trace)
    np.testing.assert_allclose(fxy, alpha * fx + beta * fy, atol=1e-10)


def test_seed_determinism():
    rng = np.random.default_rng(0)
    _, adj = _graph(rng)
    cfg = PropagationConfig(num_layers=4, aug_prob=0.5, seed=11)
    runs = [forward_all_layers(np.ones((9, 2)), adj, adj, cfg)[1].flags for _ in range(3)]
    assert runs[0] == runs[1] == runs[2]


def test_eval_forward_is_deterministic_branch():
    rng = np.random.default_rng(2)
    _, adj = _graph(rng)
    _, aug = _graph(rng)
    x0 = rng.normal(size=(9, 2))
    cfg = PropagationConfig(num_layers=2, aug_prob=0.0, eval_branch=AUGMENTED)
    h = forward_eval(x0, adj, aug, cfg)
    expected, _ = forward_all_layers(x0, adj, aug, cfg, flags=[AUGMENTED, AUGMENTED])
    np.testing.assert_array_equal(h, expected)

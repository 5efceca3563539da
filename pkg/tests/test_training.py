import numpy as np
import pytest
from scipy import stats

from conftest import central_diff, make_snapshot, max_rel_err, random_pairs
from graphsasa.adapter import DropoutMasks, adapter_from_matrix, matrix_checksum
from graphsasa.augmentation import AugmentationConfig
from graphsasa.errors import ConfigError, ContractError, FrozenBaseError
from graphsasa.propagation import PropagationConfig
from graphsasa.training import (MAX_REJECTIONS, SGD, Adam, SamplerStats, TrainConfig, TripleBatch,
                                bpr_loss_and_grad, build_graph, finetune_loss_and_grads, finetune_snapshot,
                                finetune_state, init_embeddings, make_optimizer, pretrain,
                                pretrain_loss_and_grad, sample_negatives, sample_triples, train_epoch)


def _codes(pairs, n_items):
    return np.unique([u * n_items + i for u, i in pairs])


def test_negative_never_observed():
    rng = np.random.default_rng(0)
    pairs = [(0, i) for i in range(9)]
    neg = sample_negatives(np.zeros(500, dtype=np.int64), 10, _codes(pairs, 10), rng)
    assert (neg == 9).all()


def test_negatives_uniform_over_unobserved():
    rng = np.random.default_rng(1)
    observed = [(0, 0), (0, 3), (0, 7)]
    neg = sample_negatives(np.zeros(20000, dtype=np.int64), 10, _codes(observed, 10), rng)
    free = [i for i in range(10) if i not in (0, 3, 7)]
    counts = np.bincount(neg, minlength=10)
    assert counts[[0, 3, 7]].sum() == 0
    assert stats.chisquare(counts[free]).pvalue > 1e-3


def test_negatives_saturated_user_counts_collisions(caplog):
    stats_ = SamplerStats()
    pairs = [(0, 0), (0, 1)]
    with caplog.at_level("WARNING"):
        neg = sample_negatives(np.zeros(4, dtype=np.int64), 2, _codes(pairs, 2), np.random.default_rng(0), stats_)
    assert len(neg) == 4 and stats_.accepted_collisions == 4
    assert str(MAX_REJECTIONS) in caplog.text


def test_triples_cover_every_edge():
    snap = make_snapshot([(0, 0), (1, 1), (1, 2), (0, 0)], 2, 4)
    cfg = TrainConfig(batch_size=2, negatives_per_positive=2)
    batches = list(sample_triples(snap, cfg, np.random.default_rng(0)))
    users = np.concatenate([b.users for b in batches])
    pos = np.concatenate([b.pos for b in batches])
    assert sorted(zip(users.tolist(), pos.tolist())) == sorted([(0, 0), (1, 1), (1, 2)] * 2)
    assert [len(b) for b in batches] == [2, 2, 2]


def test_triples_empty_snapshot():
    with pytest.raises(ContractError):
        next(sample_triples(make_snapshot([], 2, 2), TrainConfig(), np.random.default_rng(0)))


def _batch(u, i, j, n_users):
    return TripleBatch(np.array(u), np.array(i), np.array(j), n_users)


def test_bpr_zero_margin_is_log_two():
    loss, _ = bpr_loss_and_grad(np.zeros((3, 2)), _batch([0], [0], [1], 1))
    assert loss == pytest.approx(np.log(2), abs=1e-12)


def test_bpr_saturates_without_overflow():
    h = np.zeros((3, 1))
    h[0, 0], h[1, 0] = 1.0, 30.0
    loss, grad = bpr_loss_and_grad(h, _batch([0], [0], [1], 1))
    assert 0 < loss < 1e-12
    with np.errstate(over="raise"):
        h[1, 0] = -1000.0
        loss, _ = bpr_loss_and_grad(h, _batch([0], [0], [1], 1))
    assert loss == pytest.approx(1000.0)


def test_bpr_unit_margin():
    h = np.zeros((3, 1))
    h[0, 0], h[1, 0] = 1.0, 1.0
    loss, _ = bpr_loss_and_grad(h, _batch([0], [0], [1], 1))
    assert loss == pytest.approx(0.313262, abs=1e-6)


def test_bpr_rejects_out_of_range():
    with pytest.raises(ContractError):
        bpr_loss_and_grad(np.zeros((3, 2)), _batch([0], [5], [1], 1))


def test_bpr_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    h = rng.normal(size=(7, 3))
    batch = _batch([0, 1, 0, 2], [0, 1, 3, 0], [2, 0, 1, 3], 3)
    _, g = bpr_loss_and_grad(h, batch)
    num = central_diff(lambda x: bpr_loss_and_grad(x, batch)[0], h)
    assert max_rel_err(g.to_dense(), num) <= 1e-8


def _instance(seed, n_users=4, n_items=5, dim=3, layers=2, aug=True):
    rng = np.random.default_rng(seed)
    snap = make_snapshot(random_pairs(rng, n_users, n_items, 8), n_users, n_items)
    graph = build_graph(snap, AugmentationConfig(theta=2, top_k=2) if aug else None)
    batch = next(sample_triples(snap, TrainConfig(batch_size=64), rng))
    cfg = PropagationConfig(num_layers=layers, aug_prob=0.5)
    return rng, graph, batch, cfg


@pytest.mark.parametrize("seed", range(4))
def test_pretrain_gradient(seed):
    rng, graph, batch, cfg = _instance(seed)
    x = rng.normal(size=(9, 3))
    _, gx, trace = pretrain_loss_and_grad(x, batch, graph, cfg, rng)
    num = central_diff(lambda z: pretrain_loss_and_grad(z, batch, graph, cfg, replay=trace)[0], x)
    assert max_rel_err(gx, num) <= 1e-5


@pytest.mark.parametrize("seed", range(4))
def test_finetune_gradients(seed):
    rng, graph, batch, cfg = _instance(seed)
    x_pre = rng.normal(size=(9, 3))
    a, b = rng.normal(size=(9, 2)), rng.normal(size=(2, 3))
    masks = DropoutMasks.ones(9, 3)
    _, ga, gb, trace = finetune_loss_and_grads(x_pre, a, b, masks, batch, graph, cfg, rng)
    fa = central_diff(lambda z: finetune_loss_and_grads(x_pre, z, b, masks, batch, graph, cfg, replay=trace)[0], a)
    fb = central_diff(lambda z: finetune_loss_and_grads(x_pre, a, z, masks, batch, graph, cfg, replay=trace)[0], b)
    assert max_rel_err(ga, fa) <= 1e-5
    assert max_rel_err(gb, fb) <= 1e-5


def test_dropped_rows_and_columns_get_zero_gradient():
    rng, graph, batch, cfg = _instance(5)
    masks = DropoutMasks(np.array([1, 0, 1, 1, 0, 1, 1, 1, 1.0]), np.array([1, 0, 1.0]), 0.3)
    _, ga, gb, _ = finetune_loss_and_grads(rng.normal(size=(9, 3)), rng.normal(size=(9, 2)),
                                           rng.normal(size=(2, 3)), masks, batch, graph, cfg, rng)
    np.testing.assert_array_equal(ga[[1, 4]], 0.0)
    np.testing.assert_array_equal(gb[:, 1], 0.0)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=-1)
    with pytest.raises(ConfigError):
        TrainConfig(optimizer="rmsprop")
    with pytest.raises(ConfigError):
        TrainConfig(dropout=2.0)


def test_optimizers():
    p = {"w": np.ones(3)}
    SGD(p, 0.5).step({"w": np.array([1.0, 0.0, -2.0])})
    np.testing.assert_allclose(p["w"], [0.5, 1.0, 2.0])
    q = {"w": np.zeros(2)}
    opt = Adam(q, 0.1)
    opt.step({"w": np.array([3.0, -0.01])})
    # first bias-corrected Adam step moves each coordinate by ~lr
    np.testing.assert_allclose(q["w"], [-0.1, 0.1], atol=1e-5)
    assert make_optimizer(q, TrainConfig(optimizer="sgd")).num_trainable == 2


def _snapshots(seed=0, n=2):
    rng = np.random.default_rng(seed)
    return [make_snapshot(random_pairs(rng, 8, 10, 30), 8, 10, index=t) for t in range(n)]


def test_zero_learning_rate_leaves_parameters():
    snaps = _snapshots()
    cfg = TrainConfig(learning_rate=0.0, epochs=2, seed=3)
    x = pretrain(snaps, 4, cfg, PropagationConfig(num_layers=2))
    np.testing.assert_array_equal(x, init_embeddings(18, 4, 3))


def test_zero_epochs_returns_init():
    x = pretrain(_snapshots(), 4, TrainConfig(epochs=0, seed=1), PropagationConfig())
    np.testing.assert_array_equal(x, init_embeddings(18, 4, 1))


def test_pretrain_deterministic():
    cfg = TrainConfig(learning_rate=0.05, epochs=2, seed=4, batch_size=8)
    aug = AugmentationConfig(theta=3)
    a = pretrain(_snapshots(), 4, cfg, PropagationConfig(aug_prob=0.5), aug)
    b = pretrain(_snapshots(), 4, cfg, PropagationConfig(aug_prob=0.5), aug)
    assert a.tobytes() == b.tobytes()


def test_pretrain_loss_decreases():
    losses = []
    pretrain(_snapshots(n=1), 8, TrainConfig(learning_rate=0.05, epochs=30, batch_size=16),
             PropagationConfig(num_layers=2, aug_prob=0.0), losses=losses)
    assert losses[-1][1] < 0.5 * losses[0][1]


def test_pretrain_skips_empty_snapshot():
    snaps = _snapshots(n=1) + [make_snapshot([], 8, 10, index=1)]
    losses = []
    pretrain(snaps, 4, TrainConfig(epochs=1), PropagationConfig(), losses=losses)
    assert [s for s, _ in losses] == [0]


def test_pretrain_log_format():
    import io
    log = io.StringIO()
    pretrain(_snapshots(n=1), 4, TrainConfig(epochs=2), PropagationConfig(), log=log)
    lines = log.getvalue().splitlines()
    assert len(lines) == 2
    epoch, mode, loss, secs = lines[1].split("\t")
    assert (epoch, mode) == ("2", "pretrain") and float(loss) > 0 and float(secs) >= 0


def test_finetune_keeps_base_frozen_and_counts_parameters():
    snap = _snapshots(n=1)[0]
    x_pre = np.random.default_rng(0).normal(size=(18, 6))
    before = matrix_checksum(x_pre)
    adapter = adapter_from_matrix(x_pre, 2)
    a0 = adapter.a.copy()
    h, state = finetune_snapshot(x_pre, adapter, snap, TrainConfig(learning_rate=0.05, epochs=3, mode="finetune"),
                                 PropagationConfig(), AugmentationConfig(theta=3), return_state=True)
    assert matrix_checksum(x_pre) == before
    assert state.optimizer.num_trainable == (18 + 6) * 2
    assert set(state.optimizer.registry) == {"a", "b"}
    assert not np.array_equal(adapter.a, a0)
    assert h.shape == (18, 6)


def test_finetune_detects_base_mutation():
    snap = _snapshots(n=1)[0]
    x_pre = np.random.default_rng(0).normal(size=(18, 4))
    adapter = adapter_from_matrix(x_pre, 2)
    state = finetune_state(x_pre, adapter, TrainConfig(mode="finetune"))
    with pytest.raises(ValueError):
        state.x_pre[0, 0] = 1.0  # read-only view
    x_pre[0, 0] += 1.0
    with pytest.raises(FrozenBaseError):
        train_epoch(state, build_graph(snap), TrainConfig(mode="finetune"), PropagationConfig())

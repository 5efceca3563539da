"""BPR training: full-embedding pre-training and adapter fine-tuning."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .adapter import DropoutMasks, LowRankAdapter, apply_dropout, matrix_checksum
from .augmentation import AugmentationConfig, Augmenter
from .errors import ConfigError, ContractError, FrozenBaseError
from .graph_store import Snapshot, normalized_adjacency
from .propagation import PropagationConfig, backward_through_layers, forward_all_layers, forward_eval

logger = logging.getLogger(__name__)

MODES = ("pretrain", "finetune")
OPTIMIZERS = ("sgd", "adam")
MAX_REJECTIONS = 100


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 1
    batch_size: int = 2048
    negatives_per_positive: int = 1
    dropout: float = 0.1
    l2: float = 0.0
    seed: int = 0
    mode: str = "pretrain"

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if int(self.epochs) != self.epochs or self.epochs < 0:
            raise ConfigError(f"epochs must be a non-negative integer, got {self.epochs}")
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            raise ConfigError(f"batch_size must be a positive integer, got {self.batch_size}")
        if int(self.negatives_per_positive) != self.negatives_per_positive or self.negatives_per_positive < 1:
            raise ConfigError(f"negatives_per_positive must be >= 1, got {self.negatives_per_positive}")
        if not 0.0 <= self.dropout <= 1.0:
            raise ConfigError(f"dropout must lie in [0, 1], got {self.dropout}")
        if self.l2 < 0:
            raise ConfigError(f"l2 must be >= 0, got {self.l2}")


class Optimizer:
    """Updates a fixed registry of named arrays in place."""

    def __init__(self, params: dict[str, np.ndarray], lr: float):
        self.params = params
        self.lr = lr

    @property
    def registry(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self.params.items()}

    @property
    def num_trainable(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def step(self, grads: dict[str, np.ndarray]) -> None:
        raise NotImplementedError


class SGD(Optimizer):
    def step(self, grads):
        for k, g in grads.items():
            self.params[k] -= self.lr * g


class Adam(Optimizer):
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        super().__init__(params, lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            self.params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(params, cfg: TrainConfig) -> Optimizer:
    if cfg.optimizer == "sgd":
        return SGD(params, cfg.learning_rate)
    return Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)


@dataclass
class TripleBatch:
    users: np.ndarray
    pos: np.ndarray
    neg: np.ndarray
    n_users: int

    def __len__(self):
        return len(self.users)


@dataclass
class SamplerStats:
    accepted_collisions: int = 0


def sample_negatives(users, n_items, observed_codes, rng, stats: SamplerStats | None = None):
    """Uniform item per user, redrawn while (user, item) is observed.

    ``observed_codes`` is the sorted array of ``user * n_items + item``.
    After ``MAX_REJECTIONS`` redraws the remaining collisions are kept and
    counted in ``stats``.
    """
    neg = rng.integers(0, n_items, size=len(users))

    def observed(idx):
        codes = users[idx] * n_items + neg[idx]
        pos = np.searchsorted(observed_codes, codes)
        pos = np.minimum(pos, len(observed_codes) - 1)
        return idx[observed_codes[pos] == codes] if len(observed_codes) else idx[:0]

    bad = observed(np.arange(len(users)))
    for _ in range(MAX_REJECTIONS):
        if len(bad) == 0:
            break
        neg[bad] = rng.integers(0, n_items, size=len(bad))
        bad = observed(bad)
    if len(bad):
        logger.warning("%d negatives accepted after %d rejections", len(bad), MAX_REJECTIONS)
        if stats is not None:
            stats.accepted_collisions += len(bad)
    return neg


def sample_triples(snapshot: Snapshot, cfg: TrainConfig, rng: np.random.Generator,
                   stats: SamplerStats | None = None):
    """Yield shuffled (user, positive, negative) batches covering every edge
    ``negatives_per_positive`` times."""
    u, i = snapshot.pairs
    if len(u) == 0:
        raise ContractError(f"snapshot {snapshot.index} has no edges to sample from")
    codes = u * snapshot.n_items + i
    order = rng.permutation(len(u))
    users = np.repeat(u[order], cfg.negatives_per_positive)
    pos = np.repeat(i[order], cfg.negatives_per_positive)
    neg = sample_negatives(users, snapshot.n_items, codes, rng, stats)
    for start in range(0, len(users), cfg.batch_size):
        sl = slice(start, start + cfg.batch_size)
        yield TripleBatch(users[sl], pos[sl], neg[sl], snapshot.n_users)


@dataclass
class RowGradient:
    """Gradient that is non-zero only on ``rows``."""

    rows: np.ndarray
    values: np.ndarray
    shape: tuple[int, int]

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape, dtype=self.values.dtype)
        out[self.rows] = self.values
        return out


def bpr_loss_and_grad(h_final: np.ndarray, batch: TripleBatch) -> tuple[float, RowGradient]:
    """Summed ``-log sigmoid(y_ui - y_uj)`` and its gradient w.r.t. ``h_final``."""
    m = h_final.shape[0]
    u = np.asarray(batch.users)
    i = np.asarray(batch.pos) + batch.n_users
    j = np.asarray(batch.neg) + batch.n_users
    if len(u) and (max(u.max(), i.max(), j.max()) >= m or min(u.min(), i.min(), j.min()) < 0):
        raise ContractError("triple index out of range")
    eu, ei, ej = h_final[u], h_final[i], h_final[j]
    margin = np.einsum("nd,nd->n", eu, ei - ej)
    loss = float(np.logaddexp(0.0, -margin).sum())
    s = expit(-margin)[:, None]

    idx = np.concatenate([u, i, j])
    vals = np.concatenate([-s * (ei - ej), -s * eu, s * eu])
    rows, inv = np.unique(idx, return_inverse=True)
    scatter = sp.csr_matrix((np.ones(len(idx)), (inv, np.arange(len(idx)))),
                            shape=(len(rows), len(idx)))
    return loss, RowGradient(rows, np.asarray(scatter @ vals), h_final.shape)


@dataclass
class PropagationGraph:
    snapshot: Snapshot
    adj: sp.csr_matrix
    augmenter: Augmenter | None = None


def build_graph(snapshot: Snapshot, aug_cfg: AugmentationConfig | None = None) -> PropagationGraph:
    adj = normalized_adjacency(snapshot)
    aug = None
    if aug_cfg is not None and aug_cfg.enabled:
        aug = Augmenter(snapshot, adj, aug_cfg)
    return PropagationGraph(snapshot, adj, aug)


def pretrain_loss_and_grad(x, batch, graph: PropagationGraph, prop_cfg: PropagationConfig,
                           rng=None, replay=None):
    h, trace = forward_all_layers(x, graph.adj, graph.augmenter, prop_cfg, rng, replay=replay)
    loss, g = bpr_loss_and_grad(h, batch)
    return loss, backward_through_layers(g.to_dense(), trace), trace


def finetune_loss_and_grads(x_pre, a, b, masks: DropoutMasks, batch, graph: PropagationGraph,
                            prop_cfg: PropagationConfig, rng=None, replay=None):
    """Loss and gradients w.r.t. the adapter factors; ``x_pre`` is constant."""
    rows = masks.rows.astype(a.dtype)[:, None]
    cols = masks.cols.astype(b.dtype)[None, :]
    a_hat = rows * a
    b_hat = b * cols
    x_hat = x_pre + a_hat @ b_hat
    h, trace = forward_all_layers(x_hat, graph.adj, graph.augmenter, prop_cfg, rng, replay=replay)
    loss, g = bpr_loss_and_grad(h, batch)
    gx = backward_through_layers(g.to_dense(), trace)
    grad_a = rows * (gx @ b_hat.T)
    grad_b = (a_hat.T @ gx) * cols
    return loss, grad_a, grad_b, trace


@dataclass
class TrainState:
    mode: str
    params: dict[str, np.ndarray]
    optimizer: Optimizer
    rng: np.random.Generator
    x_pre: np.ndarray | None = None
    base_checksum: bytes | None = None
    sampler: SamplerStats = field(default_factory=SamplerStats)

    def check_base(self):
        if self.x_pre is not None and matrix_checksum(self.x_pre) != self.base_checksum:
            raise FrozenBaseError("frozen pre-trained matrix changed during fine-tuning")


def pretrain_state(x: np.ndarray, cfg: TrainConfig, rng=None) -> TrainState:
    params = {"x": x}
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    return TrainState("pretrain", params, make_optimizer(params, cfg), rng)


def finetune_state(x_pre: np.ndarray, adapter: LowRankAdapter, cfg: TrainConfig, rng=None) -> TrainState:
    adapter.check_base(x_pre)
    frozen = x_pre.view()
    frozen.flags.writeable = False
    params = {"a": adapter.a, "b": adapter.b}
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    return TrainState("finetune", params, make_optimizer(params, cfg), rng,
                      x_pre=frozen, base_checksum=matrix_checksum(x_pre))


def train_epoch(state: TrainState, graph: PropagationGraph, cfg: TrainConfig,
                prop_cfg: PropagationConfig) -> tuple[TrainState, float]:
    """One pass over the snapshot's edges; returns the summed BPR loss."""
    state.check_base()
    total = 0.0
    for batch in sample_triples(graph.snapshot, cfg, state.rng, state.sampler):
        if state.mode == "pretrain":
            x = state.params["x"]
            loss, gx, _ = pretrain_loss_and_grad(x, batch, graph, prop_cfg, state.rng)
            grads = {"x": gx}
        else:
            a, b = state.params["a"], state.params["b"]
            masks = DropoutMasks.sample(a.shape[0], b.shape[1], cfg.dropout, state.rng)
            loss, ga, gb, _ = finetune_loss_and_grads(state.x_pre, a, b, masks, batch, graph,
                                                      prop_cfg, state.rng)
            grads = {"a": ga, "b": gb}
        if cfg.l2:
            for k, p in state.params.items():
                loss += 0.5 * cfg.l2 * float((p * p).sum())
                grads[k] = grads[k] + cfg.l2 * p
        state.optimizer.step(grads)
        total += loss
    state.check_base()
    return state, total


def _log_epoch(log, epoch, mode, loss, seconds):
    if log is not None:
        log.write(f"{epoch}\t{mode}\t{loss:.6f}\t{seconds:.3f}\n")


def init_embeddings(m: int, d: int, seed: int, scale: float = 0.1, dtype=np.float64) -> np.ndarray:
    return np.random.default_rng(seed).normal(0.0, scale, size=(m, d)).astype(dtype)


def pretrain(snapshots, dim: int, cfg: TrainConfig, prop_cfg: PropagationConfig,
             aug_cfg: AugmentationConfig | None = None, log=None, losses: list | None = None,
             dtype=np.float64) -> np.ndarray:
    """Train embeddings directly, snapshot by snapshot in time order.

    Each snapshot continues from the previous snapshot's result; one
    optimizer carries across the whole run. Empty snapshots are skipped.
    """
    snapshots = list(snapshots)
    if not snapshots:
        raise ConfigError("pre-training needs at least one snapshot")
    x = init_embeddings(snapshots[0].num_nodes, dim, cfg.seed, dtype=dtype)
    state = pretrain_state(x, cfg, np.random.default_rng((cfg.seed, 1)))
    epoch = 0
    for snap in snapshots:
        if snap.num_edges == 0:
            logger.warning("skipping empty snapshot %d", snap.index)
            continue
        graph = build_graph(snap, aug_cfg)
        for _ in range(cfg.epochs):
            t0 = time.perf_counter()
            state, loss = train_epoch(state, graph, cfg, prop_cfg)
            epoch += 1
            _log_epoch(log, epoch, "pretrain", loss, time.perf_counter() - t0)
            if losses is not None:
                losses.append((snap.index, loss))
    return state.params["x"]


def finetune_snapshot(x_pre: np.ndarray, adapter: LowRankAdapter, snapshot: Snapshot, cfg: TrainConfig,
                      prop_cfg: PropagationConfig, aug_cfg: AugmentationConfig | None = None,
                      log=None, losses: list | None = None, return_state: bool = False):
    """Fit the adapter on ``snapshot`` and return the propagated final
    representations of ``x_pre + A B`` on that snapshot (dropout off)."""
    adapter.check_base(x_pre)
    graph = build_graph(snapshot, aug_cfg)
    state = finetune_state(x_pre, adapter, cfg)
    if snapshot.num_edges:
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            state, loss = train_epoch(state, graph, cfg, prop_cfg)
            _log_epoch(log, epoch, "finetune", loss, time.perf_counter() - t0)
            if losses is not None:
                losses.append(loss)
    else:
        logger.warning("snapshot %d has no edges; adapter left at its initialization", snapshot.index)
    adapter.check_base(x_pre)
    a_hat, b_hat = apply_dropout(adapter, DropoutMasks.ones(*adapter.shape))
    h = forward_eval(x_pre + a_hat @ b_hat, graph.adj, graph.augmenter, prop_cfg)
    return (h, state) if return_state else h

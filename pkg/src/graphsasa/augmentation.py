"""Similarity-based edge augmentation for sparsely connected users."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, ContractError
from .graph_store import (Snapshot, adjacency_from_pairs, bipartite_pairs, low_degree_users,
                          threshold_from_quantile)

logger = logging.getLogger(__name__)

METRICS = ("cosine", "euclidean")


@dataclass
class AugmentationConfig:
    """``theta`` is an absolute degree bound; when None it is derived per
    snapshot as the ``theta_quantile`` quantile of user degrees."""

    theta: int | None = None
    theta_quantile: float = 0.001
    top_k: int = 3
    metric: str = "cosine"
    per_layer: bool = True
    enabled: bool = True

    def __post_init__(self):
        if int(self.top_k) != self.top_k or self.top_k < 1:
            raise ConfigError(f"top_k must be a positive integer, got {self.top_k}")
        if self.metric not in METRICS:
            raise ConfigError(f"metric must be one of {METRICS}, got {self.metric!r}")
        if self.theta is not None and self.theta < 0:
            raise ConfigError(f"theta must be >= 0, got {self.theta}")
        if not 0.0 <= self.theta_quantile <= 1.0:
            raise ConfigError(f"theta_quantile must lie in [0, 1], got {self.theta_quantile}")

    def threshold(self, snapshot: Snapshot) -> int:
        if self.theta is not None:
            return int(self.theta)
        return threshold_from_quantile(snapshot, self.theta_quantile)


@dataclass(frozen=True, eq=False)
class AugmentedEdges:
    users: np.ndarray
    items: np.ndarray
    scores: np.ndarray
    layer: int = 0
    shortfall: int = 0  # users that had fewer than K candidate items

    def __len__(self):
        return len(self.users)


def similarity_scores(h_users: np.ndarray, h_items: np.ndarray, metric: str = "cosine") -> np.ndarray:
    """Score matrix (n_users x n_items), larger means more similar.

    Cosine scores involving a zero vector are 0. Euclidean scores are
    negated distances.
    """
    h_users = np.atleast_2d(np.asarray(h_users, dtype=np.float64))
    h_items = np.atleast_2d(np.asarray(h_items, dtype=np.float64))
    if h_users.shape[1] != h_items.shape[1]:
        raise ContractError(f"dimension mismatch {h_users.shape} vs {h_items.shape}")
    if metric == "cosine":
        nu = np.linalg.norm(h_users, axis=1)
        ni = np.linalg.norm(h_items, axis=1)
        denom = np.outer(nu, ni)
        dots = h_users @ h_items.T
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(denom > 0, dots / np.where(denom > 0, denom, 1.0), 0.0)
    if metric == "euclidean":
        sq = ((h_users ** 2).sum(1)[:, None] + (h_items ** 2).sum(1)[None, :]
              - 2.0 * h_users @ h_items.T)
        return -np.sqrt(np.maximum(sq, 0.0))
    raise ConfigError(f"unknown metric {metric!r}")


def similarity_row(h_u, item_block, metric: str = "cosine") -> np.ndarray:
    return similarity_scores(np.asarray(h_u)[None, :], item_block, metric)[0]


def top_k_items(scores: np.ndarray, k: int, exclude: np.ndarray | None = None):
    """Per row, indices of the ``k`` best finite scores; ties go to lower index.

    Returns a list of index arrays (rows may be shorter than ``k`` when
    fewer candidates remain after exclusion).
    """
    scores = np.array(scores, dtype=np.float64, copy=True)
    if exclude is not None:
        scores[exclude] = -np.inf
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    picked = np.take_along_axis(scores, order, axis=1)
    return [row[np.isfinite(vals)] for row, vals in zip(order, picked)]


def build_augmented_edges(h: np.ndarray, snapshot: Snapshot, cfg: AugmentationConfig,
                          layer: int = 0, theta: int | None = None) -> AugmentedEdges:
    """Link every low-degree user to its K most similar unlinked items."""
    n_u, n_i = snapshot.n_users, snapshot.n_items
    if h.shape[0] != n_u + n_i:
        raise ContractError(f"embeddings {h.shape} do not cover {n_u + n_i} nodes")
    theta = cfg.threshold(snapshot) if theta is None else theta
    low = low_degree_users(snapshot, theta)
    if len(low) == 0:
        empty = np.zeros(0, dtype=np.int64)
        return AugmentedEdges(empty, empty.copy(), np.zeros(0), layer)

    scores = similarity_scores(h[low], h[n_u:], cfg.metric)
    linked = snapshot.interactions[low].toarray() > 0
    picks = top_k_items(scores, cfg.top_k, exclude=linked)

    counts = np.array([len(p) for p in picks])
    shortfall = int((counts < cfg.top_k).sum())
    if shortfall:
        logger.warning("%d low-degree users had fewer than %d candidate items", shortfall, cfg.top_k)
    users = np.repeat(low, counts)
    items = np.concatenate(picks).astype(np.int64) if len(picks) else np.zeros(0, dtype=np.int64)
    rows = np.repeat(np.arange(len(low)), counts)
    return AugmentedEdges(users, items, scores[rows, items], layer, shortfall)


def merge_adjacency(base: sp.spmatrix, aug: AugmentedEdges, n_users: int) -> sp.csr_matrix:
    """Union of ``base``'s edges with ``aug``, renormalized with the new degrees."""
    m = base.shape[0]
    n_items = m - n_users
    if len(aug) and (aug.users.max() >= n_users or aug.items.max() >= n_items
                     or aug.users.min() < 0 or aug.items.min() < 0):
        raise ContractError("augmented edge index out of range")
    u, i = bipartite_pairs(base, n_users)
    return adjacency_from_pairs(np.concatenate([u, aug.users]), np.concatenate([i, aug.items]),
                                n_users, n_items)


class Augmenter:
    """Callable building the augmented operator from a layer's embeddings.

    In per-layer mode the edges are recomputed from each layer's input. In
    reuse mode the operator built at the first augmented layer of a forward
    pass is reused by the later layers of that pass.
    """

    def __init__(self, snapshot: Snapshot, base: sp.spmatrix, cfg: AugmentationConfig):
        self.snapshot = snapshot
        self.base = base
        self.cfg = cfg
        self.theta = cfg.threshold(snapshot)
        self._cached = None
        self.last_edges: AugmentedEdges | None = None

    def edges(self, h: np.ndarray, layer: int = 0) -> AugmentedEdges:
        return build_augmented_edges(h, self.snapshot, self.cfg, layer=layer, theta=self.theta)

    def begin_pass(self) -> None:
        self._cached = None

    def __call__(self, h: np.ndarray, layer: int) -> sp.csr_matrix:
        if not self.cfg.per_layer and self._cached is not None:
            return self._cached
        edges = self.edges(h, layer)
        self.last_edges = edges
        self._cached = merge_adjacency(self.base, edges, self.snapshot.n_users)
        return self._cached


def write_augmented_edges(path, edges: AugmentedEdges) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for u, i, s in zip(edges.users, edges.items, edges.scores):
            fh.write(f"{int(u)}\t{int(i)}\t{float(s):.9g}\n")

"""Full-ranking Recall@k / nDCG@k and the rolling future-snapshot protocol."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .adapter import adapter_from_matrix
from .augmentation import AugmentationConfig
from .errors import ConfigError, ParseError
from .graph_store import Snapshot
from .propagation import PropagationConfig, forward_eval
from .training import TrainConfig, build_graph, finetune_snapshot

logger = logging.getLogger(__name__)


@dataclass
class EvalConfig:
    k: int = 20
    rank: int = 16
    svd_iters: int = 4
    adapt: bool = True

    def __post_init__(self):
        if int(self.k) != self.k or self.k < 1:
            raise ConfigError(f"k must be a positive integer, got {self.k}")
        if int(self.rank) != self.rank or self.rank < 1:
            raise ConfigError(f"rank must be a positive integer, got {self.rank}")


def rank_items(user_emb: np.ndarray, item_emb: np.ndarray, seen=None, k: int = 20) -> list[np.ndarray]:
    """Top-``k`` item ids per user by dot product, ties to the lower id.

    ``seen`` is an optional boolean (n_users x n_items) array or sparse
    matrix of items to leave out.
    """
    user_emb = np.atleast_2d(user_emb)
    scores = user_emb @ item_emb.T
    if seen is not None:
        mask = seen.toarray() if sp.issparse(seen) else np.asarray(seen)
        scores = np.where(mask.reshape(scores.shape) > 0, -np.inf, scores)
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    top = np.take_along_axis(scores, order, axis=1)
    return [row[np.isfinite(s)] for row, s in zip(order, top)]


def score_all_items(h_final: np.ndarray, user_id: int, n_users: int, seen=None, k: int = 20) -> np.ndarray:
    if not 0 <= user_id < n_users:
        raise ConfigError(f"user {user_id} outside [0, {n_users})")
    mask = None
    if seen is not None:
        mask = np.zeros(h_final.shape[0] - n_users, dtype=bool)
        mask[np.asarray(seen, dtype=np.int64)] = True
    return rank_items(h_final[user_id], h_final[n_users:], None if mask is None else mask[None, :], k)[0]


def recall_at_k(ranked, truth, k: int):
    """Share of ``truth`` found in the first ``k`` of ``ranked``; None if truth is empty."""
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    truth = set(int(t) for t in truth)
    if not truth:
        return None
    hits = sum(1 for i in list(ranked)[:k] if int(i) in truth)
    return hits / len(truth)


def ndcg_at_k(ranked, truth, k: int):
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    truth = set(int(t) for t in truth)
    if not truth:
        return None
    dcg = sum(1.0 / math.log2(rank + 1)
              for rank, i in enumerate(list(ranked)[:k], start=1) if int(i) in truth)
    idcg = sum(1.0 / math.log2(rank + 1) for rank in range(1, min(len(truth), k) + 1))
    return dcg / idcg


@dataclass
class SnapshotMetrics:
    snapshot: int
    recall: float | None
    ndcg: float | None
    n_users: int

    @property
    def absent(self) -> bool:
        return self.n_users == 0


@dataclass
class MetricReport:
    k: int
    records: list[SnapshotMetrics] = field(default_factory=list)
    label: str = ""
    trainable_params: int | None = None
    param_ratio: float | None = None

    def _present(self):
        return [r for r in self.records if not r.absent]

    @property
    def recall(self) -> float | None:
        present = self._present()
        return float(np.mean([r.recall for r in present])) if present else None

    @property
    def ndcg(self) -> float | None:
        present = self._present()
        return float(np.mean([r.ndcg for r in present])) if present else None

    @property
    def n_users(self) -> int:
        return sum(r.n_users for r in self.records)

    def to_lines(self) -> list[str]:
        """``snapshot<TAB>recall@k<TAB>ndcg@k<TAB>n_users`` records."""
        lines = [f"# k={self.k}"]
        if self.label:
            lines.append(f"# label={self.label}")
        if self.trainable_params is not None:
            lines.append(f"# trainable_params={self.trainable_params}")
        if self.param_ratio is not None:
            lines.append(f"# param_ratio={self.param_ratio!r}")
        for r in self.records:
            if r.absent:
                lines.append(f"{r.snapshot}\tnan\tnan\t0")
            else:
                lines.append(f"{r.snapshot}\t{r.recall!r}\t{r.ndcg!r}\t{r.n_users}")
        return lines

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.to_lines()) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "MetricReport":
        path = Path(path)
        meta, records = {}, []
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
            if not line.strip():
                continue
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                meta[key] = value
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ParseError("expected 4 tab-separated fields", line=lineno, path=path)
            try:
                snap, n = int(parts[0]), int(parts[3])
                rec, nd = float(parts[1]), float(parts[2])
            except ValueError:
                raise ParseError(f"malformed record {line!r}", line=lineno, path=path) from None
            if n == 0:
                records.append(SnapshotMetrics(snap, None, None, 0))
            else:
                records.append(SnapshotMetrics(snap, rec, nd, n))
        if "k" not in meta:
            raise ParseError("missing '# k=' header", path=path)
        return cls(
            k=int(meta["k"]),
            records=records,
            label=meta.get("label", path.stem),
            trainable_params=int(meta["trainable_params"]) if "trainable_params" in meta else None,
            param_ratio=float(meta["param_ratio"]) if "param_ratio" in meta else None,
        )

    def table(self) -> str:
        rows = [("snapshot", f"recall@{self.k}", f"ndcg@{self.k}", "users")]
        for r in self.records:
            if r.absent:
                rows.append((str(r.snapshot), "-", "-", "0"))
            else:
                rows.append((str(r.snapshot), f"{r.recall:.4f}", f"{r.ndcg:.4f}", str(r.n_users)))
        rec, nd = self.recall, self.ndcg
        rows.append(("average", "-" if rec is None else f"{rec:.4f}", "-" if nd is None else f"{nd:.4f}",
                     str(self.n_users)))
        widths = [max(len(row[c]) for row in rows) for c in range(4)]
        return "\n".join("  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in rows)


def seen_matrix(snapshots, n_users: int, n_items: int) -> sp.csr_matrix:
    """Boolean union of the interactions in ``snapshots``."""
    seen = sp.csr_matrix((n_users, n_items), dtype=np.float64)
    for s in snapshots:
        seen = seen + s.interactions
    seen.data[:] = 1.0
    return seen


def evaluate_snapshot(h_final: np.ndarray, target: Snapshot, seen: sp.csr_matrix, k: int) -> SnapshotMetrics:
    """Metrics of ``h_final`` against ``target``'s interactions.

    Ground truth per user is the set of target items not already seen;
    users left with no ground truth are skipped.
    """
    n_u = target.n_users
    truth = target.interactions - target.interactions.multiply(seen)
    truth.eliminate_zeros()
    truth = sp.csr_matrix(truth)
    users = np.flatnonzero(np.diff(truth.indptr) > 0)
    if len(users) == 0:
        return SnapshotMetrics(target.index, None, None, 0)
    ranked = rank_items(h_final[users], h_final[n_u:], seen[users], k)
    recalls, ndcgs = [], []
    for u, top in zip(users, ranked):
        items = truth.indices[truth.indptr[u]:truth.indptr[u + 1]]
        recalls.append(recall_at_k(top, items, k))
        ndcgs.append(ndcg_at_k(top, items, k))
    return SnapshotMetrics(target.index, float(np.mean(recalls)), float(np.mean(ndcgs)), len(users))


def evaluate_stream(x_pre: np.ndarray, snapshots: list[Snapshot], test_indices, eval_cfg: EvalConfig,
                    prop_cfg: PropagationConfig, aug_cfg: AugmentationConfig | None,
                    ft_cfg: TrainConfig, log=None, label: str = ""):
    """Rolling evaluation over future snapshots.

    For each test snapshot ``t``, a fresh adapter from the SVD of
    ``x_pre`` is fine-tuned on snapshot ``t - 1`` (skipped when
    ``eval_cfg.adapt`` is false), the embeddings are propagated on
    snapshot ``t - 1``, and snapshot ``t`` serves as ground truth with
    every item seen before ``t`` masked. Returns ``(report, last_adapter)``.
    """
    test_indices = list(test_indices)
    if not test_indices:
        raise ConfigError("evaluation needs at least one future snapshot")
    if min(test_indices) < 1:
        raise ConfigError("the first snapshot has no history and cannot be evaluated")
    m, d = x_pre.shape
    n_u, n_i = snapshots[0].n_users, snapshots[0].n_items
    report = MetricReport(k=eval_cfg.k, label=label)
    adapter = None
    if eval_cfg.adapt:
        report.trainable_params = (m + d) * eval_cfg.rank
        report.param_ratio = (m + d) * eval_cfg.rank / (m * d)
    for t in test_indices:
        history = snapshots[t - 1]
        if eval_cfg.adapt:
            adapter = adapter_from_matrix(x_pre, eval_cfg.rank, iters=eval_cfg.svd_iters, seed=ft_cfg.seed + t)
            round_cfg = dataclasses.replace(ft_cfg, mode="finetune", seed=ft_cfg.seed + t)
            h = finetune_snapshot(x_pre, adapter, history, round_cfg, prop_cfg, aug_cfg, log=log)
        else:
            graph = build_graph(history, aug_cfg)
            h = forward_eval(x_pre, graph.adj, graph.augmenter, prop_cfg)
        seen = seen_matrix(snapshots[:t], n_u, n_i)
        metrics = evaluate_snapshot(h, snapshots[t], seen, eval_cfg.k)
        if metrics.absent:
            logger.warning("snapshot %d has no evaluable users", t)
        report.records.append(metrics)
    return report, adapter

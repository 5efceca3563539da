"""Interaction streams, time snapshots and the normalized bipartite adjacency.

Node indexing is unified across the package: users occupy ``[0, n_users)``
and items occupy ``[n_users, n_users + n_items)``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, ParseError, ValidationError

logger = logging.getLogger(__name__)

DAY = 86400
WEEK = 7 * DAY
GRANULARITIES = {"daily": DAY, "weekly": WEEK}
ROLES = ("pretrain", "test")


class EdgeRecord(NamedTuple):
    user_id: int
    item_id: int
    timestamp: int


def parse_edge_stream(path) -> list[EdgeRecord]:
    """Read ``user<TAB>item<TAB>timestamp`` lines; ``#`` lines are comments."""
    path = Path(path)
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError(f"expected 3 tab-separated fields, got {len(parts)}",
                                 line=lineno, path=path)
            try:
                u, i, ts = (int(p) for p in parts)
            except ValueError:
                raise ParseError(f"non-integer field in {line!r}", line=lineno, path=path) from None
            if u < 0 or i < 0 or ts < 0:
                raise ValidationError(f"{path}:{lineno}: negative id or timestamp in {line!r}")
            records.append(EdgeRecord(u, i, ts))
    return records


def write_edge_stream(path, records) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(f"{r[0]}\t{r[1]}\t{r[2]}\n")


def records_to_arrays(records):
    if len(records) == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty.copy(), empty.copy()
    arr = np.asarray(records, dtype=np.int64).reshape(-1, 3)
    return arr[:, 0].copy(), arr[:, 1].copy(), arr[:, 2].copy()


@dataclass(frozen=True, eq=False)
class Snapshot:
    """Interactions whose timestamps fall in ``[start, end)``.

    ``users``/``items``/``timestamps`` keep the raw records; repeated
    (user, item) pairs collapse to one binary edge in ``pairs`` and in
    everything derived from it.
    """

    index: int
    start: int
    end: int
    users: np.ndarray
    items: np.ndarray
    timestamps: np.ndarray
    n_users: int
    n_items: int

    @property
    def num_nodes(self) -> int:
        return self.n_users + self.n_items

    @property
    def num_records(self) -> int:
        return len(self.users)

    @property
    def edges(self) -> list[EdgeRecord]:
        return [EdgeRecord(int(u), int(i), int(t))
                for u, i, t in zip(self.users, self.items, self.timestamps)]

    @cached_property
    def pairs(self) -> tuple[np.ndarray, np.ndarray]:
        """Deduplicated (user, item) edges sorted by user then item."""
        codes = np.unique(self.users * self.n_items + self.items)
        return codes // self.n_items, codes % self.n_items

    @property
    def num_edges(self) -> int:
        return len(self.pairs[0])

    @cached_property
    def degrees(self) -> np.ndarray:
        u, i = self.pairs
        deg = np.bincount(u, minlength=self.n_users)
        deg_items = np.bincount(i, minlength=self.n_items)
        return np.concatenate([deg, deg_items]).astype(np.int64)

    @property
    def user_degrees(self) -> np.ndarray:
        return self.degrees[: self.n_users]

    @property
    def item_degrees(self) -> np.ndarray:
        return self.degrees[self.n_users:]

    @cached_property
    def interactions(self) -> sp.csr_matrix:
        """Binary n_users x n_items interaction matrix."""
        u, i = self.pairs
        data = np.ones(len(u), dtype=np.float64)
        return sp.csr_matrix((data, (u, i)), shape=(self.n_users, self.n_items))


@dataclass
class DatasetManifest:
    boundaries: list[tuple[int, int]]
    roles: list[str]
    n_users: int
    n_items: int
    granularity: int
    granularity_name: str = "custom"
    counts: list[int] = field(default_factory=list)

    def indices(self, role: str) -> list[int]:
        return [t for t, r in enumerate(self.roles) if r == role]

    def to_dict(self) -> dict:
        return {
            "n_users": self.n_users,
            "n_items": self.n_items,
            "granularity": self.granularity,
            "granularity_name": self.granularity_name,
            "snapshots": [
                {"index": t, "start": s, "end": e, "role": r, "records": c}
                for t, ((s, e), r, c) in enumerate(
                    zip(self.boundaries, self.roles, self.counts or [None] * len(self.roles)))
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "DatasetManifest":
        snaps = sorted(doc["snapshots"], key=lambda s: s["index"])
        m = cls(
            boundaries=[(int(s["start"]), int(s["end"])) for s in snaps],
            roles=[s["role"] for s in snaps],
            n_users=int(doc["n_users"]),
            n_items=int(doc["n_items"]),
            granularity=int(doc["granularity"]),
            granularity_name=doc.get("granularity_name", "custom"),
            counts=[s.get("records") for s in snaps],
        )
        m.validate()
        return m

    def validate(self) -> None:
        for (s0, e0), (s1, _) in zip(self.boundaries, self.boundaries[1:]):
            if e0 != s1:
                raise ValidationError(f"snapshots not contiguous at [{s0}, {e0}) -> {s1}")
        for s, e in self.boundaries:
            if e <= s:
                raise ValidationError(f"empty or reversed interval [{s}, {e})")
        bad = set(self.roles) - set(ROLES)
        if bad:
            raise ValidationError(f"unknown snapshot roles {sorted(bad)}")

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def resolve_granularity(granularity) -> int:
    if isinstance(granularity, str):
        if granularity in GRANULARITIES:
            return GRANULARITIES[granularity]
        try:
            granularity = int(granularity)
        except ValueError:
            raise ConfigError(f"unknown granularity {granularity!r}") from None
    if int(granularity) != granularity or granularity <= 0:
        raise ConfigError(f"granularity must be a positive number of seconds, got {granularity!r}")
    return int(granularity)


def split_snapshots(records, granularity, n_users=None, n_items=None, n_pretrain=None):
    """Bucket records by ``floor(timestamp / granularity)``.

    Returns ``(snapshots, manifest)``. Buckets between the first and last
    non-empty one are kept even when empty so that snapshot ``t`` always
    covers ``[start + t*g, start + (t+1)*g)``. The first ``n_pretrain``
    snapshots get role ``pretrain`` (default: half, rounded up), the rest
    ``test``.
    """
    g = resolve_granularity(granularity)
    users, items, ts = records_to_arrays(records)
    if len(users) == 0:
        raise ValidationError("cannot split an empty edge stream")
    if (users < 0).any() or (items < 0).any() or (ts < 0).any():
        raise ValidationError("negative id or timestamp in edge stream")
    n_users = int(users.max()) + 1 if n_users is None else int(n_users)
    n_items = int(items.max()) + 1 if n_items is None else int(n_items)
    if users.max() >= n_users or items.max() >= n_items:
        raise ValidationError("edge id exceeds the declared node counts")

    bucket = ts // g
    first, last = int(bucket.min()), int(bucket.max())
    count = last - first + 1
    order = np.argsort(bucket, kind="stable")
    bounds = np.searchsorted(bucket[order], np.arange(first, last + 2))

    snapshots = []
    for t in range(count):
        sel = order[bounds[t]:bounds[t + 1]]
        b = first + t
        snapshots.append(Snapshot(t, b * g, (b + 1) * g, users[sel], items[sel], ts[sel],
                                  n_users, n_items))

    if n_pretrain is None:
        n_pretrain = (count + 1) // 2
    if not 0 <= n_pretrain <= count:
        raise ConfigError(f"n_pretrain={n_pretrain} outside [0, {count}]")
    name = {v: k for k, v in GRANULARITIES.items()}.get(g, "custom")
    manifest = DatasetManifest(
        boundaries=[(s.start, s.end) for s in snapshots],
        roles=["pretrain" if t < n_pretrain else "test" for t in range(count)],
        n_users=n_users,
        n_items=n_items,
        granularity=g,
        granularity_name=name,
        counts=[s.num_records for s in snapshots],
    )
    return snapshots, manifest


def adjacency_from_pairs(users, items, n_users: int, n_items: int) -> sp.csr_matrix:
    """Symmetrically normalized bipartite adjacency D^-1/2 A D^-1/2.

    Duplicate pairs are removed before degrees are counted. Rows of
    zero-degree nodes are empty.
    """
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    m = n_users + n_items
    codes = np.unique(users * n_items + items)
    u, i = codes // n_items, codes % n_items + n_users
    rows = np.concatenate([u, i])
    cols = np.concatenate([i, u])
    deg = np.bincount(rows, minlength=m).astype(np.float64)
    vals = 1.0 / np.sqrt(deg[rows] * deg[cols])
    adj = sp.csr_matrix((vals, (rows, cols)), shape=(m, m))
    adj.sort_indices()
    return adj


def normalized_adjacency(s: Snapshot) -> sp.csr_matrix:
    u, i = s.pairs
    return adjacency_from_pairs(u, i, s.n_users, s.n_items)


def bipartite_pairs(adj: sp.spmatrix, n_users: int) -> tuple[np.ndarray, np.ndarray]:
    """Recover the (user, item) edge list from an adjacency's user->item block."""
    block = sp.csr_matrix(adj)[:n_users, n_users:].tocoo()
    return block.row.astype(np.int64), block.col.astype(np.int64)


def low_degree_users(s: Snapshot, theta) -> np.ndarray:
    """Users with ``deg(u) <= theta`` in this snapshot, ascending."""
    if theta < 0:
        raise ConfigError(f"degree threshold must be >= 0, got {theta}")
    return np.flatnonzero(s.user_degrees <= theta)


def threshold_from_quantile(s: Snapshot, q: float) -> int:
    """Absolute degree threshold covering the bottom ``q`` fraction of users."""
    if not 0.0 <= q <= 1.0:
        raise ConfigError(f"quantile must lie in [0, 1], got {q}")
    return int(np.quantile(s.user_degrees, q, method="inverted_cdf"))


def _powerlaw_weights(rng, n, exponent, cap):
    return np.minimum(rng.zipf(exponent, size=n), cap).astype(np.float64)


def generate_synthetic_stream(n_users, n_items, n_snapshots, edges_per_snapshot,
                              power_exponent=2.0, drift_rate=0.1, seed=0, *,
                              n_communities=8, affinity=0.8, granularity=DAY, return_popularity=False):
    """Power-law user/item interaction stream with drifting item popularity.

    User activity and item popularity are drawn from a discrete power law
    with the given exponent. Users and items belong to ``n_communities``
    groups; with probability ``affinity`` an interaction stays inside the
    user's group. Before every snapshot after the first, items holding a
    ``drift_rate`` share of the popularity mass get fresh popularity values
    (same total mass), so ranking changes over time unless ``drift_rate``
    is 0. Returns records sorted by timestamp, plus the per-snapshot item
    popularity (n_snapshots x n_items) when ``return_popularity`` is set.
    """
    for name, v in (("n_users", n_users), ("n_items", n_items), ("n_snapshots", n_snapshots),
                    ("edges_per_snapshot", edges_per_snapshot), ("n_communities", n_communities)):
        if int(v) != v or v <= 0:
            raise ConfigError(f"{name} must be a positive integer, got {v!r}")
    if not power_exponent > 1:
        raise ConfigError(f"power_exponent must be > 1, got {power_exponent}")
    if not 0 <= drift_rate <= 1:
        raise ConfigError(f"drift_rate must lie in [0, 1], got {drift_rate}")
    if not 0 <= affinity <= 1:
        raise ConfigError(f"affinity must lie in [0, 1], got {affinity}")
    granularity = resolve_granularity(granularity)

    rng = np.random.default_rng(seed)
    cap = float(edges_per_snapshot)
    activity = _powerlaw_weights(rng, n_users, power_exponent, cap)
    activity /= activity.sum()
    popularity = _powerlaw_weights(rng, n_items, power_exponent, cap)
    user_group = rng.integers(0, n_communities, size=n_users)
    item_group = rng.integers(0, n_communities, size=n_items)
    members = [np.flatnonzero(item_group == c) for c in range(n_communities)]

    out_u, out_i, out_t, history = [], [], [], []
    for t in range(n_snapshots):
        if t > 0 and drift_rate > 0:
            order = rng.permutation(n_items)
            share = np.cumsum(popularity[order]) / popularity.sum()
            moved = order[: int(np.searchsorted(share, drift_rate)) + 1]
            fresh = _powerlaw_weights(rng, len(moved), power_exponent, cap)
            popularity[moved] = fresh * popularity[moved].sum() / fresh.sum()
        history.append(popularity.copy())

        users = rng.choice(n_users, size=edges_per_snapshot, p=activity)
        items = np.empty(edges_per_snapshot, dtype=np.int64)
        local = rng.random(edges_per_snapshot) < affinity
        for c in range(n_communities):
            sel = np.flatnonzero(local & (user_group[users] == c))
            if len(sel) == 0:
                continue
            pool = members[c] if len(members[c]) else np.arange(n_items)
            w = popularity[pool]
            items[sel] = rng.choice(pool, size=len(sel), p=w / w.sum())
        glob = np.flatnonzero(~local)
        items[glob] = rng.choice(n_items, size=len(glob), p=popularity / popularity.sum())

        ts = t * granularity + rng.integers(0, granularity, size=edges_per_snapshot)
        order = np.argsort(ts, kind="stable")
        out_u.append(users[order])
        out_i.append(items[order])
        out_t.append(ts[order])

    u = np.concatenate(out_u)
    i = np.concatenate(out_i)
    ts = np.concatenate(out_t)
    records = [EdgeRecord(int(a), int(b), int(c)) for a, b, c in zip(u, i, ts)]
    if return_popularity:
        return records, np.vstack(history)
    return records

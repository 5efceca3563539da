"""Low-rank adapter over a frozen embedding matrix.

The frozen matrix ``x_pre`` is factored by a randomized truncated SVD into
``A = U_r diag(S_r)`` and ``B = V_r^T``; fine-tuning trains only ``A`` and
``B`` and the effective embeddings are ``x_pre + A_hat @ B_hat`` where the
hats denote row/column dropout on the factors (no rescaling).
"""

from __future__ import annotations

import hashlib
import logging
import struct
import warnings
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .checkpoint import atomic_write
from .errors import CheckpointError, ConfigError, ContractError, FrozenBaseError, ValidationError

logger = logging.getLogger(__name__)

OVERSAMPLE = 8
ADAPTER_MAGIC = b"GSASA-AD1"


def matrix_checksum(x: np.ndarray) -> bytes:
    """8-byte digest over shape, dtype and raw bytes."""
    x = np.ascontiguousarray(x)
    h = hashlib.blake2b(digest_size=8)
    h.update(str((x.shape, x.dtype.str)).encode())
    h.update(x.tobytes())
    return h.digest()


@dataclass
class SvdResult:
    u: np.ndarray  # m x r, orthonormal columns
    s: np.ndarray  # r, descending
    v: np.ndarray  # d x r, orthonormal columns

    @property
    def rank(self) -> int:
        return len(self.s)


def truncated_svd(x: np.ndarray, r: int, iters: int = 4, seed: int = 0) -> SvdResult:
    """Top-``r`` singular triplets by randomized subspace iteration.

    A Gaussian sketch with ``r + 8`` columns (capped at ``min(m, d)``) is
    refined by ``iters`` power steps with re-orthonormalization after every
    multiplication, then the projected small problem is solved exactly.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValidationError(f"expected a matrix, got shape {x.shape}")
    m, d = x.shape
    if int(r) != r or not 1 <= r <= min(m, d):
        raise ConfigError(f"rank must lie in [1, {min(m, d)}], got {r}")
    if iters < 0:
        raise ConfigError(f"iters must be >= 0, got {iters}")
    if not np.isfinite(x).all():
        raise ValidationError("matrix contains non-finite values")

    rng = np.random.default_rng(seed)
    width = min(r + OVERSAMPLE, m, d)
    q, _ = np.linalg.qr(x @ rng.standard_normal((d, width)))
    for _ in range(iters):
        w, _ = np.linalg.qr(x.T @ q)
        q, _ = np.linalg.qr(x @ w)
    small = q.T @ x  # width x d
    u_small, s, vt = np.linalg.svd(small, full_matrices=False)
    return SvdResult(u=q @ u_small[:, :r], s=s[:r], v=vt[:r].T)


class LowRankAdapter:
    """Trainable factors ``a`` (m x r) and ``b`` (r x d) bound to a frozen base."""

    def __init__(self, a: np.ndarray, b: np.ndarray, base_checksum: bytes | None = None):
        a = np.asarray(a)
        b = np.asarray(b)
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ContractError(f"factor shapes {a.shape} and {b.shape} do not chain")
        self.a = a
        self.b = b
        self.base_checksum = base_checksum

    @property
    def rank(self) -> int:
        return self.a.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.a.shape[0], self.b.shape[1]

    @property
    def num_parameters(self) -> int:
        return self.a.size + self.b.size

    def product(self) -> np.ndarray:
        return self.a @ self.b

    def check_base(self, x_pre: np.ndarray) -> None:
        if self.base_checksum is not None and matrix_checksum(x_pre) != self.base_checksum:
            raise FrozenBaseError("frozen pre-trained matrix no longer matches the adapter's checksum")

    def save(self, path) -> None:
        m, d = self.shape
        if self.base_checksum is None:
            raise CheckpointError("adapter has no base checksum to record")
        atomic_write(path, b"".join([
            ADAPTER_MAGIC,
            struct.pack("<III", m, d, self.rank),
            np.ascontiguousarray(self.a, dtype="<f4").tobytes(),
            np.ascontiguousarray(self.b, dtype="<f4").tobytes(),
            self.base_checksum,
        ]))

    @classmethod
    def load(cls, path) -> "LowRankAdapter":
        with open(path, "rb") as fh:
            raw = fh.read()
        head = len(ADAPTER_MAGIC) + 12
        if len(raw) < head or raw[: len(ADAPTER_MAGIC)] != ADAPTER_MAGIC:
            raise CheckpointError(f"{path}: not an adapter checkpoint (bad magic)")
        m, d, r = struct.unpack("<III", raw[len(ADAPTER_MAGIC):head])
        size = head + 4 * (m * r + r * d) + 8
        if len(raw) != size:
            raise CheckpointError(f"{path}: expected {size} bytes, found {len(raw)}")
        a = np.frombuffer(raw, "<f4", m * r, head).reshape(m, r)
        b = np.frombuffer(raw, "<f4", r * d, head + 4 * m * r).reshape(r, d)
        return cls(a.astype(np.float64), b.astype(np.float64), bytes(raw[-8:]))


def init_adapter(svd: SvdResult, x_pre: np.ndarray | None = None) -> LowRankAdapter:
    """``A = U_r diag(S_r)``, ``B = V_r^T``, in ``x_pre``'s dtype when given."""
    a = svd.u * svd.s[None, :]
    b = svd.v.T.copy()
    if x_pre is None:
        return LowRankAdapter(a, b)
    dtype = x_pre.dtype if x_pre.dtype.kind == "f" else np.float64
    return LowRankAdapter(a.astype(dtype), b.astype(dtype), matrix_checksum(x_pre))


def adapter_from_matrix(x_pre: np.ndarray, r: int, iters: int = 4, seed: int = 0) -> LowRankAdapter:
    return init_adapter(truncated_svd(x_pre, r, iters=iters, seed=seed), x_pre)


@dataclass
class DropoutMasks:
    rows: np.ndarray  # length m, applied to rows of A
    cols: np.ndarray  # length d, applied to columns of B
    p: float

    @classmethod
    def sample(cls, m: int, d: int, p: float, rng: np.random.Generator) -> "DropoutMasks":
        if not 0.0 <= p <= 1.0:
            raise ConfigError(f"dropout probability must lie in [0, 1], got {p}")
        keep = 1.0 - p
        return cls((rng.random(m) < keep).astype(np.float64),
                   (rng.random(d) < keep).astype(np.float64), p)

    @classmethod
    def ones(cls, m: int, d: int) -> "DropoutMasks":
        return cls(np.ones(m), np.ones(d), 0.0)


def apply_dropout(adapter: LowRankAdapter, masks: DropoutMasks) -> tuple[np.ndarray, np.ndarray]:
    m, d = adapter.shape
    if masks.rows.shape != (m,) or masks.cols.shape != (d,):
        raise ContractError(f"mask lengths {masks.rows.shape}, {masks.cols.shape} do not match ({m}, {d})")
    return masks.rows[:, None] * adapter.a, adapter.b * masks.cols[None, :]


def adapted_embeddings(x_pre: np.ndarray, a_hat: np.ndarray, b_hat: np.ndarray,
                       adapter: LowRankAdapter | None = None) -> np.ndarray:
    if adapter is not None:
        adapter.check_base(x_pre)
    if a_hat.shape[0] != x_pre.shape[0] or b_hat.shape[1] != x_pre.shape[1] or a_hat.shape[1] != b_hat.shape[0]:
        raise ContractError(f"shapes {x_pre.shape}, {a_hat.shape}, {b_hat.shape} do not combine")
    return x_pre + a_hat @ b_hat


def param_ratio(m: int, d: int, r: int) -> float:
    """Trainable-parameter fraction ``(m + d) r / (m d)`` of adapter tuning."""
    if min(m, d, r) <= 0:
        raise ConfigError("m, d and r must be positive")
    ratio = Fraction((m + d) * r, m * d)
    if ratio >= 1:
        warnings.warn(f"adapter with rank {r} is not smaller than the {m}x{d} matrix (ratio {float(ratio):.4f})",
                      stacklevel=2)
    return float(ratio)

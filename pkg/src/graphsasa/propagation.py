"""Parameter-free graph convolution with a per-layer choice of adjacency.

Each layer multiplies by either the snapshot's normalized adjacency or an
augmented one; the branch is drawn once per layer with probability
``aug_prob`` for the augmented operator. Layer outputs 1..L are summed
(the input layer is not part of the sum). Because every layer is linear in
its input, the backward pass is the transposed operator chain replayed
from the recorded trace.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, ContractError

ORIGINAL = "original"
AUGMENTED = "augmented"
EVAL_BRANCHES = (ORIGINAL, AUGMENTED)

# An augmented operator is either fixed or rebuilt from the current layer input.
AugmentedOperator = Union[sp.spmatrix, Callable[[np.ndarray, int], sp.spmatrix], None]


@dataclass
class PropagationConfig:
    num_layers: int = 3
    aug_prob: float = 0.9
    eval_branch: str = AUGMENTED
    keep_isolated: bool = True
    seed: int = 0

    def __post_init__(self):
        if int(self.num_layers) != self.num_layers or self.num_layers < 1:
            raise ConfigError(f"num_layers must be a positive integer, got {self.num_layers}")
        if not 0.0 <= self.aug_prob <= 1.0:
            raise ConfigError(f"aug_prob must lie in [0, 1], got {self.aug_prob}")
        if self.eval_branch not in EVAL_BRANCHES:
            raise ConfigError(f"eval_branch must be one of {EVAL_BRANCHES}, got {self.eval_branch!r}")


@dataclass
class LayerTrace:
    layers: list[np.ndarray] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)
    operators: list[sp.spmatrix] = field(default_factory=list)
    keep_isolated: bool = True

    def __len__(self):
        return len(self.flags)


def propagate_layer(h: np.ndarray, adj: sp.spmatrix) -> np.ndarray:
    if adj.shape[0] != adj.shape[1] or adj.shape[1] != h.shape[0]:
        raise ContractError(f"adjacency {adj.shape} incompatible with embeddings {h.shape}")
    out = np.asarray(adj @ h)
    return out.astype(h.dtype, copy=False) if h.dtype.kind == "f" else out


def isolated_rows(adj: sp.spmatrix) -> np.ndarray:
    return np.diff(sp.csr_matrix(adj).indptr) == 0


def _apply(op, h, keep_isolated, transpose=False):
    out = propagate_layer(h, op.T if transpose else op)
    if keep_isolated:
        iso = isolated_rows(op)
        out[iso] = h[iso]
    return out


def draw_flags(num_layers: int, aug_prob: float, rng: np.random.Generator) -> list[str]:
    draws = rng.random(num_layers)
    return [AUGMENTED if d < aug_prob else ORIGINAL for d in draws]


def forward_all_layers(x0, adj, adj_aug: AugmentedOperator, cfg: PropagationConfig,
                       rng: np.random.Generator | None = None, *, flags=None, replay: LayerTrace | None = None):
    """Run L propagation layers and return ``(h_final, trace)``.

    ``adj_aug`` may be a fixed matrix or a callable ``(h, layer) -> matrix``
    that builds the augmented operator from the layer input; its optional
    ``begin_pass()`` is invoked once before the first layer. Branches come
    from, in order of precedence: ``replay`` (reuse operators of an earlier
    trace), ``flags``, or fresh draws from ``rng`` (seeded from
    ``cfg.seed`` when omitted). With ``keep_isolated`` set, nodes without
    neighbours in the chosen operator carry their input through unchanged.
    """
    x0 = np.asarray(x0)
    m = x0.shape[0]
    if adj.shape != (m, m):
        raise ContractError(f"adjacency {adj.shape} incompatible with embeddings {x0.shape}")

    if replay is not None:
        if len(replay) != cfg.num_layers:
            raise ContractError(f"trace has {len(replay)} layers, config expects {cfg.num_layers}")
        flags = list(replay.flags)
        ops = list(replay.operators)
    else:
        if flags is None:
            rng = np.random.default_rng(cfg.seed) if rng is None else rng
            flags = draw_flags(cfg.num_layers, cfg.aug_prob, rng)
        elif len(flags) != cfg.num_layers:
            raise ContractError(f"{len(flags)} flags given for {cfg.num_layers} layers")
        ops = [None] * cfg.num_layers
    if adj_aug is None and AUGMENTED in flags and replay is None:
        flags = [ORIGINAL] * len(flags)

    begin = getattr(adj_aug, "begin_pass", None)
    if begin is not None:
        begin()
    trace = LayerTrace(keep_isolated=cfg.keep_isolated)
    h = x0
    h_final = np.zeros_like(x0, dtype=x0.dtype if x0.dtype.kind == "f" else np.float64)
    for layer, flag in enumerate(flags):
        op = ops[layer]
        if op is None:
            if flag == ORIGINAL:
                op = adj
            elif callable(adj_aug):
                op = adj_aug(h, layer)
            else:
                op = adj_aug
        if op.shape != (m, m):
            raise ContractError(f"layer {layer} operator {op.shape} incompatible with {x0.shape}")
        h = _apply(op, h, cfg.keep_isolated)
        h_final += h
        trace.layers.append(h)
        trace.flags.append(flag)
        trace.operators.append(op)
    return h_final, trace


def forward_eval(x0, adj, adj_aug: AugmentedOperator, cfg: PropagationConfig):
    """Deterministic forward pass using ``cfg.eval_branch`` at every layer."""
    branch = cfg.eval_branch if adj_aug is not None else ORIGINAL
    h_final, _ = forward_all_layers(x0, adj, adj_aug, cfg, flags=[branch] * cfg.num_layers)
    return h_final


def backward_through_layers(grad_final: np.ndarray, trace: LayerTrace) -> np.ndarray:
    """Gradient w.r.t. the propagation input for the branches in ``trace``."""
    if not trace.operators:
        raise ContractError("empty trace")
    m = trace.operators[0].shape[0]
    if grad_final.shape[0] != m:
        raise ContractError(f"gradient {grad_final.shape} does not match trace over {m} nodes")
    g = np.array(grad_final, dtype=grad_final.dtype if grad_final.dtype.kind == "f" else np.float64)
    for layer in range(len(trace) - 1, -1, -1):
        g = _apply(trace.operators[layer], g, trace.keep_isolated, transpose=True)
        if layer > 0:
            g += grad_final
    return g

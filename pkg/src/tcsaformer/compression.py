"""Token compression: importance-guided pruning followed by bipartite merging.

Pruning keeps the ``n`` tokens whose projection onto a pooled global token
scores highest; the rest bypass attention through a passthrough tensor.
Merging splits the kept tokens into alternating sets A and B, links every
A-token to its most similar B-token and fuses the ``r`` strongest links by
running mean. Selection is hard: indices carry no gradient, token values do.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor

MODES = ("none", "prune_only", "merge_only", "prune_and_merge")
MODE_ALIASES = {"prune": "prune_only", "merge": "merge_only", "prune_merge": "prune_and_merge"}


def canonical_mode(mode: str) -> str:
    mode = MODE_ALIASES.get(mode, mode)
    if mode not in MODES:
        raise ValueError(f"unknown compression mode {mode!r}; expected one of {MODES}")
    return mode


def round_half_up(x: float) -> int:
    # guard against 0.1 * 45 = 4.500000000000001 style representation noise
    return int(math.floor(x + 0.5 + 1e-9))


def keep_count(N: int, rho: float, rho_is_prune_fraction: bool = False) -> int:
    """Number of tokens retained by pruning: max(2, round(N * rho)), never above N."""
    if rho_is_prune_fraction:
        rho = 1.0 - rho
    if not 0 < rho <= 1:
        raise ValueError(f"keep fraction must lie in (0, 1], got {rho}")
    return min(N, max(2, round_half_up(N * rho)))


def merge_count(n: int, rho_m: float) -> int:
    """Number of fused A-tokens: min(round(rho_m * n), floor(n / 2)); zero below two tokens."""
    if rho_m < 0:
        raise ValueError(f"merge fraction must be non-negative, got {rho_m}")
    if n < 2:
        return 0
    return min(round_half_up(rho_m * n), n // 2)


@dataclass
class PruneResult:
    mask: np.ndarray                 # [N] uint8, 1 = retained
    kept_indices: np.ndarray         # [n] strictly increasing
    scores: Optional[np.ndarray]     # [N]; None when pruning did not run
    passthrough: Optional[Tensor]    # [N x C], kept rows zero; None when nothing pruned
    kept_tokens: Tensor              # [n x C]
    threshold: float

    @property
    def n(self) -> int:
        return len(self.kept_indices)


@dataclass
class MergeResult:
    merged_tokens: Tensor            # [(n - r) x C] = [A_hat; B_hat]
    a_slots: np.ndarray              # kept-order positions of set A
    b_slots: np.ndarray              # kept-order positions of set B
    edge_sources: np.ndarray         # [r] A-indices, strongest edge first
    edge_targets: np.ndarray         # [r] B-index of each source
    edge_scores: np.ndarray          # [r]
    group_size: np.ndarray           # [|B|] tokens fused into each B node, itself included
    unmerged: np.ndarray             # A-indices kept in A_hat, original order

    @property
    def n(self) -> int:
        return len(self.a_slots) + len(self.b_slots)

    @property
    def r(self) -> int:
        return len(self.edge_sources)


@dataclass
class CompressionState:
    prune: PruneResult
    merge: MergeResult
    N: int
    mode: str = "prune_and_merge"

    @property
    def m(self) -> int:
        return self.merge.n - self.merge.r


def importance_scores(x: Tensor, w1: Tensor, w2: Tensor) -> tuple[Tensor, Tensor]:
    """Scores S = (x w2) T^T against the global token T = GAP(x) w1.

    Returns ``(scores [N x 1], semantic_token [1 x C])``.
    """
    if x.ndim != 2 or x.shape[0] == 0:
        raise T.ShapeError(f"importance_scores expects non-empty [N x C], got {x.shape}")
    semantic = T.matmul(T.gap_tokens(x), w1)
    scores = T.matmul(T.matmul(x, w2), T.transpose(semantic, (1, 0)))
    return scores, semantic


def prune(x: Tensor, scores, rho: float, rho_is_prune_fraction: bool = False) -> PruneResult:
    N = x.shape[0]
    s = np.asarray(scores.data if isinstance(scores, Tensor) else scores, dtype=np.float64).reshape(-1)
    if s.shape[0] != N:
        raise T.ShapeError(f"prune: {s.shape[0]} scores for {N} tokens")
    n = keep_count(N, rho, rho_is_prune_fraction)
    order = np.argsort(-s, kind="stable")
    kept = np.sort(order[:n])
    mask = np.zeros(N, dtype=np.uint8)
    mask[kept] = 1
    # largest pruned score: kept iff score > threshold when scores are tie-free
    threshold = float(s[order[n]]) if n < N else -math.inf
    if n == N:
        passthrough = None
    else:
        passthrough = T.mul(x, (1 - mask).astype(x.dtype)[:, None])
    return PruneResult(mask, kept, s, passthrough, T.index_rows(x, kept), threshold)


def _identity_prune(x: Tensor) -> PruneResult:
    N = x.shape[0]
    return PruneResult(np.ones(N, dtype=np.uint8), np.arange(N), None, None, x, -math.inf)


def bipartite_split(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Alternating split of n kept slots: even ranks to A (ceil(n/2)), odd ranks to B."""
    return np.arange(0, n, 2), np.arange(1, n, 2)


def merge(kept: Tensor, rho_m: float, cosine: bool = False) -> MergeResult:
    n = kept.shape[0]
    a_slots, b_slots = bipartite_split(n)
    r = merge_count(n, rho_m)
    if r == 0:
        # r = 0: X_m is the [A; B] reordering
        merged = T.index_rows(kept, np.concatenate([a_slots, b_slots]))
        empty = np.zeros(0, dtype=np.int64)
        return MergeResult(merged, a_slots, b_slots, empty, empty, np.zeros(0),
                           np.ones(len(b_slots), dtype=np.int64), np.arange(len(a_slots)))

    feats = kept.data.astype(np.float64)
    a, b = feats[a_slots], feats[b_slots]
    if cosine:
        a = a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-12)
        b = b / np.maximum(np.linalg.norm(b, axis=1, keepdims=True), 1e-12)
    sim = a @ b.T
    node_idx = sim.argmax(axis=1)
    node_max = sim[np.arange(len(a_slots)), node_idx]
    order = np.argsort(-node_max, kind="stable")
    sources = order[:r]
    targets = node_idx[sources]
    unmerged = np.sort(order[r:])

    group = np.ones(len(b_slots), dtype=np.int64)
    np.add.at(group, targets, 1)
    b_tok = T.index_rows(kept, b_slots)
    fused = T.index_add(T.index_rows(kept, a_slots[sources]), targets, len(b_slots))
    b_hat = T.mul(T.add(b_tok, fused), (1.0 / group).astype(kept.dtype)[:, None])
    a_hat = T.index_rows(kept, a_slots[unmerged])
    merged = T.concat([a_hat, b_hat], axis=0)
    return MergeResult(merged, a_slots, b_slots, sources, targets, node_max[sources],
                       group, unmerged)


def compress(x: Tensor, w1: Tensor | None, w2: Tensor | None, rho: float, rho_m: float,
             mode: str = "prune_and_merge", rho_is_prune_fraction: bool = False,
             cosine: bool = False) -> tuple[Tensor, CompressionState]:
    """Prune first, merge later. Returns the compressed tokens and the state to invert them."""
    mode = canonical_mode(mode)
    N = x.shape[0]
    if mode in ("prune_only", "prune_and_merge"):
        scores, _ = importance_scores(x, w1, w2)
        pr = prune(x, scores, rho, rho_is_prune_fraction)
    else:
        pr = _identity_prune(x)
    rm = rho_m if mode in ("merge_only", "prune_and_merge") else 0.0
    mr = merge(pr.kept_tokens, rm, cosine=cosine)
    if mode == "none":
        return x, CompressionState(pr, mr, N, mode)
    return mr.merged_tokens, CompressionState(pr, mr, N, mode)

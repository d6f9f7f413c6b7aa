"""Multi-head top-k sparse attention over compressed tokens.

Each query keeps its k most relevant keys per head, gathers only those value
rows and mixes them with a softmax over the k selected scores. Unselected
values never enter the computation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .compression import round_half_up
from .tensor import Tensor


@dataclass
class AttentionParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    head_dim: int = 32
    topk_ratio: float = 1 / 8
    unscaled: bool = False

    @property
    def channels(self) -> int:
        return self.wq.shape[0]

    @property
    def heads(self) -> int:
        C = self.channels
        if C % self.head_dim:
            raise T.ShapeError(f"{C} channels not divisible by head_dim {self.head_dim}")
        return C // self.head_dim


@dataclass
class AttentionTrace:
    indices: np.ndarray              # [h x m x k]
    weights: np.ndarray              # [h x m x k], rows sum to 1
    k: int
    relevance: Optional[np.ndarray] = None  # [h x m x m] when requested


def effective_k(m: int, ratio: float) -> int:
    """k = round(ratio * m), at least 1 and at most m."""
    if m < 1:
        raise ValueError("effective_k needs at least one token")
    return min(m, max(1, round_half_up(ratio * m)))


def _heads(x: Tensor, h: int) -> Tensor:
    m, C = x.shape
    return T.transpose(T.reshape(x, (m, h, C // h)), (1, 0, 2))


def _merge_heads(x: Tensor) -> Tensor:
    h, m, d = x.shape
    return T.reshape(T.transpose(x, (1, 0, 2)), (m, h * d))


def _project(x: Tensor, p: AttentionParams):
    if x.ndim != 2 or x.shape[0] < 1:
        raise T.ShapeError(f"attention expects non-empty [m x C], got {x.shape}")
    h = p.heads
    q = _heads(T.matmul(x, p.wq), h)
    k = _heads(T.matmul(x, p.wk), h)
    v = _heads(T.matmul(x, p.wv), h)
    rel = T.matmul(q, T.transpose(k, (0, 2, 1)))
    if not p.unscaled:
        rel = T.scale(rel, 1.0 / math.sqrt(p.head_dim))
    return rel, v


def tksa(x: Tensor, params: AttentionParams, indices: np.ndarray | None = None,
         keep_relevance: bool = False) -> tuple[Tensor, AttentionTrace]:
    """Top-k sparse attention on [m x C] tokens.

    ``indices`` ([h x m x k]) overrides the top-k selection, which freezes the
    sparsity pattern for finite-difference checks.
    """
    m = x.shape[0]
    rel, v = _project(x, params)
    h = rel.shape[0]
    if indices is None:
        k = effective_k(m, params.topk_ratio)
        idx = T.topk_indices(rel.data, k)
    else:
        idx = np.asarray(indices, dtype=np.int64)
        k = idx.shape[-1]
    selected = T.take_cols(rel, idx)                       # [h, m, k]
    weights = T.softmax_rows(selected)
    gathered = T.gather_rows(v, idx)                       # [h, m, k, d]
    mixed = T.matmul(T.reshape(weights, (h, m, 1, k)), gathered)
    out = _merge_heads(T.reshape(mixed, (h, m, params.head_dim)))
    trace = AttentionTrace(idx, weights.data, k, rel.data if keep_relevance else None)
    return out, trace


def dense_attention(x: Tensor, params: AttentionParams) -> Tensor:
    """Full softmax attention with the same projections; the k = m reference."""
    rel, v = _project(x, params)
    return _merge_heads(T.matmul(T.softmax_rows(rel), v))

"""Token decompression: unmerge, restore kept-token order, scatter back, add passthrough."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .compression import CompressionState, MergeResult
from .tensor import Tensor


def unmerge_sources(ms: MergeResult) -> np.ndarray:
    """For each of the n kept slots, the row of the merged tensor it is restored from."""
    n_a_hat = len(ms.unmerged)
    src = np.empty(ms.n, dtype=np.int64)
    src[ms.a_slots[ms.unmerged]] = np.arange(n_a_hat)
    # merged A-nodes become copies of their B-target's processed row
    src[ms.a_slots[ms.edge_sources]] = n_a_hat + ms.edge_targets
    src[ms.b_slots] = n_a_hat + np.arange(len(ms.b_slots))
    return src


def unmerge(xa: Tensor, ms: MergeResult) -> Tensor:
    """Split into A' (|A| - r rows) and B', fill merged A slots from B', re-interleave."""
    expected = ms.n - ms.r
    if xa.shape[0] != expected:
        raise T.ShapeError(f"unmerge: got {xa.shape[0]} rows, merge state expects {expected}")
    return T.index_rows(xa, unmerge_sources(ms))


def decompress(xa: Tensor, state: CompressionState) -> Tensor:
    """O = X_p + scatter(X_d, kept positions), an [N x C] tensor in original token order."""
    if state.mode == "none":
        if xa.shape[0] != state.N:
            raise T.ShapeError(f"decompress: got {xa.shape[0]} rows, state expects {state.N}")
        return xa
    xd = unmerge(xa, state.merge)
    pr = state.prune
    if pr.n == state.N:
        return xd
    # the second "Gather" of the shortcut restores positions, so it is a scatter into mask-1 rows
    placed = T.scatter_rows(xd, pr.kept_indices, state.N)
    return T.add(pr.passthrough, placed)

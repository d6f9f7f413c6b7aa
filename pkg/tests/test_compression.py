import numpy as np
import pytest
from hypothesis import assume, given
from hypothesis import strategies as st

from tcsaformer import tensor as T
from tcsaformer.compression import (canonical_mode, compress, importance_scores,
                                    keep_count, merge, merge_count, prune)
from tcsaformer.config import KEEP_RATIOS, MERGE_RATIOS


def t64(x):
    return T.tensor(np.asarray(x, dtype=np.float64))


def ref_scores(x, w1, w2):
    t = x.mean(axis=0, keepdims=True) @ w1
    return (x @ w2) @ t.T


# --- scoring ----------------------------------------------------------------

def test_single_token_score_is_squared_norm():
    s, sem = importance_scores(t64([[3.0, 4.0]]), t64(np.eye(2)), t64(np.eye(2)))
    assert s.data.tolist() == [[25.0]]
    assert sem.data.tolist() == [[3.0, 4.0]]


def test_identical_tokens_score_equally():
    rng = np.random.default_rng(0)
    x = np.tile(rng.normal(size=(1, 3)), (2, 1))
    s, _ = importance_scores(t64(x), t64(rng.normal(size=(3, 3))), t64(rng.normal(size=(3, 3))))
    assert s.data[0, 0] == s.data[1, 0]


def test_scores_match_reference():
    rng = np.random.default_rng(1)
    x, w1, w2 = rng.normal(size=(4, 2)), rng.normal(size=(2, 2)), rng.normal(size=(2, 2))
    s, _ = importance_scores(t64(x), t64(w1), t64(w2))
    assert np.allclose(s.data, ref_scores(x, w1, w2), atol=1e-12)


def test_empty_input_is_error():
    with pytest.raises(T.ShapeError):
        importance_scores(t64(np.zeros((0, 2))), t64(np.eye(2)), t64(np.eye(2)))


# --- pruning ----------------------------------------------------------------

def test_prune_hand_example():
    x = t64(np.arange(8).reshape(4, 2))
    pr = prune(x, np.array([0.9, 0.1, 0.5, 0.3]), 0.5)
    assert pr.mask.tolist() == [1, 0, 1, 0]
    assert pr.kept_indices.tolist() == [0, 2] and pr.n == 2
    assert pr.kept_tokens.data.tolist() == [[0, 1], [4, 5]]
    assert pr.passthrough.data.tolist() == [[0, 0], [2, 3], [0, 0], [6, 7]]


def test_prune_keep_all():
    x = t64(np.random.default_rng(0).normal(size=(5, 3)))
    pr = prune(x, np.arange(5.0), 1.0)
    assert pr.mask.tolist() == [1] * 5
    assert pr.passthrough is None or not pr.passthrough.data.any()
    assert np.array_equal(pr.kept_tokens.data, x.data)


def test_prune_equal_scores_keep_lowest_indices():
    pr = prune(t64(np.ones((6, 1))), np.zeros(6), 0.5)
    assert pr.kept_indices.tolist() == [0, 1, 2]


def test_pruned_rows_pass_through_exactly():
    rng = np.random.default_rng(2)
    x = t64(rng.normal(size=(10, 3)))
    pr = prune(x, rng.normal(size=10), 0.3)
    pruned = pr.mask == 0
    assert np.array_equal(pr.passthrough.data[pruned], x.data[pruned])
    assert not pr.passthrough.data[~pruned].any()


@given(st.integers(2, 600), st.floats(0.01, 1.0))
def test_keep_count_law(N, rho):
    n = keep_count(N, rho)
    assert n == min(N, max(2, int(np.floor(N * rho + 0.5 + 1e-9))))
    pr = prune(t64(np.zeros((N, 1))), np.random.default_rng(N).normal(size=N), rho)
    assert int(pr.mask.sum()) == n == len(pr.kept_indices)


def test_keep_count_at_smallest_stage():
    assert keep_count(49, 0.1) == 5
    assert keep_count(3136, 0.5) == 1568


def test_prune_fraction_flag_flips_meaning():
    assert keep_count(100, 0.3, rho_is_prune_fraction=True) == 70


@given(st.integers(2, 2000), st.sampled_from(list(zip(KEEP_RATIOS, MERGE_RATIOS))))
def test_merge_feasibility_for_configured_ratios(N, ratios):
    rho, rho_m = ratios
    n = keep_count(N, rho)
    assert merge_count(n, rho_m) <= n // 2


@given(st.integers(2, 30), st.floats(0.05, 1.0), st.integers(0, 2 ** 16))
def test_kept_scores_dominate_pruned(N, rho, seed):
    s = np.random.default_rng(seed).integers(-3, 4, size=N).astype(float)
    pr = prune(t64(np.zeros((N, 1))), s, rho)
    kept, gone = s[pr.mask == 1], s[pr.mask == 0]
    if len(gone):
        assert kept.min() >= gone.max()
        # ties at the boundary resolve to the lower index
        for i in np.flatnonzero(pr.mask == 0):
            assert all(s[j] > s[i] or j < i for j in pr.kept_indices)
        assert pr.threshold == gone.max()


@given(st.integers(3, 40), st.integers(0, 2 ** 16))
def test_permutation_consistency(N, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(N, 4))
    w1, w2 = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
    perm = rng.permutation(N)
    s, _ = importance_scores(t64(x), t64(w1), t64(w2))
    sp, _ = importance_scores(t64(x[perm]), t64(w1), t64(w2))
    srt = np.sort(s.data.ravel())
    assume(np.all(np.diff(srt) > 1e-9))
    a = prune(t64(x), s, 0.4)
    b = prune(t64(x[perm]), sp, 0.4)
    assert sorted(a.kept_indices.tolist()) == sorted(perm[b.kept_indices].tolist())


@given(st.integers(2, 40), st.floats(-1e3, 1e3), st.integers(0, 2 ** 16))
def test_score_shift_invariance(N, c, seed):
    s = np.random.default_rng(seed).integers(-50, 50, size=N).astype(float)
    a = prune(t64(np.zeros((N, 1))), s, 0.5)
    b = prune(t64(np.zeros((N, 1))), s + c, 0.5)
    assert a.mask.tolist() == b.mask.tolist()


# --- merging ----------------------------------------------------------------

def interleave(a, b):
    rows = []
    for i in range(max(len(a), len(b))):
        rows += [a[i]] if i < len(a) else []
        rows += [b[i]] if i < len(b) else []
    return np.array(rows, dtype=np.float64)


def test_merge_hand_bipartite_example():
    kept = interleave([[1, 0], [0, 1]], [[2, 0], [0, 3]])
    mr = merge(t64(kept), 0.25)
    assert mr.r == 1
    assert mr.edge_sources.tolist() == [1] and mr.edge_targets.tolist() == [1]
    assert mr.edge_scores.tolist() == [3.0]
    assert mr.merged_tokens.data.tolist() == [[1, 0], [2, 0], [0, 2]]
    assert mr.group_size.tolist() == [1, 2]


def test_merge_zero_ratio_reorders():
    kept = np.arange(10.0).reshape(5, 2)
    mr = merge(t64(kept), 0.0)
    assert mr.r == 0
    assert np.array_equal(mr.merged_tokens.data, kept[[0, 2, 4, 1, 3]])


@given(st.integers(2, 30), st.floats(0.0, 1.0))
def test_merge_constant_tokens_fixed_point(n, rho_m):
    tok = np.array([[0.5, -2.0, 3.0]])
    mr = merge(t64(np.tile(tok, (n, 1))), rho_m)
    assert len(mr.merged_tokens.data) == n - mr.r
    assert mr.r <= n // 2
    assert np.allclose(mr.merged_tokens.data, tok, atol=1e-12)


@given(st.integers(2, 25), st.floats(0.0, 1.0), st.integers(0, 2 ** 16))
def test_merge_group_mean(n, rho_m, seed):
    x = np.random.default_rng(seed).normal(size=(n, 3))
    mr = merge(t64(x), rho_m)
    a, b = x[mr.a_slots], x[mr.b_slots]
    b_hat = mr.merged_tokens.data[len(mr.unmerged):]
    for j in range(len(b)):
        members = [b[j]] + [a[i] for i, t in zip(mr.edge_sources, mr.edge_targets) if t == j]
        assert np.allclose(b_hat[j], np.mean(members, axis=0), atol=1e-12)
        assert mr.group_size[j] == len(members)
    assert np.array_equal(mr.merged_tokens.data[:len(mr.unmerged)], a[mr.unmerged])
    assert len(mr.a_slots) == (n + 1) // 2
    # every merged A-node targets its highest dot-product B-node
    for i, t in zip(mr.edge_sources, mr.edge_targets):
        assert (a[i] @ b.T)[t] == (a[i] @ b.T).max()


def test_merge_gradient_reaches_tokens():
    x = T.tensor(np.random.default_rng(0).normal(size=(6, 2)), requires_grad=True)
    with T.Tape() as tape:
        loss = T.sum(merge(x, 0.5).merged_tokens)
    tape.backward(loss)
    # each token's weight is 1/group_size of its group, and the total is the number of output rows
    assert x.grad.sum() == pytest.approx(3 * 2)


# --- compress ---------------------------------------------------------------

def test_compress_none_is_identity():
    x = t64(np.random.default_rng(0).normal(size=(9, 2)))
    out, st_ = compress(x, None, None, 0.5, 0.3, "none")
    assert out is x and st_.N == 9


def test_compress_composes_prune_and_merge():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(12, 4))
    w1, w2 = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
    out, st_ = compress(t64(x), t64(w1), t64(w2), 0.5, 0.3, "prune_and_merge")
    order = np.argsort(-ref_scores(x, w1, w2).ravel(), kind="stable")
    kept = np.sort(order[:6])
    expected = merge(t64(x[kept]), 0.3).merged_tokens.data
    assert st_.prune.kept_indices.tolist() == kept.tolist()
    assert np.allclose(out.data, expected, atol=1e-12)


@pytest.mark.parametrize("mode,m", [("none", 20), ("prune_only", 10), ("merge_only", 14), ("prune_and_merge", 7)])
def test_compress_token_counts(mode, m):
    rng = np.random.default_rng(4)
    x = t64(rng.normal(size=(20, 4)))
    out, st_ = compress(x, t64(rng.normal(size=(4, 4))), t64(rng.normal(size=(4, 4))), 0.5, 0.3, mode)
    assert out.shape[0] == m
    if mode != "none":
        assert st_.m == m


def test_constant_tokens_survive_full_compression():
    x = t64(np.tile([[1.0, 2.0]], (16, 1)))
    out, _ = compress(x, t64(np.eye(2)), t64(np.eye(2)), 0.5, 0.3, "prune_and_merge")
    assert np.allclose(out.data, [[1.0, 2.0]])


def test_mode_aliases():
    assert canonical_mode("prune") == "prune_only"
    assert canonical_mode("prune_merge") == "prune_and_merge"
    with pytest.raises(ValueError):
        canonical_mode("squash")

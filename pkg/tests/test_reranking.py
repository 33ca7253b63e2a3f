import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flipreid.losses import pairwise_euclidean
from flipreid.reranking import RerankParams, k_reciprocal_set, reciprocal_neighbours, rerank
from oracles import expanded_reciprocal, naive_rerank, reciprocal


def blocks(feats_q, feats_g):
    return pairwise_euclidean(feats_q, feats_g), pairwise_euclidean(feats_q), pairwise_euclidean(feats_g)


def test_params_validation():
    with pytest.raises(ValueError):
        RerankParams(k1=2, k2=3)
    with pytest.raises(ValueError):
        RerankParams(k2=0)
    with pytest.raises(ValueError):
        RerankParams(lambda_value=1.5)


def test_mutual_and_one_sided_neighbours():
    pts = np.array([[0.0], [1.0], [5.0]])
    d = pairwise_euclidean(pts)
    assert reciprocal_neighbours(d, 0, 1) == [1]
    assert reciprocal_neighbours(d, 1, 1) == [0]
    # Point 2's nearest neighbour is 1, whose nearest neighbour is 0.
    assert reciprocal_neighbours(d, 2, 1) == []


def test_input_validation():
    d = pairwise_euclidean(np.arange(4.0)[:, None])
    with pytest.raises(ValueError):
        k_reciprocal_set(d, 0, 4)
    bad = d.copy()
    bad[0, 1] += 1.0
    with pytest.raises(ValueError):
        k_reciprocal_set(bad, 0, 1)
    with pytest.raises(ValueError):
        rerank(-np.ones((1, 2)), np.zeros((1, 1)), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        rerank(np.ones((1, 2)), np.zeros((2, 2)), np.zeros((2, 2)))


def test_sets_match_pseudocode_transcription():
    rng = np.random.default_rng(0)
    for trial in range(20):
        pts = rng.normal(size=(20, 3))
        if trial % 4 == 0:
            pts = np.round(pts)  # ties
        d = pairwise_euclidean(pts)
        rows = d.tolist()
        for k in (1, 3, 6, 10):
            for p in range(0, 20, 3):
                assert reciprocal_neighbours(d, p, k) == sorted(reciprocal(rows, p, k))
                assert k_reciprocal_set(d, p, k) == sorted(expanded_reciprocal(rows, p, k))


def test_lambda_one_returns_original():
    rng = np.random.default_rng(1)
    q_g, q_q, g_g = blocks(rng.normal(size=(3, 2)), rng.normal(size=(7, 2)))
    out = rerank(q_g, q_q, g_g, RerankParams(k1=4, k2=2, lambda_value=1.0))
    np.testing.assert_array_equal(out, q_g)
    assert out is not q_g


def test_separated_clusters():
    rng = np.random.default_rng(2)
    a = rng.normal(0, 0.1, size=(6, 2))
    b = rng.normal(0, 0.1, size=(6, 2)) + 10.0
    q = np.vstack([a[:2], b[:2]])
    g = np.vstack([a[2:], b[2:]])
    out = rerank(*blocks(q, g), RerankParams(k1=4, k2=2, lambda_value=0.3))
    same = np.array([[qi // 2 == gi // 4 for gi in range(8)] for qi in range(4)])
    assert out[same].max() < out[~same].min()


@pytest.mark.parametrize("params", [(20, 6, 0.3), (4, 1, 0.0), (5, 3, 0.5)])
def test_matches_naive_oracle(params):
    k1, k2, lam = params
    rng = np.random.default_rng(k1 + k2)
    for _ in range(10):
        q_g, q_q, g_g = blocks(rng.normal(size=(5, 4)), rng.normal(size=(15, 4)))
        fast = rerank(q_g, q_q, g_g, RerankParams(k1, k2, lam))
        slow = np.array(naive_rerank(q_g.tolist(), q_q.tolist(), g_g.tolist(), k1, k2, lam))
        np.testing.assert_allclose(fast, slow, rtol=0, atol=1e-6)


def test_k1_clamped_with_warning(caplog):
    rng = np.random.default_rng(3)
    q_g, q_q, g_g = blocks(rng.normal(size=(2, 2)), rng.normal(size=(3, 2)))
    with caplog.at_level(logging.WARNING, logger="flipreid.reranking"):
        out = rerank(q_g, q_q, g_g, RerankParams(k1=20, k2=6))
    assert "clamping" in caplog.text
    assert out.shape == (2, 3) and np.all(np.isfinite(out))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.0, 1.0))
def test_output_range_and_permutation(seed, lam):
    rng = np.random.default_rng(seed)
    q_g, q_q, g_g = blocks(rng.normal(size=(3, 3)), rng.normal(size=(8, 3)))
    params = RerankParams(k1=4, k2=2, lambda_value=lam)
    out = rerank(q_g, q_q, g_g, params)
    assert out.min() >= -1e-12
    assert out.max() <= (1 - lam) + lam * q_g.max() + 1e-12
    perm = rng.permutation(8)
    permuted = rerank(q_g[:, perm], q_q, g_g[np.ix_(perm, perm)], params)
    np.testing.assert_allclose(permuted, out[:, perm], atol=1e-12)

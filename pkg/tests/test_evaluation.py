import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flipreid.evaluation import (
    EmbeddingSet,
    average_precision,
    cross_camera_mask,
    embed_double,
    embed_single,
    evaluate,
    flip_gap,
)
from flipreid.losses import pairwise_euclidean
from flipreid.model import ModelConfig, ReIDModel
from flipreid.synth import Sample, horizontal_flip
from oracles import brute_force_eval


def random_instance(rng, integer=False):
    nq, ng, dim = int(rng.integers(1, 11)), int(rng.integers(2, 31)), int(rng.integers(1, 6))
    n_ids = int(rng.integers(1, 6))
    if integer:
        qf, gf = rng.integers(0, 3, size=(nq, dim)).astype(float), rng.integers(0, 3, size=(ng, dim)).astype(float)
    else:
        qf, gf = rng.normal(size=(nq, dim)), rng.normal(size=(ng, dim))
    q = EmbeddingSet(qf, rng.integers(0, n_ids, nq), rng.integers(0, 3, nq))
    g = EmbeddingSet(gf, rng.integers(0, n_ids, ng), rng.integers(0, 3, ng))
    return q, g


def has_valid_query(q, g):
    return any(((g.identities == i) & (g.cameras != c)).any() for i, c in zip(q.identities, q.cameras))


def test_mask_examples():
    mask = cross_camera_mask(1, 0, [1, 1, 2, 2], [0, 1, 0, 1])
    assert mask.tolist() == [False, True, True, True]
    literal = cross_camera_mask(1, 0, [1, 1, 2, 2], [0, 1, 0, 1], protocol="same-camera")
    assert literal.tolist() == [False, True, False, True]
    with pytest.raises(ValueError):
        cross_camera_mask(1, 0, [1], [0], protocol="nope")


def test_average_precision_examples():
    assert average_precision([1, 1, 0]) == 1.0
    assert average_precision([0, 1]) == 0.5
    assert average_precision([1, 0, 1]) == pytest.approx(5 / 6)
    assert math.isnan(average_precision([0, 0]))


def test_perfect_retrieval():
    rng = np.random.default_rng(0)
    feats = rng.normal(size=(6, 4))
    q = EmbeddingSet(feats, np.arange(6), np.zeros(6))
    g = EmbeddingSet(feats.copy(), np.arange(6), np.ones(6))
    report = evaluate(q, g)
    assert report.mAP == 1.0 and report.rank1 == 1.0
    assert report.num_valid_queries == 6


def test_random_single_positive_matches_harmonic_expectation():
    rng = np.random.default_rng(1)
    gsize, nq = 10, 4000
    q = EmbeddingSet(rng.normal(size=(nq, 3)), np.arange(nq), np.zeros(nq))
    # One positive per query; the rest are distractors from other identities.
    expected = sum(1 / r for r in range(1, gsize + 1)) / gsize
    aps = []
    for chunk in range(0, nq, 500):
        ids = np.arange(chunk, chunk + 500)
        sub_q = EmbeddingSet(q.features[ids], ids, np.zeros(500))
        for k in range(500):
            g_ids = np.concatenate([[ids[k]], -1 - np.arange(gsize - 1)])
            g = EmbeddingSet(rng.normal(size=(gsize, 3)), g_ids, np.ones(gsize))
            one = EmbeddingSet(sub_q.features[k : k + 1], sub_q.identities[k : k + 1], [0])
            aps.append(evaluate(one, g).mAP)
    assert abs(np.mean(aps) - expected) < 4 * np.std(aps) / math.sqrt(len(aps))


def test_evaluate_equals_brute_force():
    rng = np.random.default_rng(2)
    done = 0
    while done < 100:
        q, g = random_instance(rng, integer=done % 3 == 0)
        if not has_valid_query(q, g):
            continue
        report = evaluate(q, g, max_rank=50)
        dist = [[math.sqrt(sum((a - b) ** 2 for a, b in zip(x, y))) for y in g.features] for x in q.features]
        mean_ap, cmc, valid = brute_force_eval(dist, q.identities, q.cameras, g.identities, g.cameras, 50)
        assert report.mAP == mean_ap
        assert report.cmc.tolist() == cmc
        assert report.num_valid_queries == valid
        done += 1


def test_invalid_queries_are_excluded():
    q = EmbeddingSet(np.zeros((2, 1)), [0, 5], [0, 0])
    g = EmbeddingSet(np.array([[1.0], [2.0]]), [0, 1], [1, 1])
    report = evaluate(q, g)
    assert report.num_valid_queries == 1
    assert math.isnan(report.per_query_ap[1])
    with pytest.raises(ValueError):
        evaluate(EmbeddingSet(np.zeros((1, 1)), [7], [0]), g)


def test_rejects_dimension_mismatch():
    with pytest.raises(ValueError):
        evaluate(EmbeddingSet(np.zeros((1, 2)), [0], [0]), EmbeddingSet(np.zeros((1, 3)), [0], [1]))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_monotone_transform_and_cmc_shape(seed):
    rng = np.random.default_rng(seed)
    q, g = random_instance(rng)
    if not has_valid_query(q, g):
        return
    d = pairwise_euclidean(q.features, g.features)
    base = evaluate(q, g, distances=d)
    for transformed in (d * d, d + 1):
        other = evaluate(q, g, distances=transformed)
        assert other.mAP == base.mAP
        np.testing.assert_array_equal(other.cmc, base.cmc)
    assert np.all(np.diff(base.cmc) >= 0)
    full = evaluate(q, g, max_rank=len(g))
    assert full.cmc[-1] == 1.0
    assert 0.0 <= base.mAP <= 1.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_gallery_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    q, g = random_instance(rng)
    if not has_valid_query(q, g):
        return
    perm = rng.permutation(len(g))
    g2 = EmbeddingSet(g.features[perm], g.identities[perm], g.cameras[perm])
    assert evaluate(q, g2).mAP == pytest.approx(evaluate(q, g).mAP, abs=1e-12)


def _model(seed=0):
    cfg = ModelConfig(num_classes=4, block_channels=(4, 6), reduced_dim=3)
    return ReIDModel.initialize(cfg, np.random.default_rng(seed))


def _samples(n, seed=0):
    rng = np.random.default_rng(seed)
    return [Sample(rng.integers(0, 256, size=(3, 16, 8), dtype=np.uint8), i % 3, i % 2) for i in range(n)]


def test_embed_single_contract():
    model, samples = _model(), _samples(5)
    a, b = embed_single(model, samples), embed_single(model, samples)
    assert a.features.tobytes() == b.features.tobytes()
    assert len(a) == 5 and a.mode == "single"
    assert a.features.min() >= 0.0 and a.features.max() <= 8.0


def test_embed_double_examples():
    model, samples = _model(1), _samples(4, 1)
    single = embed_single(model, samples).features
    flipped = embed_single(model, [Sample(horizontal_flip(s.image), s.identity, s.camera) for s in samples]).features
    double = embed_double(model, samples)
    assert double.mode == "double"
    np.testing.assert_allclose(np.linalg.norm(double.features - single, axis=1),
                               np.linalg.norm(double.features - flipped, axis=1), atol=1e-12)
    # Triangle inequality on midpoints.
    d_double = pairwise_euclidean(double.features)
    bound = 0.5 * (pairwise_euclidean(single) + pairwise_euclidean(flipped))
    assert np.all(d_double <= bound + 1e-9)

    img = np.random.default_rng(2).integers(0, 256, size=(3, 16, 4), dtype=np.uint8)
    sym = [Sample(np.concatenate([img, img[..., ::-1]], axis=2), 0, 0)]
    np.testing.assert_array_equal(embed_double(model, sym).features, embed_single(model, sym).features)
    assert flip_gap(model, sym) == 0.0
    assert flip_gap(model, samples) > 0.0


def test_report_json():
    q = EmbeddingSet(np.zeros((1, 1)), [0], [0])
    g = EmbeddingSet(np.ones((2, 1)), [0, 1], [1, 1])
    text = evaluate(q, g).to_json()
    assert '"mAP": ' in text and '"protocol": "standard"' in text

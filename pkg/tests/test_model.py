import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flipreid.losses import categorical_cross_entropy
from flipreid.model import (
    ConfigurationError,
    ModelConfig,
    PreprocessConfig,
    ReIDModel,
    backbone_forward,
    batchnorm_dense_softmax,
    clip,
    clip_backward,
    finite_diff_gradient,
    gem_pool,
    kink_margin,
    model_backward,
    model_forward,
    preprocess,
    reduce_channels,
    slice_regions,
)


def tiny_model(seed=0, **kw):
    cfg = ModelConfig(num_classes=3, block_channels=(4, 6), reduced_dim=3, **kw)
    return ReIDModel.initialize(cfg, np.random.default_rng(seed))


def test_preprocess_examples():
    zero = preprocess(np.zeros((1, 1, 1), np.uint8), PreprocessConfig((0.0,), (1.0,)))
    assert zero[0, 0, 0] == 0.0
    full = preprocess(np.full((1, 1, 1), 255, np.uint8), PreprocessConfig((0.5,), (0.5,)))
    assert full[0, 0, 0] == 1.0
    mid = preprocess(np.full((1, 1, 1), 128, np.uint8), PreprocessConfig((0.485,), (0.229,)))
    assert mid[0, 0, 0] == pytest.approx((128 / 255 - 0.485) / 0.229)
    assert mid[0, 0, 0] == pytest.approx(0.0741, abs=5e-5)


def test_preprocess_rejects_nonpositive_std():
    with pytest.raises(ConfigurationError):
        PreprocessConfig((0.5,), (0.0,))


def test_backbone_zero_weights_give_zero_maps():
    model = tiny_model()
    for k in model.params:
        if k.startswith("block"):
            model.params[k][...] = 0.0
    x = np.random.default_rng(0).normal(size=(2, 3, 32, 16))
    assert np.all(backbone_forward(model, x) == 0.0)


def test_backbone_output_height():
    model = tiny_model()
    out = backbone_forward(model, np.zeros((1, 3, 32, 16)))
    assert out.shape == (1, 6, 8, 4)


def test_backbone_identity_configuration():
    cfg = ModelConfig(num_classes=2, in_channels=1, block_channels=(1,), kernel_size=1, stride=1,
                      preprocess=PreprocessConfig((0.0,), (1.0,)))
    model = ReIDModel.initialize(cfg, np.random.default_rng(0))
    model.params["block0.weight"][...] = 1.0
    model.params["block0.bias"][...] = 0.0
    x = np.random.default_rng(1).uniform(0, 3, size=(2, 1, 5, 4))
    np.testing.assert_array_equal(backbone_forward(model, x), x)


def test_backbone_rejects_too_few_rows():
    cfg = ModelConfig(num_classes=2, block_channels=(4, 4), num_regions=3)
    model = ReIDModel.initialize(cfg, np.random.default_rng(0))
    with pytest.raises(ConfigurationError):
        backbone_forward(model, np.zeros((1, 3, 4, 4)))


def _maps(values):
    return np.asarray(values, dtype=float).reshape(1, 1, 1, -1)


def test_gem_examples():
    assert gem_pool(_maps([1.0, 2.0, 4.0]), 1.0)[0, 0] == pytest.approx(7 / 3, abs=1e-12)
    assert gem_pool(_maps([1.0, 2.0]), 3.0)[0, 0] == pytest.approx(4.5 ** (1 / 3), abs=1e-12)
    assert gem_pool(_maps([1.0, 2.0]), 3.0)[0, 0] == pytest.approx(1.65096, abs=1e-5)
    assert abs(gem_pool(_maps([1.0, 2.0]), 64.0)[0, 0] - 2.0) < 0.03
    with pytest.raises(ValueError):
        gem_pool(_maps([1.0]), 0.0)
    with pytest.raises(ValueError):
        gem_pool(_maps([1.0]), -1.0)


@settings(max_examples=50)
@given(st.lists(st.floats(1e-6, 4.0), min_size=2, max_size=12), st.floats(0.5, 20), st.floats(0.0, 10))
def test_gem_nondecreasing_in_p(values, p, dp):
    m = _maps(values)
    assert gem_pool(m, p + dp)[0, 0] >= gem_pool(m, p)[0, 0] * (1 - 1e-12)


def test_clip_examples():
    np.testing.assert_array_equal(clip(np.array([-1.0, 2.0, 9.0]), 0.0, 4.0), [0.0, 2.0, 4.0])
    v = np.array([5.0])
    assert clip(v, 0.0, 4.0)[0] == 4.0
    assert clip_backward(np.ones(1), v, 0.0, 4.0)[0] == 0.0
    assert clip_backward(np.ones(1), np.array([4.0]), 0.0, 4.0)[0] == 0.0
    assert clip_backward(np.ones(1), np.array([3.0]), 0.0, 4.0)[0] == 1.0


@given(st.lists(st.floats(-100, 100), min_size=1, max_size=10))
def test_clip_idempotent_and_bounded(values):
    v = np.array(values)
    once = clip(v, -1.0, 2.0)
    np.testing.assert_array_equal(clip(once, -1.0, 2.0), once)
    assert once.min() >= -1.0 and once.max() <= 2.0


def test_slice_regions():
    maps = np.arange(8 * 2, dtype=float).reshape(1, 1, 8, 2)
    top, bottom = slice_regions(maps, 2)
    np.testing.assert_array_equal(top, maps[:, :, 0:4])
    np.testing.assert_array_equal(bottom, maps[:, :, 4:8])
    (only,) = slice_regions(maps, 1)
    np.testing.assert_array_equal(only, maps)
    odd = np.zeros((1, 1, 7, 1))
    assert [s.shape[2] for s in slice_regions(odd, 2)] == [4, 3]
    with pytest.raises(ConfigurationError):
        slice_regions(odd, 8)


@given(st.integers(1, 12), st.integers(1, 12))
def test_slices_reassemble(height, regions):
    if regions > height:
        return
    maps = np.random.default_rng(height).normal(size=(2, 3, height, 2))
    np.testing.assert_array_equal(np.concatenate(slice_regions(maps, regions), axis=2), maps)


def test_reduce_channels():
    maps = np.random.default_rng(0).normal(size=(2, 4, 3, 2))
    np.testing.assert_allclose(reduce_channels(maps, np.eye(4)), maps)
    np.testing.assert_allclose(reduce_channels(maps, np.ones((1, 4))), maps.sum(axis=1, keepdims=True))
    assert reduce_channels(maps, np.ones((2, 4))).shape == (2, 2, 3, 2)
    with pytest.raises(ConfigurationError):
        reduce_channels(maps, np.ones((2, 3)))


def test_head_uniform_with_zero_dense():
    model = tiny_model()
    model.params["global.dense_weight"][...] = 0.0
    probs, *_ = batchnorm_dense_softmax(model, "global", np.random.default_rng(0).normal(size=(4, 6)), "eval")
    np.testing.assert_allclose(probs, 1 / 3)


def test_head_rows_sum_to_one_and_train_stats():
    model = tiny_model()
    emb = np.random.default_rng(1).normal(2.0, 3.0, size=(16, 6))
    probs, _, cache, stats = batchnorm_dense_softmax(model, "global", emb, "train")
    assert np.all(probs > 0)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)
    np.testing.assert_allclose(cache["xhat"].mean(axis=0), 0.0, atol=1e-6)
    np.testing.assert_allclose(cache["xhat"].var(axis=0), 1.0, atol=1e-6)
    mean, var = stats
    np.testing.assert_allclose(mean, emb.mean(axis=0))
    with pytest.raises(ValueError):
        batchnorm_dense_softmax(model, "global", emb[:1], "train")


def test_running_stats_momentum():
    model = tiny_model()
    model.update_running_stats({"global": (np.full(6, 2.0), np.full(6, 3.0))})
    np.testing.assert_allclose(model.buffers["global.bn_running_mean"], 0.2)
    np.testing.assert_allclose(model.buffers["global.bn_running_var"], 0.9 + 0.3)


def _images(n, seed=0, h=16, w=8):
    return np.random.default_rng(seed).integers(0, 256, size=(n, 3, h, w), dtype=np.uint8)


def test_forward_contract():
    model = tiny_model()
    x = preprocess(_images(3), model.config.preprocess)
    feats, probs, _ = model_forward(model, x, "eval")
    assert feats.shape == (3, model.config.feature_dim) == (3, 6 + 2 * 3)
    assert feats.min() >= 0.0 and feats.max() <= 8.0
    assert len(probs) == 3
    again, _, _ = model_forward(model, x, "eval")
    assert feats.tobytes() == again.tobytes()
    twin = np.concatenate([x[:1], x[:1]])
    f2, _, _ = model_forward(model, twin, "eval")
    np.testing.assert_array_equal(f2[0], f2[1])


def test_backward_zero_upstream():
    model = tiny_model()
    x = preprocess(_images(2), model.config.preprocess)
    _, _, cache = model_forward(model, x, "train")
    grads = model_backward(model, cache, np.zeros((2, 12)), [np.zeros((2, 3))] * 3)
    assert all(np.all(g == 0) for g in grads.values())
    assert set(grads) == set(model.params)


def test_backward_rejects_foreign_cache():
    a, b = tiny_model(0), tiny_model(1)
    _, _, cache = model_forward(a, preprocess(_images(2), a.config.preprocess), "train")
    with pytest.raises(ValueError):
        model_backward(b, cache, np.zeros((2, 12)))
    with pytest.raises(ValueError):
        model_backward(a, cache, np.zeros((3, 12)))


def _relative_ok(analytic, numeric, rtol, floor=1e-8):
    diff = np.abs(analytic - numeric)
    return np.all((diff <= rtol * np.maximum(np.abs(analytic), np.abs(numeric))) | (diff <= floor))


@pytest.mark.parametrize("seed", range(3))
def test_backward_matches_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    model = tiny_model(seed)
    x = preprocess(_images(2, seed), model.config.preprocess)
    labels = np.array([0, 2])
    weights = rng.normal(size=(2, model.config.feature_dim))

    def loss_and_upstream():
        feats, probs, cache = model_forward(model, x, "train")
        ce, g_logits = categorical_cross_entropy(probs, labels)
        return float((feats * weights).sum() + ce), cache, g_logits

    _, cache, g_logits = loss_and_upstream()
    assert kink_margin(model, cache) > 1e-6
    analytic = model_backward(model, cache, weights, g_logits)
    numeric = finite_diff_gradient(lambda: loss_and_upstream()[0], model.params, 1e-5)
    for name in analytic:
        assert _relative_ok(analytic[name], numeric[name], 1e-4), name


def test_gem_power_gradient_nonzero():
    model = tiny_model(3)
    x = preprocess(_images(2, 3), model.config.preprocess)
    feats, _, cache = model_forward(model, x, "train")
    grads = model_backward(model, cache, np.ones_like(feats))
    assert grads["global.gem_p"] != 0.0
    numeric = finite_diff_gradient(lambda: float(model_forward(model, x, "train")[0].sum()),
                                   {"global.gem_p": model.params["global.gem_p"]})
    assert grads["global.gem_p"] == pytest.approx(float(numeric["global.gem_p"]), rel=1e-5)


def test_finite_diff_oracle_basics():
    theta = {"t": np.array([3.0])}
    g = finite_diff_gradient(lambda: 0.5 * float(theta["t"][0]) ** 2, theta, 1e-5)
    assert abs(g["t"][0] - 3.0) < 1e-8
    assert theta["t"][0] == 3.0
    g = finite_diff_gradient(lambda: 4.0, theta, 1e-5)
    assert g["t"][0] == 0.0

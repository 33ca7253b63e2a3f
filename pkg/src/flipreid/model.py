"""Toy re-identification network with hand-written forward/backward passes.

Layout (one global branch, ``num_regions`` regional branches)::

    uint8 images -> preprocess -> [conv -> relu] x B -> maps
    maps -> GeM(p_g) -> clip                      = global embedding
    maps -> stripe r -> 1x1 conv -> GeM(p_r) -> clip = regional embedding r
    each embedding -> batch-norm -> dense -> softmax (classifier head)

The feature vector used for retrieval is the concatenation of the clipped
embeddings.  Everything is float64.  Parameters live in a flat ``dict`` of
arrays so gradients, optimizer state and checkpoints share one keying.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class PreprocessConfig:
    channel_mean: tuple[float, ...] = (0.5, 0.5, 0.5)
    channel_std: tuple[float, ...] = (0.25, 0.25, 0.25)

    def __post_init__(self):
        if len(self.channel_mean) != len(self.channel_std):
            raise ConfigurationError("channel_mean and channel_std lengths differ")
        if any(s <= 0 for s in self.channel_std):
            raise ConfigurationError(f"channel_std must be positive, got {self.channel_std}")


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int
    in_channels: int = 3
    block_channels: tuple[int, ...] = (8, 16)
    kernel_size: int = 3
    stride: int = 2
    num_regions: int = 2
    reduced_dim: int = 8
    clip_lo: float = 0.0
    clip_hi: float = 8.0
    gem_p_init: float = 3.0
    gem_eps: float = 1e-6
    bn_momentum: float = 0.9
    bn_var_floor: float = 1e-5
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)

    def __post_init__(self):
        if not self.clip_lo < self.clip_hi:
            raise ConfigurationError(f"clip_lo must be < clip_hi, got {self.clip_lo}, {self.clip_hi}")
        if self.gem_p_init <= 0:
            raise ConfigurationError("gem_p_init must be positive")
        if self.num_regions < 1 or self.num_classes < 1:
            raise ConfigurationError("num_regions and num_classes must be >= 1")
        if len(self.preprocess.channel_mean) != self.in_channels:
            raise ConfigurationError("preprocess channel count does not match in_channels")

    @property
    def branches(self) -> list[str]:
        return ["global"] + [f"region{r}" for r in range(self.num_regions)]

    @property
    def branch_dims(self) -> list[int]:
        return [self.block_channels[-1]] + [self.reduced_dim] * self.num_regions

    @property
    def feature_dim(self) -> int:
        return sum(self.branch_dims)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        pre = d.pop("preprocess", None)
        if pre is not None:
            d["preprocess"] = PreprocessConfig(tuple(pre["channel_mean"]), tuple(pre["channel_std"]))
        if "block_channels" in d:
            d["block_channels"] = tuple(d["block_channels"])
        return cls(**d)


class ReIDModel:
    """Parameter container.  ``params`` are trainable, ``buffers`` are not."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray], buffers: dict[str, np.ndarray]):
        self.config = config
        self.params = params
        self.buffers = buffers

    @classmethod
    def initialize(cls, config: ModelConfig, rng: np.random.Generator) -> "ReIDModel":
        params: dict[str, np.ndarray] = {}
        buffers: dict[str, np.ndarray] = {}
        c_in, k = config.in_channels, config.kernel_size
        for i, c_out in enumerate(config.block_channels):
            scale = np.sqrt(2.0 / (c_in * k * k))
            params[f"block{i}.weight"] = rng.normal(0.0, scale, size=(c_out, c_in, k, k))
            params[f"block{i}.bias"] = np.zeros(c_out)
            c_in = c_out
        params["global.gem_p"] = np.array(float(config.gem_p_init))
        for r in range(config.num_regions):
            # Nonnegative start keeps regional responses above the GeM floor.
            params[f"region{r}.reduce"] = rng.uniform(0.0, 2.0 / c_in, size=(config.reduced_dim, c_in))
            params[f"region{r}.gem_p"] = np.array(float(config.gem_p_init))
        for name, dim in zip(config.branches, config.branch_dims):
            params[f"{name}.bn_scale"] = np.ones(dim)
            params[f"{name}.bn_shift"] = np.zeros(dim)
            params[f"{name}.dense_weight"] = rng.normal(0.0, 0.01, size=(dim, config.num_classes))
            params[f"{name}.dense_bias"] = np.zeros(config.num_classes)
            buffers[f"{name}.bn_running_mean"] = np.zeros(dim)
            buffers[f"{name}.bn_running_var"] = np.ones(dim)
        buffers["clip_lo"] = np.array(float(config.clip_lo))
        buffers["clip_hi"] = np.array(float(config.clip_hi))
        return cls(config, params, buffers)

    def copy(self) -> "ReIDModel":
        return ReIDModel(
            self.config,
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    def update_running_stats(self, stats: dict[str, tuple[np.ndarray, np.ndarray]]) -> None:
        m = self.config.bn_momentum
        for name, (mean, var) in stats.items():
            self.buffers[f"{name}.bn_running_mean"] = m * self.buffers[f"{name}.bn_running_mean"] + (1 - m) * mean
            self.buffers[f"{name}.bn_running_var"] = m * self.buffers[f"{name}.bn_running_var"] + (1 - m) * var


def preprocess(raw: np.ndarray, cfg: PreprocessConfig) -> np.ndarray:
    """Scale uint8 pixels to [0, 1] and standardize per channel."""
    raw = np.asarray(raw)
    shape = (1,) * (raw.ndim - 3) + (-1, 1, 1)
    mean = np.asarray(cfg.channel_mean, dtype=np.float64).reshape(shape)
    std = np.asarray(cfg.channel_std, dtype=np.float64).reshape(shape)
    return (raw.astype(np.float64) / 255.0 - mean) / std


# --- convolution -----------------------------------------------------------

def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray, stride: int) -> np.ndarray:
    """Zero-padded ('same' for stride 1) convolution, NCHW layout."""
    n, _, h, w = x.shape
    c_out, _, k, _ = weight.shape
    pad = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = _conv_out(h, k, stride, pad), _conv_out(w, k, stride, pad)
    out = np.zeros((n, c_out, ho, wo))
    for i in range(k):
        for j in range(k):
            patch = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
            out += np.einsum("nchw,oc->nohw", patch, weight[:, :, i, j], optimize=True)
    return out + bias[None, :, None, None]


def conv2d_backward(grad_out: np.ndarray, x: np.ndarray, weight: np.ndarray, stride: int):
    n, _, h, w = x.shape
    _, _, k, _ = weight.shape
    pad = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = grad_out.shape[2:]
    grad_xp = np.zeros_like(xp)
    grad_w = np.zeros_like(weight)
    for i in range(k):
        for j in range(k):
            rows = slice(i, i + stride * ho, stride)
            cols = slice(j, j + stride * wo, stride)
            grad_w[:, :, i, j] = np.einsum("nohw,nchw->oc", grad_out, xp[:, :, rows, cols], optimize=True)
            grad_xp[:, :, rows, cols] += np.einsum("nohw,oc->nchw", grad_out, weight[:, :, i, j], optimize=True)
    grad_b = grad_out.sum(axis=(0, 2, 3))
    return grad_xp[:, :, pad : pad + h, pad : pad + w], grad_w, grad_b


def backbone_forward(model: ReIDModel, x: np.ndarray, cache: dict | None = None) -> np.ndarray:
    cfg = model.config
    for i in range(len(cfg.block_channels)):
        pre = conv2d(x, model.params[f"block{i}.weight"], model.params[f"block{i}.bias"], cfg.stride)
        if cache is not None:
            cache[f"block{i}"] = (x, pre)
        x = np.maximum(pre, 0.0)
    if x.shape[2] < cfg.num_regions:
        raise ConfigurationError(
            f"backbone output height {x.shape[2]} is smaller than num_regions={cfg.num_regions}"
        )
    return x


def backbone_backward(model: ReIDModel, cache: dict, grad: np.ndarray, grads: dict) -> np.ndarray:
    for i in reversed(range(len(model.config.block_channels))):
        x, pre = cache[f"block{i}"]
        grad = grad * (pre > 0)
        grad, gw, gb = conv2d_backward(grad, x, model.params[f"block{i}.weight"], model.config.stride)
        grads[f"block{i}.weight"] += gw
        grads[f"block{i}.bias"] += gb
    return grad


# --- pooling, clipping, slicing ----------------------------------------------

def gem_pool(maps: np.ndarray, p: float, eps: float = 1e-6) -> np.ndarray:
    """Generalized mean over spatial positions: (mean(max(x, eps)^p))^(1/p).

    p=1 is average pooling and p -> inf approaches max pooling.
    """
    p = float(p)
    if p <= 0:
        raise ValueError(f"GeM power must be positive, got {p}")
    if eps <= 0:
        raise ValueError(f"GeM floor must be positive, got {eps}")
    z = np.maximum(maps, eps)
    return np.mean(z**p, axis=(2, 3)) ** (1.0 / p)


def gem_pool_backward(grad_out: np.ndarray, maps: np.ndarray, p: float, eps: float, out: np.ndarray):
    """Gradients of ``gem_pool`` wrt the maps and the power."""
    p = float(p)
    z = np.maximum(maps, eps)
    n_pos = maps.shape[2] * maps.shape[3]
    zp = z**p
    m = zp.mean(axis=(2, 3))
    # d out / d z_i = m^(1/p - 1) * z_i^(p-1) / n
    coef = (m ** (1.0 / p - 1.0) / n_pos)[:, :, None, None]
    grad_maps = grad_out[:, :, None, None] * coef * z ** (p - 1.0) * (maps > eps)
    mlog = (zp * np.log(z)).mean(axis=(2, 3))
    d_out_dp = out * (-np.log(m) / p**2 + mlog / (p * m))
    return grad_maps, float(np.sum(grad_out * d_out_dp))


def clip(v: np.ndarray, lo: float, hi: float) -> np.ndarray:
    return np.minimum(np.maximum(v, lo), hi)


def clip_backward(grad: np.ndarray, v: np.ndarray, lo: float, hi: float) -> np.ndarray:
    return grad * ((v > lo) & (v < hi))


def slice_regions(maps: np.ndarray, num_regions: int) -> list[np.ndarray]:
    """Split rows into contiguous stripes, top first; earlier stripes get the remainder."""
    if maps.shape[2] < num_regions:
        raise ConfigurationError(f"cannot cut {maps.shape[2]} rows into {num_regions} stripes")
    return np.array_split(maps, num_regions, axis=2)


def reduce_channels(maps: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """1x1 convolution without bias; ``kernel`` is (out_channels, in_channels)."""
    kernel = np.asarray(kernel)
    if kernel.ndim == 4:
        kernel = kernel[:, :, 0, 0]
    if kernel.shape[1] != maps.shape[1]:
        raise ConfigurationError(f"kernel expects {kernel.shape[1]} input channels, maps have {maps.shape[1]}")
    return np.einsum("oc,nchw->nohw", kernel, maps, optimize=True)


# --- classifier head -------------------------------------------------------

def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def batchnorm_dense_softmax(model: ReIDModel, branch: str, emb: np.ndarray, mode: str = "eval"):
    """Batch-norm, dense layer, softmax for one branch.

    Returns ``(probs, logits, cache, stats)``; ``stats`` holds the batch mean
    and unbiased variance in train mode (None in eval mode) and must be
    committed with ``ReIDModel.update_running_stats`` by the caller.
    """
    cfg = model.config
    params = model.params
    floor = cfg.bn_var_floor
    if mode == "train":
        if emb.shape[0] < 2:
            raise ValueError("train-mode batch-norm needs a batch of at least 2")
        mean = emb.mean(axis=0)
        var = ((emb - mean) ** 2).mean(axis=0)
        n = emb.shape[0]
        stats = (mean, var * n / (n - 1))
    elif mode == "eval":
        mean = model.buffers[f"{branch}.bn_running_mean"]
        var = model.buffers[f"{branch}.bn_running_var"]
        stats = None
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    std = np.sqrt(np.maximum(var, floor))
    xhat = (emb - mean) / std
    y = xhat * params[f"{branch}.bn_scale"] + params[f"{branch}.bn_shift"]
    logits = y @ params[f"{branch}.dense_weight"] + params[f"{branch}.dense_bias"]
    cache = {"mode": mode, "xhat": xhat, "y": y, "std": std, "floored": var < floor}
    return softmax(logits), logits, cache, stats


def head_backward(model: ReIDModel, branch: str, cache: dict, grad_logits: np.ndarray, grads: dict) -> np.ndarray:
    p = model.params
    y, xhat, std = cache["y"], cache["xhat"], cache["std"]
    grads[f"{branch}.dense_weight"] += y.T @ grad_logits
    grads[f"{branch}.dense_bias"] += grad_logits.sum(axis=0)
    grad_y = grad_logits @ p[f"{branch}.dense_weight"].T
    grads[f"{branch}.bn_scale"] += (grad_y * xhat).sum(axis=0)
    grads[f"{branch}.bn_shift"] += grad_y.sum(axis=0)
    gx = grad_y * p[f"{branch}.bn_scale"]
    if cache["mode"] == "eval":
        return gx / std
    centered = gx - gx.mean(axis=0)
    # Where the variance floor is active std is a constant: no variance path.
    var_term = np.where(cache["floored"], 0.0, xhat * (gx * xhat).mean(axis=0))
    return (centered - var_term) / std


# --- whole-network passes ----------------------------------------------------

def embed_forward(model: ReIDModel, x: np.ndarray):
    """Preprocessed batch -> list of clipped branch embeddings, plus cache."""
    cfg = model.config
    p = model.params
    lo, hi = float(model.buffers["clip_lo"]), float(model.buffers["clip_hi"])
    cache: dict = {"input_shape": x.shape}
    maps = backbone_forward(model, x, cache)
    cache["maps"] = maps

    pooled = gem_pool(maps, p["global.gem_p"], cfg.gem_eps)
    cache["global"] = (maps, pooled)
    embeddings = [clip(pooled, lo, hi)]
    stripes = slice_regions(maps, cfg.num_regions)
    cache["stripe_rows"] = [s.shape[2] for s in stripes]
    for r, stripe in enumerate(stripes):
        reduced = reduce_channels(stripe, p[f"region{r}.reduce"])
        pooled = gem_pool(reduced, p[f"region{r}.gem_p"], cfg.gem_eps)
        cache[f"region{r}"] = (stripe, reduced, pooled)
        embeddings.append(clip(pooled, lo, hi))
    return embeddings, cache


def embed_backward(model: ReIDModel, cache: dict, grad_embeddings: list[np.ndarray], grads: dict) -> None:
    cfg = model.config
    p = model.params
    lo, hi = float(model.buffers["clip_lo"]), float(model.buffers["clip_hi"])
    maps = cache["maps"]
    grad_maps = np.zeros_like(maps)

    _, pooled = cache["global"]
    g = clip_backward(grad_embeddings[0], pooled, lo, hi)
    gm, gp = gem_pool_backward(g, maps, p["global.gem_p"], cfg.gem_eps, pooled)
    grad_maps += gm
    grads["global.gem_p"] += gp

    row = 0
    for r in range(cfg.num_regions):
        stripe, reduced, pooled = cache[f"region{r}"]
        g = clip_backward(grad_embeddings[r + 1], pooled, lo, hi)
        g_red, gp = gem_pool_backward(g, reduced, p[f"region{r}.gem_p"], cfg.gem_eps, pooled)
        grads[f"region{r}.gem_p"] += gp
        grads[f"region{r}.reduce"] += np.einsum("nohw,nchw->oc", g_red, stripe, optimize=True)
        rows = cache["stripe_rows"][r]
        grad_maps[:, :, row : row + rows] += np.einsum("nohw,oc->nchw", g_red, p[f"region{r}.reduce"], optimize=True)
        row += rows
    backbone_backward(model, cache, grad_maps, grads)


def split_features(model: ReIDModel, features: np.ndarray) -> list[np.ndarray]:
    bounds = np.cumsum(model.config.branch_dims)[:-1]
    return np.split(features, bounds, axis=1)


@dataclass
class ForwardCache:
    embed: dict
    heads: list[dict]
    stats: dict
    batch_size: int
    params_id: int


def model_forward(model: ReIDModel, batch: np.ndarray, mode: str = "eval"):
    """Run the full network on a preprocessed batch.

    Returns ``(features, probs, cache)`` where ``features`` is (N, feature_dim)
    and ``probs`` holds one class-probability matrix per branch.  Running
    batch-norm statistics are not touched; see ``cache.stats``.
    """
    embeddings, ecache = embed_forward(model, batch)
    probs, heads, stats = [], [], {}
    for name, emb in zip(model.config.branches, embeddings):
        pr, logits, hcache, st = batchnorm_dense_softmax(model, name, emb, mode)
        probs.append(pr)
        heads.append(hcache)
        if st is not None:
            stats[name] = st
    features = np.concatenate(embeddings, axis=1)
    return features, probs, ForwardCache(ecache, heads, stats, batch.shape[0], id(model.params))


def embed_features(model: ReIDModel, batch: np.ndarray) -> np.ndarray:
    """Eval-mode feature vectors only (the classifier is not evaluated)."""
    embeddings, _ = embed_forward(model, batch)
    return np.concatenate(embeddings, axis=1)


def model_backward(
    model: ReIDModel,
    cache: ForwardCache,
    grad_features: np.ndarray | None = None,
    grad_logits: list[np.ndarray] | None = None,
) -> dict[str, np.ndarray]:
    """Exact parameter gradients given upstream gradients.

    ``grad_features`` is the loss gradient wrt the concatenated feature
    vector; ``grad_logits`` holds one gradient per branch wrt the pre-softmax
    scores.  Either may be omitted.
    """
    if cache.params_id != id(model.params):
        raise ValueError("forward cache was produced by a different model")
    n = cache.batch_size
    dims = model.config.branch_dims
    if grad_features is None:
        grad_features = np.zeros((n, sum(dims)))
    if grad_features.shape != (n, sum(dims)):
        raise ValueError(f"feature gradient shape {grad_features.shape} does not match cache {(n, sum(dims))}")
    if grad_logits is not None and len(grad_logits) != len(dims):
        raise ValueError(f"expected {len(dims)} logit gradients, got {len(grad_logits)}")
    grads = model.zero_grads()
    grad_emb = split_features(model, grad_features)
    grad_emb = [g.copy() for g in grad_emb]
    if grad_logits is not None:
        for b, (name, hcache) in enumerate(zip(model.config.branches, cache.heads)):
            grad_emb[b] += head_backward(model, name, hcache, grad_logits[b], grads)
    embed_backward(model, cache.embed, grad_emb, grads)
    return grads


def finite_diff_gradient(
    loss_fn: Callable[[], float], params: dict[str, np.ndarray], step: float = 1e-5
) -> dict[str, np.ndarray]:
    """Central differences of ``loss_fn`` wrt every entry of ``params``.

    ``params`` is perturbed in place and restored; ``loss_fn`` must read it.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    out = {}
    for name, arr in params.items():
        grad = np.zeros_like(arr, dtype=np.float64)
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            plus = loss_fn()
            flat[i] = orig - step
            minus = loss_fn()
            flat[i] = orig
            gflat[i] = (plus - minus) / (2 * step)
        out[name] = grad
    return out


def kink_margin(model: ReIDModel, cache: ForwardCache) -> float:
    """Smallest distance of any intermediate to a non-differentiable point.

    Covers ReLU inputs, the GeM floor and the clip bounds.  Gradient checks resample when this is tiny.
    """
    cfg = model.config
    lo, hi = float(model.buffers["clip_lo"]), float(model.buffers["clip_hi"])
    margins = []
    for i in range(len(cfg.block_channels)):
        _, pre = cache.embed[f"block{i}"]
        margins.append(np.abs(pre).min())
    _, pooled = cache.embed["global"]
    maps = cache.embed["maps"]
    # ReLU zeros stay exactly zero under small perturbations; only live units count.
    live = maps[maps > 0]
    if live.size:
        margins.append(np.abs(live - cfg.gem_eps).min())
    pooled_all = [pooled]
    for r in range(cfg.num_regions):
        _, reduced, pooled = cache.embed[f"region{r}"]
        moving = reduced[reduced != 0]
        if moving.size:
            margins.append(np.abs(moving - cfg.gem_eps).min())
        pooled_all.append(pooled)
    for pooled in pooled_all:
        margins.append(np.abs(pooled - lo).min())
        margins.append(np.abs(pooled - hi).min())
    return float(min(margins))

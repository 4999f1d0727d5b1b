"""Series encoder: patch token generator followed by a ViT with a cls token."""

from __future__ import annotations

import numpy as np

from . import layers
from . import tensor as T
from .config import ModelConfig, init_array
from .errors import ConfigurationError, ShapeError
from .tensor import Tensor


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    k, dl, ds, q = cfg.conv_kernel, cfg.loc_dim, cfg.stat_dim, cfg.embed_dim
    shapes = {}
    cin = 1
    for i in range(cfg.conv_layers):
        shapes[f"conv{i}.w"] = (k, cin, dl)
        shapes[f"conv{i}.b"] = (dl,)
        cin = dl
    shapes.update({
        "stat.w": (2, ds), "stat.b": (ds,),
        "tok.w": (2 * dl + ds, q), "tok.b": (q,),
        "cls": (q,), "pos": (cfg.n_patches + 1, q),
    })
    for i in range(cfg.vit_layers):
        shapes.update(layers.prefixed(layers.block_shapes(q, q * cfg.vit_mlp_ratio), f"vit.{i}"))
    return shapes


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    return {name: init_array(name, shape, rng) for name, shape in param_shapes(cfg).items()}


def _params(p) -> dict[str, Tensor]:
    return {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in p.items()}


def instance_normalize(x: np.ndarray) -> np.ndarray:
    """Z-score each series; constant series map to zeros."""
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    sd = x.std(axis=-1, keepdims=True)
    return np.where(sd > 0, (x - mu) / np.where(sd > 0, sd, 1.0), 0.0)


def patch_statistics(x, n_patches: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-patch mean and population std over non-overlapping windows."""
    x = np.asarray(x, dtype=np.float64)
    t = x.shape[-1]
    if n_patches < 1 or t % n_patches:
        raise ConfigurationError(f"{n_patches} patches do not divide series length {t}")
    windows = x.reshape(x.shape[:-1] + (n_patches, t // n_patches))
    return windows.mean(axis=-1), windows.std(axis=-1)


def first_difference(x: np.ndarray) -> np.ndarray:
    """x_t - x_{t-1}, with a leading zero so the length is unchanged."""
    d = np.zeros_like(x)
    d[..., 1:] = x[..., 1:] - x[..., :-1]
    return d


def local_features(x: np.ndarray, p: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    """Conv stack with GELU, mean-pooled per patch: (..., T) -> (..., P, d_l)."""
    h = Tensor(x[..., None])
    for i in range(cfg.conv_layers):
        h = T.gelu(T.conv1d_same(h, p[f"conv{i}.w"], p[f"conv{i}.b"]))
    *lead, t, c = h.shape
    h = T.reshape(h, (*lead, cfg.n_patches, t // cfg.n_patches, c))
    return T.mean(h, axis=-2)


def token_generate(x, params, cfg: ModelConfig) -> Tensor:
    """Patch tokens U of shape (..., P, q) fusing diff view, raw view and stats."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != cfg.series_length:
        raise ShapeError(f"series length {x.shape[-1]} != configured {cfg.series_length}")
    p = _params(params)
    means, stds = patch_statistics(x, cfg.n_patches)
    stats = Tensor(np.stack([means, stds], axis=-1))
    s = T.linear(stats, p["stat.w"], p["stat.b"])
    v_raw = local_features(x, p, cfg)
    v_diff = local_features(first_difference(x), p, cfg)
    fused = T.concat([v_diff, v_raw, s], axis=-1)
    return T.linear(fused, p["tok.w"], p["tok.b"])


def vit_encode(U: Tensor, params, cfg: ModelConfig, rng=None) -> Tensor:
    """Prepend the cls token, add positions, run the ViT, return position 0."""
    U = T.as_tensor(U)
    p = _params(params)
    q = cfg.embed_dim
    if U.shape[-1] != q or U.shape[-2] != cfg.n_patches:
        raise ShapeError(f"patch tokens {U.shape} incompatible with P={cfg.n_patches}, q={q}")
    lead = U.shape[:-2]
    cls = p["cls"]
    if lead:
        cls = T.add(T.Tensor(np.zeros(lead + (1, q)), _copy=False), cls)
    else:
        cls = T.reshape(cls, (1, q))
    h = T.add(T.concat([cls, U], axis=-2), p["pos"])
    rate = cfg.encoder_dropout if rng is not None else 0.0
    h = T.dropout(h, rate, rng)
    for i in range(cfg.vit_layers):
        h = layers.self_block(h, p, f"vit.{i}", cfg.vit_heads, cfg.ln_eps, rate=rate, rng=rng)
    return h[..., 0, :]


def encode(x, params, cfg: ModelConfig, rng=None) -> Tensor:
    """Embed one series (T,) or a batch (B, T) into (q,) or (B, q).

    ``rng`` enables dropout and is only passed during training.
    """
    x = np.asarray(x, dtype=np.float64)
    if cfg.instance_norm:
        x = instance_normalize(x)
    p = _params(params)
    return vit_encode(token_generate(x, p, cfg), p, cfg, rng)


def embed(X, params, cfg: ModelConfig, batch_size: int = 256) -> np.ndarray:
    """Inference-time embeddings for many series, computed in chunks."""
    X = np.asarray(X, dtype=np.float64)
    p = _params(params)
    out = [encode(X[i : i + batch_size], p, cfg).data for i in range(0, len(X), batch_size)]
    return np.concatenate(out, axis=0) if out else np.zeros((0, cfg.embed_dim))

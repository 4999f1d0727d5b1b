"""Projection adapter mapping encoder embeddings into the classifier token space."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import ModelConfig, init_array
from .errors import ShapeError
from .tensor import Tensor


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    q, h, d = cfg.embed_dim, cfg.adapter_hidden, cfg.model_dim
    return {"ln.g": (q,), "ln.b": (q,), "w1": (q, h), "b1": (h,), "w2": (h, d), "b2": (d,)}


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    return {name: init_array(name, shape, rng) for name, shape in param_shapes(cfg).items()}


def project(z, params, cfg: ModelConfig, rng=None) -> Tensor:
    """W2 gelu(W1 LN(z) + b1) + b2, row-wise over (..., q)."""
    z = T.as_tensor(z)
    p = {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in params.items()}
    if z.shape[-1] != cfg.embed_dim:
        raise ShapeError(f"adapter expects width {cfg.embed_dim}, got {z.shape}")
    single = z.ndim == 1
    if single:
        z = T.reshape(z, (1, cfg.embed_dim))
    h = T.layer_norm(z, p["ln.g"], p["ln.b"], cfg.ln_eps)
    h = T.gelu(T.linear(h, p["w1"], p["b1"]))
    if rng is not None:
        h = T.dropout(h, cfg.adapter_dropout, rng)
    out = T.linear(h, p["w2"], p["b2"])
    return T.reshape(out, (cfg.model_dim,)) if single else out

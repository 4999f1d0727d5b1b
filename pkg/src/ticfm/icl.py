"""In-context classifier over projected context and query tokens.

Pipeline: latent write/read consolidation, additive label embedding on the
context slice only, a split-masked pre-norm transformer, final norm and a
token-wise decoder producing ``c_max`` logits per token.

Instance tokens carry no positional encoding, so query outputs do not depend
on the order of the context set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers
from . import tensor as T
from .config import ModelConfig, init_array
from .errors import ContractError, DegenerateTaskError, ShapeError
from .tensor import MASK_VALUE, Tensor


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    d = cfg.model_dim
    hidden = d * cfg.icl_ffn_ratio
    shapes = {"latents": (cfg.n_latents, d), "label.w": (cfg.c_max, d)}
    for i in range(cfg.write_layers):
        shapes.update(layers.prefixed(layers.block_shapes(d, hidden, cross=True), f"write.{i}"))
    for i in range(cfg.read_layers):
        shapes.update(layers.prefixed(layers.block_shapes(d, hidden, cross=True), f"read.{i}"))
    for i in range(cfg.icl_blocks):
        shapes.update(layers.prefixed(layers.block_shapes(d, hidden), f"blk.{i}"))
    shapes.update({
        "ln_f.g": (d,), "ln_f.b": (d,),
        "dec.w1": (d, cfg.decoder_hidden), "dec.b1": (cfg.decoder_hidden,),
        "dec.w2": (cfg.decoder_hidden, cfg.c_max), "dec.b2": (cfg.c_max,),
    })
    return shapes


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    params = {name: init_array(name, shape, rng) for name, shape in param_shapes(cfg).items()}
    # Identity query/key maps make the blocks start out attending to similar
    # context tokens; random projections sit on a long loss plateau instead.
    for i in range(cfg.icl_blocks):
        for w in ("wq", "wk"):
            params[f"blk.{i}.attn.{w}"] = np.eye(cfg.model_dim)
    return params


def _params(p) -> dict[str, Tensor]:
    return {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in p.items()}


@dataclass
class PromptBatch:
    """Projected context/query tokens plus re-indexed context labels.

    Arrays may carry a leading batch axis; all prompts in a batch share
    ``n_tr`` and ``n_te``.
    """

    H_tr: object
    H_te: object
    y_tr: np.ndarray
    c_max: int = 10

    def __post_init__(self):
        self.y_tr = np.asarray(self.y_tr, dtype=np.int64)
        n_tr, n_te = T.as_tensor(self.H_tr).shape[-2], T.as_tensor(self.H_te).shape[-2]
        if n_tr < 1 or n_te < 1:
            raise ContractError("prompt needs at least one context and one query token")
        if self.y_tr.shape[-1] != n_tr:
            raise ContractError(f"{self.y_tr.shape[-1]} labels for {n_tr} context tokens")
        if self.y_tr.size and (self.y_tr.min() < 0 or self.y_tr.max() >= self.c_max):
            raise ContractError(f"labels must lie in [0, {self.c_max})")

    @property
    def n_tr(self) -> int:
        return self.y_tr.shape[-1]

    @property
    def active(self) -> list[int]:
        return sorted(set(self.y_tr.ravel().tolist()))


def split_mask(n_tr: int, n: int) -> np.ndarray:
    """Allowed-attention matrix: every row may attend only to context columns."""
    if not 1 <= n_tr < n:
        raise ContractError(f"need 1 <= n_tr < n, got n_tr={n_tr}, n={n}")
    mask = np.zeros((n, n), dtype=bool)
    mask[:, :n_tr] = True
    return mask


def split_bias(n_tr: int, n: int) -> np.ndarray:
    return np.where(split_mask(n_tr, n), 0.0, MASK_VALUE)


def write_latents(H_ctx: Tensor, params, cfg: ModelConfig) -> Tensor:
    """Latent queries attend to the context tokens only."""
    p = _params(params)
    L = p["latents"]
    lead = H_ctx.shape[:-2]
    if lead:
        L = T.add(Tensor(np.zeros(lead + L.shape), _copy=False), L)
    for i in range(cfg.write_layers):
        L = layers.cross_block(L, H_ctx, p, f"write.{i}", 1, cfg.ln_eps)
    return L


def consolidate_context(H, n_tr: int, params, cfg: ModelConfig, return_latents: bool = False):
    """Write context into the latents, then read them back into every token."""
    H = T.as_tensor(H)
    n = H.shape[-2]
    if not 1 <= n_tr < n:
        raise ContractError(f"need 1 <= n_tr < N, got n_tr={n_tr}, N={n}")
    p = _params(params)
    L = write_latents(H[..., :n_tr, :], p, cfg)
    for i in range(cfg.read_layers):
        H = layers.cross_block(H, L, p, f"read.{i}", 1, cfg.ln_eps)
    return (H, L) if return_latents else H


def inject_labels(H, y_tr, n_tr: int, params, cfg: ModelConfig) -> Tensor:
    """Add the label embedding to rows [0, n_tr); later rows are copied untouched."""
    H = T.as_tensor(H)
    y_tr = np.asarray(y_tr, dtype=np.int64)
    if y_tr.shape[-1] != n_tr:
        raise ContractError(f"{y_tr.shape[-1]} labels for n_tr={n_tr}")
    if y_tr.size and (y_tr.min() < 0 or y_tr.max() >= cfg.c_max):
        raise ContractError(f"label outside [0, {cfg.c_max})")
    p = _params(params)
    onehot = np.eye(cfg.c_max)[y_tr]
    ctx = T.add(H[..., :n_tr, :], T.matmul(Tensor(onehot, _copy=False), p["label.w"]))
    return T.concat([ctx, H[..., n_tr:, :]], axis=-2)


def icl_forward(prompt: PromptBatch, params, cfg: ModelConfig, rng=None) -> Tensor:
    """Per-token logits of shape (..., N, c_max)."""
    p = _params(params)
    H_tr, H_te = T.as_tensor(prompt.H_tr), T.as_tensor(prompt.H_te)
    if H_tr.shape[-1] != cfg.model_dim or H_te.shape[-1] != cfg.model_dim:
        raise ShapeError(f"token width must be {cfg.model_dim}")
    n_tr = prompt.n_tr
    H = T.concat([H_tr, H_te], axis=-2)
    n = H.shape[-2]
    H = consolidate_context(H, n_tr, p, cfg)
    H = inject_labels(H, prompt.y_tr, n_tr, p, cfg)
    bias = split_bias(n_tr, n)
    for i in range(cfg.icl_blocks):
        H = layers.self_block(H, p, f"blk.{i}", cfg.icl_heads, cfg.ln_eps, bias=bias,
                              rate=0.0, rng=rng)
    H = layers.layer_norm(H, p, "ln_f", cfg.ln_eps)
    return layers.ffn(H, p, "dec")


def query_logits(logits, n_tr: int, active) -> np.ndarray:
    """Query rows restricted to the active class columns (ascending order)."""
    lg = T.as_tensor(logits).data
    cols = sorted(active)
    return lg[..., n_tr:, :][..., cols]


def predict_proba(logits, n_tr: int, active, temperature: float = 1.0) -> np.ndarray:
    """Temperature softmax over the active classes for every query token."""
    active = sorted(set(int(a) for a in active))
    if not active:
        raise ContractError("active class set is empty")
    if len(active) < 2:
        raise DegenerateTaskError("a single active class leaves nothing to predict")
    return T.softmax(query_logits(logits, n_tr, active), temperature).data

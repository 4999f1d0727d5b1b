"""Transformer building blocks shared by the encoder and the in-context classifier.

Parameters are looked up in flat ``dict[str, Tensor]`` maps by dotted name.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor

Params = dict  # name -> Tensor


def wrap(arrays: dict[str, np.ndarray], tape: T.GradTape | None = None, prefix: str = "") -> Params:
    """Tensor views of raw arrays; watched on ``tape`` when one is given."""
    if tape is None:
        return {k: Tensor(v) for k, v in arrays.items()}
    return {k: tape.watch(v, prefix + k) for k, v in arrays.items()}


def attention_shapes(d: int, d_kv: int | None = None) -> dict[str, tuple]:
    d_kv = d if d_kv is None else d_kv
    return {"wq": (d, d), "wk": (d_kv, d), "wv": (d_kv, d), "wo": (d, d)}


def norm_shapes(d: int) -> dict[str, tuple]:
    return {"g": (d,), "b": (d,)}


def ffn_shapes(d: int, hidden: int) -> dict[str, tuple]:
    return {"w1": (d, hidden), "b1": (hidden,), "w2": (hidden, d), "b2": (d,)}


def block_shapes(d: int, hidden: int, cross: bool = False) -> dict[str, tuple]:
    shapes = {}
    groups = [("ln1", norm_shapes(d)), ("attn", attention_shapes(d)),
              ("ln2", norm_shapes(d)), ("ffn", ffn_shapes(d, hidden))]
    if cross:
        groups.append(("lnkv", norm_shapes(d)))
    for name, sub in groups:
        shapes.update({f"{name}.{k}": v for k, v in sub.items()})
    return shapes


def prefixed(shapes: dict[str, tuple], prefix: str) -> dict[str, tuple]:
    return {f"{prefix}.{k}": v for k, v in shapes.items()}


def layer_norm(x: Tensor, p: Params, name: str, eps: float) -> Tensor:
    return T.layer_norm(x, p[name + ".g"], p[name + ".b"], eps)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, d = x.shape
    x = T.reshape(x, (*lead, n, heads, d // heads))
    return T.swapaxes(x, -2, -3)


def _merge_heads(x: Tensor) -> Tensor:
    x = T.swapaxes(x, -2, -3)
    *lead, n, h, dh = x.shape
    return T.reshape(x, (*lead, n, h * dh))


def attention(xq: Tensor, xkv: Tensor, p: Params, name: str, heads: int,
              bias: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention.

    ``bias`` is an additive (n_q, n_kv) array, 0 where allowed and
    ``MASK_VALUE`` where disallowed.
    """
    q = T.matmul(xq, p[name + ".wq"])
    k = T.matmul(xkv, p[name + ".wk"])
    v = T.matmul(xkv, p[name + ".wv"])
    d = q.shape[-1]
    scale = 1.0 / np.sqrt(d // heads)
    if heads > 1:
        q, k, v = _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)
    scores = T.mul(T.matmul(q, T.swapaxes(k, -1, -2)), scale)
    if bias is not None:
        scores = T.add(scores, Tensor(bias, _copy=False))
    out = T.matmul(T.softmax(scores), v)
    if heads > 1:
        out = _merge_heads(out)
    return T.matmul(out, p[name + ".wo"])


def ffn(x: Tensor, p: Params, name: str, rate: float = 0.0, rng=None) -> Tensor:
    h = T.gelu(T.linear(x, p[name + ".w1"], p[name + ".b1"]))
    h = T.dropout(h, rate, rng)
    return T.linear(h, p[name + ".w2"], p[name + ".b2"])


def self_block(x: Tensor, p: Params, name: str, heads: int, eps: float,
               bias: np.ndarray | None = None, rate: float = 0.0, rng=None) -> Tensor:
    """Pre-norm self-attention block with residual connections."""
    h = layer_norm(x, p, name + ".ln1", eps)
    x = T.add(x, T.dropout(attention(h, h, p, name + ".attn", heads, bias), rate, rng))
    h = layer_norm(x, p, name + ".ln2", eps)
    return T.add(x, T.dropout(ffn(h, p, name + ".ffn", rate, rng), rate, rng))


def cross_block(x: Tensor, ctx: Tensor, p: Params, name: str, heads: int, eps: float) -> Tensor:
    """Pre-norm cross-attention block: ``x`` attends to ``ctx``."""
    h = layer_norm(x, p, name + ".ln1", eps)
    c = layer_norm(ctx, p, name + ".lnkv", eps)
    x = T.add(x, attention(h, c, p, name + ".attn", heads))
    h = layer_norm(x, p, name + ".ln2", eps)
    return T.add(x, ffn(h, p, name + ".ffn"))

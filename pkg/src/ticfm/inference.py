"""Cyclic label-permutation ensembling and the hierarchical class tree."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import icl
from . import tensor as T
from .config import ModelConfig
from .errors import ContractError, DegenerateTaskError, TreeIntegrityError


@dataclass(frozen=True)
class EnsembleConfig:
    n_members: int = 8
    seed: int = 0
    temperature: float = 1.0

    def __post_init__(self):
        if self.n_members < 1:
            raise ContractError("ensemble needs at least one member")
        if self.temperature <= 0:
            raise ContractError("temperature must be positive")


def cyclic_permute_labels(y, offset: int, K: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    if K < 1 or not 0 <= offset < K:
        raise ContractError(f"offset {offset} outside [0, {K})")
    if y.size and (y.min() < 0 or y.max() >= K):
        raise ContractError(f"labels must lie in [0, {K})")
    return (y + offset) % K


def inverse_shift_columns(logits: np.ndarray, offset: int) -> np.ndarray:
    """Undo a label shift on the class axis: out[:, c] = logits[:, (c + offset) % K]."""
    return np.roll(logits, -offset, axis=-1)


def ensemble_offsets(K: int, n_members: int, seed: int) -> list[int]:
    """Shuffle of {0..K-1}, cycled when more members than classes are requested."""
    order = np.random.default_rng(seed).permutation(K)
    return [int(order[m % K]) for m in range(n_members)]


def ensemble_predict(H_tr, y_tr, H_te, params, cfg: ModelConfig,
                     ens: EnsembleConfig = EnsembleConfig(), offsets=None) -> np.ndarray:
    """Probabilities (N_te, K) from logit-averaged cyclically relabelled members.

    ``H_tr``/``H_te`` are adapter outputs; ``y_tr`` must already be re-indexed
    to {0..K-1}.
    """
    y_tr = np.asarray(y_tr, dtype=np.int64)
    K = int(y_tr.max()) + 1 if y_tr.size else 0
    if len(np.unique(y_tr)) < 2:
        raise DegenerateTaskError("context holds a single class")
    if sorted(np.unique(y_tr).tolist()) != list(range(K)):
        raise ContractError("context labels must be re-indexed to 0..K-1")
    if K > cfg.c_max:
        raise ContractError(f"{K} classes exceed c_max={cfg.c_max}; use the class tree")
    if offsets is None:
        offsets = ensemble_offsets(K, ens.n_members, ens.seed)
    n_tr = len(y_tr)
    p = icl._params(params)
    total = None
    for o in offsets:
        prompt = icl.PromptBatch(H_tr, H_te, cyclic_permute_labels(y_tr, o, K), cfg.c_max)
        lg = icl.query_logits(icl.icl_forward(prompt, p, cfg), n_tr, range(K))
        lg = inverse_shift_columns(lg, o)
        total = lg if total is None else total + lg
    mean = total / len(offsets)
    return T.softmax(mean, ens.temperature).data


# class tree --------------------------------------------------------------


@dataclass
class ClassTree:
    """Node of the balanced class-partition tree.

    ``classes`` are the original class indices handled here. A leaf keeps
    its context indices; an internal node keeps the group of each class and
    one child per group.
    """

    classes: list[int]
    context: np.ndarray
    groups: list[list[int]] = field(default_factory=list)
    children: list["ClassTree"] = field(default_factory=list)

    @property
    def is_leaf(self) -> bool:
        return not self.children

    def group_of(self) -> dict[int, int]:
        return {c: g for g, members in enumerate(self.groups) for c in members}

    def leaves(self):
        if self.is_leaf:
            yield self
        else:
            for child in self.children:
                yield from child.leaves()

    def depth(self) -> int:
        return 1 if self.is_leaf else 1 + max(c.depth() for c in self.children)


def fit_class_tree(y_ctx, c_max: int, seed: int = 0,
                   context: np.ndarray | None = None) -> ClassTree:
    """Recursively partition the context classes into at most ``c_max``-way nodes."""
    if c_max < 2:
        raise ContractError("c_max must be at least 2")
    y_ctx = np.asarray(y_ctx, dtype=np.int64)
    if y_ctx.size == 0:
        raise ContractError("context is empty")
    idx = np.arange(len(y_ctx)) if context is None else np.asarray(context)
    rng = np.random.default_rng(seed)
    return _fit_node(y_ctx, idx, c_max, rng)


def _fit_node(y, idx, c_max, rng) -> ClassTree:
    classes = sorted(np.unique(y[idx]).tolist())
    if len(classes) <= c_max:
        return ClassTree(classes, idx)
    G = math.ceil(len(classes) / c_max)
    shuffled = rng.permutation(classes).tolist()
    groups = [sorted(shuffled[g::G]) for g in range(G)]
    node = ClassTree(classes, idx, groups=groups)
    for members in groups:
        sub = idx[np.isin(y[idx], members)]
        node.children.append(_fit_node(y, sub, c_max, rng))
    return node


# (context indices, local labels in 0..k-1, k) -> (n_query, k) probabilities
PredictFn = Callable[[np.ndarray, np.ndarray, int], np.ndarray]


def hierarchical_predict(tree: ClassTree, y_ctx, predict_fn: PredictFn,
                         n_classes: int | None = None) -> np.ndarray:
    """Probabilities over every class, combined down the tree by total probability."""
    y_ctx = np.asarray(y_ctx, dtype=np.int64)
    K = n_classes if n_classes is not None else len(tree.classes)
    out = _predict_node(tree, y_ctx, predict_fn)
    full_classes = tree.classes
    if max(full_classes) >= K:
        raise TreeIntegrityError("tree references a class beyond n_classes")
    result = np.zeros((out.shape[0], K))
    result[:, full_classes] = out
    covered = sorted(c for leaf in tree.leaves() for c in leaf.classes)
    if covered != sorted(full_classes) or len(covered) != K:
        raise TreeIntegrityError("some class is missing from the tree leaves")
    return result


def _predict_node(node: ClassTree, y_ctx, predict_fn, n_query: int | None = None) -> np.ndarray:
    """(n_query, len(node.classes)) probabilities ordered like ``node.classes``."""
    if node.is_leaf:
        if len(node.classes) == 1:
            if n_query is None:
                raise DegenerateTaskError("context holds a single class")
            return np.ones((n_query, 1))
        local = np.searchsorted(node.classes, y_ctx[node.context])
        return predict_fn(node.context, local, len(node.classes))
    lookup = node.group_of()
    meta = np.array([lookup[int(c)] for c in y_ctx[node.context]])
    p_group = predict_fn(node.context, meta, len(node.groups))
    position = {c: i for i, c in enumerate(node.classes)}
    out = np.zeros((p_group.shape[0], len(node.classes)))
    for j, child in enumerate(node.children):
        p_child = _predict_node(child, y_ctx, predict_fn, p_group.shape[0])
        cols = [position[c] for c in child.classes]
        out[:, cols] = p_child * p_group[:, j : j + 1]
    return out


class ModelPredictor:
    """Adapter-space predictor used by the tree: runs the cyclic ensemble.

    A router with more groups than ``c_max`` (possible once K > c_max**2)
    is itself answered through a nested class tree over the group labels.
    """

    def __init__(self, H_ctx, H_query, params, cfg: ModelConfig, ens: EnsembleConfig):
        self.H_ctx = np.asarray(H_ctx)
        self.H_query = np.asarray(H_query)
        self.params = icl._params(params)
        self.cfg = cfg
        self.ens = ens

    def __call__(self, context, labels, k):
        if k > self.cfg.c_max:
            sub = fit_class_tree(labels, self.cfg.c_max, seed=self.ens.seed)
            return hierarchical_predict(sub, labels, lambda c, l, kk: self(context[c], l, kk), k)
        return ensemble_predict(self.H_ctx[context], labels, self.H_query, self.params,
                                self.cfg, self.ens)

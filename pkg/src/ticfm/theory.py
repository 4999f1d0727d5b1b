"""Numeric checks of the constructions behind the in-context classifier.

Everything here is plain float64 numpy with deterministic reductions so that
exact-equality checks at 1e-10 are meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ContractError, ParameterError
from .evaluation import nearest_centroid_scores


# linear attention emulating gradient descent -------------------------------


@dataclass(frozen=True)
class GDProblem:
    """Least-squares regression ``y ~ W z`` trained by T steps of GD from W = 0."""

    Z_tr: np.ndarray
    y_tr: np.ndarray
    Z_te: np.ndarray
    eta: float
    steps: int

    def __post_init__(self):
        Z_tr = np.atleast_2d(np.asarray(self.Z_tr, dtype=np.float64))
        Z_te = np.atleast_2d(np.asarray(self.Z_te, dtype=np.float64))
        y_tr = np.asarray(self.y_tr, dtype=np.float64).reshape(-1)
        if len(Z_tr) == 0 or len(Z_tr) != len(y_tr):
            raise ContractError(f"need matching non-empty Z_tr {Z_tr.shape} and y_tr {y_tr.shape}")
        if Z_te.shape[1] != Z_tr.shape[1]:
            raise ContractError(f"feature width mismatch: {Z_tr.shape} vs {Z_te.shape}")
        if self.eta < 0 or self.steps < 0:
            raise ParameterError("eta and steps must be non-negative")
        object.__setattr__(self, "Z_tr", Z_tr)
        object.__setattr__(self, "Z_te", Z_te)
        object.__setattr__(self, "y_tr", y_tr)

    @property
    def n_tr(self) -> int:
        return len(self.y_tr)


@dataclass
class GDResult:
    weights: np.ndarray        # W^(T), shape (q,)
    predictions: np.ndarray    # W^(T) Z_te^T
    residuals: np.ndarray      # (T + 1, n_tr), e^(t) = W^(t) z_i - y_i


def gd_predictions(p: GDProblem) -> GDResult:
    """Run gradient descent on (1 / 2n) sum (W z_i - y_i)^2 explicitly in weight space."""
    W = np.zeros(p.Z_tr.shape[1])
    residuals = [p.Z_tr @ W - p.y_tr]
    for _ in range(p.steps):
        W = W - (p.eta / p.n_tr) * (residuals[-1] @ p.Z_tr)
        residuals.append(p.Z_tr @ W - p.y_tr)
    return GDResult(W, p.Z_te @ W, np.stack(residuals))


@dataclass(frozen=True)
class LinearAttnStack:
    """T copies of one linear-attention block acting on tokens ``[z, slot]``.

    Context tokens start with slot ``y_i`` and queries with slot 0. The slot
    always holds ``-e^(t)`` (the negated residual) for context tokens and
    ``-y_hat^(t)`` for queries, so both kinds obey the same update and the
    residuals needed by the next block are already in place. Keys and values
    come from context tokens only.
    """

    W_q: np.ndarray
    W_k: np.ndarray
    W_v: np.ndarray
    n_blocks: int

    def block(self, X: np.ndarray, n_ctx: int) -> np.ndarray:
        ctx = X[:n_ctx]
        return X + (X @ self.W_q) @ (ctx @ self.W_k).T @ (ctx @ self.W_v)

    def apply(self, Z_tr, y_tr, Z_te) -> tuple[np.ndarray, np.ndarray]:
        """Query predictions and the per-depth context slots, shape (T + 1, n_tr)."""
        Z_tr, Z_te = np.atleast_2d(Z_tr), np.atleast_2d(Z_te)
        n = len(Z_tr)
        X = np.concatenate([
            np.column_stack([Z_tr, np.asarray(y_tr, dtype=np.float64)]),
            np.column_stack([Z_te, np.zeros(len(Z_te))]),
        ])
        slots = [X[:n, -1].copy()]
        for _ in range(self.n_blocks):
            X = self.block(X, n)
            slots.append(X[:n, -1].copy())
        return -X[n:, -1], np.stack(slots)


def build_gd_attention(eta: float, n_tr: int, q: int, n_blocks: int = 1) -> LinearAttnStack:
    """Block weights such that each block performs one GD step in prediction space.

    Query and key read the z coordinates (inner products <z_i, z>), the value
    reads the slot and the output is scaled by -eta / n_tr. None of the weights
    depend on the depth.
    """
    if n_tr < 1 or q < 1 or eta < 0 or n_blocks < 0:
        raise ParameterError("need n_tr >= 1, q >= 1, eta >= 0, n_blocks >= 0")
    proj = np.zeros((q + 1, q + 1))
    proj[:q, :q] = np.eye(q)
    W_v = np.zeros((q + 1, q + 1))
    W_v[q, q] = -eta / n_tr
    return LinearAttnStack(proj, proj.copy(), W_v, n_blocks)


# pooling and broadcast -----------------------------------------------------


def masked_sum_pool(tokens, valid, phi: Callable | None = None) -> np.ndarray:
    """Sum of ``phi(u_i)`` over valid tokens via a uniform attention read-out.

    A summary token with a constant query gives equal scores to every token;
    masking leaves uniform weights over the valid ones, and rescaling by the
    valid count turns the average into the sum.
    """
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.float64))
    valid = np.asarray(valid, dtype=bool).reshape(-1)
    if valid.shape[0] != tokens.shape[0]:
        raise ContractError(f"mask length {valid.shape[0]} != token count {tokens.shape[0]}")
    count = int(valid.sum())
    if count == 0:
        raise ContractError("no valid tokens to pool")
    values = tokens if phi is None else np.stack([np.asarray(phi(u), dtype=np.float64) for u in tokens])
    scores = np.where(valid, 0.0, -np.inf)
    weights = np.exp(scores - scores.max())
    weights /= weights.sum()
    return count * (weights @ values)


def broadcast_apply(summary, queries, rho: Callable) -> np.ndarray:
    """Every query reads the same summary; ``rho(summary, v_j)`` is applied per token."""
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    summary = np.asarray(summary, dtype=np.float64)
    return np.stack([np.atleast_1d(rho(summary, v)) for v in queries])


def centroid_tokens(Z, y, n_classes: int) -> np.ndarray:
    """Per-token features ``[onehot(y) outer z, onehot(y)]`` whose sum holds class sums and counts."""
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    onehot = np.eye(n_classes)[np.asarray(y)]
    return np.concatenate([(onehot[:, :, None] * Z[:, None, :]).reshape(len(Z), -1), onehot], axis=1)


def centroid_head(n_classes: int, dim: int) -> Callable:
    """rho(summary, v): negative squared distance from v to each class centroid."""

    def rho(summary, v):
        sums = summary[: n_classes * dim].reshape(n_classes, dim)
        counts = summary[n_classes * dim :]
        return -(((v[None, :] - sums / counts[:, None]) ** 2).sum(axis=1))

    return rho


def deepsets_nearest_centroid(Z_ctx, y_ctx, Z_q) -> np.ndarray:
    """Nearest-centroid scores computed as pool-then-broadcast; y_ctx in 0..K-1."""
    y_ctx = np.asarray(y_ctx)
    K, dim = int(y_ctx.max()) + 1, np.atleast_2d(Z_ctx).shape[1]
    summary = masked_sum_pool(centroid_tokens(Z_ctx, y_ctx, K), np.ones(len(y_ctx), bool))
    return broadcast_apply(summary, Z_q, centroid_head(K, dim))


# label matching under a margin ---------------------------------------------


def score_margin(scores) -> np.ndarray:
    """Gap between the largest and second largest score of each row."""
    s = np.sort(np.atleast_2d(scores), axis=1)
    return s[:, -1] - s[:, -2]


def margin_label_check(scores_head, scores_icl, gamma: float) -> np.ndarray:
    """Per-query flag: do the two score vectors pick the same label?

    The guarantee being checked: rows where the head's margin is at least
    ``gamma`` and the largest score deviation is below ``gamma / 2`` must
    agree. Rows outside that premise are reported as they are.
    """
    a, b = np.atleast_2d(scores_head), np.atleast_2d(scores_icl)
    if a.shape != b.shape:
        raise ContractError(f"score shapes differ: {a.shape} vs {b.shape}")
    return np.argmax(a, axis=1) == np.argmax(b, axis=1)


def margin_premise(scores_head, scores_icl, gamma: float) -> np.ndarray:
    a, b = np.atleast_2d(scores_head), np.atleast_2d(scores_icl)
    eps = np.abs(a - b).max(axis=1)
    return (score_margin(a) >= gamma) & (eps < gamma / 2)


def margin_counterexample(gamma: float, delta: float) -> tuple[np.ndarray, np.ndarray]:
    """Two-class scores with margin gamma and deviation gamma/2 + delta that flip the label."""
    eps = gamma / 2 + delta
    head = np.array([[gamma, 0.0]])
    return head, head + np.array([[-eps, eps]])


# report ---------------------------------------------------------------------


def _random_gd_problem(rng, n_tr, q, n_te, steps, eta):
    # rows on a sphere shell keep eta * lambda_max <= 1, so GD stays bounded
    Z = rng.normal(size=(n_tr + n_te, q))
    Z *= (rng.uniform(0.5, 1.0, size=len(Z)) / np.linalg.norm(Z, axis=1))[:, None]
    return GDProblem(Z[:n_tr], rng.normal(size=n_tr), Z[n_tr:], eta, steps)


def gd_emulation_error(p: GDProblem) -> float:
    """Max absolute gap between the attention stack and the GD oracle (predictions and slots)."""
    oracle = gd_predictions(p)
    stack = build_gd_attention(p.eta, p.n_tr, p.Z_tr.shape[1], p.steps)
    pred, slots = stack.apply(p.Z_tr, p.y_tr, p.Z_te)
    return float(max(np.abs(pred - oracle.predictions).max(), np.abs(-slots - oracle.residuals).max()))


def run_theory_checks(seed: int = 0, trials: int = 200) -> list[tuple[str, bool, str]]:
    """Run every suite; returns (suite, passed, detail) rows."""
    rng = np.random.default_rng(seed)
    rows = []

    worst = 0.0
    for _ in range(trials):
        p = _random_gd_problem(rng, int(rng.integers(1, 33)), int(rng.integers(1, 9)),
                               int(rng.integers(1, 9)), int(rng.integers(0, 9)), rng.uniform(1e-3, 1.0))
        worst = max(worst, gd_emulation_error(p))
    rows.append(("gd_emulation", worst <= 1e-10, f"max_abs_err={worst:.3e}"))

    worst = 0.0
    for _ in range(trials):
        n, s = int(rng.integers(1, 40)), int(rng.integers(1, 8))
        U = rng.normal(size=(n, s))
        mask = rng.random(n) < 0.5
        mask[rng.integers(n)] = True
        worst = max(worst, float(np.abs(masked_sum_pool(U, mask) - U[mask].sum(axis=0)).max()))
    rows.append(("masked_sum_pool", worst <= 1e-12, f"max_abs_err={worst:.3e}"))

    agree, worst = 0, 0.0
    for _ in range(trials):
        Z = rng.normal(size=(int(rng.integers(6, 30)), int(rng.integers(1, 6))))
        y = np.concatenate([np.arange(3), rng.integers(0, 3, size=len(Z) - 3)])
        Zq = rng.normal(size=(5, Z.shape[1]))
        ds = deepsets_nearest_centroid(Z, y, Zq)
        _, nc = nearest_centroid_scores(Z, y, Zq)
        worst = max(worst, float(np.abs(ds - nc).max()))
        agree += int((ds.argmax(1) == nc.argmax(1)).all())
    rows.append(("deepsets_nearest_centroid", agree == trials and worst <= 1e-10,
                 f"argmax_agree={agree}/{trials} max_abs_err={worst:.3e}"))

    violations = 0
    for _ in range(trials * 10):
        K, gamma = int(rng.integers(2, 6)), rng.uniform(0.1, 2.0)
        head = rng.normal(size=(1, K))
        top = head.argmax()
        head[0, top] = np.delete(head[0], top).max() + gamma * rng.uniform(1.0, 2.0)
        icl = head + rng.uniform(-1, 1, size=head.shape) * gamma / 2 * rng.uniform(0, 0.999)
        ok = margin_label_check(head, icl, gamma)
        violations += int((margin_premise(head, icl, gamma) & ~ok).sum())
    head, icl = margin_counterexample(1.0, 0.01)
    flipped = not margin_label_check(head, icl, 1.0)[0]
    rows.append(("margin_label", violations == 0 and flipped,
                 f"violations={violations} counterexample_flips={flipped}"))
    return rows


def format_report(rows) -> str:
    return "\n".join(f"{name}\t{detail}\t{'PASS' if ok else 'FAIL'}" for name, ok, detail in rows)

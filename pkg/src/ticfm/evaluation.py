"""Dataset ingestion, protocol splitting, train-free baselines and protocol drivers."""

from __future__ import annotations

import io
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, clone
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .errors import ContractError, DatasetError, InvalidRunError, ParseError, ProtocolError
from .preprocessing import fill_missing, resample_linear

PROTOCOLS = ("official-split", "fraction-sweep", "context-window-sweep")
DEFAULT_FRACTIONS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6)
DEFAULT_MULTIPLIERS = (1, 5, 10, 15, 20)


@dataclass
class LabeledDataset:
    name: str
    X_train: np.ndarray
    y_train: np.ndarray
    X_test: np.ndarray | None = None
    y_test: np.ndarray | None = None

    @property
    def classes(self) -> np.ndarray:
        ys = [self.y_train] + ([self.y_test] if self.y_test is not None else [])
        return np.unique(np.concatenate(ys))


# ingestion ---------------------------------------------------------------


def read_ucr_tsv(path) -> tuple[np.ndarray, list[np.ndarray]]:
    """Rows ``label<TAB>v1<TAB>...``; ``NaN`` tokens are allowed as values.

    Rows must all have the same number of fields.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    labels, series, width = [], [], None
    for lineno, line in enumerate(io.StringIO(text), start=1):
        line = line.rstrip("\r\n")
        if not line.strip():
            continue
        fields = line.split("\t")
        if width is None:
            width = len(fields)
        elif len(fields) != width:
            raise ParseError(f"{path}:{lineno}: expected {width} fields, found {len(fields)}")
        if len(fields) < 2:
            raise ParseError(f"{path}:{lineno}: row has no values")
        try:
            labels.append(int(float(fields[0])))
            series.append(np.array([float(v) for v in fields[1:]]))
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from exc
    if not labels:
        raise ParseError(f"{path}: no data rows")
    return np.array(labels), series


def load_dataset(path, length: int | None = None, test_path=None, name: str | None = None,
                 min_classes: int = 2) -> LabeledDataset:
    """Read one split file (and optionally its test split), resampling to ``length``.

    Labels keep their integer values here; re-indexing to 0..K-1 happens
    per run against the context labels.
    """
    y, series = read_ucr_tsv(path)

    def fix(ss):
        ss = [fill_missing(s) for s in ss]
        if length is None:
            return np.stack(ss)
        return np.stack([resample_linear(s, length) for s in ss])

    X = fix(series)
    X_te = y_te = None
    if test_path is not None:
        y_te, s_te = read_ucr_tsv(test_path)
        X_te = fix(s_te)
    ds = LabeledDataset(name or Path(path).stem.replace("_TRAIN", ""), X, y, X_te, y_te)
    if len(ds.classes) < min_classes:
        raise DatasetError(f"{path}: classification needs at least {min_classes} classes")
    return ds


def load_ucr_directory(directory, length: int | None = None) -> list[LabeledDataset]:
    """Every ``<name>_TRAIN.tsv`` with its ``<name>_TEST.tsv`` under ``directory``."""
    out = []
    for train in sorted(Path(directory).rglob("*_TRAIN.tsv")):
        test = train.with_name(train.name.replace("_TRAIN", "_TEST"))
        out.append(load_dataset(train, length, test if test.exists() else None))
    return out


def reindex_labels(y_context, *others):
    """Map context labels to 0..K-1 and apply the same map to ``others``."""
    classes = np.unique(y_context)
    lookup = {c: i for i, c in enumerate(classes.tolist())}
    mapped = [np.array([lookup[c] for c in np.asarray(y_context).tolist()])]
    for y in others:
        missing = set(np.asarray(y).tolist()) - set(lookup)
        if missing:
            raise InvalidRunError(f"query labels {sorted(missing)} absent from the context")
        mapped.append(np.array([lookup[c] for c in np.asarray(y).tolist()], dtype=np.int64))
    return classes, mapped


# splitting -----------------------------------------------------------------


@dataclass
class SplitPlan:
    context: np.ndarray
    query: np.ndarray
    fraction: float
    seed: int
    context_counts: dict = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [f"fraction\t{self.fraction}", f"seed\t{self.seed}",
                 "context\t" + ",".join(map(str, self.context.tolist())),
                 "query\t" + ",".join(map(str, self.query.tolist()))]
        lines += [f"count\t{c}\t{n}" for c, n in sorted(self.context_counts.items())]
        return "\n".join(lines) + "\n"


def _context_budget(n: int, K: int, fraction: float) -> int:
    n_ctx = math.floor(fraction * n)
    if n_ctx < K:
        n_ctx = K
    return min(n_ctx, n - 1)


def allocate_fill(remaining: dict, budget: int) -> dict:
    """Split ``budget`` over classes proportionally to their remaining counts.

    Floors first, then leftover slots by largest fractional part, then any
    class that still has samples.
    """
    total = sum(remaining.values())
    alloc = {c: 0 for c in remaining}
    if budget <= 0 or total == 0:
        return alloc
    budget = min(budget, total)
    exact = {c: budget * r / total for c, r in remaining.items()}
    for c in remaining:
        alloc[c] = min(math.floor(exact[c]), remaining[c])
    left = budget - sum(alloc.values())
    order = sorted(remaining, key=lambda c: (-(exact[c] - math.floor(exact[c])), c))
    for c in order:
        if left == 0:
            break
        if alloc[c] < remaining[c]:
            alloc[c] += 1
            left -= 1
    for c in sorted(remaining):
        while left > 0 and alloc[c] < remaining[c]:
            alloc[c] += 1
            left -= 1
    return alloc


def stratified_split(labels, fraction: float, seed: int) -> SplitPlan:
    """Disjoint context/query split with at least one context example per class."""
    if not 0 < fraction < 1:
        raise ContractError(f"fraction must lie in (0, 1), got {fraction}")
    labels = np.asarray(labels)
    n = len(labels)
    classes = np.unique(labels)
    K = len(classes)
    if n < 2:
        raise ProtocolError("a split needs at least two samples")
    rng = np.random.default_rng(seed)
    n_ctx = _context_budget(n, K, fraction)
    pools = {c: rng.permutation(np.flatnonzero(labels == c)).tolist() for c in classes.tolist()}
    covered = list(pools)
    if K > n_ctx:
        covered = sorted(rng.choice(covered, size=n_ctx, replace=False).tolist())
        warnings.warn(f"only {n_ctx} of {K} classes can be covered while keeping a query", stacklevel=2)
    chosen = {c: [] for c in pools}
    for c in covered:
        chosen[c].append(pools[c].pop())
    remaining = {c: len(p) for c, p in pools.items()}
    fill = allocate_fill(remaining, n_ctx - len(covered))
    for c, k in fill.items():
        chosen[c] += [pools[c].pop() for _ in range(k)]
    context = np.array(sorted(i for idx in chosen.values() for i in idx))
    query = np.setdiff1d(np.arange(n), context)
    shuffle = np.random.default_rng([seed, 1])
    return SplitPlan(shuffle.permutation(context), shuffle.permutation(query), fraction, seed,
                     {c: len(v) for c, v in chosen.items()})


def balanced_context_sample(labels, n_ctx: int, seed: int) -> np.ndarray:
    """Class-balanced sample of ``n_ctx`` pool indices.

    Classes short of their share give everything they have and the
    shortfall is dealt out again among classes that still have samples.
    """
    labels = np.asarray(labels)
    if n_ctx > len(labels):
        raise ContractError(f"n_ctx={n_ctx} exceeds the pool of {len(labels)}")
    rng = np.random.default_rng(seed)
    classes = np.unique(labels).tolist()
    avail = {c: int((labels == c).sum()) for c in classes}
    C = len(classes)
    base = n_ctx // C
    quota = {c: base for c in classes}
    for c in rng.choice(classes, size=n_ctx - base * C, replace=False).tolist():
        quota[c] += 1
    take = {c: min(quota[c], avail[c]) for c in classes}
    left = n_ctx - sum(take.values())
    while left > 0:
        open_ = [c for c in classes if take[c] < avail[c]]
        # deal one at a time to the currently smallest open classes
        low = min(take[c] for c in open_)
        ties = [c for c in open_ if take[c] == low]
        for c in rng.permutation(ties).tolist()[:left]:
            take[c] += 1
            left -= 1
    out = []
    for c in classes:
        idx = np.flatnonzero(labels == c)
        out.extend(rng.choice(idx, size=take[c], replace=False).tolist())
    return np.array(sorted(out), dtype=np.int64)


# baselines ---------------------------------------------------------------


def nearest_neighbor_predict(X_ctx, y_ctx, X_q) -> np.ndarray:
    """1-NN under Euclidean distance; ties go to the lowest class index."""
    X_ctx, X_q = np.asarray(X_ctx, float), np.asarray(X_q, float)
    y_ctx = np.asarray(y_ctx)
    d = ((X_q[:, None, :] - X_ctx[None, :, :]) ** 2).sum(-1)
    best = d.min(axis=1, keepdims=True)
    masked = np.where(d == best, y_ctx[None, :], np.iinfo(np.int64).max)
    return masked.min(axis=1)


def nearest_centroid_scores(X_ctx, y_ctx, X_q) -> tuple[np.ndarray, np.ndarray]:
    """Classes and negative squared distances to each class centroid."""
    X_ctx, X_q = np.asarray(X_ctx, float), np.asarray(X_q, float)
    y_ctx = np.asarray(y_ctx)
    classes = np.unique(y_ctx)
    centroids = np.stack([X_ctx[y_ctx == c].mean(axis=0) for c in classes])
    return classes, -((X_q[:, None, :] - centroids[None]) ** 2).sum(-1)


def nearest_centroid_predict(X_ctx, y_ctx, X_q) -> np.ndarray:
    classes, scores = nearest_centroid_scores(X_ctx, y_ctx, X_q)
    # argmax returns the first maximum, i.e. the lowest class index on ties
    return classes[np.argmax(scores, axis=1)]


def baseline_predict(X_ctx, y_ctx, X_q, method: str) -> np.ndarray:
    if len(X_ctx) == 0:
        raise ContractError("context is empty")
    if method == "1NN":
        return nearest_neighbor_predict(X_ctx, y_ctx, X_q)
    if method == "NC":
        return nearest_centroid_predict(X_ctx, y_ctx, X_q)
    raise ContractError(f"unknown baseline {method!r}")


class BaselineClassifier(ClassifierMixin, BaseEstimator):
    """Train-free 1NN or nearest-centroid classifier, optionally on embeddings.

    Parameters
    ----------
    method : {"1NN", "NC"}
    embedder : transformer or None
        Fitted-or-unfitted transformer applied to series before matching
        (for example :class:`ticfm.estimator.TICFMEmbedder`).
    """

    def __init__(self, method="1NN", embedder=None, random_state=None):
        self.method = method
        self.embedder = embedder
        self.random_state = random_state

    def _features(self, X):
        return X if self.embedder is None else self.embedder.transform(X)

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        if self.embedder is not None and hasattr(self.embedder, "fit"):
            self.embedder.fit(X)
        self.classes_ = np.unique(y)
        self.X_ = self._features(X)
        self.y_ = y
        return self

    def predict(self, X):
        check_is_fitted(self)
        X = check_array(X)
        return baseline_predict(self.X_, self.y_, self._features(X), self.method)


# metrics and reporting -----------------------------------------------------


def accuracy(y_true, y_pred) -> float:
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    return float((y_true == y_pred).mean())


def average_ranks(row) -> np.ndarray:
    """Ranks by descending score, ties receiving the mean of their positions."""
    row = np.asarray(row, float)
    order = np.argsort(-row, kind="stable")
    ranks = np.empty(len(row))
    i = 0
    while i < len(row):
        j = i
        while j + 1 < len(row) and row[order[j + 1]] == row[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def mean_rank(table) -> np.ndarray:
    """Mean rank per method for a (methods x datasets) accuracy table."""
    table = np.asarray(table, float)
    if table.ndim != 2 or np.isnan(table).any():
        raise ContractError("accuracy table must be a complete methods x datasets matrix")
    ranks = np.stack([average_ranks(table[:, j]) for j in range(table.shape[1])], axis=1)
    return ranks.mean(axis=1)


@dataclass
class CellResult:
    dataset: str
    method: str
    cell: str
    accuracies: list[float]

    @property
    def accuracy(self) -> float:
        return float(np.mean(self.accuracies))


@dataclass
class MetricsReport:
    protocol: str
    seeds: list[int]
    params: dict = field(default_factory=dict)
    cells: list[CellResult] = field(default_factory=list)

    def methods(self) -> list[str]:
        return list(dict.fromkeys(c.method for c in self.cells))

    def datasets(self) -> list[str]:
        return list(dict.fromkeys(c.dataset for c in self.cells))

    def table(self, cell: str | None = None) -> np.ndarray:
        """Methods x datasets mean accuracy for one protocol cell (or the mean over cells)."""
        ms, ds = self.methods(), self.datasets()
        out = np.full((len(ms), len(ds)), np.nan)
        sums = {}
        for c in self.cells:
            if cell is None or c.cell == cell:
                sums.setdefault((c.method, c.dataset), []).append(c.accuracy)
        for (m, d), v in sums.items():
            out[ms.index(m), ds.index(d)] = np.mean(v)
        return out

    def mean_accuracy(self) -> dict[str, float]:
        t = self.table()
        return {m: float(np.nanmean(t[i])) for i, m in enumerate(self.methods())}

    def mean_ranks(self) -> dict[str, float]:
        return dict(zip(self.methods(), mean_rank(self.table()).tolist()))

    def cell_means(self) -> dict[tuple[str, str], float]:
        out = {}
        for c in self.cells:
            out.setdefault((c.method, c.cell), []).append(c.accuracy)
        return {k: float(np.mean(v)) for k, v in out.items()}

    def to_lines(self) -> str:
        return "".join(f"{c.dataset}\t{c.method}\t{c.cell}\t{c.accuracy:.6f}\n" for c in self.cells)

    def to_table(self) -> str:
        rows = [("protocol", self.protocol), ("seeds", ",".join(map(str, self.seeds)))]
        rows += [(k, str(v)) for k, v in sorted(self.params.items())]
        for m, a in self.mean_accuracy().items():
            rows.append((f"mean_accuracy[{m}]", f"{a:.6f}"))
        for m, r in self.mean_ranks().items():
            rows.append((f"mean_rank[{m}]", f"{r:.4f}"))
        width = max(len(k) for k, _ in rows)
        return "".join(f"{k.ljust(width)}  {v}\n" for k, v in rows)

    def to_csv(self) -> str:
        lines = ["dataset,method,cell,accuracy"]
        lines += [f"{c.dataset},{c.method},{c.cell},{c.accuracy:.6f}" for c in self.cells]
        return "\n".join(lines) + "\n"


# protocol drivers ----------------------------------------------------------


def _run(estimator, X_ctx, y_ctx, X_q, y_q, seed) -> float:
    reindex_labels(y_ctx, y_q)  # raises when a query class is missing from the context
    est = clone(estimator)
    if "random_state" in est.get_params():
        est.set_params(random_state=seed)
    est.fit(X_ctx, y_ctx)
    return accuracy(y_q, est.predict(X_q))


def evaluate(methods: dict, datasets, protocol: str = "official-split", seeds=(0, 1, 2, 3, 4),
             fractions=DEFAULT_FRACTIONS, multipliers=DEFAULT_MULTIPLIERS, split_seed: int = 0,
             n0_per_class: int = 10, query_fraction: float = 0.1) -> MetricsReport:
    """Run one protocol for every (method, dataset) pair.

    ``methods`` maps display names to sklearn-style classifiers; each run
    clones the estimator and sets ``random_state`` to the run seed.
    """
    if protocol not in PROTOCOLS:
        raise ProtocolError(f"unknown protocol {protocol!r}; choose from {PROTOCOLS}")
    if isinstance(datasets, LabeledDataset):
        datasets = [datasets]
    seeds = list(seeds)
    params = {"split_seed": split_seed}
    report = MetricsReport(protocol, seeds, params)
    for ds in datasets:
        if protocol == "official-split":
            if ds.X_test is None:
                raise ProtocolError(f"{ds.name} has no test split")
            for name, est in methods.items():
                accs = [_run(est, ds.X_train, ds.y_train, ds.X_test, ds.y_test, s) for s in seeds]
                report.cells.append(CellResult(ds.name, name, "official", accs))
        elif protocol == "fraction-sweep":
            params["fractions"] = ",".join(map(str, fractions))
            X, y = (ds.X_test, ds.y_test) if ds.X_test is not None else (ds.X_train, ds.y_train)
            for frac in fractions:
                plan = stratified_split(y, frac, split_seed)
                for name, est in methods.items():
                    accs = [_run(est, X[plan.context], y[plan.context], X[plan.query], y[plan.query], s)
                            for s in seeds]
                    report.cells.append(CellResult(ds.name, name, f"alpha={frac}", accs))
        else:
            if ds.X_test is None:
                raise ProtocolError(f"{ds.name} has no test split")
            params["multipliers"] = ",".join(map(str, multipliers))
            params["n0_per_class"] = n0_per_class
            qplan = stratified_split(ds.y_test, query_fraction, split_seed)
            Q = qplan.context
            rest = qplan.query
            X_pool = np.concatenate([ds.X_train, ds.X_test[rest]])
            y_pool = np.concatenate([ds.y_train, ds.y_test[rest]])
            C = len(np.unique(y_pool))
            n0 = n0_per_class * C
            for m in multipliers:
                n_ctx = min(m * n0, len(y_pool))
                for name, est in methods.items():
                    accs = []
                    for s in seeds:
                        idx = balanced_context_sample(y_pool, n_ctx, s)
                        accs.append(_run(est, X_pool[idx], y_pool[idx], ds.X_test[Q], ds.y_test[Q], s))
                    report.cells.append(CellResult(ds.name, name, f"m={m}", accs))
    return report

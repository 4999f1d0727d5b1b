"""Synthetic task generation and the three training stages.

Stages: contrastive encoder pretraining on augmented pairs, in-context
classifier pretraining on a Gaussian-cluster task prior, and episodic
adapter training through the frozen encoder and classifier.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field

import numpy as np

from . import adapter, encoder, icl
from . import tensor as T
from .config import ModelConfig, ModelParams, init_array, init_params
from .errors import ConfigurationError, NonFiniteError, TrainingDivergenceError
from .layers import wrap
from .preprocessing import resample_linear
from .tensor import MASK_VALUE, Tensor

FAMILIES = ("sine", "ar2", "level", "shapelet")


@dataclass(frozen=True)
class GeneratorConfig:
    n_classes: tuple[int, int] = (2, 5)
    context_size: tuple[int, int] = (10, 40)
    query_size: tuple[int, int] = (8, 16)
    series_length: int = 128
    family_weights: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    noise: float = 0.3
    phase_jitter: float = 0.3
    sine_cycles: tuple[int, int] = (1, 4)
    modes_per_class: int = 1
    seed: int = 0

    def __post_init__(self):
        for name in ("n_classes", "context_size", "query_size", "sine_cycles"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 1:
                raise ConfigurationError(f"{name} range {lo}..{hi} is empty")
        if self.modes_per_class < 1:
            raise ConfigurationError("modes_per_class must be at least 1")
        if self.n_classes[0] < 2:
            raise ConfigurationError("tasks need at least two classes")
        if len(self.family_weights) != len(FAMILIES) or sum(self.family_weights) <= 0:
            raise ConfigurationError("family_weights needs one positive weight per family")


@dataclass
class Episode:
    """A labelled context set and a query set from one task.

    Labels are re-indexed to 0..K-1 and every query label occurs in the
    context. ``y_query`` is held out for loss and scoring only.
    """

    X_context: np.ndarray
    y_context: np.ndarray
    X_query: np.ndarray
    y_query: np.ndarray
    n_classes: int
    family: str = ""
    seed: int = 0


# synthetic generator -------------------------------------------------------


class _Task:
    """Class-conditional sampler for one family with drawn parameters.

    Each class owns ``modes_per_class`` prototypes; a sample picks one of
    its class's prototypes uniformly.
    """

    def __init__(self, cfg: GeneratorConfig, family: str, K: int, rng: np.random.Generator):
        self.cfg, self.family, self.K = cfg, family, K
        self.modes = cfg.modes_per_class
        K = K * self.modes
        T_ = cfg.series_length
        self.t = np.arange(T_) / T_
        if family == "sine":
            self.cycles = rng.integers(cfg.sine_cycles[0], cfg.sine_cycles[1] + 1)
            self.phases = rng.uniform(0, 2 * np.pi) + 2 * np.pi * np.arange(K) / K
        elif family == "ar2":
            radius = rng.uniform(0.8, 0.95)
            angles = rng.uniform(0.15, 0.3) + np.arange(K) * min(rng.uniform(0.35, 0.55), 2.6 / K)
            self.coef = [(2 * radius * np.cos(a), -radius**2) for a in rng.permutation(angles)]
        elif family == "level":
            self.segments = rng.integers(3, 7)
            self.templates = rng.normal(0.0, 1.0, size=(K, self.segments))
        elif family == "shapelet":
            width = max(4, T_ // 6)
            base = np.linspace(0, np.pi, width)
            shapes = []
            for _ in range(K):
                freqs = rng.integers(1, 4, size=2)
                amps = rng.normal(0, 1, size=2)
                shapes.append(np.sin(base) * (amps[0] * np.sin(freqs[0] * base) + amps[1] * np.cos(freqs[1] * base) + rng.normal(0, 0.5)))
            shapes = np.array(shapes)
            self.shapes = 3.0 * shapes / np.abs(shapes).max(axis=1, keepdims=True)
        else:
            raise ConfigurationError(f"unknown family {family!r}")
        # prototype j belongs to class owner[j]; shuffled so a class's modes are not neighbours
        self.owner = rng.permutation(np.repeat(np.arange(self.K), self.modes))

    def sample(self, label: int, rng: np.random.Generator) -> np.ndarray:
        cfg, T_ = self.cfg, self.cfg.series_length
        if self.modes > 1:
            label = int(rng.choice(np.flatnonzero(self.owner == label)))
        else:
            label = int(np.flatnonzero(self.owner == label)[0])
        noise = rng.normal(0.0, cfg.noise, size=T_)
        if self.family == "sine":
            phase = self.phases[label] + rng.normal(0.0, cfg.phase_jitter) if cfg.phase_jitter else self.phases[label]
            x = np.sin(2 * np.pi * self.cycles * self.t + phase)
        elif self.family == "ar2":
            a1, a2 = self.coef[label]
            e = rng.normal(0.0, 1.0, size=T_ + 50)
            x = np.zeros(T_ + 50)
            for i in range(2, T_ + 50):
                x[i] = a1 * x[i - 1] + a2 * x[i - 2] + e[i]
            x = x[50:]
            x = x / (x.std() + 1e-12)
            noise = noise * 0.5
        elif self.family == "level":
            edges = np.linspace(0, T_, self.segments + 1)
            edges[1:-1] += rng.normal(0, T_ / (8 * self.segments), size=self.segments - 1)
            idx = np.clip(np.searchsorted(edges, np.arange(T_), side="right") - 1, 0, self.segments - 1)
            x = self.templates[label][idx]
        else:
            shape = self.shapes[label]
            x = np.zeros(T_)
            start = rng.integers(0, T_ - len(shape) + 1)
            x[start : start + len(shape)] = shape
            noise = noise + np.cumsum(rng.normal(0, 0.05, size=T_))
        return x * rng.uniform(0.8, 1.2) + rng.normal(0.0, 0.2) + noise


def _draw_task(cfg: GeneratorConfig, rng: np.random.Generator, K: int | None = None):
    if K is None:
        K = int(rng.integers(cfg.n_classes[0], cfg.n_classes[1] + 1))
    w = np.asarray(cfg.family_weights, dtype=float)
    family = FAMILIES[rng.choice(len(FAMILIES), p=w / w.sum())]
    return _Task(cfg, family, K, rng)


def _context_labels(K: int, n: int, rng) -> np.ndarray:
    n = max(n, K)
    labels = np.concatenate([np.arange(K), rng.integers(0, K, size=n - K)])
    return rng.permutation(labels)


def sample_synthetic_task(cfg: GeneratorConfig, seed: int, n_context: int | None = None,
                          n_query: int | None = None, n_classes: int | None = None) -> Episode:
    """Draw one episode; the optional sizes override the configured ranges."""
    rng = np.random.default_rng([cfg.seed, seed])
    task = _draw_task(cfg, rng, n_classes)
    K = task.K
    if n_context is None:
        n_context = int(rng.integers(cfg.context_size[0], cfg.context_size[1] + 1))
    if n_query is None:
        n_query = int(rng.integers(cfg.query_size[0], cfg.query_size[1] + 1))
    y_ctx = _context_labels(K, n_context, rng)
    y_q = rng.integers(0, K, size=n_query)
    X_ctx = np.stack([task.sample(c, rng) for c in y_ctx])
    X_q = np.stack([task.sample(c, rng) for c in y_q])
    return Episode(X_ctx, y_ctx, X_q, y_q, K, task.family, seed)


def sample_series(cfg: GeneratorConfig, n: int, seed: int) -> np.ndarray:
    """Unlabelled series drawn across several random tasks."""
    rng = np.random.default_rng([cfg.seed, seed, 7])
    out = []
    while len(out) < n:
        task = _draw_task(cfg, rng)
        for _ in range(min(8, n - len(out))):
            out.append(task.sample(int(rng.integers(task.K)), rng))
    return np.stack(out)


def synthetic_dataset(cfg: GeneratorConfig, seed: int, n_train: int, n_test: int,
                      n_classes: int | None = None):
    """One synthetic task laid out as a dataset with train and test splits."""
    from .evaluation import LabeledDataset

    rng = np.random.default_rng([cfg.seed, seed, 11])
    task = _draw_task(cfg, rng, n_classes)
    y_tr = _context_labels(task.K, n_train, rng)
    y_te = _context_labels(task.K, n_test, rng)
    X_tr = np.stack([task.sample(c, rng) for c in y_tr])
    X_te = np.stack([task.sample(c, rng) for c in y_te])
    return LabeledDataset(f"synthetic-{task.family}-{seed}", X_tr, y_tr, X_te, y_te)


# contrastive pretraining ---------------------------------------------------


def augment(x, seed, crop_range=(0.5, 1.0), jitter: float = 0.05):
    """Two random crop-and-resize views with Gaussian jitter."""
    x = np.asarray(x, dtype=np.float64)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n = x.shape[-1]
    sd = x.std()

    def view():
        frac = rng.uniform(*crop_range)
        length = max(2, int(round(frac * n)))
        start = int(rng.integers(0, n - length + 1))
        v = resample_linear(x[start : start + length], n)
        if jitter > 0:
            v = v + rng.normal(0.0, jitter * sd, size=n)
        return v

    return view(), view()


def info_nce_loss(z1, z2, temperature: float = 0.1) -> Tensor:
    """One-way in-batch InfoNCE with matched rows as positives."""
    if temperature <= 0:
        raise ConfigurationError("temperature must be positive")
    z1, z2 = T.as_tensor(z1), T.as_tensor(z2)
    s = T.mul(T.matmul(T.l2_normalize(z1), T.swapaxes(T.l2_normalize(z2), -1, -2)), 1.0 / temperature)
    return T.cross_entropy(s, np.arange(z1.shape[0]))


def _head_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    q = cfg.embed_dim
    return {"ln.g": (q,), "ln.b": (q,), "w": (q, q)}


# optimization ------------------------------------------------------------


OPTIMIZERS = ("sgd", "momentum", "adam")


class Optimizer:
    """SGD (optionally with momentum) or Adam, with global-norm clipping."""

    def __init__(self, lr: float = 1e-2, kind: str = "sgd", momentum: float = 0.9,
                 clip: float | None = 5.0, betas=(0.9, 0.999), eps: float = 1e-8, warmup: int = 0):
        if kind not in OPTIMIZERS:
            raise ConfigurationError(f"unknown optimizer {kind!r}")
        if lr < 0:
            raise ConfigurationError("learning rate must be non-negative")
        self.lr, self.kind, self.momentum, self.clip = lr, kind, momentum, clip
        self.warmup = warmup
        self.betas, self.eps = betas, eps
        self.state: dict[str, tuple] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        self.t += 1
        lr = self.lr * min(1.0, self.t / self.warmup) if self.warmup else self.lr
        if self.clip is not None:
            norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if norm > self.clip:
                grads = {k: g * (self.clip / norm) for k, g in grads.items()}
        out = {}
        for k, p in params.items():
            g = grads[k]
            if self.kind == "sgd":
                upd = g
            elif self.kind == "momentum":
                v = self.momentum * self.state.get(k, 0.0) + g
                self.state[k] = v
                upd = v
            else:
                b1, b2 = self.betas
                m0, v0 = self.state.get(k, (0.0, 0.0))
                m = b1 * m0 + (1 - b1) * g
                v = b2 * v0 + (1 - b2) * g * g
                self.state[k] = (m, v)
                upd = (m / (1 - b1**self.t)) / (np.sqrt(v / (1 - b2**self.t)) + self.eps)
            out[k] = p - lr * upd
        return out


@dataclass
class TrainResult:
    params: ModelParams
    history: list[float] = field(default_factory=list)


def _log(verbose: bool, stage: str, step: int, loss: float):
    if verbose:
        print(f"{stage}\t{step}\t{loss:.6f}", file=sys.stdout, flush=True)


def _guard(step: int, fn):
    try:
        loss, grads = fn()
    except NonFiniteError as exc:
        raise TrainingDivergenceError(step, str(exc)) from exc
    if not np.isfinite(loss):
        raise TrainingDivergenceError(step)
    return loss, grads


def pretrain_encoder(params: ModelParams, gen: GeneratorConfig, epochs: int = 1,
                     steps_per_epoch: int = 100, batch_size: int = 32, lr: float = 1e-2,
                     seed: int = 0, temperature: float = 0.1, optimizer: str = "sgd",
                     verbose: bool = False) -> TrainResult:
    """Contrastive pretraining of the encoder on augmented synthetic series."""
    cfg = params.config
    rng = np.random.default_rng([seed, 1])
    enc = {k: v.copy() for k, v in params.group("encoder").items()}
    head = {k: init_array(k, s, rng) for k, s in _head_shapes(cfg).items()}
    opt = Optimizer(lr, optimizer)
    history = []
    step = 0
    for _ in range(epochs):
        for _ in range(steps_per_epoch):
            X = sample_series(gen, batch_size, seed=seed * 1_000_003 + step)
            views = [augment(x, rng) for x in X]
            V = np.concatenate([np.stack([v[0] for v in views]), np.stack([v[1] for v in views])])

            def loss_and_grads():
                tape = T.GradTape()
                pe = wrap(enc, tape, "encoder.")
                ph = wrap(head, tape, "head.")
                z = encoder.encode(V, pe, cfg, rng=rng)
                h = T.linear(T.layer_norm(z, ph["ln.g"], ph["ln.b"], cfg.ln_eps), ph["w"])
                loss = info_nce_loss(h[:batch_size], h[batch_size:], temperature)
                return loss.item(), T.backward(tape, loss)

            loss, grads = _guard(step, loss_and_grads)
            merged = {"encoder." + k: v for k, v in enc.items()} | {"head." + k: v for k, v in head.items()}
            merged = opt.step(merged, grads)
            enc = {k[8:]: v for k, v in merged.items() if k.startswith("encoder.")}
            head = {k[5:]: v for k, v in merged.items() if k.startswith("head.")}
            history.append(loss)
            _log(verbose, "encoder", step, loss)
            step += 1
    return TrainResult(params.with_group("encoder", enc), history)


# in-context classifier pretraining -----------------------------------------


def sample_prior_task(rng: np.random.Generator, d: int, K: int, n_ctx: int, n_query: int):
    """Gaussian-cluster classification task directly in token space.

    Each class is a mixture of one to four anisotropic blobs in a random
    low-dimensional subspace; features are standardized per episode.
    """
    rank = int(rng.integers(2, min(d, 16) + 1))
    basis = np.linalg.qr(rng.normal(size=(d, rank)))[0]
    spread = rng.uniform(0.6, 2.5)
    modes = int(rng.integers(1, 5))
    centers = rng.normal(0, spread, size=(K, modes, rank))
    scales = rng.uniform(0.5, 1.5, size=(K, rank))
    y_ctx = _context_labels(K, n_ctx, rng)
    y_q = rng.integers(0, K, size=n_query)

    def draw(labels):
        m = rng.integers(0, modes, size=len(labels))
        lat = centers[labels, m] + rng.normal(size=(len(labels), rank)) * scales[labels]
        return lat @ basis.T + rng.normal(0, 0.1, size=(len(labels), d))

    X_ctx, X_q = draw(y_ctx), draw(y_q)
    mu, sd = X_ctx.mean(axis=0), X_ctx.std(axis=0) + 1e-6
    return (X_ctx - mu) / sd, y_ctx, (X_q - mu) / sd, y_q


def _masked_query_loss(logits: Tensor, n_tr: int, y_q: np.ndarray, K: np.ndarray, c_max: int) -> Tensor:
    """Cross-entropy of query rows over each prompt's active classes.

    logits: (B, N, c_max); y_q: (B, n_q); K: (B,) class counts.
    """
    B, N, C = logits.shape
    q = T.reshape(logits[:, n_tr:, :], (B * (N - n_tr), C))
    active = np.arange(c_max)[None, :] < np.repeat(K, N - n_tr)[:, None]
    q = T.add(q, Tensor(np.where(active, 0.0, MASK_VALUE), _copy=False))
    return T.cross_entropy(q, y_q.reshape(-1))


def pretrain_icl(params: ModelParams, steps: int = 1000, batch_size: int = 8, lr: float = 1e-3,
                 seed: int = 0, n_classes=(2, None), context_size=(8, 256), query_size: int = 16,
                 optimizer: str = "adam", warmup: int = 200, verbose: bool = False) -> TrainResult:
    """Train the in-context classifier on prior tasks drawn in token space.

    The learning rate ramps up linearly over ``warmup`` steps; starting at
    full rate tends to park the model on the predict-the-prior plateau.
    """
    cfg = params.config
    rng = np.random.default_rng([seed, 2])
    k_lo, k_hi = n_classes[0], n_classes[1] or cfg.c_max
    theta = {k: v.copy() for k, v in params.group("icl").items()}
    opt = Optimizer(lr, optimizer, clip=5.0, warmup=warmup)
    history = []
    for step in range(steps):
        Ks = rng.integers(k_lo, k_hi + 1, size=batch_size)
        # log-uniform sizes: long contexts are seen without dominating the cost
        n_ctx = int(round(np.exp(rng.uniform(np.log(context_size[0]), np.log(context_size[1])))))
        n_ctx = max(n_ctx, int(Ks.max()))
        tasks = [sample_prior_task(rng, cfg.model_dim, int(k), n_ctx, query_size) for k in Ks]
        H_tr = np.stack([t[0] for t in tasks])
        y_tr = np.stack([t[1] for t in tasks])
        H_te = np.stack([t[2] for t in tasks])
        y_te = np.stack([t[3] for t in tasks])

        def loss_and_grads():
            tape = T.GradTape()
            p = wrap(theta, tape, "")
            lg = icl.icl_forward(icl.PromptBatch(H_tr, H_te, y_tr, cfg.c_max), p, cfg)
            loss = _masked_query_loss(lg, y_tr.shape[1], y_te, Ks, cfg.c_max)
            return loss.item(), T.backward(tape, loss)

        loss, grads = _guard(step, loss_and_grads)
        theta = opt.step(theta, grads)
        history.append(loss)
        _log(verbose, "icl", step, loss)
    return TrainResult(params.with_group("icl", theta), history)


# episodic adapter training -------------------------------------------------


def episode_batch(gen: GeneratorConfig, params: ModelParams, seeds, n_context: int, n_query: int):
    """Episodes with shared sizes, their frozen-encoder embeddings and labels."""
    cfg = params.config
    eps = [sample_synthetic_task(gen, int(s), n_context, n_query) for s in seeds]
    enc = params.group("encoder")
    X = np.concatenate([np.concatenate([e.X_context, e.X_query]) for e in eps])
    Z = encoder.embed(X, enc, cfg).reshape(len(eps), n_context + n_query, cfg.embed_dim)
    y_ctx = np.stack([e.y_context for e in eps])
    y_q = np.stack([e.y_query for e in eps])
    Ks = np.array([e.n_classes for e in eps])
    return Z, y_ctx, y_q, Ks


def adapter_loss(adapter_params, icl_params, Z, y_ctx, y_q, Ks, cfg: ModelConfig, rng=None) -> Tensor:
    """Query cross-entropy of the full pipeline from encoder embeddings."""
    n_ctx = y_ctx.shape[-1]
    H = adapter.project(Z, adapter_params, cfg, rng=rng)
    prompt = icl.PromptBatch(H[..., :n_ctx, :], H[..., n_ctx:, :], y_ctx, cfg.c_max)
    lg = icl.icl_forward(prompt, icl_params, cfg)
    if lg.ndim == 2:
        lg = T.reshape(lg, (1,) + lg.shape)
        y_q, Ks = y_q.reshape(1, -1), np.atleast_1d(Ks)
    return _masked_query_loss(lg, n_ctx, y_q, Ks, cfg.c_max)


def adapter_loss_and_grad(params: ModelParams, Z, y_ctx, y_q, Ks):
    """Loss and adapter-only gradients with encoder and classifier frozen."""
    cfg = params.config
    tape = T.GradTape()
    pa = wrap(params.group("adapter"), tape, "")
    frozen = {k: Tensor(v) for k, v in params.group("icl").items()}
    loss = adapter_loss(pa, frozen, Z, y_ctx, y_q, Ks, cfg)
    return loss.item(), T.backward(tape, loss)


def train_adapter_episodic(params: ModelParams, gen: GeneratorConfig, epochs: int = 5,
                           episodes_per_epoch: int = 40, batch_size: int = 4, lr: float = 1e-2,
                           seed: int = 0, optimizer: str = "sgd", dropout: bool = True,
                           verbose: bool = False) -> TrainResult:
    """Update only the adapter; encoder and classifier buffers are never written."""
    cfg = params.config
    rng = np.random.default_rng([seed, 3])
    phi = {k: v.copy() for k, v in params.group("adapter").items()}
    frozen = {k: Tensor(v) for k, v in params.group("icl").items()}
    opt = Optimizer(lr, optimizer)
    history = []
    step = 0
    # fixed episode seeds so every epoch revisits the same tasks
    plan = []
    for i in range(episodes_per_epoch):
        n_ctx = int(rng.integers(gen.context_size[0], gen.context_size[1] + 1))
        n_q = int(rng.integers(gen.query_size[0], gen.query_size[1] + 1))
        seeds = [seed * 1_000_003 + i * batch_size + b for b in range(batch_size)]
        plan.append(episode_batch(gen, params, seeds, n_ctx, n_q))
    for _ in range(epochs):
        for i, (Z, y_ctx, y_q, Ks) in enumerate(plan):
            # dropout masks are tied to the episode so epochs are comparable
            drop_rng = np.random.default_rng([seed, 4, i]) if dropout else None

            def loss_and_grads():
                tape = T.GradTape()
                pa = wrap(phi, tape, "")
                loss = adapter_loss(pa, frozen, Z, y_ctx, y_q, Ks, cfg, rng=drop_rng)
                return loss.item(), T.backward(tape, loss)

            loss, grads = _guard(step, loss_and_grads)
            phi = opt.step(phi, grads)
            history.append(loss)
            _log(verbose, "adapter", step, loss)
            step += 1
    return TrainResult(params.with_group("adapter", phi), history)


# full pipeline ---------------------------------------------------------------


def train_pipeline(config: ModelConfig | None = None, gen: GeneratorConfig | None = None, seed: int = 0,
                   encoder_steps: int = 200, icl_steps: int = 1500, adapter_epochs: int = 4,
                   adapter_episodes: int = 200, verbose: bool = False) -> TrainResult:
    """Encoder pretraining, classifier pretraining, then episodic adapter training.

    Defaults are sized for the small configuration on a single CPU core
    (roughly five minutes).
    """
    config = config or ModelConfig.small()
    gen = gen or GeneratorConfig(series_length=config.series_length)
    params = init_params(config, seed)
    history = []
    res = pretrain_encoder(params, gen, epochs=1, steps_per_epoch=encoder_steps, batch_size=32, lr=1e-3,
                           seed=seed, optimizer="adam", verbose=verbose)
    history += res.history
    res = pretrain_icl(res.params, steps=icl_steps, batch_size=8, lr=1e-3, seed=seed, verbose=verbose)
    history += res.history
    res = train_adapter_episodic(res.params, gen, epochs=adapter_epochs, episodes_per_epoch=adapter_episodes,
                                 batch_size=4, lr=1e-3, seed=seed, optimizer="adam", verbose=verbose)
    return TrainResult(res.params, history + res.history)

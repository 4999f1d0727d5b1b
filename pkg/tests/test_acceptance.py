"""Acceptance criteria; each test records one PASS/FAIL line (listed in the terminal summary)."""

import time
import warnings
import zlib

import numpy as np
import pytest

from conftest import tiny_config
from test_tensor import CASES
from ticfm import icl, model_io, theory, training
from ticfm import tensor as T
from ticfm.config import ModelConfig, init_params
from ticfm.errors import IntegrityError
from ticfm.estimator import TICFMClassifier, TICFMEmbedder
from ticfm.evaluation import (
    BaselineClassifier,
    evaluate,
    nearest_centroid_predict,
    nearest_centroid_scores,
    nearest_neighbor_predict,
    stratified_split,
)
from ticfm.inference import EnsembleConfig, ModelPredictor, ensemble_predict, fit_class_tree, hierarchical_predict
from ticfm.layers import wrap
from ticfm.tensor import gradient_check


def random_prompt(rng, cfg, n_te=None):
    K = int(rng.integers(2, cfg.c_max + 1))
    n_tr = int(rng.integers(K, 3 * K + 4))
    n_te = n_te or int(rng.integers(2, 7))
    y = rng.permutation(np.concatenate([np.arange(K), rng.integers(0, K, size=n_tr - K)]))
    return icl.PromptBatch(rng.normal(size=(n_tr, cfg.model_dim)), rng.normal(size=(n_te, cfg.model_dim)), y,
                           cfg.c_max)


@pytest.mark.criterion(1, "GD emulation exactness")
def test_criterion_1_gd_emulation(verdict):
    rng = np.random.default_rng(0)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        p = theory._random_gd_problem(rng, int(rng.integers(1, 33)), int(rng.integers(1, 9)),
                                      int(rng.integers(1, 9)), int(rng.integers(0, 9)), rng.uniform(1e-3, 1.0))
        worst = max(worst, theory.gd_emulation_error(p))
    elapsed = time.perf_counter() - start
    verdict(1, "GD emulation exactness", worst <= 1e-10 and elapsed < 10,
            f"max_abs_err={worst:.2e} runtime={elapsed:.2f}s")


@pytest.mark.criterion(2, "gradient correctness")
def test_criterion_2_gradients(verdict):
    prim = {}
    for name, build in CASES.items():
        rng = np.random.default_rng(zlib.crc32(name.encode()))
        prim[name] = max(gradient_check(*build(rng)) for _ in range(100))
    cfg = tiny_config(embed_dim=8, stat_dim=2, loc_dim=2, model_dim=8, adapter_hidden=8, decoder_hidden=12,
                      n_latents=3)
    e2e = 0.0
    for trial in range(100):
        params = init_params(cfg, trial)
        rng = np.random.default_rng(trial)
        Z = rng.normal(size=(1, 6, cfg.embed_dim))
        y_ctx, y_q, Ks = rng.permutation([0, 0, 1, 1])[None], rng.integers(0, 2, size=(1, 2)), np.array([2])
        frozen = wrap(params.group("icl"))
        e2e = max(e2e, gradient_check(lambda p: training.adapter_loss(p, frozen, Z, y_ctx, y_q, Ks, cfg),
                                      params.group("adapter")))
    worst_prim = max(prim.values())
    verdict(2, "gradient correctness", worst_prim <= 1e-4 and e2e <= 1e-3,
            f"primitives max_rel={worst_prim:.1e} over {len(prim)}x100, adapter path max_rel={e2e:.1e} over 100")


@pytest.mark.criterion(3, "mask leakage")
def test_criterion_3_mask_leakage(verdict):
    cfg = tiny_config()
    params = init_params(cfg, 1).group("icl")
    rng = np.random.default_rng(3)
    leaks = 0
    for _ in range(100):
        pr = random_prompt(rng, cfg)
        H = np.concatenate([pr.H_tr, pr.H_te])
        base = icl.icl_forward(pr, params, cfg).data
        _, lat = icl.consolidate_context(H, pr.n_tr, params, cfg, return_latents=True)
        j = int(rng.integers(pr.H_te.shape[0]))
        H_te = pr.H_te.copy()
        H_te[j] += rng.normal(size=cfg.model_dim)
        pert = icl.PromptBatch(pr.H_tr, H_te, pr.y_tr, cfg.c_max)
        out = icl.icl_forward(pert, params, cfg).data
        _, lat2 = icl.consolidate_context(np.concatenate([pr.H_tr, H_te]), pr.n_tr, params, cfg,
                                          return_latents=True)
        others = np.delete(np.arange(pr.n_tr, len(base)), j)
        injected = icl.inject_labels(H, pr.y_tr, pr.n_tr, params, cfg).data
        leaks += int(not np.array_equal(out[others], base[others]))
        leaks += int(not np.array_equal(lat.data, lat2.data))
        leaks += int(not np.array_equal(injected[pr.n_tr:], H[pr.n_tr:]))
    verdict(3, "mask leakage", leaks == 0, f"{leaks} leaks over 100 prompts")


@pytest.mark.criterion(4, "context permutation invariance")
def test_criterion_4_permutation(verdict):
    cfg = tiny_config()
    params = init_params(cfg, 2).group("icl")
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(100):
        pr = random_prompt(rng, cfg)
        active = pr.active
        p0 = icl.predict_proba(icl.icl_forward(pr, params, cfg).data, pr.n_tr, active)
        perm = rng.permutation(pr.n_tr)
        shuffled = icl.PromptBatch(pr.H_tr[perm], pr.H_te, pr.y_tr[perm], cfg.c_max)
        p1 = icl.predict_proba(icl.icl_forward(shuffled, params, cfg).data, pr.n_tr, active)
        worst = max(worst, float(np.abs(p0 - p1).max()))
    verdict(4, "context permutation invariance", worst <= 1e-9, f"max_abs_diff={worst:.1e}")


@pytest.mark.criterion(5, "ensemble and tree consistency")
def test_criterion_5_ensemble_tree(verdict):
    cfg = tiny_config()
    params = init_params(cfg, 5).group("icl")
    rng = np.random.default_rng(5)
    plain_ok = leaf_ok = True
    for _ in range(20):
        pr = random_prompt(rng, cfg)
        K = len(pr.active)
        plain = icl.predict_proba(icl.icl_forward(pr, params, cfg).data, pr.n_tr, range(K))
        one = ensemble_predict(pr.H_tr, pr.y_tr, pr.H_te, params, cfg, EnsembleConfig(1), offsets=[0])
        plain_ok &= np.array_equal(one, plain)
        ens = EnsembleConfig(int(rng.integers(1, 9)), int(rng.integers(100)))
        flat = ensemble_predict(pr.H_tr, pr.y_tr, pr.H_te, params, cfg, ens)
        tree = fit_class_tree(pr.y_tr, cfg.c_max, ens.seed)
        hier = hierarchical_predict(tree, pr.y_tr, ModelPredictor(pr.H_tr, pr.H_te, params, cfg, ens))
        leaf_ok &= tree.is_leaf and np.array_equal(hier, flat)
    worst = 0.0
    for _ in range(12):
        K = int(rng.integers(11, 101))
        y = rng.permutation(np.concatenate([np.arange(K), rng.integers(0, K, size=K)]))
        H_tr, H_te = rng.normal(size=(len(y), cfg.model_dim)), rng.normal(size=(3, cfg.model_dim))
        ens = EnsembleConfig(2, int(rng.integers(100)))
        tree = fit_class_tree(y, cfg.c_max, ens.seed)
        out = hierarchical_predict(tree, y, ModelPredictor(H_tr, H_te, params, cfg, ens))
        worst = max(worst, float(np.abs(out.sum(axis=1) - 1).max()))
    verdict(5, "ensemble and tree consistency", plain_ok and leaf_ok and worst <= 1e-10,
            f"M=1 exact={plain_ok} single-leaf exact={leaf_ok} max|sum-1|={worst:.1e} for K up to 100")


@pytest.mark.criterion(6, "splitter oracles")
def test_criterion_6_splitter(verdict):
    labels = np.array(["A"] * 10 + ["B"] * 6 + ["C"] * 4)
    counts = stratified_split(labels, 0.5, 0).context_counts
    example_ok = counts == {"A": 5, "B": 3, "C": 2}
    rng = np.random.default_rng(6)
    bad = 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for trial in range(10_000):
            n = int(rng.integers(2, 60))
            y = rng.integers(0, int(rng.integers(1, 8)), size=n)
            frac = rng.uniform(0.01, 0.99)
            plan = stratified_split(y, frac, trial)
            K = len(np.unique(y))
            expected = min(max(int(np.floor(frac * n)), K), n - 1)
            ok = len(np.intersect1d(plan.context, plan.query)) == 0
            ok &= sorted(np.concatenate([plan.context, plan.query]).tolist()) == list(range(n))
            ok &= len(plan.context) == expected and len(plan.query) >= 1
            if K <= n - 1:
                ok &= len(np.unique(y[plan.context])) == K
            bad += int(not ok)
    verdict(6, "splitter oracles", example_ok and bad == 0,
            f"example counts={tuple(counts.values())} property violations={bad}/10000")


@pytest.fixture(scope="module")
def desk_model():
    start = time.perf_counter()
    params = training.train_pipeline(ModelConfig.small(), seed=0).params
    return params, time.perf_counter() - start


@pytest.mark.slow
@pytest.mark.criterion(7, "desk-scale end-to-end")
def test_criterion_7_end_to_end(verdict, desk_model):
    params, train_seconds = desk_model
    cfg = params.config
    assert (cfg.series_length, cfg.embed_dim, cfg.model_dim, cfg.icl_blocks) == (128, 64, 64, 4)
    gen = training.GeneratorConfig(series_length=cfg.series_length)
    emb = TICFMEmbedder(params).fit(np.zeros((1, cfg.series_length)))
    acc = {"ticfm": [], "raw-1NN": [], "NC-emb": []}
    for i in range(50):
        ep = training.sample_synthetic_task(gen, 10_000_000 + i)
        clf = TICFMClassifier(params, n_estimators=8, random_state=0).fit(ep.X_context, ep.y_context)
        acc["ticfm"].append(np.mean(clf.predict(ep.X_query) == ep.y_query))
        acc["raw-1NN"].append(np.mean(nearest_neighbor_predict(ep.X_context, ep.y_context, ep.X_query)
                                      == ep.y_query))
        Zc, Zq = emb.transform(ep.X_context), emb.transform(ep.X_query)
        acc["NC-emb"].append(np.mean(nearest_centroid_predict(Zc, ep.y_context, Zq) == ep.y_query))
    m = {k: float(np.mean(v)) for k, v in acc.items()}
    ok = m["ticfm"] >= 0.85 and m["ticfm"] > m["raw-1NN"] and m["ticfm"] > m["NC-emb"] and train_seconds <= 600
    verdict(7, "desk-scale end-to-end", ok,
            " ".join(f"{k}={v:.3f}" for k, v in m.items()) + f" train={train_seconds:.0f}s")


@pytest.mark.slow
@pytest.mark.criterion(8, "context-scaling trend")
def test_criterion_8_context_scaling(verdict, desk_model):
    params, _ = desk_model
    # several prototypes per class, so a handful of examples per class cannot cover every mode
    gen = training.GeneratorConfig(series_length=params.config.series_length, modes_per_class=3)
    datasets = []
    for i in range(50):
        K = len(training.synthetic_dataset(gen, 20_000_000 + i, 1, 1).classes)
        datasets.append(training.synthetic_dataset(gen, 20_000_000 + i, 60 * K, 40 * K))
    rep = evaluate({"ticfm": TICFMClassifier(params)}, datasets, "context-window-sweep", seeds=(0,),
                   multipliers=(1, 5))
    means = rep.cell_means()
    m1, m5 = means[("ticfm", "m=1")], means[("ticfm", "m=5")]
    verdict(8, "context-scaling trend", m5 - m1 >= 0.03,
            f"m=1 {m1:.3f} m=5 {m5:.3f} gain={100 * (m5 - m1):.1f} points")


@pytest.mark.criterion(9, "DeepSets nearest-centroid equivalence")
def test_criterion_9_deepsets(verdict):
    rng = np.random.default_rng(9)
    agree, worst_pool = 0, 0.0
    for _ in range(1000):
        K = int(rng.integers(2, 5))
        Z = rng.normal(size=(int(rng.integers(K, 20)), int(rng.integers(1, 6))))
        y = rng.permutation(np.concatenate([np.arange(K), rng.integers(0, K, size=len(Z) - K)]))
        Zq = rng.normal(size=(4, Z.shape[1]))
        _, nc = nearest_centroid_scores(Z, y, Zq)
        agree += int((theory.deepsets_nearest_centroid(Z, y, Zq).argmax(1) == nc.argmax(1)).all())
        U = rng.normal(size=(int(rng.integers(1, 30)), int(rng.integers(1, 6))))
        mask = rng.random(len(U)) < 0.5
        mask[rng.integers(len(U))] = True
        worst_pool = max(worst_pool, float(np.abs(theory.masked_sum_pool(U, mask) - U[mask].sum(0)).max()))
    verdict(9, "DeepSets nearest-centroid equivalence", agree == 1000 and worst_pool <= 1e-12,
            f"argmax agreement {agree}/1000 pool max_abs_err={worst_pool:.1e}")


@pytest.mark.criterion(10, "persistence")
def test_criterion_10_persistence(verdict, tmp_path):
    rng = np.random.default_rng(10)
    round_trips = 0
    rejected = attempts = 0
    for trial in range(5):
        cfg = tiny_config()
        params = init_params(cfg, trial)
        params = params.with_group("adapter", {k: rng.normal(size=v.shape)
                                               for k, v in params.group("adapter").items()})
        path = tmp_path / f"m{trial}.ckpt"
        model_io.save_checkpoint(params, path)
        back = model_io.load_checkpoint(path)
        round_trips += int(all(back.tensors[k].tobytes() == v.tobytes() for k, v in params.tensors.items())
                           and back.config == params.config)
        data = path.read_bytes()
        digest_at = data.index(b"config_digest=") + len(b"config_digest=")
        corrupt = [data[: int(c)] for c in rng.integers(1, len(data), size=20)]
        corrupt += [b"XICFM1" + data[6:], data[:6] + b"\x02" + data[7:], data + b"\x00",
                    data[:digest_at] + (b"0" if data[digest_at:digest_at + 1] != b"0" else b"1")
                    + data[digest_at + 1:]]
        for blob in corrupt:
            attempts += 1
            bad = tmp_path / "bad.ckpt"
            bad.write_bytes(blob)
            try:
                model_io.load_checkpoint(bad)
            except IntegrityError:
                rejected += 1
    verdict(10, "persistence", round_trips == 5 and rejected == attempts,
            f"round trips {round_trips}/5 corrupted files rejected {rejected}/{attempts}")

import numpy as np
import pytest

from conftest import tiny_config
from ticfm import encoder, training
from ticfm import tensor as T
from ticfm.config import init_params
from ticfm.errors import ConfigurationError, NonFiniteError, TrainingDivergenceError
from ticfm.evaluation import BaselineClassifier
from ticfm.layers import wrap
from ticfm.tensor import Tensor, gradient_check


def test_augment_deterministic_and_length(rng):
    x = rng.normal(size=50)
    a = training.augment(x, 7)
    b = training.augment(x, 7)
    for u, v in zip(a, b):
        np.testing.assert_array_equal(u, v)
        assert u.shape == (50,)


def test_augment_full_crop_without_jitter_is_identity(rng):
    x = rng.normal(size=40)
    v1, v2 = training.augment(x, 3, crop_range=(1.0, 1.0), jitter=0.0)
    np.testing.assert_allclose(v1, x, atol=1e-12)
    np.testing.assert_allclose(v2, x, atol=1e-12)


def test_info_nce_single_row_is_zero(rng):
    assert training.info_nce_loss(rng.normal(size=(1, 5)), rng.normal(size=(1, 5))).item() == 0.0


def test_info_nce_orthogonal_pair_closed_form():
    z = np.eye(2, 4)
    loss = training.info_nce_loss(z, z, temperature=1.0).item()
    assert loss == pytest.approx(-np.log(np.e / (np.e + 1)), abs=1e-12)
    assert loss == pytest.approx(0.3133, abs=1e-4)


def test_info_nce_scale_invariant_and_non_negative(rng):
    z1, z2 = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
    base = training.info_nce_loss(z1, z2).item()
    scaled = z1 * rng.uniform(0.1, 10, size=(6, 1))
    assert training.info_nce_loss(scaled, z2).item() == pytest.approx(base, abs=1e-10)
    assert base >= 0


def test_info_nce_errors(rng):
    with pytest.raises(NonFiniteError):
        training.info_nce_loss(np.zeros((2, 3)), rng.normal(size=(2, 3)))
    with pytest.raises(ConfigurationError):
        training.info_nce_loss(rng.normal(size=(2, 3)), rng.normal(size=(2, 3)), temperature=0)


def test_generator_is_deterministic():
    gen = training.GeneratorConfig(series_length=32)
    a, b = training.sample_synthetic_task(gen, 5), training.sample_synthetic_task(gen, 5)
    np.testing.assert_array_equal(a.X_context, b.X_context)
    np.testing.assert_array_equal(a.y_query, b.y_query)
    assert a.family == b.family


def test_generator_label_coverage_10k_seeds():
    gen = training.GeneratorConfig(series_length=12, context_size=(2, 6), query_size=(1, 4), modes_per_class=2)
    for seed in range(10_000):
        ep = training.sample_synthetic_task(gen, seed)
        assert set(ep.y_context.tolist()) == set(range(ep.n_classes))
        assert set(ep.y_query.tolist()) <= set(ep.y_context.tolist())


def test_generator_config_validation():
    with pytest.raises(ConfigurationError):
        training.GeneratorConfig(n_classes=(1, 3))
    with pytest.raises(ConfigurationError):
        training.GeneratorConfig(context_size=(5, 2))
    with pytest.raises(ConfigurationError):
        training.GeneratorConfig(family_weights=(0, 0, 0, 0))
    with pytest.raises(ConfigurationError):
        training.GeneratorConfig(modes_per_class=0)


def test_two_class_sine_separable_in_first_fourier_coefficient():
    gen = training.GeneratorConfig(family_weights=(1, 0, 0, 0), sine_cycles=(1, 1), noise=0.0,
                                   phase_jitter=0.0, series_length=64)
    for seed in range(5):
        ep = training.sample_synthetic_task(gen, seed, n_context=20, n_query=10, n_classes=2)
        X = np.concatenate([ep.X_context, ep.X_query])
        y = np.concatenate([ep.y_context, ep.y_query])
        c = np.fft.rfft(X, axis=1)[:, 1]
        ref = c[y == 0][0]
        side = np.real(c * np.conj(ref))
        assert (side[y == 0] > 0).all() and (side[y == 1] < 0).all()


def test_optimizer_zero_lr_leaves_weights(rng):
    p = {"w": rng.normal(size=(3, 3))}
    for kind in training.OPTIMIZERS:
        out = training.Optimizer(0.0, kind).step(p, {"w": rng.normal(size=(3, 3))})
        np.testing.assert_array_equal(out["w"], p["w"])
    with pytest.raises(ConfigurationError):
        training.Optimizer(-1.0)


def test_optimizer_clips_global_norm():
    opt = training.Optimizer(1.0, "sgd", clip=5.0)
    out = opt.step({"w": np.zeros(2)}, {"w": np.array([30.0, 40.0])})
    np.testing.assert_allclose(out["w"], [-3.0, -4.0])


def test_optimizer_warmup_scales_first_steps():
    opt = training.Optimizer(1.0, "sgd", clip=None, warmup=4)
    out = opt.step({"w": np.zeros(1)}, {"w": np.ones(1)})
    np.testing.assert_allclose(out["w"], [-0.25])


TINY_GEN = training.GeneratorConfig(series_length=32, context_size=(6, 8), query_size=(3, 4))


def test_encoder_pretraining_zero_lr_and_other_groups_untouched(tiny_params):
    res = training.pretrain_encoder(tiny_params, TINY_GEN, steps_per_epoch=2, batch_size=4, lr=0.0)
    for name, v in tiny_params.tensors.items():
        np.testing.assert_array_equal(res.params.tensors[name], v)
    assert len(res.history) == 2


def test_encoder_pretraining_reduces_loss():
    cfg = tiny_config()
    res = training.pretrain_encoder(init_params(cfg, 0), TINY_GEN, steps_per_epoch=40, batch_size=8, lr=3e-2)
    assert np.mean(res.history[-10:]) < np.mean(res.history[:10])


def test_divergence_reports_step(tiny_params, monkeypatch):
    calls = {"n": 0}
    real = training.info_nce_loss

    def flaky(*a, **k):
        calls["n"] += 1
        out = real(*a, **k)
        return T.mul(out, np.inf) if calls["n"] == 2 else out

    monkeypatch.setattr(training, "info_nce_loss", flaky)
    with pytest.raises(TrainingDivergenceError) as info:
        training.pretrain_encoder(tiny_params, TINY_GEN, steps_per_epoch=3, batch_size=4)
    assert info.value.step == 1


def test_icl_pretraining_touches_only_icl(tiny_params):
    res = training.pretrain_icl(tiny_params, steps=3, batch_size=2, context_size=(8, 16))
    for name, v in tiny_params.tensors.items():
        if not name.startswith("icl."):
            np.testing.assert_array_equal(res.params.tensors[name], v)
    assert any(not np.array_equal(res.params.tensors[n], v) for n, v in tiny_params.tensors.items()
               if n.startswith("icl."))


def test_prior_task_covers_every_class(rng):
    X, y, Xq, yq = training.sample_prior_task(rng, 16, 5, 12, 6)
    assert X.shape == (12, 16) and Xq.shape == (6, 16)
    assert set(y.tolist()) == set(range(5)) and set(yq.tolist()) <= set(range(5))


def test_adapter_training_freeze_contract(tiny_params):
    res = training.train_adapter_episodic(tiny_params, TINY_GEN, epochs=2, episodes_per_epoch=2, batch_size=2)
    for name, v in tiny_params.tensors.items():
        if not name.startswith("adapter."):
            np.testing.assert_array_equal(res.params.tensors[name], v)
    assert any(not np.array_equal(res.params.tensors[n], v) for n, v in tiny_params.tensors.items()
               if n.startswith("adapter."))


def test_adapter_training_zero_lr_reproducible_losses(tiny_params):
    res = training.train_adapter_episodic(tiny_params, TINY_GEN, epochs=3, episodes_per_epoch=2, batch_size=2,
                                          lr=0.0)
    h = np.array(res.history).reshape(3, 2)
    np.testing.assert_array_equal(h[0], h[1])
    np.testing.assert_array_equal(h[0], h[2])


def test_adapter_gradient_matches_finite_differences():
    cfg = tiny_config(model_dim=8, adapter_hidden=12, decoder_hidden=12, n_latents=3)
    params = init_params(cfg, 3)
    rng = np.random.default_rng(0)
    Z = rng.normal(size=(1, 6, cfg.embed_dim))
    y_ctx, y_q, Ks = np.array([[0, 1, 1, 0]]), np.array([[1, 0]]), np.array([2])
    frozen = wrap(params.group("icl"))
    err = gradient_check(lambda p: training.adapter_loss(p, frozen, Z, y_ctx, y_q, Ks, cfg),
                         params.group("adapter"))
    assert err <= 1e-3


def test_toy_encoder_beats_raw_one_nn():
    cfg = tiny_config(embed_dim=32, series_length=64, n_patches=8, conv_kernel=9, loc_dim=8)
    gen = training.GeneratorConfig(n_classes=(4, 4), series_length=64, context_size=(20, 20), query_size=(40, 40))
    res = training.pretrain_encoder(init_params(cfg, 0), gen, steps_per_epoch=200, batch_size=32, lr=3e-2)
    enc = res.params.group("encoder")
    emb, raw = [], []
    for s in range(100):
        ep = training.sample_synthetic_task(gen, 5000 + s)
        for store, f in ((emb, lambda X: encoder.embed(X, enc, cfg)), (raw, lambda X: X)):
            clf = BaselineClassifier("1NN").fit(f(ep.X_context), ep.y_context)
            store.append(np.mean(clf.predict(f(ep.X_query)) == ep.y_query))
    assert np.mean(emb) > np.mean(raw)

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tiny_config
from ticfm import adapter
from ticfm.config import ModelConfig, expected_shapes, init_params
from ticfm.errors import ShapeError


def test_zero_weights_give_zero_output(tiny_cfg, tiny_params, rng):
    p = {k: np.zeros_like(v) for k, v in tiny_params.group("adapter").items()}
    out = adapter.project(rng.normal(size=(3, tiny_cfg.embed_dim)), p, tiny_cfg).data
    np.testing.assert_array_equal(out, 0.0)


def test_default_dimensions():
    shapes = expected_shapes(ModelConfig())
    assert shapes["adapter.w1"] == (512, 1024)
    assert shapes["adapter.w2"] == (1024, 512)
    assert ModelConfig().adapter_dropout == 0.118


def test_batch_equals_rowwise(tiny_cfg, tiny_params, rng):
    p = tiny_params.group("adapter")
    Z = rng.normal(size=(4, tiny_cfg.embed_dim))
    batch = adapter.project(Z, p, tiny_cfg).data
    for i in range(4):
        np.testing.assert_allclose(adapter.project(Z[i], p, tiny_cfg).data, batch[i], atol=1e-12)
    assert batch.shape == (4, tiny_cfg.model_dim)


def test_pure_at_inference(tiny_cfg, tiny_params, rng):
    p = tiny_params.group("adapter")
    z = rng.normal(size=tiny_cfg.embed_dim)
    np.testing.assert_array_equal(adapter.project(z, p, tiny_cfg).data, adapter.project(z, p, tiny_cfg).data)


def test_width_mismatch(tiny_cfg, tiny_params):
    with pytest.raises(ShapeError):
        adapter.project(np.zeros(tiny_cfg.embed_dim + 1), tiny_params.group("adapter"), tiny_cfg)


# eps is negligible here so the invariance can be checked at 1e-9
@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 100.0), st.integers(0, 2**31 - 1))
def test_positive_scale_invariance(c, seed):
    cfg = tiny_config(ln_eps=1e-18)
    p = init_params(cfg, 0).group("adapter")
    z = np.random.default_rng(seed).normal(size=cfg.embed_dim)
    np.testing.assert_allclose(adapter.project(c * z, p, cfg).data, adapter.project(z, p, cfg).data, atol=1e-9)


def test_dropout_only_with_rng(tiny_cfg, tiny_params, rng):
    p = tiny_params.group("adapter")
    z = rng.normal(size=(8, tiny_cfg.embed_dim))
    a = adapter.project(z, p, tiny_cfg).data
    b = adapter.project(z, p, tiny_cfg, rng=np.random.default_rng(0)).data
    assert not np.allclose(a, b)

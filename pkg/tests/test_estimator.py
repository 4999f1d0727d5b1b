import numpy as np
import pytest
from sklearn.base import clone
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import FunctionTransformer

from ticfm import BaselineClassifier, TICFMClassifier, TICFMEmbedder, save_checkpoint
from ticfm.errors import DegenerateTaskError
from ticfm.inference import EnsembleConfig, ensemble_predict


@pytest.fixture
def data(rng):
    X = rng.normal(size=(14, 32))
    y = np.array(["b", "a", "c"] * 4 + ["a", "b"])
    return X, y, rng.normal(size=(5, 32))


def test_clone_and_params(tiny_params):
    clf = TICFMClassifier(tiny_params, n_estimators=3, temperature=0.7)
    assert clone(clf).get_params()["n_estimators"] == 3
    assert clf.set_params(random_state=4).random_state == 4


def test_predict_proba_and_labels(tiny_params, data):
    X, y, Xq = data
    clf = TICFMClassifier(tiny_params, n_estimators=3).fit(X, y)
    assert clf.classes_.tolist() == ["a", "b", "c"]
    P = clf.predict_proba(Xq)
    assert P.shape == (5, 3)
    np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_array_equal(clf.predict(Xq), clf.classes_[P.argmax(axis=1)])


def test_matches_direct_ensemble(tiny_params, data):
    X, y, Xq = data
    clf = TICFMClassifier(tiny_params, n_estimators=5, random_state=2).fit(X, y)
    H_q = clf._tokens(Xq)
    direct = ensemble_predict(clf.context_tokens_, clf.y_index_, H_q, tiny_params.group("icl"),
                              tiny_params.config, EnsembleConfig(5, 2))
    np.testing.assert_array_equal(clf.predict_proba(Xq), direct)


def test_query_chunking_does_not_change_output(tiny_params, data):
    X, y, Xq = data
    a = TICFMClassifier(tiny_params, n_estimators=2).fit(X, y).predict_proba(Xq)
    b = TICFMClassifier(tiny_params, n_estimators=2, query_batch_size=2).fit(X, y).predict_proba(Xq)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_resamples_other_lengths(tiny_params, rng):
    X, y = rng.normal(size=(6, 50)), np.array([0, 1] * 3)
    assert TICFMClassifier(tiny_params, n_estimators=1).fit(X, y).predict(rng.normal(size=(2, 50))).shape == (2,)


def test_single_class_context(tiny_params, data):
    X, _, _ = data
    with pytest.raises(DegenerateTaskError):
        TICFMClassifier(tiny_params).fit(X, np.zeros(len(X)))


def test_loads_checkpoint_path(tiny_params, data, tmp_path):
    X, y, Xq = data
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_params, path)
    a = TICFMClassifier(str(path), n_estimators=2).fit(X, y).predict_proba(Xq)
    b = TICFMClassifier(tiny_params, n_estimators=2).fit(X, y).predict_proba(Xq)
    np.testing.assert_array_equal(a, b)


def test_embedder_shapes(tiny_params, data):
    X, _, _ = data
    cfg = tiny_params.config
    assert TICFMEmbedder(tiny_params).fit(X).transform(X).shape == (14, cfg.embed_dim)
    assert TICFMEmbedder(tiny_params, project=True).fit_transform(X).shape == (14, cfg.model_dim)


def test_baseline_on_embeddings_in_pipeline(tiny_params, data):
    X, y, Xq = data
    nc = BaselineClassifier("NC", embedder=TICFMEmbedder(tiny_params)).fit(X, y)
    pipe = make_pipeline(FunctionTransformer(lambda v: v), BaselineClassifier("NC", TICFMEmbedder(tiny_params)))
    np.testing.assert_array_equal(pipe.fit(X, y).predict(Xq), nc.predict(Xq))
    assert 0.0 <= nc.score(X, y) <= 1.0

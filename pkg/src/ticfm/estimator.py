"""scikit-learn front end: ``fit`` stores the labelled context, ``predict`` runs in-context inference."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import adapter, encoder
from .config import ModelParams
from .errors import DegenerateTaskError
from .inference import EnsembleConfig, ModelPredictor, fit_class_tree, hierarchical_predict
from .preprocessing import resample_linear


def _resolve(model) -> ModelParams:
    if isinstance(model, ModelParams):
        return model
    from .model_io import load_checkpoint

    return load_checkpoint(model)


def _series(X, length: int) -> np.ndarray:
    X = check_array(X, dtype=np.float64)
    return X if X.shape[1] == length else resample_linear(X, length)


class TICFMEmbedder(TransformerMixin, BaseEstimator):
    """Frozen encoder as a transformer: series (n, T) -> embeddings (n, q).

    Parameters
    ----------
    model : ModelParams or path
        Weights, or a checkpoint file to load them from.
    project : bool, default=False
        Also apply the projection adapter, returning classifier tokens.
    """

    def __init__(self, model=None, project=False, batch_size=256):
        self.model = model
        self.project = project
        self.batch_size = batch_size

    def fit(self, X, y=None):
        self.params_ = _resolve(self.model)
        self.n_features_in_ = check_array(X).shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self)
        cfg = self.params_.config
        Z = encoder.embed(_series(X, cfg.series_length), self.params_.group("encoder"), cfg,
                          self.batch_size)
        if self.project:
            Z = adapter.project(Z, self.params_.group("adapter"), cfg).data
        return Z


class TICFMClassifier(ClassifierMixin, BaseEstimator):
    """Train-free in-context classifier for univariate series.

    ``fit`` does not update any weight: it encodes and stores the labelled
    context and builds the class tree. ``predict_proba`` classifies every
    query conditioned on that context.

    Parameters
    ----------
    model : ModelParams or path
        Pretrained weights or a checkpoint file.
    n_estimators : int, default=8
        Cyclic label-permutation ensemble members.
    temperature : float, default=1.0
        Softmax temperature applied to the averaged logits.
    random_state : int, default=0
        Seeds the ensemble offsets and the class-tree grouping.
    query_batch_size : int, default=256
        Queries per forward pass; queries never attend to one another, so
        chunking does not change the result.
    """

    def __init__(self, model=None, n_estimators=8, temperature=1.0, random_state=0,
                 query_batch_size=256):
        self.model = model
        self.n_estimators = n_estimators
        self.temperature = temperature
        self.random_state = random_state
        self.query_batch_size = query_batch_size

    def _tokens(self, X):
        cfg = self.params_.config
        Z = encoder.embed(_series(X, cfg.series_length), self.params_.group("encoder"), cfg)
        return adapter.project(Z, self.params_.group("adapter"), cfg).data

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        check_classification_targets(y)
        self.params_ = _resolve(self.model)
        self.classes_, self.y_index_ = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise DegenerateTaskError("context holds a single class")
        self.n_features_in_ = X.shape[1]
        self.context_tokens_ = self._tokens(X)
        seed = 0 if self.random_state is None else int(self.random_state)
        self.tree_ = fit_class_tree(self.y_index_, self.params_.config.c_max, seed)
        return self

    def predict_proba(self, X):
        check_is_fitted(self)
        H_q = self._tokens(X)
        seed = 0 if self.random_state is None else int(self.random_state)
        ens = EnsembleConfig(self.n_estimators, seed, self.temperature)
        K = len(self.classes_)
        out = []
        for i in range(0, len(H_q), self.query_batch_size):
            predictor = ModelPredictor(self.context_tokens_, H_q[i : i + self.query_batch_size],
                                       self.params_.group("icl"), self.params_.config, ens)
            out.append(hierarchical_predict(self.tree_, self.y_index_, predictor, K))
        return np.concatenate(out, axis=0)

    def predict(self, X):
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

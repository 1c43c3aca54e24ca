"""scikit-learn estimator wrapper around the two-tower network and its trainer."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .dataio import CorpusSplit, LabeledExample
from .evaluation import predict_scene_scores
from .features import LogMel
from .losses import LossWeights
from .model import ModelConfig, RGASCNet
from .relation import RelationMatrix, build_relation_matrix
from .trainer import TrainConfig, train


def _check_logmels(X):
    X = check_array(X, allow_nd=True, dtype=np.float32, ensure_all_finite=True)
    if X.ndim != 3:
        raise ValueError(f"expected log-mel input of shape (n_clips, frames, mels), got {X.shape}")
    return X


class RGASCClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Relation-guided scene classifier trained on scene labels plus event pseudo labels.

    ``fit(X, y, event_probs=...)`` takes log-mel clips ``X`` of shape
    (n_clips, frames, mels), scene labels ``y`` and an (n_clips, n_events)
    array of pseudo-label probabilities. The relation matrix is built from
    the fitted data unless ``relation`` is given. ``transform`` returns the
    penultimate scene-tower embedding.
    """

    def __init__(self, total_blocks=2, shared_blocks=2, channels=(16, 32), dense_dim=64, dropout_rate=0.2,
                 loss_weights=(1.0, 0.01, 0.5, 0.01), epochs=100, batch_size=64, learning_rate=0.001,
                 stop_gradient=False, predictor="scene", relation=None, random_state=0):
        self.total_blocks = total_blocks
        self.shared_blocks = shared_blocks
        self.channels = channels
        self.dense_dim = dense_dim
        self.dropout_rate = dropout_rate
        self.loss_weights = loss_weights
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.stop_gradient = stop_gradient
        self.predictor = predictor
        self.relation = relation
        self.random_state = random_state

    def fit(self, X, y, event_probs=None):
        X = _check_logmels(X)
        y = np.asarray(y)
        if len(y) != len(X):
            raise ValueError(f"X has {len(X)} clips but y has {len(y)} labels")
        weights = LossWeights.of(self.loss_weights)
        if event_probs is None:
            if weights.as_tuple()[1:] != (0.0, 0.0, 0.0):
                raise ValueError("event_probs are required unless only the scene loss is weighted")
            event_probs = np.zeros((len(X), 1))
        event_probs = check_array(event_probs, dtype=np.float64)
        if len(event_probs) != len(X):
            raise ValueError("event_probs must have one row per clip")
        self.classes_, y_idx = np.unique(y, return_inverse=True)
        k, e = len(self.classes_), event_probs.shape[1]
        examples = [LabeledExample(f"{i:08d}", LogMel(X[i]), int(y_idx[i]), event_probs[i]) for i in range(len(X))]
        if self.relation is None:
            self.relation_ = build_relation_matrix(examples, k, e)
        else:
            rel = self.relation
            self.relation_ = rel if isinstance(rel, RelationMatrix) else RelationMatrix(np.asarray(rel))
        cfg = ModelConfig(k, e, total_blocks=self.total_blocks, shared_blocks=self.shared_blocks,
                          channels=list(self.channels), dense_dim=self.dense_dim, dropout_rate=self.dropout_rate)
        tcfg = TrainConfig(epochs=self.epochs, batch_size=min(self.batch_size, len(X)),
                           learning_rate=self.learning_rate, seed=self.random_state, loss_weights=weights,
                           stop_gradient=self.stop_gradient)
        self.model_ = RGASCNet(cfg, self.random_state)
        self.model_.check_input(X.shape)
        result = train(self.model_, CorpusSplit(examples, []), self.relation_, tcfg, predictor=self.predictor)
        self.history_ = result.records
        self.input_shape_ = X.shape[1:]
        return self

    def _checked(self, X):
        check_is_fitted(self, "model_")
        X = _check_logmels(X)
        if X.shape[1:] != self.input_shape_:
            raise ValueError(f"expected clips of shape {self.input_shape_}, got {X.shape[1:]}")
        return X

    def decision_function(self, X):
        X = self._checked(X)
        return predict_scene_scores(self.model_, X, self.relation_, self.predictor, self.batch_size)

    def predict_proba(self, X):
        X = self._checked(X)
        return predict_scene_scores(self.model_, X, self.relation_, "scene", self.batch_size)

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]

    def predict_events(self, X):
        X = self._checked(X)
        return np.concatenate([self.model_.forward(X[i:i + self.batch_size], "eval").event_probs
                               for i in range(0, len(X), self.batch_size)])

    def transform(self, X):
        X = self._checked(X)
        return np.concatenate([self.model_.forward(X[i:i + self.batch_size], "eval").scene_embedding
                               for i in range(0, len(X), self.batch_size)])

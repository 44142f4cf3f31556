"""scikit-learn compatible wrappers.

``ViTEmbedder`` is a transformer: ``fit`` meta-trains the backbone episodically on
labelled base-class images and ``transform`` returns CLS embeddings.
``PrototypeClassifier`` does nearest-prototype classification on embeddings, and
``FewShotClassifier`` chains the two for support/query style use::

    emb = ViTEmbedder(preset="micro", episodes=300).fit(X_base, y_base)
    clf = FewShotClassifier(emb).fit(X_support, y_support)
    clf.predict(X_query)
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin, clone
from sklearn.utils.validation import check_is_fitted

from . import protonet
from .data import AugmentConfig, Dataset, preprocess_batch
from .sampler import EpisodeSpec
from .tensor import Tensor
from .trainer import TrainConfig, train
from .validation import check_embeddings, check_images, check_labels
from .vit import ViTConfig, ViTModel

_DTYPES = {32: np.float32, 64: np.float64}


class ViTEmbedder(TransformerMixin, BaseEstimator):
    """Vision Transformer CLS-token embedder trained with the prototypical loss.

    Parameters mirror :class:`~protovit.trainer.TrainConfig`; ``preset`` picks the
    backbone (``"small"``, ``"tiny"`` or ``"micro"``) and ``precision`` is 32 or 64.
    """

    def __init__(self, preset="micro", episodes=1000, ways=5, shots=5, queries=15, lr=1e-4,
                 weight_decay=1e-4, optimizer="decoupled", distance="squared", clip_max_norm=1.0,
                 meta_batch=1, hflip_prob=0.5, max_rotation_degrees=10.0, precision=32, seed=42):
        self.preset = preset
        self.episodes = episodes
        self.ways = ways
        self.shots = shots
        self.queries = queries
        self.lr = lr
        self.weight_decay = weight_decay
        self.optimizer = optimizer
        self.distance = distance
        self.clip_max_norm = clip_max_norm
        self.meta_batch = meta_batch
        self.hflip_prob = hflip_prob
        self.max_rotation_degrees = max_rotation_degrees
        self.precision = precision
        self.seed = seed

    def _augment(self, cfg: ViTConfig) -> AugmentConfig:
        return AugmentConfig(target_size=cfg.image_size, hflip_prob=self.hflip_prob,
                             max_rotation_degrees=self.max_rotation_degrees)

    def fit(self, X, y):
        if self.optimizer not in ("decoupled", "coupled"):
            raise ValueError(f"optimizer must be 'decoupled' or 'coupled', got {self.optimizer!r}")
        if self.precision not in _DTYPES:
            raise ValueError(f"precision must be 32 or 64, got {self.precision!r}")
        cfg = ViTConfig.preset(self.preset)
        images = check_images(X, channels=cfg.in_channels)
        labels = check_labels(y, len(images))
        model = ViTModel(cfg, seed=self.seed, dtype=_DTYPES[self.precision])
        tcfg = TrainConfig(
            episodes=self.episodes, spec=EpisodeSpec(self.ways, self.shots, self.queries),
            seed=self.seed, lr=self.lr, weight_decay=self.weight_decay,
            decoupled=self.optimizer == "decoupled", distance=self.distance,
            clip_max_norm=self.clip_max_norm, meta_batch=self.meta_batch, augment=self._augment(cfg))
        result = train(model, Dataset.from_arrays(images, labels), None, tcfg)
        self.model_ = model
        self.history_ = result.history
        self.skipped_episodes_ = result.skipped
        self.n_features_out_ = cfg.embed_dim
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        images = check_images(X, channels=self.model_.config.in_channels)
        batch = preprocess_batch(images, self._augment(self.model_.config), training=False,
                                 dtype=self.model_.dtype)
        return self.model_.embed(batch)

    def get_feature_names_out(self, input_features=None):
        check_is_fitted(self, "model_")
        return np.asarray([f"emb_{j}" for j in range(self.n_features_out_)], dtype=object)


class PrototypeClassifier(ClassifierMixin, BaseEstimator):
    """Nearest class-mean classifier on precomputed embeddings."""

    def __init__(self, distance="squared"):
        self.distance = distance

    def fit(self, X, y):
        X = check_embeddings(X)
        labels = check_labels(y, X.shape[0])
        protos = protonet.compute_prototypes(Tensor(X), labels)
        self.prototypes_ = protos.matrix.data
        self.classes_ = np.asarray(protos.labels)
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        """Negative (squared or plain) distance to every prototype, one column per class."""
        check_is_fitted(self, "prototypes_")
        X = check_embeddings(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return protonet.logits(Tensor(X), Tensor(self.prototypes_), self.distance).data

    def predict_proba(self, X):
        z = self.decision_function(X)
        z = z - z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X):
        check_is_fitted(self, "prototypes_")
        return self.classes_[protonet.predict(self.decision_function(X))]


class FewShotClassifier(ClassifierMixin, BaseEstimator):
    """Embed with ``embedder``, then classify by nearest support prototype.

    With ``prefit=True`` the embedder must already be fitted and ``fit`` only
    builds prototypes from the support images; otherwise a clone of the embedder
    is meta-trained on the same data first.
    """

    def __init__(self, embedder=None, distance="squared", prefit=True):
        self.embedder = embedder
        self.distance = distance
        self.prefit = prefit

    def fit(self, X, y):
        if self.embedder is None:
            raise ValueError("FewShotClassifier needs an embedder")
        if self.prefit:
            check_is_fitted(self.embedder, "model_")
            self.embedder_ = self.embedder
        else:
            self.embedder_ = clone(self.embedder).fit(X, y)
        self.head_ = PrototypeClassifier(self.distance).fit(self.embedder_.transform(X), y)
        self.classes_ = self.head_.classes_
        return self

    def decision_function(self, X):
        check_is_fitted(self, "head_")
        return self.head_.decision_function(self.embedder_.transform(X))

    def predict_proba(self, X):
        check_is_fitted(self, "head_")
        return self.head_.predict_proba(self.embedder_.transform(X))

    def predict(self, X):
        check_is_fitted(self, "head_")
        return self.head_.predict(self.embedder_.transform(X))

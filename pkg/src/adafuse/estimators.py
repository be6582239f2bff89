"""scikit-learn compatible wrappers.

Fusers take ``X = [z_T | z_D]``, an ``(n, 2d)`` array with the text embedding
in the first half of each row and the generated-image embedding in the second,
and ``transform`` it into ``(n, d)`` unit query rows. ``AdaptiveFusion.fit``
takes the matched target embeddings as ``y``. The retriever follows the
``fit(corpus)`` / query pattern of sklearn's neighbour estimators.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import numerics as nx
from .model import (
    DEFAULT_STATIC_WEIGHT,
    FusionConfig,
    fuse_forward_batch,
    gate_records,
    static_fusion,
)
from .retrieval import EmbeddingIndex
from .training import TrainConfig, fit_arrays


def split_pair(X, d: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Validate ``[z_T | z_D]`` rows and return the two halves."""
    X = check_array(X, dtype=[np.float32, np.float64])
    if X.shape[1] % 2:
        raise ValueError(f"expected an even number of columns ([z_T | z_D]), got {X.shape[1]}")
    half = X.shape[1] // 2
    if d is not None and half != d:
        raise ValueError(f"expected 2*{d} columns, got {X.shape[1]}")
    return X[:, :half], X[:, half:]


def pack_pair(z_T, z_D) -> np.ndarray:
    return np.hstack([np.atleast_2d(z_T), np.atleast_2d(z_D)])


class TextOnlyFusion(TransformerMixin, BaseEstimator):
    """Ignore the generated image; query with the normalised text embedding."""

    def fit(self, X, y=None):
        z_T, _ = split_pair(X)
        self.n_features_in_ = 2 * z_T.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        z_T, _ = split_pair(X, self.n_features_in_ // 2)
        return nx.l2_normalize(z_T)


class StaticFusion(TransformerMixin, BaseEstimator):
    """Fixed-weight additive fusion: ``normalize(w z_T + (1 - w) z_D)``."""

    def __init__(self, text_weight: float = DEFAULT_STATIC_WEIGHT):
        self.text_weight = text_weight

    def fit(self, X, y=None):
        z_T, _ = split_pair(X)
        if not 0.0 <= self.text_weight <= 1.0:
            raise ValueError("text_weight must lie in [0, 1]")
        self.n_features_in_ = 2 * z_T.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        z_T, z_D = split_pair(X, self.n_features_in_ // 2)
        return static_fusion(z_T, z_D, self.text_weight)


class AdaptiveFusion(TransformerMixin, BaseEstimator):
    """Gated text/image fusion with a mixture-of-experts residual.

    Trained with symmetric InfoNCE against target embeddings ``y``.

    Attributes
    ----------
    params_ : FusionParams
    loss_curve_ : list of float
        Mean training loss per epoch.
    """

    def __init__(self, d_proj=128, d_mid=32, d_hidden=64, n_experts=4, d_router=16,
                 learning_rate=1e-3, temperature=0.07, batch_size=128, epochs=20,
                 clip_norm=5.0, random_state=0):
        self.d_proj = d_proj
        self.d_mid = d_mid
        self.d_hidden = d_hidden
        self.n_experts = n_experts
        self.d_router = d_router
        self.learning_rate = learning_rate
        self.temperature = temperature
        self.batch_size = batch_size
        self.epochs = epochs
        self.clip_norm = clip_norm
        self.random_state = random_state

    def _configs(self, d: int) -> tuple[FusionConfig, TrainConfig]:
        fc = FusionConfig(d=d, d_proj=self.d_proj, d_mid=self.d_mid, d_hidden=self.d_hidden,
                          n_experts=self.n_experts, d_router=self.d_router)
        tc = TrainConfig(learning_rate=self.learning_rate, temperature=self.temperature,
                         batch_size=self.batch_size, epochs=self.epochs, clip_norm=self.clip_norm,
                         seed=int(self.random_state or 0))
        return fc, tc

    def fit(self, X, y):
        z_T, z_D = split_pair(X)
        y = check_array(y, dtype=[np.float32, np.float64])
        if y.shape != z_T.shape:
            raise ValueError(f"targets must have shape {z_T.shape}, got {y.shape}")
        fc, tc = self._configs(z_T.shape[1])
        self.params_, self.loss_curve_ = fit_arrays(z_T, z_D, y, fc, tc)
        self.n_features_in_ = X.shape[1]
        return self

    @classmethod
    def from_params(cls, params, **kwargs) -> "AdaptiveFusion":
        """Wrap already-trained parameters (e.g. a loaded checkpoint)."""
        c = params.config
        est = cls(d_proj=c.d_proj, d_mid=c.d_mid, d_hidden=c.d_hidden, n_experts=c.n_experts,
                  d_router=c.d_router, **kwargs)
        est.params_ = params
        est.loss_curve_ = []
        est.n_features_in_ = 2 * c.d
        return est

    def transform(self, X):
        check_is_fitted(self, "params_")
        z_T, z_D = split_pair(X, self.params_.config.d)
        return fuse_forward_batch(self.params_, z_T, z_D)[0]

    def gate_weights(self, X) -> np.ndarray:
        """Text weight lambda per row; the image receives ``1 - lambda``."""
        check_is_fitted(self, "params_")
        z_T, z_D = split_pair(X, self.params_.config.d)
        return fuse_forward_batch(self.params_, z_T, z_D)[1].lam

    def gate_records(self, X, sample_ids=None, rounds=None):
        check_is_fitted(self, "params_")
        z_T, z_D = split_pair(X, self.params_.config.d)
        acts = fuse_forward_batch(self.params_, z_T, z_D)[1]
        return gate_records(acts, sample_ids, rounds)

    def score(self, X, y):
        """Mean cosine between fused queries and their targets."""
        Z = self.transform(X)
        return float(np.mean(nx.rowwise_cosine(Z, check_array(y))))


class CosineRetriever(BaseEstimator):
    """Exact top-k cosine search over a corpus of unit rows."""

    def __init__(self, k: int = 10):
        self.k = k

    def fit(self, X, y=None, ids=None):
        X = check_array(X, dtype=[np.float32, np.float64])
        ids = np.arange(X.shape[0]) if ids is None else ids
        self.index_ = EmbeddingIndex(ids, X)
        self.n_features_in_ = X.shape[1]
        return self

    def top_k(self, query, k=None):
        check_is_fitted(self, "index_")
        return self.index_.top_k(query, self.k if k is None else k)

    def kneighbors(self, Q, k=None):
        """``(scores, ids)`` arrays of shape ``(n_queries, k)``."""
        check_is_fitted(self, "index_")
        Q = check_array(Q, dtype=[np.float32, np.float64])
        results = [self.top_k(q, k) for q in Q]
        return np.array([r.scores for r in results]), np.array([r.ids for r in results])

    def rank_of(self, Q, target_ids) -> np.ndarray:
        check_is_fitted(self, "index_")
        Q = check_array(Q, dtype=[np.float32, np.float64])
        return self.index_.rank_of_batch(Q, target_ids)

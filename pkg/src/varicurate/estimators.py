"""Estimator-style wrappers around the functional core.

These follow the scikit-learn conventions (constructor stores parameters
verbatim, validation happens in fit, fitted state gets a trailing
underscore) so the pieces that genuinely behave like estimators can sit
in sklearn pipelines and grid searches. Everything here delegates to the
plain functions; nothing is implemented twice.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import as_matrix
from .data import EmbeddingSet, matrix_to_embedding_set, mean_by_identity, normalize
from .errors import ParameterError
from .guidance import (
    EmbedMap,
    GuidanceConfig,
    MixtureModel,
    NoiseSchedule,
    guided_sample,
)
from .labeling import PromptBank, _batch_probs
from .refinement import _vote
from .similarity import top_k_neighbors, unit_rows


class ZeroShotLabeler(BaseEstimator):
    """Nearest-prompt classification of embeddings against one bank.

    Parameters
    ----------
    bank : PromptBank
        Labels and unit-normalized text embeddings to classify against.
    """

    def __init__(self, bank: PromptBank = None):
        self.bank = bank

    def fit(self, X=None, y=None):
        if not isinstance(self.bank, PromptBank):
            raise ParameterError("bank must be a PromptBank")
        self.labels_ = list(self.bank.labels)
        return self

    def predict_proba(self, X, X_flip=None) -> np.ndarray:
        """Flip-averaged per-label probabilities, shape (n, L).

        Without flip views the image view is used twice, which collapses
        to single-view softmax.
        """
        check_is_fitted(self, "labels_")
        X = as_matrix(X, "X")
        X_flip = X if X_flip is None else as_matrix(X_flip, "X_flip")
        return _batch_probs(X, X_flip, self.bank)

    def predict(self, X, X_flip=None) -> np.ndarray:
        probs = self.predict_proba(X, X_flip)
        winners = np.argmax(probs, axis=1)
        return np.asarray([self.labels_[w] for w in winners], dtype=object)


class NeighborLabelRefiner(BaseEstimator):
    """Majority re-vote of labels over each row's top-k cosine neighbors.

    ``label_order`` fixes the tie order for tie_rule="bank_order";
    it defaults to the sorted unique labels seen in fit.
    """

    def __init__(self, k: int = 50, tie_rule: str = "keep_original", label_order=None):
        self.k = k
        self.tie_rule = tie_rule
        self.label_order = label_order

    def fit(self, X, y):
        X = as_matrix(X, "X")
        y = np.asarray(y, dtype=object).ravel()
        if y.shape[0] != X.shape[0]:
            raise ParameterError(
                f"got {y.shape[0]} labels for {X.shape[0]} rows"
            )
        if self.tie_rule not in ("keep_original", "bank_order"):
            raise ParameterError(f"unknown tie_rule {self.tie_rule!r}")
        if self.k >= X.shape[0]:
            raise ParameterError(
                f"k={self.k} needs at least k+1 samples, got {X.shape[0]}"
            )
        order = (
            sorted(set(y.tolist()))
            if self.label_order is None
            else list(self.label_order)
        )
        unknown = set(y.tolist()) - set(order)
        if unknown:
            raise ParameterError(f"labels missing from label_order: {sorted(unknown)}")
        index = {lab: i for i, lab in enumerate(order)}
        codes = np.asarray([index[v] for v in y], dtype=np.int64)
        neighbor_idx, _ = top_k_neighbors(unit_rows(X), self.k)
        winners = _vote(codes, neighbor_idx, len(order), self.tie_rule)
        self.classes_ = np.asarray(order, dtype=object)
        self.labels_ = self.classes_[winners]
        return self

    def fit_predict(self, X, y) -> np.ndarray:
        return self.fit(X, y).labels_


class DivergenceScorer(BaseEstimator):
    """Cosine of each sample against its identity's renormalized mean."""

    def __init__(self):
        pass

    def fit(self, X, y):
        """Learn identity means from rows ``X`` grouped by identity ``y``."""
        X = as_matrix(X, "X")
        y = [str(v) for v in np.asarray(y, dtype=object).ravel()]
        if len(y) != X.shape[0]:
            raise ParameterError(f"got {len(y)} identities for {X.shape[0]} rows")
        es = normalize(matrix_to_embedding_set(X, identity_ids=y))
        self.means_ = mean_by_identity(es)
        return self

    def score_samples(self, X, y) -> np.ndarray:
        check_is_fitted(self, "means_")
        X = unit_rows(as_matrix(X, "X"))
        index = self.means_.index_of()
        y = [str(v) for v in np.asarray(y, dtype=object).ravel()]
        missing = sorted({v for v in y if v not in index})
        if missing:
            raise ParameterError(f"identities not seen in fit: {missing[:10]}")
        ref = self.means_.means[[index[v] for v in y]].astype(np.float64)
        ref = ref / np.linalg.norm(ref, axis=1)[:, None]
        return np.clip(np.einsum("ij,ij->i", X, ref), -1.0, 1.0)


class GuidedMixtureSampler(BaseEstimator):
    """Diversity-guided sampler over an orthogonal Gaussian mixture.

    fit() builds the schedule and mixture; sample() runs one guided
    trajectory per call, each with its own seed offset, and returns the
    final unit-sphere embeddings.
    """

    def __init__(
        self,
        n_components: int = 4,
        dim: int = 8,
        scale: float = 1.0,
        steps: int = 50,
        batch_size: int = 64,
        sampler: str = "ancestral",
        radius: float = 5.0,
        variance: float = 0.25,
        self_recurrence: int = 0,
        random_state: int = 0,
    ):
        self.n_components = n_components
        self.dim = dim
        self.scale = scale
        self.steps = steps
        self.batch_size = batch_size
        self.sampler = sampler
        self.radius = radius
        self.variance = variance
        self.self_recurrence = self_recurrence
        self.random_state = random_state

    def fit(self, X=None, y=None):
        self.schedule_ = NoiseSchedule.cosine(self.steps)
        self.model_ = MixtureModel.orthogonal(
            self.n_components, self.dim, radius=self.radius, variance=self.variance
        )
        self.embed_map_ = EmbedMap.sphere()
        self.n_sampled_ = 0
        return self

    def sample(self) -> np.ndarray:
        check_is_fitted(self, "model_")
        cfg = GuidanceConfig(
            scale=self.scale,
            batch_size=self.batch_size,
            self_recurrence=self.self_recurrence,
            sampler=self.sampler,
            seed=self.random_state + self.n_sampled_,
        )
        self.trajectory_ = guided_sample(
            self.schedule_, self.model_, self.embed_map_, cfg
        )
        self.n_sampled_ += 1
        return self.trajectory_.final_embeddings

    def to_embedding_set(self, prefix: str = "gen") -> EmbeddingSet:
        """Wrap the embeddings of the last sample() call as an EmbeddingSet."""
        check_is_fitted(self, "trajectory_")
        emb = self.trajectory_.final_embeddings
        run = self.n_sampled_ - 1
        ids = tuple(f"{prefix}-{run:03d}-{i:04d}" for i in range(emb.shape[0]))
        return EmbeddingSet(emb, ids)

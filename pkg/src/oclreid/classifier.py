"""Per-part ridge-regression target classifiers."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .core import ConfigError, NumericError, PartFeatures, ReIDError
from .validation import check_binary_labels, check_parts_array, check_vis


class ConfidenceUnavailableError(ReIDError):
    pass


@dataclass(frozen=True, eq=False)
class RidgeClassifier:
    W: np.ndarray
    lam: float
    trained_mask: np.ndarray

    def __post_init__(self):
        if not self.lam > 0:
            raise ConfigError(f"lambda must be positive, got {self.lam}")
        if not np.all(np.isfinite(self.W)):
            raise NumericError("non-finite ridge weights")

    def to_dict(self) -> dict:
        return {"W": self.W.tolist(), "lambda": self.lam, "trained_mask": [int(b) for b in self.trained_mask]}


@dataclass(frozen=True, eq=False)
class DesignBlock:
    """Per-part training rows: ``X[i]`` is (rows_i, C), ``y[i]`` its labels."""

    X: tuple
    y: tuple

    @classmethod
    def from_features(cls, F: np.ndarray, V: np.ndarray, labels) -> "DesignBlock":
        """Rows for part i come only from samples where part i is visible."""
        labels = np.asarray(labels, dtype=np.float64)
        Xs, ys = [], []
        for i in range(F.shape[1]):
            rows = V[:, i]
            Xs.append(F[rows, i, :])
            ys.append(labels[rows])
        return cls(tuple(Xs), tuple(ys))


def fit(block: DesignBlock, lam: float = 1.0) -> RidgeClassifier:
    if not lam > 0:
        raise ConfigError(f"lambda must be positive, got {lam}")
    n_parts = len(block.X)
    C = block.X[0].shape[1]
    W = np.zeros((n_parts, C))
    mask = np.zeros(n_parts, dtype=bool)
    for i, (Xi, yi) in enumerate(zip(block.X, block.y)):
        if len(Xi) != len(yi):
            raise ValueError(f"part {i}: {len(Xi)} rows but {len(yi)} labels")
        if len(Xi) == 0:
            continue
        if not (np.all(np.isfinite(Xi)) and np.all(np.isfinite(yi))):
            raise NumericError(f"non-finite design rows for part {i}")
        A = Xi.T @ Xi + lam * np.eye(C)
        W[i] = scipy.linalg.solve(A, Xi.T @ yi, assume_a="pos")
        mask[i] = True
    return RidgeClassifier(W, float(lam), mask)


def part_scores(clf: RidgeClassifier, F: np.ndarray) -> np.ndarray:
    """Per-part raw scores W_i . F_i for a (B, N, C) batch."""
    return np.einsum("bnc,nc->bn", F, clf.W)


def confidence_batch(clf: RidgeClassifier, F: np.ndarray, V: np.ndarray) -> np.ndarray:
    """Confidence per sample; NaN where no part is both visible and trained."""
    weight = V & clf.trained_mask[None, :]
    denom = weight.sum(axis=1)
    num = (part_scores(clf, F) * weight).sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(denom > 0, num / np.maximum(denom, 1), np.nan)


def confidence(clf: RidgeClassifier, feats: PartFeatures) -> float:
    s = confidence_batch(clf, feats.F[None], feats.vis[None])[0]
    if np.isnan(s):
        raise ConfidenceUnavailableError("no part is both visible and trained")
    return float(s)


class PartRidgeClassifier(ClassifierMixin, BaseEstimator):
    """Estimator wrapper: one ridge model per part, averaged over visible parts.

    ``X`` is a (n_samples, n_parts, C) feature array; invisible parts are
    zero rows unless ``vis`` is given. ``decision_function`` returns the
    target confidence (NaN when unavailable); ``predict`` thresholds it.
    """

    def __init__(self, alpha=1.0, threshold=0.5):
        self.alpha = alpha
        self.threshold = threshold

    def fit(self, X, y, vis=None):
        X = check_parts_array(X)
        V = check_vis(vis, X)
        y = check_binary_labels(y, X.shape[0])
        self.model_ = fit(DesignBlock.from_features(X, V, y), self.alpha)
        self.classes_ = np.array([0, 1])
        self.n_parts_ = X.shape[1]
        return self

    def decision_function(self, X, vis=None):
        check_is_fitted(self, "model_")
        X = check_parts_array(X, self.n_parts_)
        return confidence_batch(self.model_, X, check_vis(vis, X))

    def predict(self, X, vis=None):
        s = self.decision_function(X, vis)
        return np.where(np.nan_to_num(s, nan=-np.inf) > self.threshold, 1, 0)

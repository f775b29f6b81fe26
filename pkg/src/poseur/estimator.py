"""scikit-learn style wrapper around the training loop.

``X`` is a stack of already-cropped patches ``[N, 3, H, W]`` and ``y`` the
keypoints normalized to the patch, ``[N, K, 2]``.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .config import RunConfig
from .errors import ContractViolation, EmptyInputError
from .likelihood import keypoint_score
from .training import Samples, predict_normalized, train


def check_images(X, input_size=None):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[1] != 3:
        raise ContractViolation(f"expected images [N, 3, H, W], got shape {X.shape}")
    if len(X) == 0:
        raise EmptyInputError("no images given")
    if input_size is not None and tuple(X.shape[2:]) != tuple(input_size):
        raise ContractViolation(f"images are {X.shape[2:]}, model expects {tuple(input_size)}")
    if not np.all(np.isfinite(X)):
        raise ContractViolation("images contain NaN or infinite values")
    return X


def check_keypoints(y, n, num_keypoints=None):
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 3 or y.shape[-1] != 2 or len(y) != n:
        raise ContractViolation(f"expected keypoints [{n}, K, 2], got shape {y.shape}")
    if num_keypoints is not None and y.shape[1] != num_keypoints:
        raise ContractViolation(f"expected {num_keypoints} keypoints, got {y.shape[1]}")
    if not np.all(np.isfinite(y)):
        raise ContractViolation("keypoints contain NaN or infinite values")
    return y


class PoseurEstimator(BaseEstimator):
    """Keypoint regressor with Laplace uncertainty.

    Hyperparameters not exposed here come from ``config`` (a
    :class:`RunConfig`, defaults when ``None``).
    """

    def __init__(
        self,
        embed_dim=32,
        decoder_layers=2,
        heads=4,
        points=4,
        mode="flow",
        lam=1.0,
        noisy_references=True,
        aux_loss=True,
        lr=1e-3,
        weight_decay=1e-4,
        batch_size=16,
        steps=3000,
        score_a=0.2,
        seed=0,
        config=None,
    ):
        self.embed_dim = embed_dim
        self.decoder_layers = decoder_layers
        self.heads = heads
        self.points = points
        self.mode = mode
        self.lam = lam
        self.noisy_references = noisy_references
        self.aux_loss = aux_loss
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.steps = steps
        self.score_a = score_a
        self.seed = seed
        self.config = config

    def _resolve(self, input_size, num_keypoints):
        base = self.config or RunConfig()
        own = {k: v for k, v in self.get_params(deep=False).items() if k != "config"}
        return base.replace(input_size=list(input_size), num_keypoints=num_keypoints, **own)

    def fit(self, X, y):
        X = check_images(X)
        y = check_keypoints(y, len(X))
        self.config_ = self._resolve(X.shape[2:], y.shape[1])
        samples = Samples(X, y, [None] * len(X), [None] * len(X))
        self.model_, self.history_ = train(self.config_, samples)
        self.n_keypoints_ = y.shape[1]
        self.input_size_ = tuple(X.shape[2:])
        return self

    def predict_dist(self, X):
        """Location ``mu`` and scale ``b`` per keypoint, both ``[N, K, 2]``."""
        check_is_fitted(self, "model_")
        X = check_images(X, self.input_size_)
        return predict_normalized(self.model_, X)

    def predict(self, X):
        return self.predict_dist(X)[0]

    def predict_scores(self, X):
        """Per-keypoint confidence ``[N, K]`` from the predicted scales."""
        return keypoint_score(self.predict_dist(X)[1], a=self.score_a)

    def score(self, X, y):
        """Negative mean absolute error in normalized patch units (higher is better)."""
        mu = self.predict(X)
        y = check_keypoints(y, len(mu), self.n_keypoints_)
        return -float(np.mean(np.abs(mu - y)))

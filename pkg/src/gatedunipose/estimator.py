"""scikit-learn style wrappers: a keypoint regressor and a heatmap codec transformer."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import tensor as T
from .codec import DEFAULT_SIGMA, DEFAULT_STRIDE, decode_batch, encode_batch
from .model import HEATMAP_STRIDE, ModelConfig, build_model
from .training import HeatmapTrainer, TrainConfig, pck
from .validation import check_heatmaps, check_images, check_keypoints


class GatedUniPoseRegressor(BaseEstimator):
    """Top-down keypoint regressor: images [N, 3, H, W] -> keypoints [N, J, 3].

    ``fit`` builds the network from ``preset`` sized to the data and trains it
    with Adam on Gaussian heatmap targets. ``predict`` returns (x, y, confidence)
    in input pixels. ``score`` is PCK at ``pck_threshold`` pixels.
    """

    def __init__(self, preset="toy", use_gconv=True, use_glace=True, use_dysample=True,
                 steps=300, batch_size=16, learning_rate=1e-3, sigma=DEFAULT_SIGMA,
                 pck_threshold=2.0, precision="f32", random_state=0):
        self.preset = preset
        self.use_gconv = use_gconv
        self.use_glace = use_glace
        self.use_dysample = use_dysample
        self.steps = steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.sigma = sigma
        self.pck_threshold = pck_threshold
        self.precision = precision
        self.random_state = random_state

    def _model_config(self, input_size, joints) -> ModelConfig:
        return ModelConfig.preset(
            self.preset, input_size=tuple(input_size), joints=joints, use_gconv=self.use_gconv,
            use_glace=self.use_glace, use_dysample=self.use_dysample, seed=self.random_state).validate()

    def fit(self, X, y):
        X = check_images(X)
        y = check_keypoints(y, n_samples=X.shape[0])
        config = self._model_config(X.shape[2:], y.shape[1])
        train = TrainConfig(steps=self.steps, batch_size=self.batch_size, lr=self.learning_rate,
                            sigma=self.sigma, pck_threshold=self.pck_threshold)
        with T.precision(self.precision):
            self.model_ = build_model(config)
            trainer = HeatmapTrainer(self.model_, X, y, train, order_seed=self.random_state)
            result = trainer.run()
        self.loss_curve_ = result.losses
        self.input_size_ = tuple(X.shape[2:])
        self.n_joints_ = y.shape[1]
        return self

    def predict_heatmaps(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_images(X, self.input_size_)
        with T.precision(self.precision):
            return np.concatenate([self.model_.predict(X[i:i + 32]) for i in range(0, len(X), 32)])

    def predict(self, X) -> np.ndarray:
        return decode_batch(self.predict_heatmaps(X), HEATMAP_STRIDE)[..., :3]

    def score(self, X, y) -> float:
        y = check_keypoints(y, n_samples=len(X), joints=getattr(self, "n_joints_", None))
        return pck(self.predict(X), y, self.pck_threshold)


class HeatmapEncoder(TransformerMixin, BaseEstimator):
    """Keypoints [N, J, 2|3] <-> Gaussian heatmaps [N, J, h, w]."""

    def __init__(self, heatmap_size=(64, 48), sigma=DEFAULT_SIGMA, stride=DEFAULT_STRIDE, refine="parabolic"):
        self.heatmap_size = heatmap_size
        self.sigma = sigma
        self.stride = stride
        self.refine = refine

    def fit(self, X, y=None):
        self.n_joints_ = check_keypoints(X).shape[1]
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "n_joints_")
        X = check_keypoints(X, joints=self.n_joints_)
        return encode_batch(X, tuple(self.heatmap_size), self.sigma, self.stride)

    def inverse_transform(self, H) -> np.ndarray:
        """Decoded (x, y, confidence) per joint."""
        check_is_fitted(self, "n_joints_")
        H = check_heatmaps(H, self.n_joints_)
        return decode_batch(H, self.stride, self.refine)[..., :3]

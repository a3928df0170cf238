"""scikit-learn style wrappers.

Pair batches are arrays of shape N x 2 x H x W in [0, 1]: channel 0 is the
visible image, channel 1 the (misaligned) thermal image.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import autodiff as ad
from . import data as vdata
from . import metrics as vmetrics
from . import spatial
from .autodiff import Tensor
from .training import TrainConfig, TrainState, fit_arrays


def check_pairs(X, image_size: int | None = None) -> np.ndarray:
    """Validate an N x 2 x H x W pair batch with values in [0, 1]; returns float64."""
    X = check_array(X, allow_nd=True, dtype=np.float64)
    if X.ndim != 4 or X.shape[1] != 2:
        raise ValueError(f"expected N x 2 x H x W pairs (visible, thermal), got shape {X.shape}")
    if image_size is not None and X.shape[2:] != (image_size, image_size):
        raise ValueError(f"pairs are {X.shape[2]}x{X.shape[3]}, model expects {image_size}x{image_size}")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError(f"pixel values must lie in [0, 1], got range [{X.min():.4g}, {X.max():.4g}]")
    return X


def check_images(X) -> np.ndarray:
    """Validate an N x H x W grayscale batch; returns float64."""
    X = check_array(X, allow_nd=True, dtype=np.float64)
    if X.ndim != 3:
        raise ValueError(f"expected N x H x W images, got shape {X.shape}")
    return X


def stack_pairs(visible, thermal) -> np.ndarray:
    visible, thermal = np.asarray(visible), np.asarray(thermal)
    if visible.shape != thermal.shape:
        raise ValueError(f"visible {visible.shape} and thermal {thermal.shape} differ")
    return np.stack([visible, thermal], axis=1)


class VistaMorphRegistration(BaseEstimator, TransformerMixin):
    """Unsupervised visible/thermal registration.

    ``fit`` trains both translation GANs and the spatial transformer on
    unlabeled pairs; ``predict`` returns one affine theta per pair and
    ``transform`` the registered thermal images. Any ``TrainConfig`` field
    not exposed here can be set through ``config``.
    """

    def __init__(self, steps=2000, batch_size=8, lr_generator=2e-4, lr_stn=2e-4, lr_discriminator=2e-4,
                 lambda_l1=100.0, lambda_cyc=10.0, lambda_theta=0.01, seed=0, config=None):
        self.steps = steps
        self.batch_size = batch_size
        self.lr_generator = lr_generator
        self.lr_stn = lr_stn
        self.lr_discriminator = lr_discriminator
        self.lambda_l1 = lambda_l1
        self.lambda_cyc = lambda_cyc
        self.lambda_theta = lambda_theta
        self.seed = seed
        self.config = config

    def train_config(self, image_size: int | None = None) -> TrainConfig:
        d = dict(self.config or {})
        for k in ("steps", "batch_size", "lr_generator", "lr_stn", "lr_discriminator", "lambda_l1",
                  "lambda_cyc", "lambda_theta", "seed"):
            d[k] = getattr(self, k)
        if image_size is not None:
            d["image_size"] = image_size
        return TrainConfig.from_dict(d)

    def fit(self, X, y=None, callback=None):
        X = check_pairs(X)
        if X.shape[2] != X.shape[3]:
            raise ValueError(f"images must be square, got {X.shape[2]}x{X.shape[3]}")
        cfg = self.train_config(X.shape[2])
        self.state_ = fit_arrays(X[:, 0], X[:, 1], cfg, log_every=0, callback=callback)
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def _register(self, X):
        check_is_fitted(self, "state_")
        model = self.state_.model
        X = check_pairs(X, model.config.image_size)
        dt = ad.get_default_dtype()
        A = vdata.to_network(X[:, :1]).astype(dt)
        B = X[:, 1:].astype(dt)
        with ad.no_grad():
            theta = model.predict_theta(Tensor(A), model.flow2_t2v(Tensor(vdata.to_network(B).astype(dt)))).data
            reg = spatial.warp(Tensor(B), Tensor(theta)).data
        return theta.astype(np.float64), np.clip(reg[:, 0].astype(np.float64), 0.0, 1.0)

    def predict(self, X) -> np.ndarray:
        """Affine parameters ``[a, b, tx, c, d, ty]`` per pair, N x 6."""
        return self._register(X)[0]

    def transform(self, X) -> np.ndarray:
        """Registered thermal images, N x H x W in [0, 1]."""
        return self._register(X)[1]

    def score(self, X, y=None) -> float:
        """Mean edge-map NCC between visible and registered thermal."""
        X = check_pairs(X)
        reg = self.transform(X)
        return float(np.mean([vmetrics.registration_scores(v, r)["ncc_edges"] for v, r in zip(X[:, 0], reg)]))

    def save(self, path):
        check_is_fitted(self, "state_")
        return self.state_.save(path)

    @classmethod
    def load(cls, path) -> "VistaMorphRegistration":
        state = TrainState.load(path)
        c = state.config.to_dict()
        named = {k: c.pop(k) for k in ("steps", "batch_size", "lr_generator", "lr_stn", "lr_discriminator",
                                      "lambda_l1", "lambda_cyc", "lambda_theta", "seed")}
        est = cls(**named, config=c)
        est.state_ = state
        est.n_features_in_ = 2 * state.config.image_size ** 2
        return est


class ThresholdCropper(BaseEstimator, TransformerMixin):
    """Batch form of ``data.threshold_crop``; stateless."""

    def __init__(self, threshold=0.2, min_component=16, out_size=None):
        self.threshold = threshold
        self.min_component = min_component
        self.out_size = out_size

    def fit(self, X, y=None):
        check_images(X)
        return self

    def transform(self, X) -> np.ndarray:
        X = check_images(X)
        return np.stack([vdata.threshold_crop(x, self.threshold, self.min_component, self.out_size) for x in X])


class EdgeMapTransformer(BaseEstimator, TransformerMixin):
    """Morphological-gradient edge maps of an N x H x W batch; stateless."""

    def __init__(self, radius=1):
        self.radius = radius

    def fit(self, X, y=None):
        check_images(X)
        return self

    def transform(self, X) -> np.ndarray:
        X = check_images(X)
        return np.stack([vmetrics.edge_map(x, self.radius) for x in X])

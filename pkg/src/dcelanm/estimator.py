"""scikit-learn style wrappers around the segmenter and the preprocessing."""

from __future__ import annotations

import dataclasses

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .config import TrainConfig
from .data import SegSample, pad_to_square_resize
from .network import DCELANMNet, NetworkConfig
from .objective import metrics
from .rng import Rng
from .training import predict_proba, train


def check_images(X, name: str = "X") -> np.ndarray:
    """Validate a [B,3,H,W] float batch in [0,1]."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[1] != 3:
        raise ValueError(f"{name} must have shape [B,3,H,W], got {list(X.shape)}")
    if X.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    if not np.isfinite(X).all():
        raise ValueError(f"{name} contains non-finite values")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return X


def check_masks(y, X: np.ndarray, name: str = "y") -> np.ndarray:
    """Validate binary [B,1,H,W] masks matching ``X``."""
    y = np.asarray(y, dtype=np.float32)
    if y.ndim == 3:
        y = y[:, None]
    if y.shape != (X.shape[0], 1) + X.shape[2:]:
        raise ValueError(f"{name} must have shape {[X.shape[0], 1, *X.shape[2:]]}, got {list(y.shape)}")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError(f"{name} must be binary")
    return y


def check_is_fitted(est, attr: str = "net_") -> None:
    if getattr(est, attr, None) is None:
        raise NotFittedError(f"{type(est).__name__} is not fitted; call fit() first")


class PadResize(TransformerMixin, BaseEstimator):
    """Stateless transformer: pad each image to a square, resize to ``side``."""

    def __init__(self, side: int = 256):
        self.side = side

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        return np.stack([pad_to_square_resize(SegSample(x, None), self.side).image for x in X])


class DCELANMSegmenter(BaseEstimator):
    """Binary segmenter with ``fit`` / ``predict_proba`` / ``predict`` / ``score``.

    Inputs are canonical square batches whose side matches ``input_side``.
    ``network`` supplies the remaining architecture fields; the explicit
    arguments override it.
    """

    def __init__(self, network: NetworkConfig | None = None, block_kind: str = "dcelan", use_mae: bool = True, mask_ratio: float = 0.75,
                 input_side: int = 256, lr: float = 1e-4, epochs: int = 500, batch: int = 8,
                 micro_batch: int = 2, threshold: float = 0.5, target_dice: float = 0.0, seed: int = 0):
        self.network = network
        self.block_kind = block_kind
        self.use_mae = use_mae
        self.mask_ratio = mask_ratio
        self.input_side = input_side
        self.lr = lr
        self.epochs = epochs
        self.batch = batch
        self.micro_batch = micro_batch
        self.threshold = threshold
        self.target_dice = target_dice
        self.seed = seed

    def _configs(self):
        net_cfg = dataclasses.replace(self.network or NetworkConfig(), block_kind=self.block_kind,
                                      use_mae=self.use_mae, mask_ratio=self.mask_ratio,
                                      input_side=self.input_side)
        names = {f.name for f in dataclasses.fields(TrainConfig)}
        train_cfg = TrainConfig(**{k: v for k, v in self.get_params().items() if k in names})
        return net_cfg, train_cfg

    def fit(self, X, y):
        X = check_images(X)
        y = check_masks(y, X)
        if X.shape[2:] != (self.input_side, self.input_side):
            raise ValueError(f"X must be {self.input_side}x{self.input_side}; use PadResize first")
        net_cfg, train_cfg = self._configs()
        self.net_ = DCELANMNet(net_cfg, Rng(self.seed))
        samples = [SegSample(x, m, f"s{i}") for i, (x, m) in enumerate(zip(X, y))]
        self.history_ = train(self.net_, samples, train_cfg).history
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self)
        return predict_proba(self.net_, check_images(X))

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X) >= self.threshold).astype(np.uint8)

    def score(self, X, y) -> float:
        """Mean Dice at ``threshold``."""
        X = check_images(X)
        return metrics(self.predict_proba(X), check_masks(y, X), self.threshold).mDice

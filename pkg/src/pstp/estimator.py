"""scikit-learn compatible front end.

``PSTPClassifier`` takes sequences of :class:`~pstp.features.FeatureBundle`
as ``X``.  Labels default to each bundle's ``answer``; an explicit ``y``
overrides them.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from pstp.config import ModelConfig, TrainConfig
from pstp.errors import DataError
from pstp.features import FeatureBundle, check_compatible
from pstp.model import PSTPNet
from pstp.training import Metrics, evaluate, predict_batches, train


def check_bundles(X, cfg: ModelConfig | None = None) -> list[FeatureBundle]:
    """Return ``X`` as a list of validated bundles with identical dimensions."""
    if isinstance(X, FeatureBundle):
        raise DataError("expected a sequence of FeatureBundle, got a single bundle")
    bundles = list(X)
    if not bundles:
        raise DataError("found an empty sequence of bundles")
    for b in bundles:
        if not isinstance(b, FeatureBundle):
            raise DataError(f"expected FeatureBundle items, got {type(b).__name__}")
    dims = bundles[0].dims
    for b in bundles:
        if b.dims != dims:
            raise DataError(f"{b.video_id}: dims {b.dims} differ from {dims}")
    if cfg is not None:
        check_compatible(dims, cfg)
    return bundles


def _with_labels(bundles: list[FeatureBundle], y) -> list[FeatureBundle]:
    if y is None:
        return bundles
    y = np.asarray(y)
    if y.shape != (len(bundles),):
        raise DataError(f"y has shape {y.shape}, expected ({len(bundles)},)")
    out = []
    for b, label in zip(bundles, y):
        if int(label) == b.answer:
            out.append(b)
        else:
            clone = FeatureBundle(**{**b.__dict__, "answer": int(label)})
            clone.validate()
            out.append(clone)
    return out


class PSTPClassifier(ClassifierMixin, BaseEstimator):
    """Answer classifier over precomputed audio/visual/question features.

    Parameters
    ----------
    model_config : ModelConfig, optional
        Architecture; inferred from the first training bundle when omitted
        (selection sizes then default to ``min(7, K)`` and ``min(20, M)``).
    lr, lr_decay, decay_every, batch_size, epochs, seed, precision
        Forwarded to :class:`~pstp.config.TrainConfig`.
    """

    def __init__(self, model_config: ModelConfig | None = None, lr: float = 1e-4,
                 lr_decay: float = 0.1, decay_every: int = 10, batch_size: int = 64,
                 epochs: int = 30, seed: int = 0, precision: str = "float32"):
        self.model_config = model_config
        self.lr = lr
        self.lr_decay = lr_decay
        self.decay_every = decay_every
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed
        self.precision = precision

    def _train_config(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, lr_decay=self.lr_decay, decay_every=self.decay_every,
                           batch_size=self.batch_size, epochs=self.epochs, seed=self.seed,
                           precision=self.precision)

    def _resolve_config(self, bundles: list[FeatureBundle]) -> ModelConfig:
        if self.model_config is not None:
            return self.model_config
        d = bundles[0].dims
        return ModelConfig(K=d["K"], T=d["T"], M=d["M"], D=d["D"], D_a=d["D_a"], C=d["C"],
                           top_k=min(7, d["K"]), top_m=min(20, d["M"]),
                           heads=4 if d["D"] % 4 == 0 else 1)

    def fit(self, X: Sequence[FeatureBundle], y=None, X_val=None):
        tcfg = self._train_config()
        bundles = _with_labels(check_bundles(X), y)
        cfg = self._resolve_config(bundles)
        check_compatible(bundles[0].dims, cfg)
        val = check_bundles(X_val, cfg) if X_val is not None else None
        self.model_ = PSTPNet(cfg, seed=self.seed, dtype=tcfg.dtype)
        result = train(self.model_, bundles, tcfg, val_set=val)
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        self.classes_ = np.arange(cfg.C)
        self.config_ = cfg
        return self

    def _forward_all(self, X):
        check_is_fitted(self, "model_")
        bundles = check_bundles(X, self.config_)
        return bundles, list(predict_batches(self.model_, bundles))

    def decision_function(self, X) -> np.ndarray:
        _, results = self._forward_all(X)
        return np.concatenate([r.logits.data for _, r in results])

    def predict_proba(self, X) -> np.ndarray:
        _, results = self._forward_all(X)
        return np.concatenate([r.probs.data for _, r in results])

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self.classes_[self.predict_proba(X).argmax(axis=1)]

    def selections(self, X) -> list[dict]:
        """Per-sample kept segment/patch indices and their attention weights."""
        _, results = self._forward_all(X)
        return [r.trace.sample(i) for _, r in results for i in range(len(r.trace.segment_indices))]

    def evaluate(self, X) -> Metrics:
        check_is_fitted(self, "model_")
        return evaluate(self.model_, check_bundles(X, self.config_))

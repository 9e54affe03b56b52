"""Estimator-style API: fit/transform pretraining and fit/predict adaptation.

Both classes follow the scikit-learn conventions (constructor arguments
stored verbatim, ``get_params``/``set_params``, learned state in trailing-
underscore attributes) without importing scikit-learn, so they compose with
pipelines and model-selection utilities that duck-type estimators.
"""

from __future__ import annotations

import inspect

import numpy as np

from .checkpoint import clone_backbone, load_model
from .finetune import (
    PretrainConfig,
    Strategy,
    attach_head,
    predict as predict_windows,
    pretrain,
    select_trainable,
    softmax_cross_entropy,
)
from .model import ModelConfig, SensorTransformer
from .numerics import Rng, mean_rows
from .peft import LoraConfig, wrap_model


class ValidationError(ValueError):
    """Input arrays do not form valid sensor windows or labels."""


def check_windows(X, window_len: int | None = None,
                  channels: int | None = None) -> np.ndarray:
    """Coerce to a finite (n, L, C) float64 array; single windows gain an axis."""
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None, ...]
    if arr.ndim != 3 or arr.shape[0] == 0:
        raise ValidationError(f"expected (n, L, C) windows, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("windows contain NaN or infinity")
    if window_len is not None and arr.shape[1] != window_len:
        raise ValidationError(f"windows must have {window_len} samples, got {arr.shape[1]}")
    if channels is not None and arr.shape[2] != channels:
        raise ValidationError(f"windows must have {channels} channels, got {arr.shape[2]}")
    return arr


def check_labels(y, n_windows: int) -> np.ndarray:
    arr = np.asarray(y)
    if arr.shape != (n_windows,):
        raise ValidationError(f"expected {n_windows} labels, got shape {arr.shape}")
    return arr


class _ParamsMixin:
    """scikit-learn parameter protocol derived from the constructor signature."""

    @classmethod
    def _param_names(cls):
        sig = inspect.signature(cls.__init__)
        return [name for name in sig.parameters if name != "self"]

    def get_params(self, deep: bool = True) -> dict:
        return {name: getattr(self, name) for name in self._param_names()}

    def set_params(self, **params):
        valid = set(self._param_names())
        for key, value in params.items():
            if key not in valid:
                raise ValidationError(f"unknown parameter {key!r} for {type(self).__name__}")
            setattr(self, key, value)
        return self


class WindowEncoder(_ParamsMixin):
    """Masked-reconstruction pretrainer; transform() yields pooled embeddings."""

    def __init__(self, embed_dim: int = 32, ffn_hidden: int = 64, n_heads: int = 4,
                 n_enc_layers: int = 2, n_dec_layers: int = 2, patch_len: int = 16,
                 mask_ratio: float = 0.75, epochs: int = 15, batch_size: int = 16,
                 learning_rate: float = 1e-3, seed: int = 0):
        self.embed_dim = embed_dim
        self.ffn_hidden = ffn_hidden
        self.n_heads = n_heads
        self.n_enc_layers = n_enc_layers
        self.n_dec_layers = n_dec_layers
        self.patch_len = patch_len
        self.mask_ratio = mask_ratio
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.seed = seed

    def _config(self, window_len: int, channels: int) -> ModelConfig:
        return ModelConfig(
            window_len=window_len, channels=channels, patch_len=self.patch_len,
            embed_dim=self.embed_dim, ffn_hidden=self.ffn_hidden,
            n_heads=self.n_heads, n_enc_layers=self.n_enc_layers,
            n_dec_layers=self.n_dec_layers, mask_ratio=self.mask_ratio)

    def fit(self, X, y=None):
        windows = check_windows(X)
        config = self._config(windows.shape[1], windows.shape[2])
        self.model_ = SensorTransformer(config, Rng(self.seed).child("init"))
        self.pretrain_log_ = pretrain(
            self.model_, list(windows),
            PretrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                           learning_rate=self.learning_rate, seed=self.seed))
        return self

    def transform(self, X) -> np.ndarray:
        if not hasattr(self, "model_"):
            raise ValidationError("fit the encoder before calling transform")
        cfg = self.model_.config
        windows = check_windows(X, cfg.window_len, cfg.channels)
        return np.stack([mean_rows(self.model_.encode(w)).data[0] for w in windows])

    def fit_transform(self, X, y=None) -> np.ndarray:
        return self.fit(X).transform(X)


class ActivityClassifier(_ParamsMixin):
    """Window classifier over a pretrained backbone, one adaptation strategy each.

    ``backbone`` may be a fitted :class:`WindowEncoder`, a model checkpoint
    path, or None to train a fresh backbone head-only-style from random
    initialization (useful for quick baselines).
    """

    def __init__(self, strategy: str = "lora", rank: int = 8, alpha: float = 16.0,
                 epochs: int = 20, batch_size: int = 16, learning_rate: float = 1e-3,
                 dropout_rate: float = 0.1, backbone=None, seed: int = 0):
        self.strategy = strategy
        self.rank = rank
        self.alpha = alpha
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.dropout_rate = dropout_rate
        self.backbone = backbone
        self.seed = seed

    def _resolve_backbone(self, windows: np.ndarray) -> SensorTransformer:
        if isinstance(self.backbone, WindowEncoder):
            if not hasattr(self.backbone, "model_"):
                raise ValidationError("backbone WindowEncoder is not fitted")
            return clone_backbone(self.backbone.model_)
        if isinstance(self.backbone, SensorTransformer):
            return clone_backbone(self.backbone)
        if isinstance(self.backbone, (str, bytes)) or hasattr(self.backbone, "__fspath__"):
            return load_model(self.backbone)
        if self.backbone is None:
            config = ModelConfig.small(window_len=windows.shape[1],
                                       channels=windows.shape[2])
            return SensorTransformer(config, Rng(self.seed).child("backbone"))
        raise ValidationError(f"unsupported backbone {type(self.backbone).__name__}")

    def fit(self, X, y):
        from .finetune import AdamState, adam_step, _batch_logits, _zero_grads

        windows = check_windows(X)
        y = check_labels(y, windows.shape[0])
        self.classes_, encoded = np.unique(y, return_inverse=True)
        strategy = Strategy(self.strategy)
        model = self._resolve_backbone(windows)
        rng = Rng(self.seed).child("adapt")
        attach_head(model, rng, n_classes=len(self.classes_),
                    dropout_rate=self.dropout_rate)
        if strategy in (Strategy.LORA, Strategy.QLORA):
            wrap_model(model, LoraConfig(rank=self.rank, alpha=self.alpha),
                       quantize=strategy is Strategy.QLORA, rng=rng.child("wrap"))
        trainable = select_trainable(model, strategy)

        shuffle_rng = Rng(self.seed).child("shuffle")
        dropout_rng = Rng(self.seed).child("dropout")
        state = AdamState()
        losses = []
        for _ in range(self.epochs):
            order = shuffle_rng.permutation(len(windows))
            epoch_loss = 0.0
            for lo in range(0, len(order), self.batch_size):
                batch = order[lo:lo + self.batch_size]
                logits = _batch_logits(model, [windows[i] for i in batch],
                                       training=True, rng=dropout_rng)
                loss = softmax_cross_entropy(logits, encoded[batch])
                _zero_grads(trainable)
                loss.backward()
                adam_step(trainable, state, lr=self.learning_rate)
                epoch_loss += loss.item() * len(batch)
            losses.append(epoch_loss / len(order))
        self.model_ = model
        self.train_losses_ = losses
        return self

    def predict(self, X) -> np.ndarray:
        if not hasattr(self, "model_"):
            raise ValidationError("fit the classifier before calling predict")
        cfg = self.model_.config
        windows = check_windows(X, cfg.window_len, cfg.channels)
        return self.classes_[predict_windows(self.model_, list(windows))]

    def score(self, X, y) -> float:
        windows = check_windows(X)
        y = check_labels(y, windows.shape[0])
        return float((self.predict(windows) == y).mean())

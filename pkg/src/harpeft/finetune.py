"""Classification head, adaptation strategies and the optimization loops.

Four strategies share one loop: FULL updates every parameter of the
classifier-path model, FROZEN_HEAD trains only the head over a fixed
backbone, and LORA / QLORA train the adapters plus the head of a wrapped
model. The trainable/frozen partition is owned by :func:`select_trainable`;
the optimizer and the tape never touch anything outside the selected set.
"""

from __future__ import annotations

import enum
import json
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import DatasetBundle, split_train_eval
from .model import Linear, SensorTransformer
from .numerics import (
    Matrix,
    Parameter,
    Rng,
    batch_norm_eval,
    batch_norm_train,
    concat_rows,
    dropout,
    gelu,
    layer_norm,
    mean_rows,
    scale,
    softmax_cross_entropy,
)
from .peft import BufferTracker, LoraConfig, iter_adapters, wrap_model


class Strategy(enum.Enum):
    FULL = "full"
    LORA = "lora"
    QLORA = "qlora"
    FROZEN_HEAD = "frozen_head"


class TrainError(ValueError):
    """Invalid training configuration or strategy/model mismatch."""


class OptimizerError(RuntimeError):
    """Non-finite gradients reached the optimizer."""


@dataclass(frozen=True)
class TrainConfig:
    strategy: Strategy = Strategy.FULL
    epochs: int = 50
    batch_size: int = 16
    learning_rate: float = 1e-3
    seed: int = 0
    train_fraction: float = 0.70
    lora: LoraConfig | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise TrainError("epochs must be >= 1")
        if not 0.0 < self.train_fraction < 1.0:
            raise TrainError("train_fraction must be in (0, 1)")
        needs_lora = self.strategy in (Strategy.LORA, Strategy.QLORA)
        if needs_lora != (self.lora is not None):
            raise TrainError("lora config must be present exactly for LORA/QLORA")


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 15
    batch_size: int = 16
    learning_rate: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise TrainError("epochs must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    val_accuracy: float | None
    val_macro_f1: float | None
    seconds: float


@dataclass
class TrainLog:
    """One record per epoch plus the run's wall clock and resource report."""

    epochs: list[EpochRecord] = field(default_factory=list)
    wall_seconds: float = 0.0
    resource: object | None = None  # evaluate.ResourceReport

    def losses(self) -> list[float]:
        return [e.loss for e in self.epochs]

    def to_json_lines(self) -> str:
        lines = []
        for e in self.epochs:
            lines.append(json.dumps({
                "epoch": e.epoch, "loss": e.loss, "val_accuracy": e.val_accuracy,
                "val_macro_f1": e.val_macro_f1, "seconds": e.seconds}, sort_keys=True))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_json_lines(cls, text: str) -> "TrainLog":
        log = cls()
        for line in text.splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            log.epochs.append(EpochRecord(
                epoch=rec["epoch"], loss=rec["loss"],
                val_accuracy=rec.get("val_accuracy"),
                val_macro_f1=rec.get("val_macro_f1"),
                seconds=rec.get("seconds", 0.0)))
        log.wall_seconds = sum(e.seconds for e in log.epochs)
        return log


class ClassifierHead:
    """Mean-pool classifier: linear, batch normalization, GELU, dropout, linear.

    Batch statistics drive normalization during training (with running
    averages updated for evaluation); a single-sample batch falls back to
    layer normalization, which batch statistics cannot define.
    """

    BN_MOMENTUM = 0.1

    def __init__(self, embed_dim: int, n_classes: int, rng: Rng,
                 hidden: int = 0, dropout_rate: float = 0.1):
        width = hidden or embed_dim
        self.hidden = Linear(embed_dim, width, rng.child("hidden"), "head.hidden")
        self.norm_gain = Parameter(np.ones((1, width)), name="head.norm.gain")
        self.norm_bias = Parameter(np.zeros((1, width)), name="head.norm.bias")
        self.running_mean = np.zeros(width)
        self.running_var = np.ones(width)
        self.dropout_rate = dropout_rate
        self.out = Linear(width, n_classes, rng.child("out"), "head.out")

    @property
    def n_classes(self) -> int:
        return self.out.d_out

    def forward(self, pooled, training: bool = False, rng: Rng | None = None) -> Matrix:
        h = self.hidden.forward(pooled)
        if training and h.rows >= 2:
            normed, mu, var = batch_norm_train(h, self.norm_gain, self.norm_bias)
            m = self.BN_MOMENTUM
            self.running_mean = (1 - m) * self.running_mean + m * mu
            self.running_var = (1 - m) * self.running_var + m * var
        elif training:
            normed = layer_norm(h, self.norm_gain, self.norm_bias)
        else:
            normed = batch_norm_eval(h, self.norm_gain, self.norm_bias,
                                     self.running_mean, self.running_var)
        act = gelu(normed)
        if training:
            if rng is None:
                raise TrainError("training-mode head forward needs an rng for dropout")
            act = dropout(act, self.dropout_rate, rng, training=True)
        return self.out.forward(act)

    def named_parameters(self):
        return (self.hidden.named_parameters()
                + [(self.norm_gain.name, self.norm_gain),
                   (self.norm_bias.name, self.norm_bias)]
                + self.out.named_parameters())

    def named_quantized(self):
        return []

    def buffers(self) -> dict[str, np.ndarray]:
        return {"head.running_mean": self.running_mean,
                "head.running_var": self.running_var}


def attach_head(model: SensorTransformer, rng: Rng, n_classes: int | None = None,
                dropout_rate: float = 0.1, keep_decoder: bool = False) -> SensorTransformer:
    """Attach a fresh classification head and drop the reconstruction decoder."""
    if model.head is not None:
        raise TrainError("model already has a head")
    cfg = model.config
    model.head = ClassifierHead(cfg.embed_dim, n_classes or cfg.n_classes,
                                rng.child("head"), hidden=cfg.head_width,
                                dropout_rate=dropout_rate)
    if not keep_decoder:
        model.drop_decoder()
    return model


def pool_and_classify(encoded, head: ClassifierHead, training: bool = False,
                      rng: Rng | None = None) -> Matrix:
    """Mean-pool token features and apply the head; 1 x K logits."""
    return head.forward(mean_rows(encoded), training=training, rng=rng)


def cross_entropy(logits, label: int) -> Matrix:
    """Negative log softmax likelihood of one label; 1 x 1."""
    return softmax_cross_entropy(logits, [label])


def select_trainable(model: SensorTransformer, strategy: Strategy) -> list[Parameter]:
    """Set the trainable/frozen partition for a strategy and return the trainable set.

    FULL refuses wrapped models and LORA/QLORA refuse unwrapped ones, so a
    mismatched pipeline fails loudly instead of training the wrong weights.
    """
    if model.head is None:
        raise TrainError("attach a classification head before selecting a strategy")
    head_ids = {id(p) for _, p in model.head.named_parameters()}
    adapter_ids = set()
    if model.wrapped:
        for adapter in iter_adapters(model):
            adapter_ids.update((id(adapter.A), id(adapter.B)))

    if strategy is Strategy.FULL:
        if model.wrapped:
            raise TrainError("FULL strategy cannot run on an adapter-wrapped model")
        for _, p in model.named_parameters():
            p.trainable = True
    elif strategy is Strategy.FROZEN_HEAD:
        for _, p in model.named_parameters():
            p.trainable = id(p) in head_ids
    elif strategy in (Strategy.LORA, Strategy.QLORA):
        if not model.wrapped:
            raise TrainError(f"{strategy.value} needs a wrapped model")
        quantized = bool(model.named_quantized())
        if strategy is Strategy.QLORA and not quantized:
            raise TrainError("QLORA needs a quantized wrap")
        if strategy is Strategy.LORA and quantized:
            raise TrainError("LORA selected but the wrap is quantized")
        for _, p in model.named_parameters():
            p.trainable = id(p) in head_ids or id(p) in adapter_ids
    else:  # pragma: no cover
        raise TrainError(f"unknown strategy {strategy}")
    return [p for _, p in model.named_parameters() if p.trainable]


class AdamState:
    """First/second moment buffers keyed by parameter identity."""

    def __init__(self):
        self.moments: dict[int, tuple[np.ndarray, np.ndarray, int]] = {}

    def __contains__(self, param: Parameter) -> bool:
        return id(param) in self.moments


def adam_step(params: list[Parameter], state: AdamState, lr: float = 1e-3,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
    """Bias-corrected Adam over the selected trainable set only."""
    b1, b2 = betas
    for p in params:
        if not p.trainable:
            continue
        g = p.grad.data
        if not np.all(np.isfinite(g)):
            raise OptimizerError(f"non-finite gradient for {p.name or 'parameter'}")
        m, v, t = state.moments.get(id(p), (np.zeros_like(g), np.zeros_like(g), 0))
        t += 1
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * (g * g)
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p.value.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
        state.moments[id(p)] = (m, v, t)


def _zero_grads(params: list[Parameter]) -> None:
    for p in params:
        p.zero_grad()


def _batch_logits(model: SensorTransformer, windows, training: bool,
                  rng: Rng | None) -> Matrix:
    pooled = [mean_rows(model.encode(w)) for w in windows]
    return model.head.forward(concat_rows(pooled), training=training, rng=rng)


def predict(model: SensorTransformer, windows) -> np.ndarray:
    """Evaluation-mode class predictions for a list of windows."""
    out = np.empty(len(windows), dtype=np.intp)
    for i, w in enumerate(windows):
        logits = _batch_logits(model, [w], training=False, rng=None)
        out[i] = int(np.argmax(logits.data[0]))
    return out


def _eval_metrics(model: SensorTransformer, windows, labels) -> tuple[float, float]:
    from .evaluate import confusion, metrics
    preds = predict(model, windows)
    report = metrics(confusion(preds, labels, model.head.n_classes))
    return report.accuracy, report.macro_f1


def train(model: SensorTransformer, data: DatasetBundle, config: TrainConfig) -> TrainLog:
    """Shuffled mini-batch fine-tuning with an internal train/validation split.

    Deterministic under (seed, config, data); frozen weights are never
    touched. Emits one record per epoch with the validation metrics.
    """
    from .evaluate import measure_memory

    if not data.windows:
        raise TrainError("empty dataset")
    train_set, eval_set = split_train_eval(data, config.train_fraction, config.seed)
    present = set(np.unique(train_set.labels()).tolist())
    for name, cls in data.label_vocabulary.items():
        if cls not in present:
            warnings.warn(f"class {name!r} has no windows in the training split")

    trainable = select_trainable(model, config.strategy)
    rng = Rng(config.seed)
    shuffle_rng = rng.child("shuffle")
    dropout_rng = rng.child("dropout")
    state = AdamState()
    windows = train_set.window_values()
    labels = train_set.labels()
    eval_windows = eval_set.window_values()
    eval_labels = eval_set.labels()

    log = TrainLog()
    tracker = BufferTracker()
    start = time.monotonic()
    with tracker:
        for epoch in range(config.epochs):
            t0 = time.monotonic()
            order = shuffle_rng.permutation(len(windows))
            total_loss = 0.0
            for lo in range(0, len(order), config.batch_size):
                batch = order[lo:lo + config.batch_size]
                logits = _batch_logits(model, [windows[i] for i in batch],
                                       training=True, rng=dropout_rng)
                loss = softmax_cross_entropy(logits, labels[batch])
                _zero_grads(trainable)
                loss.backward()
                adam_step(trainable, state, lr=config.learning_rate)
                total_loss += loss.item() * len(batch)
            val_acc, val_f1 = (None, None)
            if eval_windows:
                val_acc, val_f1 = _eval_metrics(model, eval_windows, eval_labels)
            log.epochs.append(EpochRecord(
                epoch=epoch, loss=total_loss / len(order),
                val_accuracy=val_acc, val_macro_f1=val_f1,
                seconds=time.monotonic() - t0))
    log.wall_seconds = time.monotonic() - start
    report = measure_memory(model)
    report.wall_seconds = log.wall_seconds
    report.buffer_bytes_peak = max(report.buffer_bytes_peak, tracker.peak_bytes)
    log.resource = report
    return log


def pretrain(model: SensorTransformer, windows, config: PretrainConfig) -> TrainLog:
    """Masked-reconstruction pretraining over raw windows."""
    if not model.has_decoder():
        raise TrainError("model has no decoder; build a fresh backbone to pretrain")
    if not len(windows):
        raise TrainError("empty pretraining set")
    params = model.parameters()
    for p in params:
        p.trainable = True
    rng = Rng(config.seed)
    shuffle_rng = rng.child("shuffle")
    mask_rng = rng.child("mask")
    state = AdamState()
    log = TrainLog()
    start = time.monotonic()
    for epoch in range(config.epochs):
        t0 = time.monotonic()
        order = shuffle_rng.permutation(len(windows))
        total = 0.0
        for lo in range(0, len(order), config.batch_size):
            batch = order[lo:lo + config.batch_size]
            losses = [model.reconstruction_loss(windows[i], mask_rng) for i in batch]
            loss = scale(_sum_losses(losses), 1.0 / len(batch))
            _zero_grads(params)
            loss.backward()
            adam_step(params, state, lr=config.learning_rate)
            total += loss.item() * len(batch)
        log.epochs.append(EpochRecord(epoch=epoch, loss=total / len(order),
                                      val_accuracy=None, val_macro_f1=None,
                                      seconds=time.monotonic() - t0))
    log.wall_seconds = time.monotonic() - start
    return log


def _sum_losses(losses):
    from .numerics import add
    acc = losses[0]
    for extra in losses[1:]:
        acc = add(acc, extra)
    return acc


def prepare_for_strategy(backbone: SensorTransformer, strategy: Strategy, rng: Rng,
                         n_classes: int | None = None,
                         lora: LoraConfig | None = None,
                         dropout_rate: float = 0.1) -> SensorTransformer:
    """Head attachment plus the wrap a strategy requires, in the right order."""
    attach_head(backbone, rng, n_classes=n_classes, dropout_rate=dropout_rate)
    if strategy in (Strategy.LORA, Strategy.QLORA):
        if lora is None:
            raise TrainError("LORA/QLORA need a LoraConfig")
        wrap_model(backbone, lora, quantize=strategy is Strategy.QLORA,
                   rng=rng.child("wrap"))
    return backbone

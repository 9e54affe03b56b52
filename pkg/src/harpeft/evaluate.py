"""Metrics, parameter and memory accounting, and the experiment harnesses.

Conventions used throughout and printed with every report:
  * precision/recall/F1 of a class that never occurs (0/0) are defined as 0
    and still included in the macro means;
  * byte figures come in two flavours: as stored (8 bytes per float64 value)
    and at 4-bytes-per-float equivalence for comparisons against mixed-
    precision baselines; quantized storage is counted identically in both
    (packed codes plus scale metadata).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from .checkpoint import clone_backbone
from .data import DatasetBundle, lodo_folds, split_train_eval
from .finetune import (
    PretrainConfig,
    Strategy,
    TrainConfig,
    TrainLog,
    predict,
    prepare_for_strategy,
    pretrain,
    train,
)
from .model import ModelConfig, SensorTransformer
from .numerics import Rng
from .peft import BufferTracker, LoraConfig, wrap_model

BYTES_STORED = 8  # float64 compute path
BYTES_EQUIV = 4   # paper-comparability figure


class MetricsError(ValueError):
    """Invalid predictions, labels or confusion matrices."""


@dataclass
class ConfusionMatrix:
    """K x K counts; rows are true classes, columns predictions."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise MetricsError("confusion matrix must be square")
        if (self.counts < 0).any():
            raise MetricsError("confusion counts must be non-negative")

    @property
    def n_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    macro_f1: float
    macro_precision: float
    macro_recall: float

    def __post_init__(self):
        for value in (self.accuracy, self.macro_f1, self.macro_precision,
                      self.macro_recall):
            if not 0.0 <= value <= 1.0:
                raise MetricsError(f"metric {value} outside [0, 1]")


@dataclass
class ResourceReport:
    """Parameter counts and byte footprints of one configured model."""

    trainable_params: int
    total_params: int
    frozen_param_bytes: int
    trainable_param_bytes: int
    buffer_bytes_peak: int
    wall_seconds: float
    frozen_param_bytes_equiv4: int
    trainable_param_bytes_equiv4: int

    def __post_init__(self):
        if self.total_params < self.trainable_params:
            raise MetricsError("total parameters cannot be below trainable")


def confusion(preds, labels, n_classes: int) -> ConfusionMatrix:
    preds = np.asarray(preds, dtype=np.intp).ravel()
    labels = np.asarray(labels, dtype=np.intp).ravel()
    if preds.size != labels.size:
        raise MetricsError(f"{preds.size} predictions vs {labels.size} labels")
    if preds.size and not (0 <= preds.min() and preds.max() < n_classes
                           and 0 <= labels.min() and labels.max() < n_classes):
        raise MetricsError(f"class ids must lie in [0, {n_classes})")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (labels, preds), 1)
    return ConfusionMatrix(counts)


def metrics(cm: ConfusionMatrix) -> MetricsReport:
    """Accuracy and macro precision/recall/F1 with the 0/0 -> 0 convention."""
    if cm.total == 0:
        raise MetricsError("empty confusion matrix")
    counts = cm.counts.astype(np.float64)
    diag = np.diag(counts)
    pred_sums = counts.sum(axis=0)
    true_sums = counts.sum(axis=1)
    precision = np.divide(diag, pred_sums, out=np.zeros_like(diag), where=pred_sums > 0)
    recall = np.divide(diag, true_sums, out=np.zeros_like(diag), where=true_sums > 0)
    pr_sum = precision + recall
    f1 = np.divide(2 * precision * recall, pr_sum,
                   out=np.zeros_like(diag), where=pr_sum > 0)
    return MetricsReport(
        accuracy=float(diag.sum() / cm.total),
        macro_f1=float(f1.mean()),
        macro_precision=float(precision.mean()),
        macro_recall=float(recall.mean()),
    )


# ---------------------------------------------------------------------------
# Parameter and memory accounting
# ---------------------------------------------------------------------------

def count_parameters(model: SensorTransformer,
                     strategy: Strategy | None = None) -> tuple[int, int]:
    """Exact (trainable, total) enumeration over the model's declared shapes.

    Quantized base weights count their full value grid toward the total:
    adapters extend the architecture rather than replacing weights, so a
    wrapped model always totals more than its unwrapped backbone.
    """
    if strategy is not None:
        from .finetune import select_trainable
        select_trainable(model, strategy)
    trainable = sum(p.size for _, p in model.named_parameters() if p.trainable)
    total = sum(p.size for _, p in model.named_parameters())
    total += sum(q.n_values for _, q in model.named_quantized())
    return trainable, total


def measure_memory(model: SensorTransformer, probe_forward: bool = True) -> ResourceReport:
    """Byte accounting by storage class plus the peak dequantization buffer.

    Frozen full-precision values cost 8 bytes as stored and 4 at the
    equivalence figure; NF4 storage costs ceil(values/2) code bytes plus its
    scale metadata in both figures. The buffer peak is observed on one probe
    forward pass (zero for anything unquantized).
    """
    frozen_stored = frozen_equiv = 0
    trainable_stored = trainable_equiv = 0
    trainable_count = 0
    total_count = 0
    for _, p in model.named_parameters():
        total_count += p.size
        if p.trainable:
            trainable_count += p.size
            trainable_stored += p.size * BYTES_STORED
            trainable_equiv += p.size * BYTES_EQUIV
        else:
            frozen_stored += p.size * BYTES_STORED
            frozen_equiv += p.size * BYTES_EQUIV
    for _, q in model.named_quantized():
        total_count += q.n_values
        nbytes = q.storage_bytes()["total"]
        frozen_stored += nbytes
        frozen_equiv += nbytes

    peak = 0
    if probe_forward:
        probe = np.zeros((model.config.window_len, model.config.channels))
        with BufferTracker() as tracker:
            model.encode(probe)
        peak = tracker.peak_bytes
    return ResourceReport(
        trainable_params=trainable_count,
        total_params=total_count,
        frozen_param_bytes=frozen_stored,
        trainable_param_bytes=trainable_stored,
        buffer_bytes_peak=peak,
        wall_seconds=0.0,
        frozen_param_bytes_equiv4=frozen_equiv,
        trainable_param_bytes_equiv4=trainable_equiv,
    )


def storage_comparison(config: ModelConfig | None = None, rank: int = 8,
                       alpha: float = 16.0, block_size: int = 64,
                       double_quant: bool = False, seed: int = 0) -> dict:
    """Frozen-storage footprint of a LoRA wrap versus a QLoRA wrap.

    Measured over the full pretraining container (encoder, mirrored decoder
    and embeddings): quantization touches only the encoder projections, so
    the decoder and embeddings stay high-precision exceptions exactly like
    the checkpoint that would sit in memory during adaptation.
    """
    config = config or ModelConfig.base()
    lora_cfg = LoraConfig(rank=rank, alpha=alpha)
    reports = {}
    for label, quantize in (("lora", False), ("qlora", True)):
        model = SensorTransformer(config, Rng(seed))
        wrap_model(model, lora_cfg, quantize=quantize, rng=Rng(seed).child("wrap"))
        reports[label] = measure_memory(model)
    ratio = (reports["qlora"].frozen_param_bytes_equiv4
             / reports["lora"].frozen_param_bytes_equiv4)
    return {"lora": reports["lora"], "qlora": reports["qlora"],
            "frozen_ratio_equiv4": ratio}


# ---------------------------------------------------------------------------
# Experiment harnesses
# ---------------------------------------------------------------------------

@dataclass
class LodoRunRecord:
    fold_domain: str
    strategy: str
    metrics: MetricsReport
    resources: ResourceReport
    log: TrainLog
    seed: int


def final_holdout_metrics(model, target: DatasetBundle,
                          config: TrainConfig) -> MetricsReport:
    """Metrics on the evaluation side of the split a training config implies."""
    _, eval_set = split_train_eval(target, config.train_fraction, config.seed)
    preds = predict(model, eval_set.window_values())
    return metrics(confusion(preds, eval_set.labels(), target.n_classes))


def run_fold(pretrain_set: DatasetBundle, target: DatasetBundle, strategies,
             model_config: ModelConfig, pretrain_config: PretrainConfig,
             train_config: TrainConfig, lora_config: LoraConfig | None,
             seed: int) -> list[LodoRunRecord]:
    """Pretrain once on the pooled domains, then adapt per strategy.

    All strategy runs of a fold share the backbone, the head initialization
    stream and the training seed, so LoRA and QLoRA differ only in how the
    frozen weights are stored.
    """
    domain = target.domains()[0] if len(target.domains()) == 1 else "+".join(target.domains())
    fold_rng = Rng(seed).child(f"fold/{domain}")
    n_classes = target.n_classes
    backbone = SensorTransformer(model_config.with_classes(n_classes),
                                 fold_rng.child("init"))
    pretrain(backbone, [w.values for w in pretrain_set.windows],
             replace(pretrain_config, seed=fold_rng.child("pretrain").seed))

    records = []
    for strategy in strategies:
        strategy = Strategy(strategy)
        model = clone_backbone(backbone)
        needs_lora = strategy in (Strategy.LORA, Strategy.QLORA)
        prepare_for_strategy(model, strategy, fold_rng.child("adapt"),
                             n_classes=n_classes,
                             lora=lora_config if needs_lora else None)
        config = replace(train_config, strategy=strategy,
                         lora=lora_config if needs_lora else None,
                         seed=fold_rng.child("train").seed)
        log = train(model, target, config)
        records.append(LodoRunRecord(
            fold_domain=domain, strategy=strategy.value,
            metrics=final_holdout_metrics(model, target, config),
            resources=log.resource, log=log, seed=config.seed))
    return records


def run_lodo(bundles: list[DatasetBundle], strategies, model_config: ModelConfig,
             pretrain_config: PretrainConfig | None = None,
             train_config: TrainConfig | None = None,
             lora_config: LoraConfig | None = None,
             seed: int = 0) -> list[LodoRunRecord]:
    """The full protocol: every domain serves as the held-out target once."""
    pretrain_config = pretrain_config or PretrainConfig()
    train_config = train_config or TrainConfig()
    lora_config = lora_config or LoraConfig()
    records = []
    for pretrain_set, target in lodo_folds(bundles):
        records.extend(run_fold(pretrain_set, target, strategies, model_config,
                                pretrain_config, train_config, lora_config, seed))
    return records


@dataclass
class RankSweepRow:
    rank: int
    macro_f1: float
    seconds: float
    trainable_params: int


PAPER_RANKS = (8, 16, 20, 32, 48, 64)


def rank_sweep(backbone: SensorTransformer, target: DatasetBundle,
               ranks=PAPER_RANKS, train_config: TrainConfig | None = None,
               alpha: float = 16.0, seed: int = 0) -> list[RankSweepRow]:
    """One LoRA fine-tune per rank at a fixed seed."""
    if not ranks:
        raise MetricsError("rank sweep needs at least one rank")
    train_config = train_config or TrainConfig()
    rows = []
    for rank in ranks:
        lora_cfg = LoraConfig(rank=int(rank), alpha=alpha)
        model = clone_backbone(backbone)
        prepare_for_strategy(model, Strategy.LORA, Rng(seed).child("adapt"),
                             n_classes=target.n_classes, lora=lora_cfg)
        config = replace(train_config, strategy=Strategy.LORA, lora=lora_cfg, seed=seed)
        start = time.monotonic()
        train(model, target, config)
        seconds = time.monotonic() - start
        trainable, _ = count_parameters(model)
        report = final_holdout_metrics(model, target, config)
        rows.append(RankSweepRow(rank=int(rank), macro_f1=report.macro_f1,
                                 seconds=seconds, trainable_params=trainable))
    return rows


@dataclass
class SplitSweepRow:
    train_fraction: float
    accuracy: dict[str, float]
    lora_over_full: float | None


PAPER_SPLITS = (0.7, 0.6, 0.5, 0.4, 0.3)


def split_sweep(backbone: SensorTransformer, target: DatasetBundle,
                fractions=PAPER_SPLITS, strategies=(Strategy.FULL, Strategy.LORA),
                train_config: TrainConfig | None = None,
                lora_config: LoraConfig | None = None,
                seed: int = 0) -> list[SplitSweepRow]:
    """Accuracy per train fraction and strategy, with the LoRA/full ratio."""
    for fraction in fractions:
        if not 0.0 < fraction < 1.0:
            raise MetricsError(f"fraction {fraction} outside (0, 1)")
    train_config = train_config or TrainConfig()
    lora_config = lora_config or LoraConfig()
    rows = []
    for fraction in fractions:
        accuracy = {}
        for strategy in strategies:
            strategy = Strategy(strategy)
            needs_lora = strategy in (Strategy.LORA, Strategy.QLORA)
            model = clone_backbone(backbone)
            prepare_for_strategy(model, strategy, Rng(seed).child("adapt"),
                                 n_classes=target.n_classes,
                                 lora=lora_config if needs_lora else None)
            config = replace(train_config, strategy=strategy,
                             train_fraction=float(fraction),
                             lora=lora_config if needs_lora else None, seed=seed)
            train(model, target, config)
            accuracy[strategy.value] = final_holdout_metrics(model, target, config).accuracy
        ratio = None
        if "full" in accuracy and "lora" in accuracy and accuracy["full"] > 0:
            ratio = accuracy["lora"] / accuracy["full"]
        rows.append(SplitSweepRow(train_fraction=float(fraction),
                                  accuracy=accuracy, lora_over_full=ratio))
    return rows

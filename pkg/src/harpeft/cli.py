"""Command-line interface: generate, pretrain, finetune, lodo, sweeps, report.

Configuration layering is defaults < ``--config`` JSON file < command-line
flags. All randomness flows from ``--seed`` and is fanned out to named
substreams. Every command writes a run manifest into its output directory
before computing anything, with enough resolved configuration to replay the
run. Exit codes: 0 success, 1 runtime failure, 2 usage or configuration
error. The only honored environment variable is ``HARPEFT_OUT_DIR``, which
re-roots relative output directories.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__
from .checkpoint import load_model, save_adapters, save_model
from .data import (
    build_label_union,
    DatasetBundle,
    default_synthetic_spec,
    generate_recordings,
    load_domains_from_manifest,
    lodo_folds,
    save_data_manifest,
    save_domain_csv,
)
from .evaluate import (
    LodoRunRecord,
    MetricsReport,
    PAPER_RANKS,
    PAPER_SPLITS,
    RankSweepRow,
    ResourceReport,
    SplitSweepRow,
    final_holdout_metrics,
    rank_sweep,
    run_fold,
    split_sweep,
)
from .finetune import (
    PretrainConfig,
    Strategy,
    TrainConfig,
    TrainLog,
    prepare_for_strategy,
    pretrain,
    train,
)
from .model import ModelConfig, SensorTransformer
from .numerics import Rng
from .peft import LoraConfig
from .report import write_report


class UsageError(Exception):
    """Configuration problem the user must fix; exits with status 2."""


# ---------------------------------------------------------------------------
# Shared plumbing
# ---------------------------------------------------------------------------

def resolve_out(path: str) -> Path:
    root = os.environ.get("HARPEFT_OUT_DIR")
    p = Path(path)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}")


def layered(flag_value, file_section: dict, key: str, default):
    """defaults < config file < flags."""
    if flag_value is not None:
        return flag_value
    if key in file_section:
        return file_section[key]
    return default


def jsonable(value):
    """Recursively convert configs (dataclasses, enums, sets, arrays) to JSON types."""
    import enum

    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        return {f.name: jsonable(getattr(value, f.name))
                for f in dataclasses.fields(value)}
    if isinstance(value, enum.Enum):
        return value.value
    if isinstance(value, (frozenset, set, tuple)):
        return sorted(jsonable(v) for v in value) if isinstance(value, (frozenset, set)) \
            else [jsonable(v) for v in value]
    if isinstance(value, dict):
        return {str(k): jsonable(v) for k, v in value.items()}
    if isinstance(value, (list,)):
        return [jsonable(v) for v in value]
    return value


def write_run_manifest(out_dir: Path, command: str, config: dict, seed: int,
                       inputs: list[str], outputs: list[str]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": jsonable(config),
        "seed": seed,
        "inputs": inputs,
        "outputs": outputs,
        "tool_version": __version__,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
    }
    (out_dir / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def model_config_from_args(args, file_cfg: dict) -> ModelConfig:
    section = file_cfg.get("model", {})
    preset = layered(getattr(args, "preset", None), section, "preset", "small")
    factory = {"tiny": ModelConfig.tiny, "small": ModelConfig.small,
               "base": ModelConfig.base}.get(preset)
    if factory is None:
        raise UsageError(f"unknown preset {preset!r}; choose tiny, small or base")
    overrides = {}
    for key in ("embed_dim", "ffn_hidden", "n_heads", "n_enc_layers", "n_dec_layers",
                "patch_len", "mask_ratio", "n_classes"):
        value = layered(getattr(args, key, None), section, key, None)
        if value is not None:
            overrides[key] = value
    return factory(**overrides)


def load_bundles(data_path: str) -> dict[str, DatasetBundle]:
    """Accepts a data directory, a manifest.json, or a windows.cache file."""
    path = Path(data_path)
    if path.suffix == ".cache":
        if not path.exists():
            raise UsageError(f"window cache not found: {path}")
        from .data import load_window_cache
        return load_window_cache(path)
    if path.is_dir():
        cache = path / "windows.cache"
        if cache.exists():
            from .data import load_window_cache
            return load_window_cache(cache)
        path = path / "manifest.json"
    if not path.exists():
        raise UsageError(f"data manifest not found: {path}")
    return load_domains_from_manifest(path)


def require_domain(bundles: dict[str, DatasetBundle], name: str) -> None:
    if name not in bundles:
        raise UsageError(
            f"domain {name!r} not in manifest; available: {', '.join(sorted(bundles))}")


def union_rebased(bundles: dict[str, DatasetBundle]) -> dict[str, DatasetBundle]:
    """Per-domain bundles sharing the cross-domain union vocabulary."""
    union = build_label_union(list(bundles.values()))
    vocab = union.label_vocabulary
    return {name: DatasetBundle(windows=list(b.windows), label_vocabulary=dict(vocab))
            for name, b in bundles.items()}


def metrics_to_dict(m: MetricsReport) -> dict:
    return dataclasses.asdict(m)


def resources_to_dict(r: ResourceReport) -> dict:
    return dataclasses.asdict(r)


def record_to_dict(rec: LodoRunRecord) -> dict:
    return {
        "fold_domain": rec.fold_domain,
        "strategy": rec.strategy,
        "seed": rec.seed,
        "metrics": metrics_to_dict(rec.metrics),
        "resources": resources_to_dict(rec.resources),
        "log": rec.log.to_json_lines(),
        "wall_seconds": rec.log.wall_seconds,
    }


def record_from_dict(d: dict) -> LodoRunRecord:
    log = TrainLog.from_json_lines(d.get("log", ""))
    log.wall_seconds = d.get("wall_seconds", log.wall_seconds)
    return LodoRunRecord(
        fold_domain=d["fold_domain"],
        strategy=d["strategy"],
        metrics=MetricsReport(**d["metrics"]),
        resources=ResourceReport(**d["resources"]),
        log=log,
        seed=d.get("seed", 0),
    )


def _parse_strategies(text: str) -> list[Strategy]:
    try:
        return [Strategy(part.strip().lower()) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise UsageError(f"bad strategy list {text!r}: {exc}")


def _train_config(args, file_cfg: dict, strategy: Strategy,
                  lora: LoraConfig | None) -> TrainConfig:
    section = file_cfg.get("train", {})
    return TrainConfig(
        strategy=strategy,
        epochs=layered(args.epochs, section, "epochs", 50),
        batch_size=layered(args.batch_size, section, "batch_size", 16),
        learning_rate=layered(args.learning_rate, section, "learning_rate", 1e-3),
        seed=args.seed,
        train_fraction=layered(getattr(args, "split", None), section, "train_fraction", 0.7),
        lora=lora,
    )


def _pretrain_config(args, file_cfg: dict) -> PretrainConfig:
    section = file_cfg.get("pretrain", {})
    return PretrainConfig(
        epochs=layered(args.epochs, section, "epochs", 15),
        batch_size=layered(args.batch_size, section, "batch_size", 16),
        learning_rate=layered(args.learning_rate, section, "learning_rate", 1e-3),
        seed=args.seed,
    )


def _lora_config(args, file_cfg: dict) -> LoraConfig:
    section = file_cfg.get("lora", {})
    return LoraConfig(
        rank=layered(getattr(args, "rank", None), section, "rank", 8),
        alpha=layered(getattr(args, "alpha", None), section, "alpha", 16.0),
    )


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    file_cfg = load_config_file(args.config)
    section = file_cfg.get("generate", {})
    spec_args = {}
    if args.spec:
        spec_args.update(json.loads(Path(args.spec).read_text()))
    spec_args.update({k: v for k, v in section.items()})
    spec = default_synthetic_spec(
        n_domains=int(spec_args.get("n_domains", 5)),
        n_classes=int(spec_args.get("n_classes", 6)),
        samples_per_class=int(spec_args.get("samples_per_class", 1280)),
        seed=int(spec_args.get("seed", args.seed)),
        noise_sigma=float(spec_args.get("noise_sigma", 0.05)),
        sample_rate_hz=float(spec_args.get("sample_rate_hz", 50.0)),
    )
    out_dir = resolve_out(args.out)
    write_run_manifest(out_dir, "generate",
                       {"spec": spec}, args.seed,
                       inputs=[], outputs=["manifest.json"])
    recordings = generate_recordings(spec)
    entries = []
    for name in sorted(recordings):
        csv_name = f"{name}.csv"
        save_domain_csv(recordings[name], out_dir / csv_name)
        entries.append({"name": name, "path": csv_name,
                        "sample_rate_hz": spec.sample_rate_hz})
    save_data_manifest(out_dir / "manifest.json", entries)
    if args.cache:
        from .data import build_domain_bundle, save_window_cache
        bundles = {name: build_domain_bundle(recs)
                   for name, recs in recordings.items()}
        save_window_cache(bundles, out_dir / "windows.cache")
    print(f"wrote {len(entries)} domains to {out_dir}")
    return 0


def cmd_pretrain(args) -> int:
    file_cfg = load_config_file(args.config)
    bundles = load_bundles(args.data)
    require_domain(bundles, args.hold_out)
    if len(bundles) < 2:
        raise UsageError("pretraining needs at least 2 domains in the manifest")
    rebased = union_rebased(bundles)
    pool = [b for name, b in sorted(rebased.items()) if name != args.hold_out]
    union_classes = next(iter(rebased.values())).n_classes
    config = model_config_from_args(args, file_cfg).with_classes(union_classes)
    pcfg = _pretrain_config(args, file_cfg)

    out_dir = resolve_out(args.out)
    write_run_manifest(out_dir, "pretrain",
                       {"model": config, "pretrain": pcfg,
                        "hold_out": args.hold_out},
                       args.seed, inputs=[str(args.data)],
                       outputs=["backbone.ckpt", "pretrain_log.jsonl"])

    model = SensorTransformer(config, Rng(args.seed).child("init"))
    windows = [w.values for b in pool for w in b.windows]
    log = pretrain(model, windows, pcfg)
    save_model(model, out_dir / "backbone.ckpt")
    (out_dir / "pretrain_log.jsonl").write_text(log.to_json_lines())
    print(f"pretrained on {len(windows)} windows from "
          f"{len(pool)} domains; backbone at {out_dir / 'backbone.ckpt'}")
    return 0


def cmd_finetune(args) -> int:
    file_cfg = load_config_file(args.config)
    strategy = _parse_strategies(args.strategy)[0]
    needs_lora = strategy in (Strategy.LORA, Strategy.QLORA)
    if not needs_lora and (args.rank is not None or args.alpha is not None):
        raise UsageError(f"--rank/--alpha only apply to lora/qlora, not {strategy.value}")
    lora = _lora_config(args, file_cfg) if needs_lora else None

    bundles = load_bundles(args.data)
    require_domain(bundles, args.target)
    target = union_rebased(bundles)[args.target]
    model = load_model(args.checkpoint)
    tcfg = _train_config(args, file_cfg, strategy, lora)

    out_dir = resolve_out(args.out)
    artifact = "adapters.ckpt" if needs_lora else "model.ckpt"
    write_run_manifest(out_dir, "finetune",
                       {"train": tcfg, "target": args.target},
                       args.seed, inputs=[str(args.checkpoint), str(args.data)],
                       outputs=[artifact, "metrics.json", "train_log.jsonl"])

    prepare_for_strategy(model, strategy, Rng(args.seed).child("adapt"),
                         n_classes=target.n_classes, lora=lora)
    log = train(model, target, tcfg)
    final = final_holdout_metrics(model, target, tcfg)

    if needs_lora:
        save_adapters(model, out_dir / artifact)
    else:
        save_model(model, out_dir / artifact)
    (out_dir / "train_log.jsonl").write_text(log.to_json_lines())
    (out_dir / "metrics.json").write_text(json.dumps(metrics_to_dict(final), indent=2,
                                                     sort_keys=True))
    (out_dir / "resources.json").write_text(json.dumps(resources_to_dict(log.resource),
                                                       indent=2, sort_keys=True))
    print(f"{strategy.value} on {args.target}: accuracy {final.accuracy:.4f}, "
          f"macro F1 {final.macro_f1:.4f}")
    return 0


def _fold_worker(payload):
    (pretrain_set, target, strategies, model_config, pcfg, tcfg, lora, seed) = payload
    return run_fold(pretrain_set, target, strategies, model_config, pcfg, tcfg,
                    lora, seed)


def cmd_lodo(args) -> int:
    file_cfg = load_config_file(args.config)
    strategies = _parse_strategies(args.strategies)
    bundles = load_bundles(args.data)
    per_domain = [b for _, b in sorted(bundles.items())]
    folds = lodo_folds(per_domain)
    lora = _lora_config(args, file_cfg)
    tcfg = _train_config(args, file_cfg, Strategy.FULL, None)
    pcfg = _pretrain_config(args, file_cfg)
    union_classes = folds[0][0].n_classes
    config = model_config_from_args(args, file_cfg).with_classes(union_classes)

    out_dir = resolve_out(args.out)
    runs_dir = out_dir / "runs"
    expected = [f"{target.domains()[0]}_{s.value}.json"
                for _, target in folds for s in strategies]
    write_run_manifest(out_dir, "lodo",
                       {"model": config, "pretrain": pcfg, "train": tcfg,
                        "lora": lora,
                        "strategies": [s.value for s in strategies]},
                       args.seed, inputs=[str(args.data)],
                       outputs=[f"runs/{name}" for name in expected])
    runs_dir.mkdir(parents=True, exist_ok=True)

    payloads = [(pre, target, strategies, config, pcfg, tcfg, lora, args.seed)
                for pre, target in folds]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            fold_records = list(pool.map(_fold_worker, payloads))
    else:
        fold_records = [_fold_worker(p) for p in payloads]

    records = [rec for fold in fold_records for rec in fold]
    for rec in records:
        path = runs_dir / f"{rec.fold_domain}_{rec.strategy}.json"
        path.write_text(json.dumps(record_to_dict(rec), indent=2, sort_keys=True))
    (out_dir / "index.json").write_text(json.dumps(
        {"runs": sorted(expected)}, indent=2, sort_keys=True))
    for rec in records:
        print(f"{rec.fold_domain} {rec.strategy}: accuracy {rec.metrics.accuracy:.4f} "
              f"macro F1 {rec.metrics.macro_f1:.4f}")
    return 0


def cmd_sweep_rank(args) -> int:
    file_cfg = load_config_file(args.config)
    bundles = load_bundles(args.data)
    require_domain(bundles, args.target)
    target = union_rebased(bundles)[args.target]
    backbone = load_model(args.checkpoint)
    ranks = [int(r) for r in args.ranks.split(",")] if args.ranks else list(PAPER_RANKS)
    tcfg = _train_config(args, file_cfg, Strategy.LORA,
                         LoraConfig(rank=ranks[0], alpha=args.alpha or 16.0))

    out_dir = resolve_out(args.out)
    write_run_manifest(out_dir, "sweep-rank",
                       {"ranks": ranks, "train": tcfg},
                       args.seed, inputs=[str(args.checkpoint), str(args.data)],
                       outputs=["rank_sweep.json"])
    rows = rank_sweep(backbone, target, ranks=ranks, train_config=tcfg,
                      alpha=args.alpha or 16.0, seed=args.seed)
    (out_dir / "rank_sweep.json").write_text(json.dumps(
        [jsonable(r) for r in rows], indent=2, sort_keys=True))
    write_report(out_dir, rank_rows=rows, plots=args.plots)
    for row in rows:
        print(f"rank {row.rank}: macro F1 {row.macro_f1:.4f}, "
              f"{row.trainable_params} trainable, {row.seconds:.1f}s")
    return 0


def cmd_sweep_split(args) -> int:
    file_cfg = load_config_file(args.config)
    bundles = load_bundles(args.data)
    require_domain(bundles, args.target)
    target = union_rebased(bundles)[args.target]
    backbone = load_model(args.checkpoint)
    fractions = ([float(f) for f in args.fractions.split(",")]
                 if args.fractions else list(PAPER_SPLITS))
    strategies = _parse_strategies(args.strategies)
    lora = _lora_config(args, file_cfg)
    tcfg = _train_config(args, file_cfg, Strategy.FULL, None)

    out_dir = resolve_out(args.out)
    write_run_manifest(out_dir, "sweep-split",
                       {"fractions": fractions, "train": tcfg,
                        "strategies": [s.value for s in strategies]},
                       args.seed, inputs=[str(args.checkpoint), str(args.data)],
                       outputs=["split_sweep.json"])
    rows = split_sweep(backbone, target, fractions=fractions, strategies=strategies,
                       train_config=tcfg, lora_config=lora, seed=args.seed)
    (out_dir / "split_sweep.json").write_text(json.dumps(
        [jsonable(r) for r in rows], indent=2, sort_keys=True))
    write_report(out_dir, split_rows=rows)
    for row in rows:
        ratio = "" if row.lora_over_full is None else f" lora/full {row.lora_over_full:.4f}"
        print(f"split {row.train_fraction:.1f}: " +
              " ".join(f"{k}={v:.4f}" for k, v in sorted(row.accuracy.items())) + ratio)
    return 0


def cmd_report(args) -> int:
    runs_dir = resolve_out(args.runs)
    index_path = runs_dir / "index.json"
    records = []
    if index_path.exists():
        expected = json.loads(index_path.read_text())["runs"]
        missing = [name for name in expected if not (runs_dir / "runs" / name).exists()]
        if missing:
            raise UsageError("missing run records: " + ", ".join(sorted(missing)))
        for name in expected:
            records.append(record_from_dict(
                json.loads((runs_dir / "runs" / name).read_text())))
    rank_rows = None
    rank_path = runs_dir / "rank_sweep.json"
    if rank_path.exists():
        rank_rows = [RankSweepRow(**d) for d in json.loads(rank_path.read_text())]
    split_rows = None
    split_path = runs_dir / "split_sweep.json"
    if split_path.exists():
        split_rows = [SplitSweepRow(**d) for d in json.loads(split_path.read_text())]
    if not records and not rank_rows and not split_rows:
        raise UsageError(f"no run records found under {runs_dir}")
    out_dir = resolve_out(args.out) if args.out else runs_dir / "report"
    written = write_report(out_dir, records=records, rank_rows=rank_rows,
                           split_rows=split_rows, plots=args.plots)
    print((out_dir / "report.txt").read_text())
    print("wrote: " + ", ".join(written))
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_common(sub, *, config=True):
    sub.add_argument("--seed", type=int, default=0, help="run seed (fans out to substreams)")
    if config:
        sub.add_argument("--config", default=None, help="JSON config file")


def _add_model_flags(sub):
    sub.add_argument("--preset", choices=("tiny", "small", "base"), default=None)
    sub.add_argument("--embed-dim", dest="embed_dim", type=int, default=None)
    sub.add_argument("--ffn-hidden", dest="ffn_hidden", type=int, default=None)
    sub.add_argument("--n-heads", dest="n_heads", type=int, default=None)
    sub.add_argument("--enc-layers", dest="n_enc_layers", type=int, default=None)
    sub.add_argument("--dec-layers", dest="n_dec_layers", type=int, default=None)
    sub.add_argument("--patch-len", dest="patch_len", type=int, default=None)
    sub.add_argument("--mask-ratio", dest="mask_ratio", type=float, default=None)


def _add_train_flags(sub):
    sub.add_argument("--epochs", type=int, default=None)
    sub.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    sub.add_argument("--lr", dest="learning_rate", type=float, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="harpeft",
        description="Masked-autoencoder sensor transformer with full, LoRA and "
                    "QLoRA fine-tuning under leave-one-dataset-out evaluation.")
    parser.add_argument("--version", action="version", version=f"harpeft {__version__}")
    subs = parser.add_subparsers(dest="command", required=True)

    g = subs.add_parser("generate", help="write synthetic multi-domain sensor data")
    g.add_argument("--spec", default=None, help="JSON generator spec")
    g.add_argument("--cache", action="store_true",
                   help="also write the preprocessed binary window cache")
    g.add_argument("--out", required=True)
    _add_common(g)
    g.set_defaults(func=cmd_generate)

    p = subs.add_parser("pretrain", help="masked-reconstruction pretraining "
                                         "on all domains except one")
    p.add_argument("--data", required=True, help="data dir or manifest.json")
    p.add_argument("--hold-out", dest="hold_out", required=True)
    p.add_argument("--out", required=True)
    _add_model_flags(p)
    _add_train_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_pretrain)

    f = subs.add_parser("finetune", help="adapt a pretrained backbone to one domain")
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--data", required=True)
    f.add_argument("--target", required=True)
    f.add_argument("--strategy", required=True,
                   help="full, lora, qlora or frozen_head")
    f.add_argument("--rank", type=int, default=None)
    f.add_argument("--alpha", type=float, default=None)
    f.add_argument("--split", type=float, default=None, help="train fraction (default 0.7)")
    f.add_argument("--out", required=True)
    _add_train_flags(f)
    _add_common(f)
    f.set_defaults(func=cmd_finetune)

    l = subs.add_parser("lodo", help="full leave-one-dataset-out protocol")
    l.add_argument("--data", required=True)
    l.add_argument("--strategies", default="full,lora,qlora")
    l.add_argument("--rank", type=int, default=None)
    l.add_argument("--alpha", type=float, default=None)
    l.add_argument("--split", type=float, default=None)
    l.add_argument("--jobs", type=int, default=1,
                   help="parallel worker processes across folds")
    l.add_argument("--out", required=True)
    _add_model_flags(l)
    _add_train_flags(l)
    _add_common(l)
    l.set_defaults(func=cmd_lodo)

    sr = subs.add_parser("sweep-rank", help="fine-tune once per adapter rank")
    sr.add_argument("--checkpoint", required=True)
    sr.add_argument("--data", required=True)
    sr.add_argument("--target", required=True)
    sr.add_argument("--ranks", default=None, help="comma list, default 8,16,20,32,48,64")
    sr.add_argument("--alpha", type=float, default=None)
    sr.add_argument("--split", type=float, default=None)
    sr.add_argument("--plots", action="store_true")
    sr.add_argument("--out", required=True)
    _add_train_flags(sr)
    _add_common(sr)
    sr.set_defaults(func=cmd_sweep_rank)

    ss = subs.add_parser("sweep-split", help="fine-tune across train/test splits")
    ss.add_argument("--checkpoint", required=True)
    ss.add_argument("--data", required=True)
    ss.add_argument("--target", required=True)
    ss.add_argument("--fractions", default=None, help="comma list, default 0.7..0.3")
    ss.add_argument("--strategies", default="full,lora")
    ss.add_argument("--rank", type=int, default=None)
    ss.add_argument("--alpha", type=float, default=None)
    ss.add_argument("--out", required=True)
    _add_train_flags(ss)
    _add_common(ss)
    ss.set_defaults(func=cmd_sweep_split)

    r = subs.add_parser("report", help="render tables and plots from saved runs")
    r.add_argument("--runs", required=True, help="a lodo/sweep output directory")
    r.add_argument("--out", default=None)
    r.add_argument("--plots", action="store_true")
    _add_common(r, config=False)
    r.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

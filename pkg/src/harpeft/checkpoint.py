"""Checkpoint files for backbones and adapters, plus in-memory cloning.

Both file kinds use the container format documented in
:mod:`harpeft.container`. A model checkpoint stores the config record and one
float64 entry per parameter (name, shape, precision class, trainable flag),
so reloading reproduces forward outputs bit-identically. An adapter
checkpoint stores only the A/B factors and their wrap settings, separate from
the backbone so one backbone file serves many adapters.
"""

from __future__ import annotations

from dataclasses import asdict

import numpy as np

from .container import ContainerError, PayloadWriter, read_container, read_entry, write_container
from .model import ModelConfig, SensorTransformer
from .numerics import Precision, Rng
from .peft import InitScheme, LoraConfig, iter_adapters


def parameter_payload(model: SensorTransformer) -> bytes:
    """Concatenated little-endian float64 bytes of every named parameter.

    The stable ordering makes this usable as a byte-level fingerprint of the
    model's weights (frozen-backbone immutability checks compare it).
    """
    chunks = [np.ascontiguousarray(p.value.data, dtype="<f8").tobytes()
              for _, p in sorted(model.named_parameters())]
    return b"".join(chunks)


def quantized_payload(model: SensorTransformer) -> bytes:
    """Byte fingerprint of all quantized base weights (codes and scales)."""
    chunks = []
    for name, q in sorted(model.named_quantized()):
        chunks.append(q.packed_codes.tobytes())
        if q.double_quantized:
            chunks.append(q.scale_codes.tobytes())
            chunks.append(np.ascontiguousarray(q.group_steps, dtype="<f4").tobytes())
        else:
            chunks.append(np.ascontiguousarray(q.block_scales, dtype="<f4").tobytes())
    return b"".join(chunks)


def backbone_fingerprint(model: SensorTransformer) -> bytes:
    """Bytes of everything frozen-side: backbone parameters plus quantized storage."""
    head_ids = set()
    if model.head is not None:
        head_ids = {id(p) for _, p in model.head.named_parameters()}
    chunks = []
    for name, p in sorted(model.named_parameters()):
        if id(p) in head_ids or name.endswith((".lora_A", ".lora_B")):
            continue
        chunks.append(np.ascontiguousarray(p.value.data, dtype="<f8").tobytes())
    return b"".join(chunks) + quantized_payload(model)


def save_model(model: SensorTransformer, path) -> None:
    if model.wrapped:
        raise ContainerError("save adapters separately; model checkpoints are unwrapped")
    writer = PayloadWriter()
    for name, p in model.named_parameters():
        writer.add(name, p.value.data, "f64", trainable=p.trainable,
                   precision=p.precision_class.value)
    buffers = model.head.buffers() if model.head is not None else {}
    for name, arr in buffers.items():
        writer.add(name, arr, "f64", buffer=True)
    meta = {
        "config": asdict(model.config),
        "has_decoder": model.has_decoder(),
        "has_head": model.head is not None,
    }
    write_container(path, "model", meta, writer)


def load_model(path) -> SensorTransformer:
    manifest, payload = read_container(path, expect_kind="model")
    meta = manifest["meta"]
    config = ModelConfig(**meta["config"])
    model = SensorTransformer(config, Rng(0))
    if meta["has_head"]:
        from .finetune import attach_head
        attach_head(model, Rng(0), keep_decoder=meta["has_decoder"])
    if not meta["has_decoder"] and model.has_decoder():
        model.drop_decoder()
    named = dict(model.named_parameters())
    buffers = model.head.buffers() if model.head is not None else {}
    for entry in manifest["entries"]:
        name = entry["name"]
        values = read_entry(entry, payload)
        if entry.get("buffer"):
            buffers[name][:] = values
            continue
        if name not in named:
            raise ContainerError(f"checkpoint entry {name} has no matching parameter")
        param = named[name]
        if list(param.value.shape) != entry["shape"]:
            raise ContainerError(f"{name}: shape {entry['shape']} does not match model")
        param.value.data[:] = values
        param.trainable = bool(entry.get("trainable", True))
        param.precision_class = Precision(entry.get("precision", "full"))
    return model


def save_adapters(model: SensorTransformer, path) -> None:
    if not model.wrapped:
        raise ContainerError("model has no adapters to save")
    cfg: LoraConfig = model.lora_config
    writer = PayloadWriter()
    targets = []
    for adapter in iter_adapters(model):
        targets.append(adapter.target_layer_id)
        writer.add(f"{adapter.target_layer_id}.A", adapter.A.value.data, "f64")
        writer.add(f"{adapter.target_layer_id}.B", adapter.B.value.data, "f64")
    meta = {
        "rank": cfg.rank,
        "alpha": cfg.alpha,
        "targets": sorted(cfg.targets),
        "init_scheme": cfg.init_scheme.value,
        "quantized_base": bool(model.named_quantized()),
        "adapter_ids": targets,
    }
    write_container(path, "adapters", meta, writer)


def load_adapters_into(model: SensorTransformer, path) -> SensorTransformer:
    """Wrap an unwrapped backbone and load saved adapter factors into it."""
    manifest, payload = read_container(path, expect_kind="adapters")
    meta = manifest["meta"]
    from .peft import wrap_model
    config = LoraConfig(rank=meta["rank"], alpha=meta["alpha"],
                        targets=frozenset(meta["targets"]),
                        init_scheme=InitScheme(meta["init_scheme"]))
    wrap_model(model, config, quantize=meta["quantized_base"], rng=Rng(0))
    entries = {e["name"]: e for e in manifest["entries"]}
    for adapter in iter_adapters(model):
        for factor, param in (("A", adapter.A), ("B", adapter.B)):
            entry = entries.get(f"{adapter.target_layer_id}.{factor}")
            if entry is None:
                raise ContainerError(f"missing adapter entry for {adapter.target_layer_id}")
            param.value.data[:] = read_entry(entry, payload)
    return model


def clone_backbone(model: SensorTransformer) -> SensorTransformer:
    """Fresh unwrapped copy of an unwrapped model with identical weights."""
    if model.wrapped:
        raise ContainerError("clone the backbone before wrapping")
    twin = SensorTransformer(model.config, Rng(0))
    if model.head is not None:
        from .finetune import attach_head
        attach_head(twin, Rng(0), keep_decoder=model.has_decoder())
    if not model.has_decoder() and twin.has_decoder():
        twin.drop_decoder()
    source = dict(model.named_parameters())
    for name, p in twin.named_parameters():
        p.value.data[:] = source[name].value.data
        p.trainable = source[name].trainable
        p.precision_class = source[name].precision_class
    if model.head is not None:
        twin.head.running_mean[:] = model.head.running_mean
        twin.head.running_var[:] = model.head.running_var
    return twin

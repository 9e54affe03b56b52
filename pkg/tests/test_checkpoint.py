"""Tests for the container format and checkpoint round trips."""

import numpy as np
import pytest

from harpeft.checkpoint import (
    backbone_fingerprint,
    clone_backbone,
    load_adapters_into,
    load_model,
    save_adapters,
    save_model,
)
from harpeft.container import ContainerError, read_container
from harpeft.finetune import attach_head
from harpeft.model import ModelConfig, SensorTransformer
from harpeft.numerics import Rng
from harpeft.peft import LoraConfig, iter_adapters, wrap_model


def tiny_model(seed=0):
    return SensorTransformer(ModelConfig.tiny(n_classes=3), Rng(seed))


class TestModelCheckpoint:
    def test_forward_outputs_bit_identical_after_reload(self, tmp_path):
        model = tiny_model(seed=1)
        path = tmp_path / "backbone.ckpt"
        save_model(model, path)
        twin = load_model(path)
        window = np.random.default_rng(2).normal(size=(128, 6))
        np.testing.assert_array_equal(twin.encode(window).data,
                                      model.encode(window).data)

    def test_reconstruction_identical_after_reload(self, tmp_path):
        model = tiny_model(seed=3)
        path = tmp_path / "backbone.ckpt"
        save_model(model, path)
        twin = load_model(path)
        window = np.random.default_rng(4).normal(size=(128, 6))
        assert twin.reconstruction_loss(window, Rng(9)).item() == \
            model.reconstruction_loss(window, Rng(9)).item()

    def test_head_and_buffers_roundtrip(self, tmp_path):
        model = attach_head(tiny_model(seed=5), Rng(6))
        model.head.running_mean[:] = 0.25
        path = tmp_path / "classifier.ckpt"
        save_model(model, path)
        twin = load_model(path)
        assert twin.head is not None
        np.testing.assert_array_equal(twin.head.running_mean, model.head.running_mean)
        window = np.random.default_rng(7).normal(size=(128, 6))
        from harpeft.finetune import pool_and_classify
        np.testing.assert_array_equal(
            pool_and_classify(twin.encode(window), twin.head).data,
            pool_and_classify(model.encode(window), model.head).data)

    def test_wrapped_model_refused(self, tmp_path):
        model = attach_head(tiny_model(), Rng(1))
        wrap_model(model, LoraConfig(rank=2), quantize=False, rng=Rng(2))
        with pytest.raises(ContainerError):
            save_model(model, tmp_path / "nope.ckpt")

    def test_manifest_is_self_describing(self, tmp_path):
        model = tiny_model(seed=8)
        path = tmp_path / "backbone.ckpt"
        save_model(model, path)
        manifest, _ = read_container(path, expect_kind="model")
        names = {e["name"] for e in manifest["entries"]}
        assert "enc0.q.weight" in names
        assert manifest["meta"]["config"]["embed_dim"] == 16
        entry = next(e for e in manifest["entries"] if e["name"] == "enc0.q.weight")
        assert entry["shape"] == [16, 16]
        assert entry["precision"] == "full"

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"not a container at all")
        with pytest.raises(ContainerError):
            load_model(path)


class TestAdapterCheckpoint:
    def test_adapter_roundtrip_preserves_forward(self, tmp_path):
        base = attach_head(tiny_model(seed=9), Rng(10))
        backbone_path = tmp_path / "backbone.ckpt"
        # save the unwrapped classifier model first so both sides share it
        save_model(base, backbone_path)
        wrap_model(base, LoraConfig(rank=2, alpha=4.0), quantize=False, rng=Rng(11))
        rng = np.random.default_rng(12)
        for adapter in iter_adapters(base):
            adapter.A.value.data[:] = rng.normal(size=adapter.A.value.shape)
        adapters_path = tmp_path / "adapters.ckpt"
        save_adapters(base, adapters_path)

        twin = load_model(backbone_path)
        load_adapters_into(twin, adapters_path)
        window = rng.normal(size=(128, 6))
        np.testing.assert_array_equal(twin.encode(window).data,
                                      base.encode(window).data)

    def test_one_backbone_many_adapters(self, tmp_path):
        base = attach_head(tiny_model(seed=13), Rng(14))
        backbone_path = tmp_path / "backbone.ckpt"
        save_model(base, backbone_path)
        paths = []
        for i, alpha in enumerate((2.0, 8.0)):
            model = load_model(backbone_path)
            wrap_model(model, LoraConfig(rank=2, alpha=alpha), quantize=False,
                       rng=Rng(20 + i))
            path = tmp_path / f"adapters_{i}.ckpt"
            save_adapters(model, path)
            paths.append(path)
        manifests = [read_container(p, expect_kind="adapters")[0] for p in paths]
        assert manifests[0]["meta"]["alpha"] == 2.0
        assert manifests[1]["meta"]["alpha"] == 8.0

    def test_unwrapped_model_has_no_adapters_to_save(self, tmp_path):
        with pytest.raises(ContainerError):
            save_adapters(tiny_model(), tmp_path / "nope.ckpt")


class TestFingerprints:
    def test_fingerprint_excludes_head_and_adapters(self):
        model = attach_head(tiny_model(seed=15), Rng(16))
        before = backbone_fingerprint(model)
        model.head.hidden.weight.value.data += 1.0
        assert backbone_fingerprint(model) == before
        wrap_model(model, LoraConfig(rank=2), quantize=False, rng=Rng(17))
        wrapped = backbone_fingerprint(model)
        assert wrapped == before
        for adapter in iter_adapters(model):
            adapter.B.value.data += 1.0
        assert backbone_fingerprint(model) == wrapped

    def test_fingerprint_sees_backbone_changes(self):
        model = tiny_model(seed=18)
        before = backbone_fingerprint(model)
        model.enc_blocks[0].q.weight.value.data += 1e-9
        assert backbone_fingerprint(model) != before

    def test_clone_preserves_fingerprint(self):
        model = tiny_model(seed=19)
        assert backbone_fingerprint(clone_backbone(model)) == backbone_fingerprint(model)

    def test_qlora_fingerprint_covers_quantized_payload(self):
        model = attach_head(tiny_model(seed=20), Rng(21))
        wrap_model(model, LoraConfig(rank=2), quantize=True, rng=Rng(22))
        before = backbone_fingerprint(model)
        model.enc_blocks[0].q.base_weight.packed_codes[0] ^= 0x0F
        assert backbone_fingerprint(model) != before

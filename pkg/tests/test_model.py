"""Tests for patching, masking, attention and the reconstruction objective."""

import numpy as np
import pytest

from conftest import check_param_grad
from harpeft import numerics as nm
from harpeft.model import (
    ConfigError,
    EncoderBlock,
    MaskSpec,
    ModelConfig,
    SensorTransformer,
    embed_patches,
    encoder_forward,
    feed_forward,
    mae_decode,
    mae_loss,
    multi_head_attention,
    patchify,
    random_mask,
    sinusoidal_positions,
    unpatchify,
)
from harpeft.numerics import Matrix, Rng


def tiny_model(seed=0, **overrides):
    return SensorTransformer(ModelConfig.tiny(**overrides), Rng(seed))


class TestConfig:
    def test_patch_must_divide_window(self):
        with pytest.raises(ConfigError):
            ModelConfig(window_len=128, patch_len=25)

    def test_heads_must_divide_dim(self):
        with pytest.raises(ConfigError):
            ModelConfig(embed_dim=30, n_heads=4)

    def test_mask_ratio_bounds(self):
        with pytest.raises(ConfigError):
            ModelConfig(mask_ratio=1.0)

    def test_defaults(self):
        cfg = ModelConfig()
        assert cfg.n_enc_layers == 6
        assert cfg.n_tokens == 8
        assert cfg.patch_dim == 96


class TestPatchify:
    def test_dimensions(self):
        window = np.arange(128 * 6, dtype=float).reshape(128, 6)
        patches = patchify(window, 16)
        assert patches.shape == (8, 96)

    def test_single_patch_when_patch_is_window(self):
        window = np.random.default_rng(0).normal(size=(128, 6))
        assert patchify(window, 128).shape == (1, 768)

    def test_roundtrip_is_exact(self):
        window = np.random.default_rng(1).normal(size=(128, 6))
        back = unpatchify(patchify(window, 16), channels=6)
        np.testing.assert_array_equal(back, window)

    def test_rejects_non_divisor(self):
        with pytest.raises(ConfigError):
            patchify(np.zeros((100, 6)), 16)


class TestEmbedPatches:
    def test_zero_projection_gives_positions(self):
        model = tiny_model()
        model.patch_embed.weight.value.data[:] = 0.0
        patches = Matrix(np.random.default_rng(2).normal(size=(4, 192)))
        out = embed_patches(patches, model.patch_embed)
        np.testing.assert_array_equal(out.data, sinusoidal_positions(4, 16))

    def test_identical_patches_at_different_positions_differ(self):
        model = tiny_model()
        patches = Matrix(np.tile(np.random.default_rng(3).normal(size=(1, 192)), (4, 1)))
        out = embed_patches(patches, model.patch_embed)
        assert not np.allclose(out.data[0], out.data[1])

    def test_output_shape(self):
        rng = Rng(4)
        from harpeft.model import Linear
        embed = Linear(40, 32, rng, "embed")
        patches = Matrix(np.random.default_rng(5).normal(size=(8, 40)))
        assert embed_patches(patches, embed).shape == (8, 32)


class TestAttention:
    def _block(self, d=16, h=32, heads=2, seed=0):
        cfg = ModelConfig.tiny(embed_dim=d, ffn_hidden=h, n_heads=heads)
        return EncoderBlock(cfg, Rng(seed), "blk")

    def test_single_token_attends_to_itself(self):
        block = self._block()
        z = Matrix(np.random.default_rng(6).normal(size=(1, 16)))
        out = multi_head_attention(z, block)
        v = block.v.forward(z)
        expected = block.o.forward(v)
        np.testing.assert_allclose(out.data, expected.data, atol=1e-12)

    def test_uniform_attention_when_scores_constant(self):
        block = self._block()
        # Zero queries make Q K^T constant, so attention averages the values.
        block.q.weight.value.data[:] = 0.0
        block.q.bias.value.data[:] = 0.0
        z = Matrix(np.random.default_rng(7).normal(size=(5, 16)))
        out = multi_head_attention(z, block)
        v = block.v.forward(z).data.mean(axis=0, keepdims=True)
        expected = block.o.forward(Matrix(np.tile(v, (5, 1))))
        np.testing.assert_allclose(out.data, expected.data, atol=1e-12)

    def test_permutation_equivariance(self):
        block = self._block()
        rng = np.random.default_rng(8)
        z = rng.normal(size=(6, 16))
        perm = rng.permutation(6)
        out = multi_head_attention(Matrix(z), block).data
        out_perm = multi_head_attention(Matrix(z[perm]), block).data
        np.testing.assert_allclose(out_perm, out[perm], atol=1e-12)


class TestFeedForward:
    def test_zero_weights_give_zero(self):
        block = TestAttention()._block()
        for layer in (block.ffn1, block.ffn2):
            layer.weight.value.data[:] = 0.0
            layer.bias.value.data[:] = 0.0
        z = Matrix(np.random.default_rng(9).normal(size=(4, 16)))
        np.testing.assert_array_equal(feed_forward(z, block).data, 0.0)

    def test_identity_weights_compose_gelu(self):
        cfg = ModelConfig.tiny(embed_dim=16, ffn_hidden=16, n_heads=2)
        block = EncoderBlock(cfg, Rng(10), "blk")
        for layer in (block.ffn1, block.ffn2):
            layer.weight.value.data[:] = np.eye(16)
            layer.bias.value.data[:] = 0.0
        z = Matrix(np.random.default_rng(11).normal(size=(3, 16)))
        np.testing.assert_allclose(feed_forward(z, block).data,
                                   nm.gelu(z).data, atol=1e-12)

    def test_gradient_through_block(self):
        block = TestAttention()._block(seed=12)
        rng = np.random.default_rng(12)
        z = Matrix(rng.normal(size=(3, 16)))
        weights = rng.normal(size=(3, 16))

        def loss():
            return nm.sum_all(nm.mul(feed_forward(z, block), Matrix(weights)))

        for p in (block.ffn1.weight, block.ffn1.bias, block.ffn2.weight, block.ffn2.bias):
            check_param_grad(loss, p, rng, tol=1e-4)


class TestEncoderForward:
    def test_zero_weight_blocks_leave_input_unchanged(self):
        # With all projection weights and biases at zero, each residual branch
        # contributes exactly zero regardless of the layer norms.
        model = tiny_model(seed=13)
        for block in model.enc_blocks:
            for layer in block.projection_layers().values():
                layer.weight.value.data[:] = 0.0
                layer.bias.value.data[:] = 0.0
        z = Matrix(np.random.default_rng(14).normal(size=(4, 16)))
        out = encoder_forward(z, model.enc_blocks)
        np.testing.assert_array_equal(out.data, z.data)

    def test_single_block_single_token_matches_hand_composition(self):
        block = TestAttention()._block(seed=15)
        z = Matrix(np.random.default_rng(16).normal(size=(1, 16)))
        out = encoder_forward(z, [block])
        from harpeft.model import LN_EPS
        normed1 = nm.layer_norm(z, block.ln1_gain, block.ln1_bias, LN_EPS)
        mid = nm.add(z, block.o.forward(block.v.forward(normed1)))
        normed2 = nm.layer_norm(mid, block.ln2_gain, block.ln2_bias, LN_EPS)
        expected = nm.add(mid, feed_forward(normed2, block))
        np.testing.assert_allclose(out.data, expected.data, atol=1e-12)

    def test_shape_preserved(self):
        model = tiny_model(seed=17)
        z = Matrix(np.random.default_rng(18).normal(size=(4, 16)))
        assert encoder_forward(z, model.enc_blocks).shape == (4, 16)

    def test_requires_blocks(self):
        with pytest.raises(ConfigError):
            encoder_forward(Matrix(np.zeros((2, 4))), [])


class TestRandomMask:
    def test_paper_mask_count(self):
        mask = random_mask(16, 0.75, Rng(0))
        assert len(mask.masked_indices) == 12

    def test_round_half_up(self):
        mask = random_mask(10, 0.25, Rng(0))
        assert len(mask.masked_indices) == 3  # 2.5 rounds up

    def test_determinism(self):
        assert random_mask(16, 0.75, Rng(5)) == random_mask(16, 0.75, Rng(5))

    def test_degenerate_masks_rejected(self):
        with pytest.raises(ConfigError):
            random_mask(4, 0.05, Rng(0))
        with pytest.raises(ConfigError):
            random_mask(4, 0.95, Rng(0))

    def test_uniform_marginals(self):
        # every index masked with frequency 0.5 +/- 0.02 over 10^4 draws
        trials = 10_000
        counts = np.zeros(8)
        rng = Rng(42)
        for t in range(trials):
            counts[list(random_mask(8, 0.5, rng.child(f"t{t}")).masked_indices)] += 1
        np.testing.assert_allclose(counts / trials, 0.5, atol=0.02)

    def test_partition_invariant(self):
        for t in range(3, 20):
            mask = random_mask(t, 0.6, Rng(t))
            assert sorted(mask.masked_indices + mask.visible_indices) == list(range(t))

    def test_bad_partition_rejected(self):
        with pytest.raises(ConfigError):
            MaskSpec(masked_indices=(0, 1), visible_indices=(1, 2), total_tokens=3)


class TestMaeDecodeAndLoss:
    def test_decode_output_shape(self):
        model = tiny_model(seed=19)
        window = np.random.default_rng(20).normal(size=(128, 6))
        mask = random_mask(4, 0.75, Rng(1))
        tokens = model.embed_window(window)
        visible = nm.select_rows(tokens, np.array(mask.visible_indices))
        encoded = encoder_forward(visible, model.enc_blocks)
        pred = mae_decode(encoded, mask, model.dec_blocks, model.mask_token, model.dec_out)
        assert pred.shape == (4, 192)

    def test_decode_checks_visible_count(self):
        model = tiny_model(seed=21)
        mask = random_mask(4, 0.75, Rng(2))
        with pytest.raises(IndexError):
            mae_decode(Matrix(np.zeros((3, 16))), mask, model.dec_blocks,
                       model.mask_token, model.dec_out)

    def test_loss_zero_when_exact(self):
        mask = random_mask(4, 0.5, Rng(3))
        pred = Matrix(np.random.default_rng(22).normal(size=(4, 6)))
        assert mae_loss(pred, Matrix(pred.data.copy()), mask).item() == 0.0

    def test_loss_hand_arithmetic(self):
        mask = MaskSpec(masked_indices=(1,), visible_indices=(0, 2), total_tokens=3)
        pred = Matrix(np.zeros((3, 4)))
        target = np.zeros((3, 4))
        target[1] = [1.0, 1.0, 1.0, 1.0]
        assert mae_loss(pred, Matrix(target), mask).item() == pytest.approx(4.0)

    def test_visible_positions_do_not_affect_loss(self):
        mask = MaskSpec(masked_indices=(0,), visible_indices=(1,), total_tokens=2)
        rng = np.random.default_rng(23)
        pred = rng.normal(size=(2, 5))
        target = rng.normal(size=(2, 5))
        base = mae_loss(Matrix(pred), Matrix(target), mask).item()
        perturbed = pred.copy()
        perturbed[1] += 100.0
        assert mae_loss(Matrix(perturbed), Matrix(target), mask).item() == base

    def test_empty_mask_rejected(self):
        with pytest.raises(ConfigError):
            mae_loss(Matrix(np.zeros((2, 2))), Matrix(np.zeros((2, 2))),
                     MaskSpec(masked_indices=(), visible_indices=(0, 1), total_tokens=2))

    def test_reconstruction_deterministic_under_seed(self):
        window = np.random.default_rng(24).normal(size=(128, 6))
        losses = []
        for _ in range(2):
            model = tiny_model(seed=25)
            losses.append(model.reconstruction_loss(window, Rng(7)).item())
        assert losses[0] == losses[1]

    def test_single_masked_token_loss_locality(self):
        # With one masked slot, only that slot's prediction error matters.
        model = tiny_model(seed=26)
        window = np.random.default_rng(27).normal(size=(128, 6))
        patches = patchify(window, 32)
        mask = MaskSpec(masked_indices=(2,), visible_indices=(0, 1, 3), total_tokens=4)
        tokens = model.embed_window(window)
        visible = nm.select_rows(tokens, np.array(mask.visible_indices))
        encoded = encoder_forward(visible, model.enc_blocks)
        pred = mae_decode(encoded, mask, model.dec_blocks, model.mask_token, model.dec_out)
        loss = mae_loss(pred, patches, mask).item()
        by_hand = float(((pred.data[2] - patches.data[2]) ** 2).sum())
        assert loss == pytest.approx(by_hand)


class TestEndToEndGradients:
    def test_reconstruction_gradients_match_finite_differences(self):
        model = tiny_model(seed=28)
        window = np.random.default_rng(29).normal(size=(128, 6))
        rng = np.random.default_rng(30)
        mask_rng_seed = 11

        def loss():
            return model.reconstruction_loss(window, Rng(mask_rng_seed))

        checked = ["enc0.q.weight", "enc0.ffn1.weight", "enc1.v.weight",
                   "patch_embed.weight", "mask_token", "dec_out.weight",
                   "enc0.ln1.gain", "dec0.ffn2.weight"]
        params = dict(model.named_parameters())
        for name in checked:
            check_param_grad(loss, params[name], rng, tol=1e-4, n_directions=1)

    def test_attention_rows_sum_to_one(self):
        # direct check on the softmax feeding attention
        rng = np.random.default_rng(31)
        scores = Matrix(rng.normal(size=(6, 6)) * 3)
        probs = nm.softmax_rows(scores)
        np.testing.assert_allclose(probs.data.sum(axis=1), 1.0, atol=1e-12)

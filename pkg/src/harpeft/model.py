"""Transformer encoder-decoder over patched sensor windows, with masked
reconstruction pretraining.

A 128 x C window is cut into non-overlapping patches of ``patch_len`` samples
spanning all channels jointly (token width = patch_len * channels), linearly
embedded, and combined with fixed sinusoidal positional encodings. Blocks are
pre-norm residual: attention and feed-forward each read a layer-normalized
copy of their input and add their output back onto the residual stream.

During pretraining a random subset of tokens is hidden from the encoder; the
decoder re-inserts a learned mask token at the hidden slots and reconstructs
the raw patch values, scored by mean squared error over the hidden slots only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .numerics import (
    Matrix,
    Parameter,
    Rng,
    add,
    add_row,
    col_slice,
    concat_cols,
    concat_rows,
    gelu,
    layer_norm,
    matmul,
    mul,
    scale,
    select_rows,
    softmax_rows,
    sub,
    sum_all,
    transpose,
)

LN_EPS = 1e-5


class ConfigError(ValueError):
    """A model or masking configuration violates its preconditions."""


@dataclass(frozen=True)
class ModelConfig:
    """Dimensions of the backbone; see class docstring for the layout rules."""

    window_len: int = 128
    channels: int = 6
    patch_len: int = 16
    embed_dim: int = 64
    ffn_hidden: int = 128
    n_heads: int = 4
    n_enc_layers: int = 6
    n_dec_layers: int = 2
    mask_ratio: float = 0.75
    n_classes: int = 6
    head_hidden: int = 0  # 0 means "same as embed_dim"

    def __post_init__(self):
        if self.window_len <= 0 or self.patch_len <= 0:
            raise ConfigError("window_len and patch_len must be positive")
        if self.window_len % self.patch_len != 0:
            raise ConfigError(
                f"patch_len {self.patch_len} does not divide window_len {self.window_len}")
        if self.embed_dim % self.n_heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio must be in (0, 1), got {self.mask_ratio}")
        if min(self.channels, self.n_enc_layers, self.n_dec_layers,
               self.n_classes, self.ffn_hidden) < 1:
            raise ConfigError("all structural counts must be >= 1")

    @property
    def n_tokens(self) -> int:
        return self.window_len // self.patch_len

    @property
    def patch_dim(self) -> int:
        return self.patch_len * self.channels

    @property
    def head_width(self) -> int:
        return self.head_hidden or self.embed_dim

    def with_classes(self, n_classes: int) -> "ModelConfig":
        return replace(self, n_classes=n_classes)

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        """Seconds-scale model for tests and smoke runs."""
        base = dict(embed_dim=16, ffn_hidden=32, n_heads=2, n_enc_layers=2,
                    n_dec_layers=1, patch_len=32)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def small(cls, **overrides) -> "ModelConfig":
        """Minutes-scale model used by the synthetic benchmark runs."""
        base = dict(embed_dim=32, ffn_hidden=64, n_heads=4, n_enc_layers=2,
                    n_dec_layers=2, patch_len=16)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def base(cls, **overrides) -> "ModelConfig":
        """Backbone of roughly 2.2M classifier-path parameters.

        The decoder mirrors the encoder depth, so the pretraining container
        is usable for the storage comparisons in :mod:`harpeft.evaluate`.
        """
        base = dict(embed_dim=208, ffn_hidden=416, n_heads=4, n_enc_layers=6,
                    n_dec_layers=6, patch_len=16)
        base.update(overrides)
        return cls(**base)


@dataclass(frozen=True)
class MaskSpec:
    """Partition of token positions into masked and visible sets."""

    masked_indices: tuple[int, ...]
    visible_indices: tuple[int, ...]
    total_tokens: int

    def __post_init__(self):
        masked, visible = set(self.masked_indices), set(self.visible_indices)
        if masked & visible or masked | visible != set(range(self.total_tokens)):
            raise ConfigError("masked and visible sets must partition the positions")


def random_mask(total_tokens: int, mask_ratio: float, rng: Rng) -> MaskSpec:
    """Uniform random mask over ``round(mask_ratio * T)`` positions (half rounds up)."""
    if total_tokens < 2:
        raise ConfigError("need at least 2 tokens to mask")
    if not 0.0 < mask_ratio < 1.0:
        raise ConfigError(f"mask_ratio must be in (0, 1), got {mask_ratio}")
    n_masked = int(math.floor(mask_ratio * total_tokens + 0.5))
    if n_masked in (0, total_tokens):
        raise ConfigError(
            f"degenerate mask: {n_masked} of {total_tokens} tokens masked")
    perm = rng.permutation(total_tokens)
    return MaskSpec(
        masked_indices=tuple(sorted(int(i) for i in perm[:n_masked])),
        visible_indices=tuple(sorted(int(i) for i in perm[n_masked:])),
        total_tokens=total_tokens,
    )


def sinusoidal_positions(n_positions: int, dim: int) -> np.ndarray:
    """Fixed sine/cosine position table, one row per position."""
    pos = np.arange(n_positions, dtype=np.float64).reshape(-1, 1)
    idx = np.arange(0, dim, 2, dtype=np.float64)
    angles = pos / np.power(10000.0, idx / dim)
    table = np.zeros((n_positions, dim))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles[:, : table[:, 1::2].shape[1]])
    return table


def patchify(window, patch_len: int) -> Matrix:
    """Split an L x C window into L/patch_len tokens of width patch_len * C.

    Tokens are time-major: token i flattens samples [i*P, (i+1)*P) with the
    channel values of each sample kept adjacent, so unpatchify is exact.
    """
    data = window.data if isinstance(window, Matrix) else np.asarray(window, dtype=np.float64)
    n_samples, channels = data.shape
    if n_samples % patch_len != 0:
        raise ConfigError(f"patch_len {patch_len} does not divide window length {n_samples}")
    return Matrix(data.reshape(n_samples // patch_len, patch_len * channels))


def unpatchify(patches, channels: int) -> np.ndarray:
    """Inverse of :func:`patchify`."""
    data = patches.data if isinstance(patches, Matrix) else np.asarray(patches)
    n_tokens, token_dim = data.shape
    if token_dim % channels != 0:
        raise ConfigError(f"token width {token_dim} not divisible by {channels} channels")
    return data.reshape(n_tokens * (token_dim // channels), channels)


class Linear:
    """Affine map ``x @ W + b`` with W stored input x output."""

    def __init__(self, d_in: int, d_out: int, rng: Rng, name: str):
        std = 1.0 / math.sqrt(d_in)
        self.weight = Parameter(rng.normal(d_in, d_out, std=std), name=f"{name}.weight")
        self.bias = Parameter(np.zeros((1, d_out)), name=f"{name}.bias")

    @property
    def d_in(self) -> int:
        return self.weight.rows

    @property
    def d_out(self) -> int:
        return self.weight.cols

    def forward(self, x) -> Matrix:
        return add_row(matmul(x, self.weight), self.bias)

    def named_parameters(self):
        return [(self.weight.name, self.weight), (self.bias.name, self.bias)]

    def named_quantized(self):
        return []


ATTENTION_TARGETS = ("q", "k", "v", "o")
FFN_TARGETS = ("ffn1", "ffn2")
ALL_TARGETS = ATTENTION_TARGETS + FFN_TARGETS


class EncoderBlock:
    """Pre-norm transformer block: attention and feed-forward sublayers.

    The six projection layers are plain :class:`Linear` objects until an
    adapter wrap replaces them; everything downstream only relies on their
    ``forward`` method.
    """

    def __init__(self, config: ModelConfig, rng: Rng, name: str):
        d, h = config.embed_dim, config.ffn_hidden
        self.n_heads = config.n_heads
        self.q = Linear(d, d, rng.child("q"), f"{name}.q")
        self.k = Linear(d, d, rng.child("k"), f"{name}.k")
        self.v = Linear(d, d, rng.child("v"), f"{name}.v")
        self.o = Linear(d, d, rng.child("o"), f"{name}.o")
        self.ffn1 = Linear(d, h, rng.child("ffn1"), f"{name}.ffn1")
        self.ffn2 = Linear(h, d, rng.child("ffn2"), f"{name}.ffn2")
        self.ln1_gain = Parameter(np.ones((1, d)), name=f"{name}.ln1.gain")
        self.ln1_bias = Parameter(np.zeros((1, d)), name=f"{name}.ln1.bias")
        self.ln2_gain = Parameter(np.ones((1, d)), name=f"{name}.ln2.gain")
        self.ln2_bias = Parameter(np.zeros((1, d)), name=f"{name}.ln2.bias")

    def projection_layers(self):
        return {"q": self.q, "k": self.k, "v": self.v, "o": self.o,
                "ffn1": self.ffn1, "ffn2": self.ffn2}

    def norm_parameters(self):
        return [self.ln1_gain, self.ln1_bias, self.ln2_gain, self.ln2_bias]

    def named_parameters(self):
        out = []
        for layer in self.projection_layers().values():
            out.extend(layer.named_parameters())
        out.extend((p.name, p) for p in self.norm_parameters())
        return out

    def named_quantized(self):
        out = []
        for layer in self.projection_layers().values():
            out.extend(layer.named_quantized())
        return out


def multi_head_attention(tokens: Matrix, block: EncoderBlock) -> Matrix:
    """Scaled dot-product attention over all tokens, one softmax per head."""
    d = tokens.cols
    n_heads = block.n_heads
    d_head = d // n_heads
    q = block.q.forward(tokens)
    k = block.k.forward(tokens)
    v = block.v.forward(tokens)
    inv_sqrt_dk = 1.0 / math.sqrt(d_head)
    heads = []
    for h in range(n_heads):
        lo, hi = h * d_head, (h + 1) * d_head
        scores = scale(matmul(col_slice(q, lo, hi), transpose(col_slice(k, lo, hi))),
                       inv_sqrt_dk)
        heads.append(matmul(softmax_rows(scores), col_slice(v, lo, hi)))
    return block.o.forward(concat_cols(heads))


def feed_forward(tokens: Matrix, block: EncoderBlock) -> Matrix:
    return block.ffn2.forward(gelu(block.ffn1.forward(tokens)))


def encoder_forward(tokens: Matrix, blocks) -> Matrix:
    """Pre-norm residual stack: z += MSA(LN(z)); z += FFN(LN(z))."""
    blocks = list(blocks)
    if not blocks:
        raise ConfigError("encoder_forward: no blocks")
    z = tokens
    for block in blocks:
        z = add(z, multi_head_attention(
            layer_norm(z, block.ln1_gain, block.ln1_bias, LN_EPS), block))
        z = add(z, feed_forward(
            layer_norm(z, block.ln2_gain, block.ln2_bias, LN_EPS), block))
    return z


def embed_patches(patches: Matrix, embed: Linear, positions: np.ndarray | None = None) -> Matrix:
    """Linear patch projection plus fixed sinusoidal positional encoding."""
    projected = embed.forward(patches)
    if positions is None:
        positions = sinusoidal_positions(projected.rows, projected.cols)
    if positions.shape != projected.shape:
        raise ConfigError(f"positions {positions.shape} vs tokens {projected.shape}")
    return add(projected, Matrix(positions))


def mae_decode(encoded_visible: Matrix, mask: MaskSpec, decoder_blocks,
               mask_token: Parameter, output_proj: Linear) -> Matrix:
    """Rebuild the full sequence with mask tokens, decode, project to patches.

    Positional encodings are re-added to the assembled sequence so the decoder
    can tell mask slots apart.
    """
    n_visible = len(mask.visible_indices)
    if encoded_visible.rows != n_visible:
        raise IndexError(
            f"{encoded_visible.rows} encoded rows for {n_visible} visible positions")
    total = mask.total_tokens
    d = encoded_visible.cols
    # Concatenate [visible | repeated mask token], then reorder rows into slots.
    repeated = matmul(Matrix(np.ones((len(mask.masked_indices), 1))), mask_token)
    stacked = concat_rows([encoded_visible, repeated])
    order = np.empty(total, dtype=np.intp)
    for pos_in_concat, slot in enumerate(mask.visible_indices):
        order[slot] = pos_in_concat
    for pos_in_concat, slot in enumerate(mask.masked_indices):
        order[slot] = n_visible + pos_in_concat
    assembled = add(select_rows(stacked, order), Matrix(sinusoidal_positions(total, d)))
    return output_proj.forward(encoder_forward(assembled, decoder_blocks))


def mae_loss(pred: Matrix, target: Matrix, mask: MaskSpec) -> Matrix:
    """Mean over masked positions of the squared row reconstruction error."""
    if pred.shape != target.shape:
        raise ConfigError(f"pred {pred.shape} vs target {target.shape}")
    if not mask.masked_indices:
        raise ConfigError("mae_loss: empty mask")
    diff = sub(pred, target)
    masked_sq = select_rows(mul(diff, diff), np.array(mask.masked_indices))
    return scale(sum_all(masked_sq), 1.0 / len(mask.masked_indices))


class SensorTransformer:
    """The backbone: patch embedding, encoder stack, reconstruction decoder.

    A classification head is attached by :mod:`harpeft.finetune` when the
    model moves from pretraining to adaptation; ``drop_decoder`` removes the
    reconstruction half at that point.
    """

    def __init__(self, config: ModelConfig, rng: Rng):
        self.config = config
        d = config.embed_dim
        self.patch_embed = Linear(config.patch_dim, d, rng.child("patch_embed"), "patch_embed")
        self.enc_blocks = [EncoderBlock(config, rng.child(f"enc{i}"), f"enc{i}")
                           for i in range(config.n_enc_layers)]
        self.dec_blocks = [EncoderBlock(config, rng.child(f"dec{i}"), f"dec{i}")
                           for i in range(config.n_dec_layers)]
        self.mask_token = Parameter(rng.child("mask_token").normal(1, d, std=0.02),
                                    name="mask_token")
        self.dec_out = Linear(d, config.patch_dim, rng.child("dec_out"), "dec_out")
        self.head = None
        self.wrapped = False
        self._positions = sinusoidal_positions(config.n_tokens, d)

    # -- structure ---------------------------------------------------------

    def has_decoder(self) -> bool:
        return bool(self.dec_blocks)

    def drop_decoder(self) -> None:
        """Discard the reconstruction half; done when a head is attached."""
        self.dec_blocks = []
        self.mask_token = None
        self.dec_out = None

    def _components(self):
        yield "patch_embed", self.patch_embed
        for block in self.enc_blocks:
            yield "enc", block
        for block in self.dec_blocks:
            yield "dec", block
        if self.mask_token is not None:
            yield "mask_token", self.mask_token
        if self.dec_out is not None:
            yield "dec_out", self.dec_out
        if self.head is not None:
            yield "head", self.head

    def named_parameters(self) -> list[tuple[str, Parameter]]:
        out = []
        for kind, comp in self._components():
            if isinstance(comp, Parameter):
                out.append((comp.name, comp))
            else:
                out.extend(comp.named_parameters())
        return out

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_quantized(self):
        out = []
        for kind, comp in self._components():
            if not isinstance(comp, Parameter):
                out.extend(comp.named_quantized())
        return out

    def backbone_parameters(self) -> list[Parameter]:
        """Everything except the classification head."""
        head_params = set()
        if self.head is not None:
            head_params = {id(p) for _, p in self.head.named_parameters()}
        return [p for _, p in self.named_parameters() if id(p) not in head_params]

    # -- forward passes ------------------------------------------------------

    def embed_window(self, window) -> Matrix:
        patches = patchify(window, self.config.patch_len)
        return embed_patches(patches, self.patch_embed, self._positions)

    def encode(self, window) -> Matrix:
        """Full-sequence encoder features for classification (no masking)."""
        return encoder_forward(self.embed_window(window), self.enc_blocks)

    def reconstruction_loss(self, window, rng: Rng) -> Matrix:
        """Masked reconstruction objective for one window."""
        if not self.has_decoder():
            raise ConfigError("decoder was dropped; pretraining is unavailable")
        patches = patchify(window, self.config.patch_len)
        tokens = embed_patches(patches, self.patch_embed, self._positions)
        mask = random_mask(self.config.n_tokens, self.config.mask_ratio, rng)
        visible = select_rows(tokens, np.array(mask.visible_indices))
        encoded = encoder_forward(visible, self.enc_blocks)
        pred = mae_decode(encoded, mask, self.dec_blocks, self.mask_token, self.dec_out)
        return mae_loss(pred, patches, mask)

"""Low-rank adapters and 4-bit blockwise quantization of frozen weights.

A LoRA adapter attaches two small trainable factors A (r x d_in) and
B (d_out x r) to a frozen linear map; the forward pass adds
``(alpha / r) * (x @ A.T) @ B.T`` to the frozen activation without ever
materializing the dense update. One factor starts at zero, so a freshly
wrapped model computes exactly what the unwrapped model computed.

The quantized variant stores frozen weights as packed 4-bit codes into a
16-level normal-quantile codebook with one absmax scale per block of 64
values; scales can themselves be quantized to 8 bits per group of 256
(double quantization). Dequantization happens per forward pass into a
transient dense buffer, which is what the resource accounting measures.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from .model import ALL_TARGETS, SensorTransformer
from .numerics import (
    Matrix,
    Parameter,
    Precision,
    Rng,
    add,
    add_row,
    matmul,
    scale,
    transpose,
)

DEFAULT_BLOCK_SIZE = 64
DOUBLE_QUANT_GROUP = 256


class PeftError(ValueError):
    """Adapter configuration or wrapping misuse."""


class DataError(ValueError):
    """Corrupted or inconsistent quantized payload."""


class InitScheme(enum.Enum):
    A_ZERO_B_GAUSSIAN = "a_zero_b_gaussian"
    B_ZERO_A_GAUSSIAN = "b_zero_a_gaussian"


@dataclass(frozen=True)
class LoraConfig:
    """Rank, scaling and the projection set an adapter wrap targets."""

    rank: int = 8
    alpha: float = 16.0
    targets: frozenset[str] = frozenset(ALL_TARGETS)
    init_scheme: InitScheme = InitScheme.A_ZERO_B_GAUSSIAN

    def __post_init__(self):
        if self.rank < 1:
            raise PeftError(f"rank must be >= 1, got {self.rank}")
        if self.alpha <= 0:
            raise PeftError(f"alpha must be > 0, got {self.alpha}")
        targets = frozenset(str(t).lower() for t in self.targets)
        unknown = targets - set(ALL_TARGETS)
        if unknown or not targets:
            raise PeftError(f"targets must be a non-empty subset of {ALL_TARGETS}")
        object.__setattr__(self, "targets", targets)


class LoraAdapter:
    """The (A, B, r, alpha) low-rank update attached to one frozen projection."""

    def __init__(self, A: Parameter, B: Parameter, rank: int, alpha: float,
                 target_layer_id: str = ""):
        self.A = A
        self.B = B
        self.rank = rank
        self.alpha = alpha
        self.target_layer_id = target_layer_id
        self.merged = False

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    @property
    def d_in(self) -> int:
        return self.A.cols

    @property
    def d_out(self) -> int:
        return self.B.rows

    def delta(self) -> np.ndarray:
        """Dense update (alpha/r) * (B A)^T in input x output orientation."""
        return self.scaling * (self.B.value.data @ self.A.value.data).T


def lora_init(base: Parameter, config: LoraConfig, rng: Rng,
              target_layer_id: str = "") -> LoraAdapter:
    """Create an adapter for a frozen base weight (stored input x output).

    One factor is all-zero and the other Gaussian N(0, 1/r), so the effective
    update starts at exactly zero. The base is frozen as a side effect.
    """
    d_in, d_out = base.rows, base.cols
    if config.rank >= min(d_in, d_out):
        raise PeftError(
            f"rank {config.rank} must be < min(d_in, d_out) = {min(d_in, d_out)}")
    std = 1.0 / math.sqrt(config.rank)
    if config.init_scheme is InitScheme.A_ZERO_B_GAUSSIAN:
        a_vals = np.zeros((config.rank, d_in))
        b_vals = rng.normal(d_out, config.rank, std=std)
    else:
        a_vals = rng.normal(config.rank, d_in, std=std)
        b_vals = np.zeros((d_out, config.rank))
    base.trainable = False
    prefix = target_layer_id or base.name or "adapter"
    return LoraAdapter(
        A=Parameter(a_vals, name=f"{prefix}.lora_A"),
        B=Parameter(b_vals, name=f"{prefix}.lora_B"),
        rank=config.rank,
        alpha=config.alpha,
        target_layer_id=target_layer_id,
    )


def lora_forward(x, base, adapter: LoraAdapter) -> Matrix:
    """``x @ W + (alpha/r) * (x @ A.T) @ B.T`` without materializing the update.

    Gradients reach only A and B; the base weight is frozen.
    """
    act = matmul(x, base)
    low = matmul(matmul(x, transpose(adapter.A)), transpose(adapter.B))
    return add(act, scale(low, adapter.scaling))


def lora_merge(base: Parameter, adapter: LoraAdapter) -> Matrix:
    """Dense merged weight ``W + (alpha/r) * (B A)^T``.

    The base parameter is left untouched; the adapter is marked consumed so a
    second merge (which would double the update once committed) raises.
    """
    if adapter.merged:
        raise PeftError(f"adapter {adapter.target_layer_id or ''} already merged")
    merged = Matrix(base.value.data + adapter.delta())
    adapter.merged = True
    return merged


def lora_param_count(layer_dims, rank: int) -> tuple[int, int]:
    """(adapter trainable count, dense equivalent count) over (d_in, d_out) pairs."""
    if rank < 1:
        raise PeftError(f"rank must be >= 1, got {rank}")
    trainable = sum(rank * (d_in + d_out) for d_in, d_out in layer_dims)
    full_equiv = sum(d_in * d_out for d_in, d_out in layer_dims)
    return trainable, full_equiv


# ---------------------------------------------------------------------------
# NF4 blockwise quantization
# ---------------------------------------------------------------------------

# Tail quantile of the normal distribution anchoring the extreme levels;
# after rescaling by the endpoint the codebook spans exactly [-1, 1].
_TAIL_QUANTILE = 0.9677083


class Nf4Codebook:
    """16 strictly increasing levels in [-1, 1] containing 0 and both endpoints."""

    def __init__(self, levels: np.ndarray):
        levels = np.asarray(levels, dtype=np.float64)
        if levels.shape != (16,) or not np.all(np.diff(levels) > 0):
            raise DataError("codebook must be 16 strictly increasing levels")
        if levels[0] != -1.0 or levels[-1] != 1.0 or not np.any(levels == 0.0):
            raise DataError("codebook must span [-1, 1] and contain 0")
        self.levels = levels
        self.levels.setflags(write=False)
        self.midpoints = (levels[:-1] + levels[1:]) / 2.0

    @property
    def zero_code(self) -> int:
        return int(np.flatnonzero(self.levels == 0.0)[0])


def build_nf4_codebook() -> Nf4Codebook:
    """Normal-quantile codebook: 7 negative levels, zero, 8 positive levels.

    Each side takes evenly spaced quantiles of the standard normal out to the
    same tail quantile; dividing by the extreme level puts the endpoints at
    exactly -1 and +1 while keeping 0 a level. The split is 7/8 rather than
    8/7 because 16 symmetric levels cannot all be distinct and contain 0.
    """
    positives = ndtri(np.linspace(_TAIL_QUANTILE, 0.5, 9))[:8][::-1]
    negatives = -ndtri(np.linspace(_TAIL_QUANTILE, 0.5, 8))[:7]
    levels = np.concatenate([negatives, [0.0], positives])
    return Nf4Codebook(levels / levels[-1])


_CODEBOOK = build_nf4_codebook()


@dataclass
class QuantizedMatrix:
    """Packed 4-bit codes plus blockwise absmax scales for a frozen weight.

    Codes are row-major, two per byte (low nibble first); a final odd value
    pads the high nibble with zero, which dequantization ignores. Scales are
    one float32 per block, or, when double-quantized, one uint8 code per
    block plus one float32 step per group of 256 blocks.
    """

    rows: int
    cols: int
    block_size: int
    packed_codes: np.ndarray
    double_quantized: bool
    block_scales: np.ndarray | None = None
    scale_codes: np.ndarray | None = None
    group_steps: np.ndarray | None = None
    group_size: int = DOUBLE_QUANT_GROUP
    name: str = ""

    @property
    def n_values(self) -> int:
        return self.rows * self.cols

    @property
    def n_blocks(self) -> int:
        return -(-self.n_values // self.block_size)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    def validate(self) -> None:
        if len(self.packed_codes) != (self.n_values + 1) // 2:
            raise DataError(
                f"{self.name or 'quantized matrix'}: expected "
                f"{(self.n_values + 1) // 2} code bytes, got {len(self.packed_codes)}")
        if self.double_quantized:
            if self.scale_codes is None or self.group_steps is None:
                raise DataError("double-quantized matrix is missing scale codes")
            if len(self.scale_codes) != self.n_blocks:
                raise DataError("scale code count does not match block count")
            if len(self.group_steps) != -(-self.n_blocks // self.group_size):
                raise DataError("group step count does not match group count")
        elif self.block_scales is None or len(self.block_scales) != self.n_blocks:
            raise DataError("scale count does not match block count")

    def unpack_codes(self) -> np.ndarray:
        low = self.packed_codes & 0x0F
        high = (self.packed_codes >> 4) & 0x0F
        codes = np.empty(len(self.packed_codes) * 2, dtype=np.uint8)
        codes[0::2] = low
        codes[1::2] = high
        return codes[: self.n_values]

    def effective_scales(self) -> np.ndarray:
        """Float64 per-block scales after undoing double quantization."""
        if self.double_quantized:
            steps = np.repeat(self.group_steps.astype(np.float64), self.group_size)
            return self.scale_codes.astype(np.float64) * steps[: self.n_blocks]
        return self.block_scales.astype(np.float64)

    def storage_bytes(self) -> dict[str, int]:
        """Byte accounting: ceil(values/2) code bytes plus scale metadata."""
        code_bytes = (self.n_values + 1) // 2
        if self.double_quantized:
            scale_bytes = self.n_blocks  # one uint8 code per block
            meta_bytes = 4 * (-(-self.n_blocks // self.group_size))
        else:
            scale_bytes = 4 * self.n_blocks
            meta_bytes = 0
        return {"codes": code_bytes, "scales": scale_bytes, "metadata": meta_bytes,
                "total": code_bytes + scale_bytes + meta_bytes}


def nearest_nf4_codes(normalized: np.ndarray,
                      codebook: Nf4Codebook = _CODEBOOK) -> np.ndarray:
    """Nearest-level index per value; ties at midpoints take the lower index."""
    return np.searchsorted(codebook.midpoints, normalized, side="left").astype(np.uint8)


def _pack_nibbles(codes: np.ndarray) -> np.ndarray:
    if len(codes) % 2:
        codes = np.concatenate([codes, np.zeros(1, dtype=np.uint8)])
    return (codes[0::2] | (codes[1::2] << 4)).astype(np.uint8)


def quantize_nf4(weight, block_size: int = DEFAULT_BLOCK_SIZE,
                 double_quant: bool = False, name: str = "") -> QuantizedMatrix:
    """Blockwise absmax quantization onto the NF4 codebook.

    Per block of ``block_size`` row-major values: scale = max |w|, each value
    maps to the nearest level of value/scale. All-zero blocks store scale 0
    and decode to zeros. Codes are always computed against full-precision
    scales; ``double_quant`` only compresses how the scales are stored.
    """
    if block_size < 2:
        raise PeftError(f"block_size must be >= 2, got {block_size}")
    if isinstance(weight, Parameter):
        data = weight.value.data
    elif isinstance(weight, Matrix):
        data = weight.data
    else:
        data = np.asarray(weight, dtype=np.float64)
    rows, cols = data.shape
    flat = data.ravel()
    n = flat.size
    n_blocks = -(-n // block_size)
    padded = np.zeros(n_blocks * block_size)
    padded[:n] = flat
    per_block = np.abs(padded.reshape(n_blocks, block_size)).max(axis=1)
    scales = per_block.astype(np.float32)

    elem_scale = np.repeat(scales.astype(np.float64), block_size)[:n]
    normalized = np.zeros(n)
    nonzero = elem_scale > 0
    normalized[nonzero] = flat[nonzero] / elem_scale[nonzero]
    codes = nearest_nf4_codes(normalized)
    codes[~nonzero] = _CODEBOOK.zero_code

    qm = QuantizedMatrix(rows=rows, cols=cols, block_size=block_size,
                         packed_codes=_pack_nibbles(codes),
                         double_quantized=double_quant, name=name)
    if double_quant:
        n_groups = -(-n_blocks // DOUBLE_QUANT_GROUP)
        padded_scales = np.zeros(n_groups * DOUBLE_QUANT_GROUP, dtype=np.float64)
        padded_scales[:n_blocks] = scales
        grouped = padded_scales.reshape(n_groups, DOUBLE_QUANT_GROUP)
        absmax = grouped.max(axis=1)
        steps = (absmax / 255.0).astype(np.float32)
        codes8 = np.zeros(n_blocks, dtype=np.uint8)
        step_elem = np.repeat(steps.astype(np.float64), DOUBLE_QUANT_GROUP)[:n_blocks]
        live = step_elem > 0
        codes8[live] = np.clip(
            np.rint(scales[live].astype(np.float64) / step_elem[live]), 0, 255
        ).astype(np.uint8)
        qm.scale_codes = codes8
        qm.group_steps = steps
    else:
        qm.block_scales = scales
    qm.validate()
    return qm


def dequantize_nf4(q: QuantizedMatrix) -> Matrix:
    """Decode to a dense float64 matrix; the buffer is reported to trackers."""
    q.validate()
    codes = q.unpack_codes()
    if codes.max(initial=0) >= 16:
        raise DataError("code index out of range")
    scales = np.repeat(q.effective_scales(), q.block_size)[: q.n_values]
    dense = (_CODEBOOK.levels[codes] * scales).reshape(q.rows, q.cols)
    _record_buffer(dense.nbytes)
    return Matrix(dense)


def qlora_forward(x, q: QuantizedMatrix, adapter: LoraAdapter) -> Matrix:
    """Adapter forward over a quantized frozen weight.

    The dense weight is rebuilt per call and discarded with the tape; the
    gradient flows through it to the input while only A and B accumulate.
    """
    w_hat = dequantize_nf4(q)
    act = matmul(x, w_hat)
    low = matmul(matmul(x, transpose(adapter.A)), transpose(adapter.B))
    return add(act, scale(low, adapter.scaling))


# ---------------------------------------------------------------------------
# Buffer accounting
# ---------------------------------------------------------------------------

_active_trackers: list["BufferTracker"] = []


def _record_buffer(nbytes: int) -> None:
    for tracker in _active_trackers:
        tracker.record(nbytes)


class BufferTracker:
    """Records the largest transient dequantization buffer inside its scope."""

    def __init__(self):
        self.peak_bytes = 0

    def record(self, nbytes: int) -> None:
        if nbytes > self.peak_bytes:
            self.peak_bytes = nbytes

    def __enter__(self) -> "BufferTracker":
        _active_trackers.append(self)
        return self

    def __exit__(self, *exc) -> bool:
        _active_trackers.remove(self)
        return False


# ---------------------------------------------------------------------------
# Model wrapping
# ---------------------------------------------------------------------------

class AdaptedLinear:
    """A frozen projection (dense or quantized) plus its LoRA adapter."""

    def __init__(self, base_weight, bias: Parameter, adapter: LoraAdapter):
        self.base_weight = base_weight  # Parameter or QuantizedMatrix
        self.bias = bias
        self.adapter = adapter

    @property
    def quantized(self) -> bool:
        return isinstance(self.base_weight, QuantizedMatrix)

    @property
    def d_in(self) -> int:
        return self.base_weight.rows

    @property
    def d_out(self) -> int:
        return self.base_weight.cols

    def forward(self, x) -> Matrix:
        if self.quantized:
            out = qlora_forward(x, self.base_weight, self.adapter)
        else:
            out = lora_forward(x, self.base_weight, self.adapter)
        return add_row(out, self.bias)

    def named_parameters(self):
        out = []
        if not self.quantized:
            out.append((self.base_weight.name, self.base_weight))
        out.append((self.bias.name, self.bias))
        out.append((self.adapter.A.name, self.adapter.A))
        out.append((self.adapter.B.name, self.adapter.B))
        return out

    def named_quantized(self):
        if self.quantized:
            return [(self.base_weight.name, self.base_weight)]
        return []


def iter_adapters(model: SensorTransformer):
    for block in model.enc_blocks:
        for target in ALL_TARGETS:
            layer = getattr(block, target)
            if isinstance(layer, AdaptedLinear):
                yield layer.adapter


def wrap_model(model: SensorTransformer, config: LoraConfig, quantize: bool,
               rng: Rng, block_size: int = DEFAULT_BLOCK_SIZE,
               double_quant: bool = False) -> SensorTransformer:
    """Attach adapters to every targeted encoder projection and freeze the rest.

    With ``quantize`` the targeted base weights are converted to packed NF4
    storage, while layer norms, the patch embedding, biases and any retained
    decoder weights stay in full precision flagged as high-precision
    exceptions. The classification head, if attached, remains trainable.
    """
    if model.wrapped:
        raise PeftError("model is already wrapped")
    head_params = set()
    if model.head is not None:
        head_params = {id(p) for _, p in model.head.named_parameters()}

    for i, block in enumerate(model.enc_blocks):
        for target in ALL_TARGETS:
            if target not in config.targets:
                continue
            layer = getattr(block, target)
            layer_id = f"enc{i}.{target}"
            adapter = lora_init(layer.weight, config, rng.child(f"adapter/{layer_id}"),
                                target_layer_id=layer_id)
            if quantize:
                base = quantize_nf4(layer.weight, block_size=block_size,
                                    double_quant=double_quant,
                                    name=layer.weight.name)
                bias = layer.bias
                bias.precision_class = Precision.HIGH_PRECISION_EXCEPTION
            else:
                base = layer.weight
                bias = layer.bias
            setattr(block, target, AdaptedLinear(base, bias, adapter))

    for _, param in model.named_parameters():
        if id(param) in head_params or param.name.endswith((".lora_A", ".lora_B")):
            continue
        param.trainable = False
        if quantize:
            param.precision_class = Precision.HIGH_PRECISION_EXCEPTION
    model.wrapped = True
    model.lora_config = config
    model.quantize = quantize
    return model

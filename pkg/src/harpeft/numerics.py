"""Dense 2-D float64 arithmetic with a define-by-run reverse-mode gradient tape.

Every array in the library is a :class:`Matrix`. Operations build the tape as
they run; calling :meth:`Matrix.backward` on a 1x1 result walks the graph in
reverse and accumulates gradients into the :class:`Parameter` objects that
participated in the forward pass. The tape is rebuilt on every forward pass,
so per-batch structure changes (random masking, dropout) need no special
handling.

Conventions:
  * activations are row-major: a sequence of T tokens of width d is a T x d
    matrix, and a linear map with weight W (d_in x d_out) is ``x @ W``;
  * everything is float64; quantization effects are modelled explicitly in
    :mod:`harpeft.peft`, never by the compute dtype.
"""

from __future__ import annotations

import enum
import hashlib
import math

import numpy as np
from scipy.special import erf

__all__ = [
    "Matrix",
    "Parameter",
    "Precision",
    "Rng",
    "ShapeError",
    "BackwardError",
    "NonFiniteError",
    "matmul",
    "add",
    "sub",
    "mul",
    "add_row",
    "scale",
    "transpose",
    "softmax_rows",
    "layer_norm",
    "gelu",
    "select_rows",
    "col_slice",
    "concat_rows",
    "concat_cols",
    "mean_rows",
    "sum_all",
    "dropout",
    "batch_norm_train",
    "batch_norm_eval",
    "softmax_cross_entropy",
]

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class BackwardError(RuntimeError):
    """Backward called on an unsuitable node or more than once."""


class NonFiniteError(FloatingPointError):
    """An operation produced (or received) NaN or infinity."""


def _check_finite(arr: np.ndarray, context: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {context}")


class Matrix:
    """A 2-D float64 value, optionally recorded on the gradient tape.

    Leaf matrices are either plain constants or the storage of a
    :class:`Parameter`. Non-leaf matrices remember their parents and a
    vector-Jacobian product used during :meth:`backward`.
    """

    __slots__ = ("data", "_parents", "_vjp", "_needs_grad", "_param", "_backward_done")

    def __init__(self, data):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise ShapeError(f"Matrix must be 2-D, got shape {arr.shape}")
        _check_finite(arr, "Matrix construction")
        self.data = arr
        self._parents = ()
        self._vjp = None
        self._needs_grad = None  # leaves answer dynamically via their Parameter
        self._param = None
        self._backward_done = False

    @classmethod
    def _traced(cls, data: np.ndarray, parents, vjp) -> "Matrix":
        """Internal fast path for op outputs; ``data`` must be fresh float64."""
        out = cls.__new__(cls)
        _check_finite(data, "operation result")
        out.data = data
        out._parents = tuple(parents)
        out._vjp = vjp
        out._needs_grad = any(p._needs() for p in out._parents)
        out._param = None
        out._backward_done = False
        return out

    @classmethod
    def zeros(cls, rows: int, cols: int) -> "Matrix":
        return cls(np.zeros((rows, cols)))

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def _needs(self) -> bool:
        if self._needs_grad is not None:
            return self._needs_grad
        return self._param is not None and self._param.trainable

    def item(self) -> float:
        if self.data.shape != (1, 1):
            raise ShapeError(f"item() needs a 1x1 matrix, got {self.data.shape}")
        return float(self.data[0, 0])

    def copy_values(self) -> np.ndarray:
        return self.data.copy()

    def backward(self) -> None:
        """Reverse-mode accumulation from this 1x1 result into trainable Parameters.

        Raises :class:`BackwardError` when called on a non-scalar node or a
        second time on the same result; rebuild the forward pass instead of
        reusing a consumed graph.
        """
        if self.data.shape != (1, 1):
            raise ShapeError(f"backward() needs a 1x1 loss, got {self.data.shape}")
        if self._backward_done:
            raise BackwardError(
                "backward() already ran for this result; rerun the forward pass"
            )
        self._backward_done = True

        topo: list[Matrix] = []
        state: dict[int, int] = {}  # 0 = discovered, 1 = finished
        stack: list[Matrix] = [self]
        while stack:
            node = stack[-1]
            mark = state.get(id(node))
            if mark is None:
                state[id(node)] = 0
                for p in node._parents:
                    if p._needs() and id(p) not in state:
                        stack.append(p)
            else:
                stack.pop()
                if mark == 0:
                    state[id(node)] = 1
                    topo.append(node)

        grads: dict[int, np.ndarray] = {id(self): np.ones((1, 1))}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                param = node._param
                if param is not None and param.trainable:
                    param.grad.data += g
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent._needs():
                    continue
                acc = grads.get(id(parent))
                grads[id(parent)] = pg if acc is None else acc + pg

    def __repr__(self) -> str:
        return f"Matrix({self.rows}x{self.cols})"


class Precision(enum.Enum):
    """Storage class of a parameter, used by the resource accounting."""

    FULL = "full"
    HIGH_PRECISION_EXCEPTION = "high_precision_exception"
    QUANTIZED_NF4 = "quantized_nf4"


class Parameter:
    """A matrix with a gradient buffer, a trainable flag and a storage class.

    The gradient buffer always matches the value shape and starts at zero.
    Nothing in the library ever writes to the value of a parameter whose
    ``trainable`` flag is off: the tape skips it and the optimizer excludes
    it from its state.
    """

    __slots__ = ("value", "grad", "trainable", "precision_class", "name")

    def __init__(self, value, trainable: bool = True,
                 precision_class: Precision = Precision.FULL, name: str = ""):
        self.value = value if isinstance(value, Matrix) else Matrix(value)
        self.value._param = self
        self.grad = Matrix.zeros(self.value.rows, self.value.cols)
        self.trainable = bool(trainable)
        self.precision_class = precision_class
        self.name = name

    @property
    def rows(self) -> int:
        return self.value.rows

    @property
    def cols(self) -> int:
        return self.value.cols

    @property
    def size(self) -> int:
        return self.value.rows * self.value.cols

    def zero_grad(self) -> None:
        self.grad.data[:] = 0.0

    def __repr__(self) -> str:
        flag = "trainable" if self.trainable else "frozen"
        return f"Parameter({self.name or '?'}, {self.rows}x{self.cols}, {flag})"


class Rng:
    """Seedable random stream (NumPy PCG64) with deterministic tagged substreams.

    Identical seeds produce identical draw sequences on every platform.
    ``child(tag)`` derives an independent stream whose seed is the low 64 bits
    of SHA-256 over ``"<seed>/<tag>"``, so a single run seed fans out to every
    consumer (init, masking, shuffling, ...) reproducibly.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed)))

    def child(self, tag: str) -> "Rng":
        digest = hashlib.sha256(f"{self.seed}/{tag}".encode()).digest()
        return Rng(int.from_bytes(digest[:8], "little"))

    def normal(self, rows: int, cols: int, std: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, std, size=(rows, cols))

    def uniform(self, rows: int, cols: int) -> np.ndarray:
        return self._gen.uniform(size=(rows, cols))

    def integers(self, low: int, high: int, size: int | None = None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def _m(x) -> Matrix:
    if isinstance(x, Parameter):
        return x.value
    if isinstance(x, Matrix):
        return x
    raise TypeError(f"expected Matrix or Parameter, got {type(x).__name__}")


# ---------------------------------------------------------------------------
# Tape operations
# ---------------------------------------------------------------------------

def matmul(a, b) -> Matrix:
    """Matrix product; backward gives dL/da = g @ b.T and dL/db = a.T @ g."""
    a, b = _m(a), _m(b)
    if a.cols != b.rows:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape} is undefined")
    ad, bd = a.data, b.data

    def vjp(g):
        return (g @ bd.T if a._needs() else None,
                ad.T @ g if b._needs() else None)

    return Matrix._traced(ad @ bd, (a, b), vjp)


def add(a, b) -> Matrix:
    a, b = _m(a), _m(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: {a.shape} vs {b.shape}")
    return Matrix._traced(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Matrix:
    a, b = _m(a), _m(b)
    if a.shape != b.shape:
        raise ShapeError(f"sub: {a.shape} vs {b.shape}")
    return Matrix._traced(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Matrix:
    """Elementwise product of same-shape matrices."""
    a, b = _m(a), _m(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return Matrix._traced(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def add_row(a, row) -> Matrix:
    """Broadcast-add a 1 x c row (e.g. a bias) to every row of a."""
    a, row = _m(a), _m(row)
    if row.rows != 1 or row.cols != a.cols:
        raise ShapeError(f"add_row: {a.shape} + {row.shape}")
    return Matrix._traced(
        a.data + row.data, (a, row),
        lambda g: (g, g.sum(axis=0, keepdims=True)),
    )


def scale(a, s: float) -> Matrix:
    a = _m(a)
    s = float(s)
    return Matrix._traced(a.data * s, (a,), lambda g: (g * s,))


def transpose(a) -> Matrix:
    a = _m(a)
    return Matrix._traced(a.data.T.copy(), (a,), lambda g: (g.T,))


def softmax_rows(x) -> Matrix:
    """Row-wise softmax, stabilized by subtracting each row's maximum."""
    x = _m(x)
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return Matrix._traced(y, (x,), vjp)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Matrix:
    """Per-row normalization to mean 0 / variance 1, then affine gain and bias."""
    x, gain, bias = _m(x), _m(gain), _m(bias)
    if eps <= 0:
        raise ValueError("layer_norm: eps must be > 0")
    if gain.shape != (1, x.cols) or bias.shape != (1, x.cols):
        raise ShapeError(f"layer_norm: gain/bias must be 1x{x.cols}")
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    gd = gain.data

    def vjp(g):
        dxhat = g * gd
        gx = None
        if x._needs():
            gx = inv * (dxhat
                        - dxhat.mean(axis=1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
        ggain = (g * xhat).sum(axis=0, keepdims=True) if gain._needs() else None
        gbias = g.sum(axis=0, keepdims=True) if bias._needs() else None
        return (gx, ggain, gbias)

    return Matrix._traced(xhat * gd + bias.data, (x, gain, bias), vjp)


def gelu(x) -> Matrix:
    """Exact-erf GELU: x * Phi(x). Derivative Phi(x) + x * phi(x)."""
    x = _m(x)
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))

    def vjp(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return Matrix._traced(xd * cdf, (x,), vjp)


def select_rows(x, indices) -> Matrix:
    """Gather rows by index; backward scatters gradients back."""
    x = _m(x)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError("select_rows: indices must be 1-D")
    if idx.size and (idx.min() < 0 or idx.max() >= x.rows):
        raise IndexError(f"select_rows: index out of range for {x.rows} rows")
    xshape = x.shape

    def vjp(g):
        gx = np.zeros(xshape)
        np.add.at(gx, idx, g)
        return (gx,)

    return Matrix._traced(x.data[idx].copy(), (x,), vjp)


def col_slice(x, start: int, stop: int) -> Matrix:
    x = _m(x)
    if not (0 <= start < stop <= x.cols):
        raise ShapeError(f"col_slice: [{start}:{stop}] invalid for {x.cols} cols")
    xshape = x.shape

    def vjp(g):
        gx = np.zeros(xshape)
        gx[:, start:stop] = g
        return (gx,)

    return Matrix._traced(x.data[:, start:stop].copy(), (x,), vjp)


def concat_rows(mats) -> Matrix:
    mats = [_m(m) for m in mats]
    if not mats:
        raise ShapeError("concat_rows: empty input")
    cols = mats[0].cols
    if any(m.cols != cols for m in mats):
        raise ShapeError("concat_rows: column counts differ")
    sizes = [m.rows for m in mats]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(sizes)))

    return Matrix._traced(np.concatenate([m.data for m in mats], axis=0), mats, vjp)


def concat_cols(mats) -> Matrix:
    mats = [_m(m) for m in mats]
    if not mats:
        raise ShapeError("concat_cols: empty input")
    rows = mats[0].rows
    if any(m.rows != rows for m in mats):
        raise ShapeError("concat_cols: row counts differ")
    sizes = [m.cols for m in mats]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(sizes)))

    return Matrix._traced(np.concatenate([m.data for m in mats], axis=1), mats, vjp)


def mean_rows(x) -> Matrix:
    """Column-wise mean over rows; the 1 x c mean-pooled representation."""
    x = _m(x)
    n = x.rows

    def vjp(g):
        return (np.repeat(g / n, n, axis=0),)

    return Matrix._traced(x.data.mean(axis=0, keepdims=True), (x,), vjp)


def sum_all(x) -> Matrix:
    x = _m(x)
    xshape = x.shape

    def vjp(g):
        return (np.full(xshape, g[0, 0]),)

    return Matrix._traced(np.array([[x.data.sum()]]), (x,), vjp)


def dropout(x, rate: float, rng: Rng, training: bool) -> Matrix:
    """Inverted dropout; identity when not training or rate is 0."""
    x = _m(x)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = 1.0 - rate
    mask = (rng.uniform(x.rows, x.cols) >= rate) / keep
    return Matrix._traced(x.data * mask, (x,), lambda g: (g * mask,))


def batch_norm_train(x, gain, bias, eps: float = 1e-5):
    """Feature-wise batch normalization using the current batch statistics.

    Returns ``(out, batch_mean, batch_var)``; the caller owns the running
    averages used at evaluation time.
    """
    x, gain, bias = _m(x), _m(gain), _m(bias)
    if x.rows < 2:
        raise ShapeError("batch_norm_train: needs at least 2 rows")
    mu = x.data.mean(axis=0, keepdims=True)
    var = x.data.var(axis=0, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    gd = gain.data
    n = x.rows

    def vjp(g):
        dxhat = g * gd
        gx = None
        if x._needs():
            gx = inv * (dxhat
                        - dxhat.mean(axis=0, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=0, keepdims=True))
        ggain = (g * xhat).sum(axis=0, keepdims=True) if gain._needs() else None
        gbias = g.sum(axis=0, keepdims=True) if bias._needs() else None
        return (gx, ggain, gbias)

    out = Matrix._traced(xhat * gd + bias.data, (x, gain, bias), vjp)
    return out, mu.ravel().copy(), var.ravel().copy()


def batch_norm_eval(x, gain, bias, running_mean: np.ndarray,
                    running_var: np.ndarray, eps: float = 1e-5) -> Matrix:
    """Feature-wise normalization with fixed running statistics."""
    x, gain, bias = _m(x), _m(gain), _m(bias)
    inv = 1.0 / np.sqrt(running_var.reshape(1, -1) + eps)
    xhat = (x.data - running_mean.reshape(1, -1)) * inv
    gd = gain.data

    def vjp(g):
        gx = g * gd * inv if x._needs() else None
        ggain = (g * xhat).sum(axis=0, keepdims=True) if gain._needs() else None
        gbias = g.sum(axis=0, keepdims=True) if bias._needs() else None
        return (gx, ggain, gbias)

    return Matrix._traced(xhat * gd + bias.data, (x, gain, bias), vjp)


def softmax_cross_entropy(logits, labels) -> Matrix:
    """Mean negative log softmax likelihood over rows.

    ``labels`` is one integer class id per row; the gradient is the classic
    ``(softmax - onehot) / batch`` expression.
    """
    logits = _m(logits)
    labels = np.asarray(labels, dtype=np.intp).ravel()
    if labels.size != logits.rows:
        raise ShapeError(f"cross entropy: {labels.size} labels for {logits.rows} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.cols):
        raise IndexError(f"cross entropy: label out of range [0, {logits.cols})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    n = logits.rows
    loss = -logp[np.arange(n), labels].mean()
    probs = np.exp(logp)

    def vjp(g):
        grad = probs.copy()
        grad[np.arange(n), labels] -= 1.0
        return (g[0, 0] * grad / n,)

    return Matrix._traced(np.array([[loss]]), (logits,), vjp)

"""Dense float32 tensors, 1x1 convolution, softmax, SGD and gradient checking.

Tensors are plain ``numpy.ndarray`` objects in row-major H x W x C layout with
float32 storage. Reductions that feed losses (pooled scores, softmaxes) are
carried out in float64 and returned as float64 arrays.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from pprfcn.errors import DimensionError, DomainError, FormatError, NumericError

TENSOR_MAGIC = b"PPRT"


def as_tensor(values) -> np.ndarray:
    """Return ``values`` as a C-contiguous float32 array."""
    return np.ascontiguousarray(values, dtype=np.float32)


def ensure_finite(values: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(values)):
        raise NumericError(f"{what} contains non-finite values")
    return values


@dataclass
class ParamTensor:
    """A trainable tensor with its gradient and momentum buffer."""

    value: np.ndarray
    grad: np.ndarray = field(default=None)
    momentum_buffer: np.ndarray = field(default=None)
    name: str = ""

    def __post_init__(self):
        self.value = as_tensor(self.value)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.momentum_buffer is None:
            self.momentum_buffer = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape or self.momentum_buffer.shape != self.value.shape:
            raise DimensionError(f"param {self.name!r}: grad/buffer shape differs from value")

    @classmethod
    def zeros(cls, shape, name=""):
        return cls(np.zeros(shape, dtype=np.float32), name=name)

    @classmethod
    def normal(cls, shape, rng: np.random.Generator, std: float, name=""):
        return cls(rng.normal(0.0, std, size=shape).astype(np.float32), name=name)

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size

    def zero_grad(self):
        self.grad.fill(0.0)


def conv1x1(features: np.ndarray, weights: ParamTensor, bias: ParamTensor) -> np.ndarray:
    """Per-pixel linear map ``H x W x D -> H x W x K``."""
    if features.ndim != 3:
        raise DimensionError(f"features must be H x W x D, got shape {features.shape}")
    h, w, d = features.shape
    if weights.value.ndim != 2 or weights.value.shape[0] != d:
        raise DimensionError(f"weights {weights.value.shape} do not match feature depth {d}")
    k = weights.value.shape[1]
    if bias.value.shape != (k,):
        raise DimensionError(f"bias {bias.value.shape} does not match {k} output channels")
    out = features.reshape(h * w, d) @ weights.value
    out += bias.value
    return ensure_finite(out.reshape(h, w, k), "conv1x1 output")


def conv1x1_backward(upstream: np.ndarray, features: np.ndarray, weights: ParamTensor, bias: ParamTensor):
    """Backward of :func:`conv1x1`.

    Weight and bias gradients are added into ``weights.grad``/``bias.grad``.
    Returns ``(grad_features, grad_weights, grad_bias)`` where the last two are
    the contributions of this call alone.
    """
    h, w, d = features.shape
    k = weights.value.shape[1]
    if upstream.shape != (h, w, k):
        raise DimensionError(f"upstream {upstream.shape} does not match forward output {(h, w, k)}")
    up = upstream.reshape(h * w, k).astype(np.float64, copy=False)
    flat = features.reshape(h * w, d).astype(np.float64)
    grad_w = flat.T @ up
    grad_b = up.sum(axis=0)
    grad_f = (up @ weights.value.T.astype(np.float64)).reshape(h, w, d)
    weights.grad += grad_w.astype(np.float32)
    bias.grad += grad_b.astype(np.float32)
    return grad_f, grad_w, grad_b


def softmax(values, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax along ``axis`` (float64 result)."""
    x = np.asarray(values, dtype=np.float64)
    if x.ndim == 0:
        raise DomainError("softmax needs at least one axis")
    if not -x.ndim <= axis < x.ndim:
        raise DomainError(f"axis {axis} invalid for shape {x.shape}")
    if x.shape[axis] == 0:
        raise DomainError("softmax over an empty axis")
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(grad_out: np.ndarray, out: np.ndarray, axis: int = -1) -> np.ndarray:
    """Vector-Jacobian product of softmax given its output ``out``."""
    dot = np.sum(grad_out * out, axis=axis, keepdims=True)
    return out * (grad_out - dot)


def sgd_momentum_step(params: Iterable[ParamTensor], lr: float, momentum: float) -> None:
    """``buf = momentum * buf + grad; value -= lr * buf``, then zero the grads."""
    if not lr > 0:
        raise DomainError(f"learning rate must be positive, got {lr}")
    if not 0 <= momentum < 1:
        raise DomainError(f"momentum must lie in [0, 1), got {momentum}")
    for p in params:
        buf = p.momentum_buffer
        buf *= np.float32(momentum)
        buf += p.grad
        p.value -= np.float32(lr) * buf
        p.zero_grad()


def finite_difference_check(
    f: Callable[[ParamTensor], float],
    param: ParamTensor,
    epsilon: float = 1e-3,
    atol: float = 1e-3,
    rtol: float = 1e-2,
    analytic: np.ndarray | None = None,
    indices: Sequence[int] | None = None,
) -> float:
    """Compare an analytic gradient against central differences.

    ``analytic`` defaults to ``param.grad``. Each entry is scored as
    ``|analytic - numeric| / max(atol, rtol * |numeric|)``; the worst score is
    returned, so a value <= 1 means every checked entry is within tolerance.
    ``indices`` restricts the check to a subset of flat positions.
    """
    if not epsilon > 0:
        raise DomainError("epsilon must be positive")
    grad = param.grad if analytic is None else np.asarray(analytic)
    if grad.shape != param.value.shape:
        raise DimensionError("analytic gradient shape differs from the parameter")
    flat = param.value.reshape(-1)
    positions = range(flat.size) if indices is None else indices
    worst = 0.0
    for i in positions:
        orig = flat[i]
        hi = np.float32(orig + epsilon)
        lo = np.float32(orig - epsilon)
        flat[i] = hi
        f_hi = float(f(param))
        flat[i] = lo
        f_lo = float(f(param))
        flat[i] = orig
        if not (np.isfinite(f_hi) and np.isfinite(f_lo)):
            raise NumericError(f"objective is non-finite near flat index {i}")
        numeric = (f_hi - f_lo) / (float(hi) - float(lo))
        err = abs(float(grad.reshape(-1)[i]) - numeric) / max(atol, rtol * abs(numeric))
        worst = max(worst, err)
    return worst


def save_tensor(path, values) -> None:
    """Write ``values`` in the PPRT binary format."""
    arr = as_tensor(values)
    header = TENSOR_MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.astype("<f4", copy=False).tobytes(order="C"))


def load_tensor(path) -> np.ndarray:
    """Read a PPRT file; raises :class:`FormatError` naming the path on any defect."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise FormatError("tensor file not found", path) from None
    if raw[:4] != TENSOR_MAGIC:
        raise FormatError("bad magic bytes", path)
    if len(raw) < 8:
        raise FormatError("truncated header", path)
    (rank,) = struct.unpack_from("<I", raw, 4)
    offset = 8 + 4 * rank
    if len(raw) < offset:
        raise FormatError("truncated shape", path)
    shape = struct.unpack_from(f"<{rank}I", raw, 8)
    count = int(np.prod(shape, dtype=np.int64))
    if any(s <= 0 for s in shape):
        raise FormatError(f"non-positive extent in shape {shape}", path)
    if len(raw) - offset != 4 * count:
        raise FormatError(f"payload holds {len(raw) - offset} bytes, shape {shape} needs {4 * count}", path)
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
    return data.astype(np.float32).reshape(shape)

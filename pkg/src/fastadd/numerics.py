"""Dense-tensor kernels used by every other module.

Tensors are plain ``numpy.ndarray`` values in one of two precisions
(``float32`` for training and benchmarks, ``float64`` for gradient checks).
The helpers here add what numpy does not give us directly: shape errors
that name both operands, multiply-add instrumentation, a stable softmax,
layer normalisation with its backward pass, order-independent seeded
initialisation and a central-difference gradient oracle.
"""

from __future__ import annotations

import contextlib
import hashlib
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Optional, Sequence

import numpy as np

from .errors import DomainError, NumericError, ShapeError

Tensor = np.ndarray

PRECISIONS = {"f32": np.float32, "f64": np.float64}


def dtype_of(precision: str) -> np.dtype:
    try:
        return np.dtype(PRECISIONS[precision])
    except KeyError:
        raise DomainError(f"unknown precision {precision!r}; expected one of {sorted(PRECISIONS)}") from None


def precision_of(dtype) -> str:
    dtype = np.dtype(dtype)
    for tag, dt in PRECISIONS.items():
        if np.dtype(dt) == dtype:
            return tag
    raise DomainError(f"unsupported dtype {dtype}")


def tensor(values, precision: str = "f32") -> Tensor:
    return np.array(values, dtype=dtype_of(precision))


def check_finite(x: Tensor, what: str) -> Tensor:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {what}")
    return x


# ---------------------------------------------------------------------------
# FLOP instrumentation
# ---------------------------------------------------------------------------


@dataclass
class FlopCounter:
    """Multiply-add accumulator.

    Matrix products add ``m*k*n`` per (broadcast) batch entry; element-wise
    kernels add their output element count.
    """

    multiply_adds: int = 0
    enabled: bool = True

    def add(self, n: int) -> None:
        if self.enabled:
            self.multiply_adds += int(n)


_active: list[FlopCounter] = []


@contextlib.contextmanager
def counting_flops(counter: Optional[FlopCounter] = None) -> Iterator[FlopCounter]:
    """Route every instrumented kernel call inside the block into ``counter``."""
    counter = FlopCounter() if counter is None else counter
    _active.append(counter)
    try:
        yield counter
    finally:
        _active.pop()


def _tally(n: int) -> None:
    if _active:
        _active[-1].add(n)


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product ``a @ b`` with numpy broadcasting over leading axes."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    if a.dtype != b.dtype:
        raise ShapeError(f"matmul precision mismatch: {a.dtype} x {b.dtype}")
    out = np.matmul(a, b)
    if _active:
        batch = math.prod(out.shape[:-2])
        _tally(batch * a.shape[-2] * a.shape[-1] * b.shape[-1])
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = np.multiply(a, b)
    _tally(out.size)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    out = np.add(a, b)
    _tally(out.size)
    return out


def scale(a: Tensor, c: float) -> Tensor:
    out = a * a.dtype.type(c)
    _tally(out.size)
    return out


def softmax_stable(scores: Tensor, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with max subtraction."""
    scores = np.asarray(scores)
    if scores.size == 0 or scores.shape[axis] == 0:
        raise DomainError("softmax of an empty vector")
    if not np.all(np.isfinite(scores)):
        raise NumericError("softmax input contains non-finite scores")
    shifted = scores - scores.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    _tally(out.size)
    return out


def softmax_backward(probs: Tensor, d_probs: Tensor, axis: int = -1) -> Tensor:
    """Vector-Jacobian product of softmax: ``p * (g - <p, g>)``."""
    inner = np.sum(probs * d_probs, axis=axis, keepdims=True)
    return probs * (d_probs - inner)


@dataclass
class LayerNormStats:
    x_hat: Tensor
    inv_std: Tensor


def layer_norm(
    x: Tensor,
    gain: Tensor,
    bias: Tensor,
    epsilon: float = 1e-5,
    return_stats: bool = False,
):
    """Normalise over the last axis, then apply ``gain`` and ``bias``."""
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ShapeError(f"layer_norm length mismatch: x {x.shape}, gain {gain.shape}, bias {bias.shape}")
    if epsilon <= 0:
        raise DomainError("layer_norm epsilon must be positive")
    mean = x.mean(axis=-1, keepdims=True)
    centered = x - mean
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + x.dtype.type(epsilon))
    x_hat = centered * inv_std
    y = x_hat * gain + bias
    if return_stats:
        return y, LayerNormStats(x_hat=x_hat, inv_std=inv_std)
    return y


def layer_norm_backward(dy: Tensor, stats: LayerNormStats, gain: Tensor):
    """Return ``(dx, d_gain, d_bias)``; parameter gradients are summed over leading axes."""
    x_hat, inv_std = stats.x_hat, stats.inv_std
    lead = tuple(range(dy.ndim - 1))
    d_gain = np.sum(dy * x_hat, axis=lead)
    d_bias = np.sum(dy, axis=lead)
    g = dy * gain
    n = dy.shape[-1]
    dx = inv_std / n * (n * g - g.sum(axis=-1, keepdims=True) - x_hat * np.sum(g * x_hat, axis=-1, keepdims=True))
    return dx, d_gain, d_bias


# ---------------------------------------------------------------------------
# seeded initialisation
# ---------------------------------------------------------------------------


def name_seed(name: str, seed: int) -> int:
    """64-bit stream key for one named parameter: blake2b(name) xor seed."""
    digest = hashlib.blake2b(name.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") ^ (int(seed) & 0xFFFFFFFFFFFFFFFF)


def seeded_normal(shape: Sequence[int], seed: int, std: float = 0.02, precision: str = "f64") -> Tensor:
    """Normal(0, std) samples from a Philox-4x64 stream keyed by ``seed``.

    Values are drawn in float64 and then cast, so both precisions see the
    same underlying numbers.
    """
    if std < 0:
        raise DomainError("std must be non-negative")
    rng = np.random.Generator(np.random.Philox(key=int(seed) & 0xFFFFFFFFFFFFFFFF))
    values = rng.standard_normal(tuple(shape)) * std
    return values.astype(dtype_of(precision))


# ---------------------------------------------------------------------------
# gradient oracle
# ---------------------------------------------------------------------------


def finite_diff_grad(
    f: Callable[[Tensor], float],
    params: Tensor,
    h: float = 1e-5,
    indices: Optional[Iterable[int]] = None,
) -> Tensor:
    """Central-difference gradient of scalar ``f`` at ``params``.

    ``params`` must be float64. When ``indices`` (flat positions) is given
    only those coordinates are probed; the rest of the result stays zero.
    ``f`` is evaluated on a perturbed copy; ``params`` itself is untouched.
    """
    if params.dtype != np.float64:
        raise DomainError("finite differences require float64 parameters")
    if h <= 0:
        raise DomainError("step h must be positive")
    work = np.array(params, dtype=np.float64, copy=True)
    flat = work.reshape(-1)
    grad = np.zeros_like(flat)
    coords = range(flat.size) if indices is None else indices
    for i in coords:
        orig = flat[i]
        flat[i] = orig + h
        f_plus = float(f(work))
        flat[i] = orig - h
        f_minus = float(f(work))
        flat[i] = orig
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise NumericError(f"non-finite function value when perturbing coordinate {i}")
        grad[i] = (f_plus - f_minus) / (2.0 * h)
    return grad.reshape(params.shape)

"""Rank-4 tensor primitives with hand-written backward passes.

The public functions take and return arrays laid out as (batch, channels,
rows, columns).  Each is a thin wrapper over a channel-last kernel (names
ending in ``_cl``, arrays laid out (batch, rows, columns, channels)); the
network runs on the kernels directly so that 1x1 convolutions and batch
statistics become plain row-major matrix operations.

Forward functions are pure, except that batch norm in training mode
updates its running statistics.  Each ``*_backward`` companion takes the
upstream gradient together with the forward inputs.  Convolution is
cross-correlation (no kernel flip).  Every routine preserves the floating
dtype of its inputs, so the same code serves float64 checks and float32
training.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numba
import numpy as np
from scipy.linalg import blas

__all__ = [
    "BatchNormState",
    "as_tensor4",
    "conv2d",
    "conv2d_backward",
    "batch_norm",
    "batch_norm_backward",
    "bn_relu_cl",
    "bn_relu_cl_backward",
    "relu",
    "relu_backward",
    "avg_pool2d",
    "avg_pool2d_backward",
    "global_avg_pool",
    "global_avg_pool_backward",
    "concat_channels",
    "concat_channels_backward",
    "finite_diff_grad",
    "to_cl",
    "from_cl",
]


def as_tensor4(x, name: str = "input") -> np.ndarray:
    """Return ``x`` as a floating rank-4 array, raising on bad shapes."""
    x = np.asarray(x)
    if x.ndim != 4:
        raise ValueError(f"{name} must be rank-4 (n, c, h, w), got shape {x.shape}")
    if min(x.shape) < 1:
        raise ValueError(f"{name} has an empty dimension: {x.shape}")
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    return x


def to_cl(x: np.ndarray) -> np.ndarray:
    """(n, c, h, w) -> contiguous (n, h, w, c)."""
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1))


def from_cl(x: np.ndarray) -> np.ndarray:
    """(n, h, w, c) -> contiguous (n, c, h, w)."""
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


# ---------------------------------------------------------------- convolution

def _gemm_acc(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> None:
    """``c += a @ b`` in place for C-ordered 2-D views.

    A row-major product is the column-major product of the transposes, so
    BLAS can accumulate straight into ``c`` without temporaries.
    """
    fn = blas.sgemm if c.dtype == np.float32 else blas.dgemm
    fn(1.0, b.T, a.T, beta=1.0, c=c.T, overwrite_c=True)


def _output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _check_conv(c_in: int, h: int, w: int, filters: np.ndarray, stride: int, padding: int):
    if filters.ndim != 4 or filters.shape[2] != filters.shape[3]:
        raise ValueError(f"filters must be O x I x w x w, got {filters.shape}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    if c_in != filters.shape[1]:
        raise ValueError(
            f"channel mismatch: input has {c_in}, filters expect {filters.shape[1]}"
        )
    k = filters.shape[2]
    ho, wo = _output_size(h, k, stride, padding), _output_size(w, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ValueError("convolution output size is not positive")
    return ho, wo


def _pad_cl(x: np.ndarray, p: int) -> np.ndarray:
    if not p:
        return np.ascontiguousarray(x)
    n, h, w, c = x.shape
    xp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=x.dtype)
    xp[:, p:p + h, p:p + w] = x
    return xp


# Stride-1 convolution on the padded input flattened to rows: kernel tap
# (a, b) is the constant row offset a*wp + b, so every tap is one BLAS call
# on contiguous views.  Rows whose window wraps past the right or bottom
# edge are computed and then cropped.

def conv_cl(x: np.ndarray, filters: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    n, h, w, c = x.shape
    ho, wo = _check_conv(c, h, w, filters, stride, padding)
    o, _, k, _ = filters.shape
    filters = filters.astype(x.dtype, copy=False)
    if k == 1 and stride == 1 and padding == 0:
        out = np.ascontiguousarray(x).reshape(-1, c) @ filters.reshape(o, c).T
        return out.reshape(n, h, w, o)
    if stride != 1:
        return to_cl(_conv_strided(from_cl(x), filters, stride, padding, ho, wo))
    xp = _pad_cl(x, padding)
    hp, wp = xp.shape[1:3]
    rows = xp.reshape(-1, c)
    span = rows.shape[0] - (k - 1) * (wp + 1)
    taps = np.ascontiguousarray(filters.transpose(2, 3, 1, 0))
    acc = np.zeros((rows.shape[0], o), dtype=x.dtype)
    for a in range(k):
        for b in range(k):
            s = a * wp + b
            _gemm_acc(rows[s:s + span], taps[a, b], acc[:span])
    return np.ascontiguousarray(acc.reshape(n, hp, wp, o)[:, :ho, :wo])


def conv_cl_backward(grad_out: np.ndarray, x: np.ndarray, filters: np.ndarray,
                     stride: int = 1, padding: int = 0):
    n, h, w, c = x.shape
    ho, wo = _check_conv(c, h, w, filters, stride, padding)
    o, _, k, _ = filters.shape
    filters = filters.astype(x.dtype, copy=False)
    if k == 1 and stride == 1 and padding == 0:
        xm = np.ascontiguousarray(x).reshape(-1, c)
        g = np.ascontiguousarray(grad_out).reshape(-1, o)
        grad_f = (g.T @ xm).reshape(o, c, 1, 1)
        return (g @ filters.reshape(o, c)).reshape(x.shape), grad_f
    if stride != 1:
        gx, gf = _conv_strided_backward(from_cl(grad_out), from_cl(x), filters,
                                        stride, padding, ho, wo)
        return to_cl(gx), gf
    xp = _pad_cl(x, padding)
    hp, wp = xp.shape[1:3]
    rows = xp.reshape(-1, c)
    g = np.zeros((n, hp, wp, o), dtype=x.dtype)
    g[:, :ho, :wo] = grad_out
    g = g.reshape(-1, o)
    span = rows.shape[0] - (k - 1) * (wp + 1)
    taps_t = np.ascontiguousarray(filters.transpose(2, 3, 0, 1))
    grad_f = np.empty((k, k, c, o), dtype=x.dtype)
    grad_rows = np.zeros_like(rows)
    for a in range(k):
        for b in range(k):
            s = a * wp + b
            grad_f[a, b] = rows[s:s + span].T @ g[:span]
            _gemm_acc(g[:span], taps_t[a, b], grad_rows[s:s + span])
    grad_x = grad_rows.reshape(n, hp, wp, c)[:, padding:padding + h, padding:padding + w]
    return np.ascontiguousarray(grad_x), np.ascontiguousarray(grad_f.transpose(3, 2, 0, 1))


def _im2col(x: np.ndarray, k: int, stride: int, padding: int, ho: int, wo: int) -> np.ndarray:
    n, c = x.shape[:2]
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((n, c, k, k, ho, wo), dtype=x.dtype)
    for a in range(k):
        for b in range(k):
            cols[:, :, a, b] = x[:, :, a:a + stride * ho:stride, b:b + stride * wo:stride]
    return cols.reshape(n, c * k * k, ho * wo)


def _conv_strided(x, filters, stride, padding, ho, wo):
    o = filters.shape[0]
    cols = _im2col(x, filters.shape[2], stride, padding, ho, wo)
    return np.matmul(filters.reshape(o, -1), cols).reshape(x.shape[0], o, ho, wo)


def _conv_strided_backward(grad_out, x, filters, stride, padding, ho, wo):
    n, c, h, w = x.shape
    o, _, k, _ = filters.shape
    g = grad_out.reshape(n, o, ho * wo)
    cols = _im2col(x, k, stride, padding, ho, wo)
    grad_f = np.tensordot(g, cols, axes=([0, 2], [0, 2])).reshape(filters.shape)
    gcols = np.matmul(filters.reshape(o, -1).T, g).reshape(n, c, k, k, ho, wo)
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
    for a in range(k):
        for b in range(k):
            out[:, :, a:a + stride * ho:stride, b:b + stride * wo:stride] += gcols[:, :, a, b]
    return out[:, :, padding:padding + h, padding:padding + w], grad_f


def conv2d(x: np.ndarray, filters: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Cross-correlate ``x`` (n, I, h, w) with ``filters`` (O, I, k, k)."""
    _check_conv(x.shape[1], x.shape[2], x.shape[3], filters, stride, padding)
    return from_cl(conv_cl(to_cl(x), filters, stride, padding))


def conv2d_backward(grad_out: np.ndarray, x: np.ndarray, filters: np.ndarray,
                    stride: int = 1, padding: int = 0):
    """Return ``(grad_input, grad_filters)`` for :func:`conv2d`."""
    gx, gf = conv_cl_backward(to_cl(grad_out), to_cl(x), filters, stride, padding)
    return from_cl(gx), gf


# ----------------------------------------------------------------- batch norm

@dataclass
class BatchNormState:
    """Per-channel affine parameters and running statistics."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-5
    momentum: float = 0.1

    @classmethod
    def create(cls, channels: int, dtype=np.float32, epsilon: float = 1e-5,
               momentum: float = 0.1) -> "BatchNormState":
        return cls(
            gamma=np.ones(channels, dtype=dtype),
            beta=np.zeros(channels, dtype=dtype),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            epsilon=epsilon,
            momentum=momentum,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if not 0 < self.momentum < 1:
            raise ValueError("momentum must lie in (0, 1)")


# Fused per-channel loops over (rows, channels) matrices.  Each is a single
# pass over memory where plain numpy would need three to five.

@numba.njit(cache=True)
def _channel_stats(xm):
    c = xm.shape[1]
    total = np.zeros(c)
    sq = np.zeros(c)
    for r in range(xm.shape[0]):
        for j in range(c):
            v = xm[r, j]
            total[j] += v
            sq[j] += v * v
    mean = total / xm.shape[0]
    var = np.maximum(sq / xm.shape[0] - mean * mean, 0.0)
    return mean, var


@numba.njit(cache=True)
def _affine(xm, scale, shift, rectify):
    out = np.empty_like(xm)
    for r in range(xm.shape[0]):
        for j in range(xm.shape[1]):
            v = xm[r, j] * scale[j] + shift[j]
            out[r, j] = v if (v > 0 or not rectify) else 0
    return out


@numba.njit(cache=True)
def _masked_sums(gm, xm, rm, use_mask):
    """Per channel: sum of g and sum of g * x, with g zeroed where rm <= 0."""
    c = gm.shape[1]
    sg = np.zeros(c)
    sgx = np.zeros(c)
    for r in range(gm.shape[0]):
        for j in range(c):
            if use_mask and rm[r, j] <= 0:
                continue
            g = gm[r, j]
            sg[j] += g
            sgx[j] += g * xm[r, j]
    return sg, sgx


@numba.njit(cache=True)
def _bn_input_grad(gm, xm, rm, use_mask, a, b, shift):
    out = np.empty_like(gm)
    for r in range(gm.shape[0]):
        for j in range(gm.shape[1]):
            g = gm[r, j]
            if use_mask and rm[r, j] <= 0:
                g = 0
            out[r, j] = g * a[j] - xm[r, j] * b[j] - shift[j]
    return out


def _rows(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x).reshape(-1, x.shape[-1])


def _bn_forward(x, state, training, rectify):
    c = x.shape[-1]
    if c != state.channels:
        raise ValueError(f"channel mismatch: input {c}, state {state.channels}")
    xm = _rows(x)
    dt = x.dtype
    if training:
        count = xm.shape[0]
        if count < 2:
            raise ValueError("training-mode batch norm needs at least 2 values per channel")
        mean, var = _channel_stats(xm)
        m = state.momentum
        # running variance is the unbiased estimate
        state.running_mean *= 1 - m
        state.running_mean += (m * mean).astype(state.running_mean.dtype)
        state.running_var *= 1 - m
        state.running_var += (m * var * count / (count - 1)).astype(state.running_var.dtype)
    else:
        mean = state.running_mean.astype(np.float64)
        var = state.running_var.astype(np.float64)
    scale = state.gamma / np.sqrt(var + state.epsilon)
    shift = state.beta - mean * scale
    return _affine(xm, scale.astype(dt), shift.astype(dt), rectify).reshape(x.shape)


def _bn_backward(grad_out, x, rectified, state, training):
    c = x.shape[-1]
    xm, gm = _rows(x), _rows(grad_out)
    dt = x.dtype
    use_mask = rectified is not None
    rm = _rows(rectified) if use_mask else xm
    gamma = state.gamma.astype(np.float64)
    if training:
        mean, var = _channel_stats(xm)
    else:
        mean = state.running_mean.astype(np.float64)
        var = state.running_var.astype(np.float64)
    inv_std = 1.0 / np.sqrt(var + state.epsilon)
    sg, sgx = _masked_sums(gm, xm, rm, use_mask)
    grad_beta = sg
    grad_gamma = (sgx - mean * sg) * inv_std
    a = gamma * inv_std
    if training:
        # d/dx of gamma * xhat + beta with batch mean and variance
        count = xm.shape[0]
        b = a * grad_gamma * inv_std / count
        shift = (grad_beta * a - b * count * mean) / count
    else:
        b = np.zeros(c)
        shift = np.zeros(c)
    grad_x = _bn_input_grad(gm, xm, rm, use_mask, a.astype(dt), b.astype(dt), shift.astype(dt))
    return grad_x.reshape(x.shape), grad_gamma.astype(dt), grad_beta.astype(dt)


def batch_norm_cl(x: np.ndarray, state: BatchNormState, training: bool = False) -> np.ndarray:
    return _bn_forward(x, state, training, False)


def batch_norm_cl_backward(grad_out: np.ndarray, x: np.ndarray, state: BatchNormState,
                           training: bool = True):
    return _bn_backward(grad_out, x, None, state, training)


def bn_relu_cl(x: np.ndarray, state: BatchNormState, training: bool = False) -> np.ndarray:
    """``relu(batch_norm(x))`` on a channel-last array in one pass."""
    return _bn_forward(x, state, training, True)


def bn_relu_cl_backward(grad_out: np.ndarray, x: np.ndarray, rectified: np.ndarray,
                        state: BatchNormState, training: bool = True):
    """Backward of :func:`bn_relu_cl`; ``rectified`` is its output, which supplies the mask."""
    return _bn_backward(grad_out, x, rectified, state, training)


def batch_norm(x: np.ndarray, state: BatchNormState, training: bool = False) -> np.ndarray:
    """Normalize each channel of an (n, c, h, w) array.

    Training mode uses batch statistics and updates the running statistics
    in place; inference mode uses the running statistics.
    """
    if x.shape[1] != state.channels:
        raise ValueError(f"channel mismatch: input {x.shape[1]}, state {state.channels}")
    return from_cl(batch_norm_cl(to_cl(x), state, training))


def batch_norm_backward(grad_out: np.ndarray, x: np.ndarray, state: BatchNormState,
                        training: bool = True):
    """Return ``(grad_input, grad_gamma, grad_beta)``; batch statistics are recomputed."""
    gx, gg, gb = batch_norm_cl_backward(to_cl(grad_out), to_cl(x), state, training)
    return from_cl(gx), gg, gb


# ------------------------------------------------------ elementwise / pooling

def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    # derivative at exactly 0 taken as 0
    return np.multiply(grad_out, x > 0, dtype=grad_out.dtype)


def _check_pool(h: int, w: int, window: int, stride: int):
    if window < 1 or stride < 1:
        raise ValueError("window and stride must be positive")
    if window != stride or h % window or w % window:
        raise ValueError(
            f"avg_pool2d needs exact tiling: {h}x{w} with window {window}, stride {stride}"
        )


def avg_pool_cl(x: np.ndarray, window: int = 2, stride: int = 2) -> np.ndarray:
    n, h, w, c = x.shape
    _check_pool(h, w, window, stride)
    return x.reshape(n, h // window, window, w // window, window, c).mean(axis=(2, 4))


def avg_pool_cl_backward(grad_out: np.ndarray, window: int = 2) -> np.ndarray:
    g = grad_out / (window * window)
    return np.repeat(np.repeat(g, window, axis=1), window, axis=2)


def avg_pool2d(x: np.ndarray, window: int = 2, stride: int = 2) -> np.ndarray:
    """Mean over non-overlapping ``window`` x ``window`` tiles (exact tiling only)."""
    n, c, h, w = x.shape
    _check_pool(h, w, window, stride)
    return x.reshape(n, c, h // window, window, w // window, window).mean(axis=(3, 5))


def avg_pool2d_backward(grad_out: np.ndarray, input_shape, window: int = 2,
                        stride: int = 2) -> np.ndarray:
    g = grad_out / (window * window)
    return np.repeat(np.repeat(g, window, axis=2), window, axis=3).reshape(input_shape)


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    """Per-channel spatial mean, keeping (n, c, 1, 1)."""
    return x.mean(axis=(2, 3), keepdims=True)


def global_avg_pool_backward(grad_out: np.ndarray, input_shape) -> np.ndarray:
    h, w = input_shape[2:]
    return np.broadcast_to(grad_out / (h * w), input_shape).copy()


def concat_channels(inputs: Sequence[np.ndarray], axis: int = 1) -> np.ndarray:
    """Stack feature maps along the channel axis in argument order."""
    if not inputs:
        raise ValueError("concat_channels needs at least one input")
    ref = list(inputs[0].shape)
    ref.pop(axis)
    for t in inputs[1:]:
        other = list(t.shape)
        other.pop(axis)
        if other != ref:
            raise ValueError(f"batch/spatial mismatch: {t.shape} vs {inputs[0].shape}")
    if len(inputs) == 1:
        return inputs[0]
    return np.concatenate(inputs, axis=axis)


def concat_channels_backward(grad_out: np.ndarray, sizes: Sequence[int],
                             axis: int = 1) -> list[np.ndarray]:
    """Split a channel gradient back into pieces of the given channel counts."""
    bounds = np.cumsum(sizes)[:-1]
    return np.split(grad_out, bounds, axis=axis)


def finite_diff_grad(f: Callable[[np.ndarray], float], point: np.ndarray,
                     eps: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.array(point, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for idx in range(flat.size):
        orig = flat[idx]
        flat[idx] = orig + eps
        fp = f(x)
        flat[idx] = orig - eps
        fm = f(x)
        flat[idx] = orig
        gflat[idx] = (fp - fm) / (2 * eps)
    return grad

"""Modulated filters: an M-filter rescales every binarized filter k ways.

For a binarized bank of O filters (O x I x w x w) and an M-filter of k
channels (k x w x w), reconstructed filter ``k*i + j`` is channel ``j`` of M,
repeated over the I input channels, times binarized filter ``i``.  The
result has k*O filters, so a layer emitting C channels stores only C/k
binarized filters.
"""
from __future__ import annotations

import numpy as np

from .tensor import conv2d, conv2d_backward

__all__ = [
    "modulate",
    "modulated_conv_forward",
    "modulated_conv_backward",
    "grad_w",
    "grad_m",
    "init_full_precision",
    "init_m_filter",
    "he_std",
]


def _check_pair(m: np.ndarray, wb: np.ndarray):
    if m.ndim != 3 or m.shape[1] != m.shape[2]:
        raise ValueError(f"M-filter must be k x w x w, got {m.shape}")
    if wb.ndim != 4 or wb.shape[2:] != m.shape[1:]:
        raise ValueError(f"kernel mismatch: M-filter {m.shape}, filters {wb.shape}")


def modulate(m: np.ndarray, wb: np.ndarray) -> np.ndarray:
    """Reconstruct the (k*O) x I x w x w bank from M and the binarized bank."""
    _check_pair(m, wb)
    o, i, w, _ = wb.shape
    k = m.shape[0]
    q = wb[:, None, :, :, :] * m[None, :, None, :, :]
    return q.reshape(o * k, i, w, w)


def modulated_conv_forward(x: np.ndarray, m: np.ndarray, wb: np.ndarray,
                           stride: int = 1, padding: int = 0) -> np.ndarray:
    if x.shape[1] != wb.shape[1]:
        raise ValueError(f"channel mismatch: input {x.shape[1]}, filters {wb.shape[1]}")
    return conv2d(x, modulate(m, wb).astype(x.dtype, copy=False), stride, padding)


def grad_w(grad_q: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the binarized bank: sum over j of dL/dQ[k*i+j] * M_j."""
    k, w, _ = m.shape
    if grad_q.ndim != 4 or grad_q.shape[0] % k or grad_q.shape[2:] != (w, w):
        raise ValueError(f"grad_q shape {grad_q.shape} does not fit M-filter {m.shape}")
    o = grad_q.shape[0] // k
    g = grad_q.reshape(o, k, grad_q.shape[1], w, w)
    return np.einsum("okiab,kab->oiab", g, m)


def grad_m(grad_q: np.ndarray, wb: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. M, reduced over filters and the I broadcast copies."""
    o, i, w, _ = wb.shape
    if grad_q.ndim != 4 or grad_q.shape[0] % o or grad_q.shape[1:] != (i, w, w):
        raise ValueError(f"grad_q shape {grad_q.shape} does not fit filters {wb.shape}")
    k = grad_q.shape[0] // o
    g = grad_q.reshape(o, k, i, w, w)
    return np.einsum("okiab,oiab->kab", g, wb)


def modulated_conv_backward(grad_out: np.ndarray, x: np.ndarray, m: np.ndarray,
                            wb: np.ndarray, stride: int = 1, padding: int = 0):
    """Return ``(grad_x, grad_binarized, grad_m)``.

    Backpropagates through the convolution to dL/dQ and then contracts it
    with M and the binarized bank; dQ/dW is never formed.
    """
    q = modulate(m, wb).astype(x.dtype, copy=False)
    grad_x, grad_q = conv2d_backward(grad_out, x, q, stride, padding)
    return grad_x, grad_w(grad_q, m), grad_m(grad_q, wb)


def he_std(w: int, fan_in: int) -> float:
    """sqrt(2 / (w^2 * fan_in))."""
    return float(np.sqrt(2.0 / (w * w * fan_in)))


def init_full_precision(o: int, i: int, w: int, rng_seed=None, dtype=np.float64) -> np.ndarray:
    """Gaussian master weights, mean 0, std sqrt(2 / (w^2 * i))."""
    if min(o, i, w) < 1:
        raise ValueError("o, i and w must be positive")
    rng = np.random.default_rng(rng_seed)
    return (rng.standard_normal((o, i, w, w)) * he_std(w, i)).astype(dtype)


def init_m_filter(k: int, w: int, i_block: int, rng_seed=None, dtype=np.float64) -> np.ndarray:
    """Gaussian M-filter, mean 0, std sqrt(2 / (w^2 * i_block)).

    With unit-variance binarized filters the reconstructed filters then
    have the same spread as a full-precision layer with ``i_block`` inputs.
    """
    if min(k, w, i_block) < 1:
        raise ValueError("k, w and i_block must be positive")
    rng = np.random.default_rng(rng_seed)
    return (rng.standard_normal((k, w, w)) * he_std(w, i_block)).astype(dtype)

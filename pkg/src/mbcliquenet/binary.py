"""Sign binarization, straight-through gradients and 1-bit weight storage."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .tensor import conv2d

__all__ = [
    "PackedBits",
    "sign_binarize",
    "ste_backward",
    "pack_bits",
    "unpack_bits",
    "binary_conv2d",
]


def sign_binarize(bank: np.ndarray) -> np.ndarray:
    """Elementwise sign with ``sign(0) = +1``; keeps shape and float dtype."""
    bank = np.asarray(bank)
    dtype = bank.dtype if np.issubdtype(bank.dtype, np.floating) else np.float64
    return np.where(bank >= 0, 1, -1).astype(dtype)


def ste_backward(grad_wrt_binarized: np.ndarray, master: np.ndarray,
                 clip: bool = False) -> np.ndarray:
    """Route the gradient of ``sign(master)`` straight to ``master``.

    The default is a pure pass-through.  ``clip=True`` zeroes the gradient
    where ``|master| > 1`` (the BinaryNet variant), kept only for experiments.
    """
    grad = np.asarray(grad_wrt_binarized)
    if grad.shape != np.shape(master):
        raise ValueError(f"shape mismatch: grad {grad.shape} vs master {np.shape(master)}")
    if clip:
        return grad * (np.abs(master) <= 1)
    return grad


@dataclass(frozen=True)
class PackedBits:
    """One bit per weight: +1 -> 1, -1 -> 0, little-endian within each byte."""

    bit_count: int
    data: bytes

    def __post_init__(self):
        if len(self.data) != (self.bit_count + 7) // 8:
            raise ValueError(
                f"{len(self.data)} bytes cannot hold exactly {self.bit_count} bits"
            )

    @property
    def nbytes(self) -> int:
        return len(self.data)


def pack_bits(bank: np.ndarray) -> PackedBits:
    """Pack a {-1, +1} array in canonical (C) order."""
    flat = np.asarray(bank).reshape(-1)
    plus = flat == 1
    if not np.all(plus | (flat == -1)):
        raise ValueError("pack_bits expects only -1/+1 values")
    return PackedBits(flat.size, np.packbits(plus, bitorder="little").tobytes())


def unpack_bits(packed: PackedBits, shape, dtype=np.float32) -> np.ndarray:
    """Inverse of :func:`pack_bits`; rejects count mismatches and dirty padding."""
    shape = tuple(int(s) for s in shape)
    count = int(np.prod(shape))
    if count != packed.bit_count:
        raise ValueError(f"shape {shape} holds {count} weights, archive has {packed.bit_count}")
    raw = np.frombuffer(packed.data, dtype=np.uint8)
    tail = count % 8
    if tail and raw[-1] >> tail:
        raise ValueError("nonzero padding bits in packed weights (corrupt payload)")
    bits = np.unpackbits(raw, count=count, bitorder="little")
    return (bits.astype(dtype) * 2 - 1).reshape(shape)


@lru_cache(maxsize=64)
def _decoded(packed: PackedBits, shape: tuple) -> np.ndarray:
    bank = unpack_bits(packed, shape, dtype=np.float32)
    bank.setflags(write=False)
    return bank


def binary_conv2d(x: np.ndarray, packed: PackedBits, shape, stride: int = 1,
                  padding: int = 0) -> np.ndarray:
    """Convolution with packed +/-1 filters, evaluated in single precision.

    Decoded banks are memoized per packed payload, so repeated inference
    calls skip the unpacking and run straight into float32 BLAS.
    """
    bank = _decoded(packed, tuple(int(s) for s in shape))
    return conv2d(np.asarray(x, dtype=np.float32), bank, stride=stride, padding=padding)

"""Dense tensors and the handful of numeric kernels the rest of the package uses.

Storage is a contiguous little-endian numpy buffer. ``BF16`` has no numpy
dtype, so its payload is kept as raw ``uint16`` bit patterns and widened to
f32 by a 16-bit shift. All elementwise arithmetic runs in f32 and rounds
back to the storage dtype (round-to-nearest-even); reductions use f64.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DtypeMismatch, NonFiniteScale, ShapeMismatch


class Dtype(enum.Enum):
    F32 = "F32"
    F16 = "F16"
    BF16 = "BF16"

    @property
    def itemsize(self) -> int:
        return _ITEMSIZE[self]

    @property
    def storage(self) -> np.dtype:
        """numpy dtype of the raw buffer (``<u2`` for BF16)."""
        return _STORAGE[self]

    @classmethod
    def parse(cls, name: str) -> "Dtype":
        return cls(name.upper())


_ITEMSIZE = {Dtype.F32: 4, Dtype.F16: 2, Dtype.BF16: 2}
_STORAGE = {
    Dtype.F32: np.dtype("<f4"),
    Dtype.F16: np.dtype("<f2"),
    Dtype.BF16: np.dtype("<u2"),
}
# (significand bits incl. hidden bit, minimum normal exponent)
_FORMAT = {Dtype.F32: (24, -126), Dtype.F16: (11, -14), Dtype.BF16: (8, -126)}


def f32_to_bf16_bits(values: np.ndarray) -> np.ndarray:
    """Round f32 values to bfloat16 (nearest-even) and return the bit patterns."""
    bits = np.ascontiguousarray(values, dtype="<f4").view("<u4").astype(np.uint32)
    rounding = np.uint32(0x7FFF) + ((bits >> np.uint32(16)) & np.uint32(1))
    rounded = ((bits + rounding) >> np.uint32(16)).astype(np.uint16)
    nan = np.isnan(values)
    if nan.any():
        # keep sign and payload top bits, force quiet
        quiet = ((bits >> np.uint32(16)) | np.uint32(0x0040)).astype(np.uint16)
        rounded = np.where(nan, quiet, rounded)
    return rounded.astype("<u2")


def bf16_bits_to_f32(bits: np.ndarray) -> np.ndarray:
    wide = np.asarray(bits, dtype=np.uint16).astype(np.uint32) << np.uint32(16)
    return wide.view(np.float32)


def round_f32_to(values: np.ndarray, dtype: Dtype) -> np.ndarray:
    values = np.asarray(values, dtype=np.float32)
    if dtype is Dtype.F32:
        return values.astype("<f4")
    if dtype is Dtype.F16:
        with np.errstate(over="ignore"):
            return values.astype("<f2")
    return f32_to_bf16_bits(values)


@dataclass(frozen=True, eq=False)
class Tensor:
    """Immutable dense tensor; ``array`` holds the raw storage buffer."""

    dtype: Dtype
    array: np.ndarray

    def __post_init__(self) -> None:
        arr = self.array
        if arr.dtype != self.dtype.storage or not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr, dtype=self.dtype.storage)
        if arr.flags.writeable:
            # never freeze a buffer the caller may still hold
            arr = arr.copy()
            arr.flags.writeable = False
        object.__setattr__(self, "array", arr)

    @classmethod
    def from_values(cls, values, dtype: Dtype = Dtype.F32) -> "Tensor":
        """Build from real values, rounding through f32 to ``dtype``."""
        arr = np.asarray(values, dtype=np.float64)
        with np.errstate(over="ignore"):
            f32 = arr.astype(np.float32)
        return cls(dtype, round_f32_to(f32, dtype))

    @classmethod
    def from_bytes(cls, dtype: Dtype, shape: Sequence[int], data: bytes) -> "Tensor":
        shape = tuple(int(s) for s in shape)
        expected = math.prod(shape) * dtype.itemsize
        if len(data) != expected:
            raise ShapeMismatch(
                f"buffer of {len(data)} bytes does not fit shape {list(shape)} {dtype.value}"
            )
        arr = np.frombuffer(data, dtype=dtype.storage).reshape(shape).copy()
        return cls(dtype, arr)

    @classmethod
    def zeros(cls, shape: Sequence[int], dtype: Dtype = Dtype.F32) -> "Tensor":
        return cls(dtype, np.zeros(tuple(shape), dtype=dtype.storage))

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.array.shape)

    @property
    def numel(self) -> int:
        return int(self.array.size)

    @property
    def nbytes(self) -> int:
        return self.numel * self.dtype.itemsize

    @property
    def data(self) -> bytes:
        return self.array.tobytes()

    def to_f32(self) -> np.ndarray:
        if self.dtype is Dtype.BF16:
            return bf16_bits_to_f32(self.array)
        return self.array.astype(np.float32)

    def to_f64(self) -> np.ndarray:
        return self.to_f32().astype(np.float64)

    def reshape(self, shape: Sequence[int]) -> "Tensor":
        return Tensor(self.dtype, self.array.reshape(tuple(shape)))

    def bit_equal(self, other: "Tensor") -> bool:
        return (
            self.dtype is other.dtype
            and self.shape == other.shape
            and self.array.tobytes() == other.array.tobytes()
        )

    def __repr__(self) -> str:
        return f"Tensor({self.dtype.value}, shape={list(self.shape)})"


def _check_pair(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"shape {list(a.shape)} vs {list(b.shape)}")
    if a.dtype is not b.dtype:
        raise DtypeMismatch(f"dtype {a.dtype.value} vs {b.dtype.value}")


def elementwise_sub(a: Tensor, b: Tensor) -> Tensor:
    _check_pair(a, b)
    return Tensor(a.dtype, round_f32_to(a.to_f32() - b.to_f32(), a.dtype))


def axpy(base: Tensor, delta: Tensor, scale: float) -> Tensor:
    """``base + scale * delta`` in f32, rounded to the shared dtype.

    ``scale == 0.0`` returns ``base`` itself, so a disabled term never
    introduces ``-0.0`` or NaN artifacts.
    """
    _check_pair(base, delta)
    if not math.isfinite(scale):
        raise NonFiniteScale(f"scale must be finite, got {scale!r}")
    if scale == 0.0:
        return base
    out = base.to_f32() + np.float32(scale) * delta.to_f32()
    return Tensor(base.dtype, round_f32_to(out, base.dtype))


def matmul(b: Tensor, a: Tensor) -> Tensor:
    """``b @ a`` for rank-2 operands; result is always F32."""
    if len(b.shape) != 2 or len(a.shape) != 2:
        raise ShapeMismatch(f"matmul needs rank-2 operands, got {list(b.shape)} and {list(a.shape)}")
    if b.shape[1] != a.shape[0]:
        raise ShapeMismatch(f"inner dimensions differ: {list(b.shape)} @ {list(a.shape)}")
    return Tensor(Dtype.F32, np.matmul(b.to_f32(), a.to_f32()))


def cast(t: Tensor, target: Dtype) -> Tensor:
    if t.dtype is target:
        return t
    return Tensor(target, round_f32_to(t.to_f32(), target))


def frobenius_norm(t: Tensor) -> float:
    if t.numel == 0:
        return 0.0
    x = t.to_f64().ravel()
    return float(math.sqrt(np.dot(x, x)))


def ulp_of(magnitude, dtype: Dtype) -> np.ndarray:
    """Spacing of ``dtype`` at ``|magnitude|`` (subnormal spacing near zero)."""
    precision, emin = _FORMAT[dtype]
    mag = np.abs(np.asarray(magnitude, dtype=np.float64))
    _, exp = np.frexp(mag)
    exp = np.where(mag == 0, emin, np.maximum(exp - 1, emin))
    return np.ldexp(1.0, exp - (precision - 1))


def ulp_error(actual: Tensor, expected: Tensor, scale=None) -> np.ndarray:
    """Per-element ``|actual - expected|`` in units of the dtype's ulp.

    The ulp is taken at ``max(|expected|, |scale|)``. Passing the operand
    magnitudes as ``scale`` gives the usual forward-error yardstick for
    results that went through cancellation.
    """
    _check_pair(actual, expected)
    ref = np.abs(expected.to_f64())
    if scale is not None:
        ref = np.maximum(ref, np.abs(np.asarray(scale, dtype=np.float64)))
    diff = np.abs(actual.to_f64() - expected.to_f64())
    both_nan = np.isnan(actual.to_f64()) & np.isnan(expected.to_f64())
    diff = np.where(both_nan, 0.0, diff)
    same = actual.to_f64() == expected.to_f64()
    return np.where(same, 0.0, diff / ulp_of(ref, expected.dtype))


def ulp_distance(a: Tensor, b: Tensor) -> np.ndarray:
    """Count of representable values between ``a`` and ``b`` (+0 == -0)."""
    _check_pair(a, b)
    width = a.dtype.itemsize * 8
    unsigned = {16: np.uint16, 32: np.uint32}[width]
    sign = 1 << (width - 1)

    def ordered(t: Tensor) -> np.ndarray:
        u = t.array.view(unsigned).astype(np.int64)
        return np.where(u & sign, -(u & (sign - 1)), u)

    return np.abs(ordered(a) - ordered(b))

"""Tensor containers shared by every other module.

Weights are stored as ``(out_features, in_features)`` and activations as
``(tokens, features)``, both row-major, so a GEMM consumes the weight
transposed implicitly.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional, Tuple, Union

import numpy as np

from .parallel import map_rows

INT4_MIN, INT4_MAX = -8, 7


class Granularity(str, enum.Enum):
    PER_TENSOR = "per_tensor"
    PER_CHANNEL = "per_channel"
    PER_TOKEN = "per_token"
    PER_GROUP = "per_group"


def int_range(bits: int) -> Tuple[int, int]:
    return -(1 << (bits - 1)), (1 << (bits - 1)) - 1


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class DenseTensor:
    """A finite float32 matrix."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float32, copy=True)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise ValueError(f"DenseTensor must be 2-D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("DenseTensor values must be finite")
        object.__setattr__(self, "data", _frozen(np.ascontiguousarray(arr)))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def __eq__(self, other):
        if not isinstance(other, DenseTensor):
            return NotImplemented
        return self.shape == other.shape and self.data.tobytes() == other.data.tobytes()

    def __repr__(self):
        return f"DenseTensor(shape={self.shape})"


def as_array(t: Union[DenseTensor, np.ndarray]) -> np.ndarray:
    return t.data if isinstance(t, DenseTensor) else np.asarray(t)


@dataclass(frozen=True)
class QuantScheme:
    """Bit width, symmetry, granularity and per-channel clipping factors.

    ``clip_gamma``/``clip_beta`` are either a scalar applied to every channel
    or a tuple with one entry per output channel.
    """

    bits: int = 4
    symmetric: bool = True
    granularity: Granularity = Granularity.PER_CHANNEL
    group_size: Optional[int] = None
    clip_gamma: Union[float, Tuple[float, ...]] = 1.0
    clip_beta: Union[float, Tuple[float, ...]] = 1.0

    def __post_init__(self):
        if self.bits not in (4, 8):
            raise ValueError(f"bits must be 4 or 8, got {self.bits}")
        object.__setattr__(self, "granularity", Granularity(self.granularity))
        if self.granularity is Granularity.PER_GROUP:
            if self.group_size is None or self.group_size <= 0:
                raise ValueError("per-group granularity needs a positive group_size")
        elif self.group_size is not None:
            raise ValueError("group_size only applies to per-group granularity")
        for name in ("clip_gamma", "clip_beta"):
            value = getattr(self, name)
            if np.ndim(value) == 0:
                value = float(value)
                vals = np.array([value])
            else:
                value = tuple(float(v) for v in value)
                vals = np.array(value)
            if vals.size == 0 or np.any(vals <= 0) or np.any(vals > 1):
                raise ValueError(f"{name} must lie in (0, 1]")
            object.__setattr__(self, name, value)
        if not self.symmetric and (self.clip_gamma != 1.0 or self.clip_beta != 1.0):
            raise ValueError("clipping factors are only defined for symmetric schemes")

    @property
    def qmin(self) -> int:
        return int_range(self.bits)[0]

    @property
    def qmax(self) -> int:
        return int_range(self.bits)[1]

    def gamma_for(self, rows: int) -> np.ndarray:
        return self._per_channel(self.clip_gamma, rows)

    def beta_for(self, rows: int) -> np.ndarray:
        return self._per_channel(self.clip_beta, rows)

    @staticmethod
    def _per_channel(value, rows: int) -> np.ndarray:
        if isinstance(value, tuple):
            if len(value) != rows:
                raise ValueError(f"expected {rows} clipping factors, got {len(value)}")
            return np.array(value, dtype=np.float32)
        return np.full(rows, value, dtype=np.float32)


@dataclass(frozen=True, eq=False)
class PackedInt4Buffer:
    """Two 4-bit codes per byte: element ``2k`` in the low nibble of byte ``k``,
    element ``2k+1`` in the high nibble. An odd tail leaves the last high
    nibble zero.

    ``encoding`` is ``"sint4"`` for two's-complement nibbles or
    ``"uint4_offset"`` for codes stored as ``q + 8``.
    """

    data: np.ndarray
    element_count: int
    encoding: str = "sint4"

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.data, dtype=np.uint8).reshape(-1))
        if self.element_count < 0:
            raise ValueError("element_count must be non-negative")
        if arr.size != (self.element_count + 1) // 2:
            raise ValueError(
                f"{self.element_count} elements need {(self.element_count + 1) // 2} bytes, got {arr.size}"
            )
        if self.encoding not in ("sint4", "uint4_offset"):
            raise ValueError(f"unknown nibble encoding {self.encoding!r}")
        object.__setattr__(self, "data", _frozen(arr.copy()))

    def nibbles(self) -> np.ndarray:
        """Raw unsigned nibbles in element order."""
        out = np.empty(self.data.size * 2, dtype=np.uint8)
        out[0::2] = self.data & 0x0F
        out[1::2] = self.data >> 4
        return out[: self.element_count]

    def __eq__(self, other):
        if not isinstance(other, PackedInt4Buffer):
            return NotImplemented
        return (
            self.element_count == other.element_count
            and self.encoding == other.encoding
            and self.data.tobytes() == other.data.tobytes()
        )


def pack_nibbles(nibbles: np.ndarray, encoding: str = "sint4") -> PackedInt4Buffer:
    nib = np.asarray(nibbles, dtype=np.uint8).reshape(-1)
    n = nib.size
    if n % 2:
        nib = np.concatenate([nib, np.zeros(1, dtype=np.uint8)])
    packed = (nib[0::2] & 0x0F) | ((nib[1::2] & 0x0F) << 4)
    return PackedInt4Buffer(packed.astype(np.uint8), n, encoding)


def _check_int4(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q)
    if q.size and (q.min() < INT4_MIN or q.max() > INT4_MAX):
        raise ValueError("INT4 values must lie in [-8, 7]")
    return q.astype(np.int8).reshape(-1)


def pack_int4(q) -> PackedInt4Buffer:
    """Pack signed codes in [-8, 7] as their low 4 two's-complement bits."""
    q = _check_int4(q)
    return pack_nibbles(q.view(np.uint8) & 0x0F, "sint4")


def unpack_int4(buf: PackedInt4Buffer) -> np.ndarray:
    """Sign-extend two's-complement nibbles back to int8."""
    if buf.encoding != "sint4":
        raise ValueError(f"expected sint4 buffer, got {buf.encoding}")
    nib = buf.nibbles().astype(np.int8)
    return np.where(nib >= 8, nib - 16, nib).astype(np.int8)


@dataclass(frozen=True, eq=False)
class QuantizedTensor:
    """Integer codes plus the scales (and zero points) to dequantize them.

    ``scales`` shape follows the granularity: ``(1,)`` per-tensor, ``(rows,)``
    per-channel or per-token, ``(rows, cols // group_size)`` per-group.
    ``zero_points`` are real offsets added after scaling, present only for
    asymmetric schemes.
    """

    payload: Union[np.ndarray, PackedInt4Buffer]
    scales: np.ndarray
    scheme: QuantScheme
    shape: Tuple[int, int]
    zero_points: Optional[np.ndarray] = None
    _codes: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        rows, cols = (int(s) for s in self.shape)
        object.__setattr__(self, "shape", (rows, cols))
        scheme = self.scheme
        if isinstance(self.payload, PackedInt4Buffer):
            if scheme.bits != 4:
                raise ValueError("packed INT4 payload requires a 4-bit scheme")
            if self.payload.element_count != rows * cols:
                raise ValueError("payload element count does not match shape")
            codes = unpack_int4(self.payload).reshape(rows, cols)
        else:
            if scheme.bits != 8:
                raise ValueError("4-bit payloads must be packed")
            arr = np.asarray(self.payload)
            if arr.dtype != np.int8:
                raise ValueError(f"INT8 payload must have dtype int8, got {arr.dtype}")
            codes = _frozen(np.ascontiguousarray(arr).reshape(rows, cols).copy())
            object.__setattr__(self, "payload", codes)
        codes = _frozen(codes)
        lo, hi = int_range(scheme.bits)
        if codes.size and (codes.min() < lo or codes.max() > hi):
            raise ValueError(f"codes outside [{lo}, {hi}]")

        scales = np.ascontiguousarray(np.asarray(self.scales, dtype=np.float32))
        expected = scale_shape(scheme, rows, cols)
        if scales.shape != expected:
            raise ValueError(f"scales shape {scales.shape} does not match {expected}")
        if not np.all(np.isfinite(scales)) or np.any(scales <= 0):
            raise ValueError("scales must be finite and strictly positive")
        object.__setattr__(self, "scales", _frozen(scales.copy()))

        if scheme.symmetric:
            if self.zero_points is not None:
                raise ValueError("symmetric schemes carry no zero points")
        else:
            if self.zero_points is None:
                raise ValueError("asymmetric schemes need zero points")
            zp = np.ascontiguousarray(np.asarray(self.zero_points, dtype=np.float32))
            if zp.shape != expected:
                raise ValueError(f"zero_points shape {zp.shape} does not match {expected}")
            if not np.all(np.isfinite(zp)):
                raise ValueError("zero points must be finite")
            object.__setattr__(self, "zero_points", _frozen(zp.copy()))
        object.__setattr__(self, "_codes", codes)

    @property
    def codes(self) -> np.ndarray:
        """Unpacked int8 codes, shape ``(rows, cols)``."""
        return self._codes

    @property
    def rows(self) -> int:
        return self.shape[0]

    @property
    def cols(self) -> int:
        return self.shape[1]

    def __eq__(self, other):
        if not isinstance(other, QuantizedTensor):
            return NotImplemented
        zp_a = None if self.zero_points is None else self.zero_points.tobytes()
        zp_b = None if other.zero_points is None else other.zero_points.tobytes()
        return (
            self.shape == other.shape
            and self.scheme == other.scheme
            and type(self.payload) is type(other.payload)
            and self.codes.tobytes() == other.codes.tobytes()
            and self.scales.tobytes() == other.scales.tobytes()
            and zp_a == zp_b
        )

    def __repr__(self):
        return f"QuantizedTensor(shape={self.shape}, bits={self.scheme.bits}, granularity={self.scheme.granularity.value})"


def scale_shape(scheme: QuantScheme, rows: int, cols: int) -> tuple:
    g = scheme.granularity
    if g is Granularity.PER_TENSOR:
        return (1,)
    if g in (Granularity.PER_CHANNEL, Granularity.PER_TOKEN):
        return (rows,)
    if cols % scheme.group_size:
        raise ValueError(f"group size {scheme.group_size} does not divide {cols}")
    return (rows, cols // scheme.group_size)


def matmul_f32(a, b_transposed, threads: Optional[int] = None) -> DenseTensor:
    """``O[i, j] = sum_k a[i, k] * b[j, k]`` in float32.

    The k-sum runs left to right for every output element, so the result is
    bit-identical for any thread count.
    """
    a = as_array(a).astype(np.float32, copy=False)
    b = as_array(b_transposed).astype(np.float32, copy=False)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"inner dimensions disagree: {a.shape} x {b.shape}^T")
    m, k = a.shape
    n = b.shape[0]
    out = np.zeros((m, n), dtype=np.float32)
    bt = np.ascontiguousarray(b.T)

    def work(lo: int, hi: int) -> None:
        acc = out[lo:hi]
        tmp = np.empty_like(acc)
        for kk in range(k):
            np.multiply(a[lo:hi, kk, None], bt[kk], out=tmp)
            acc += tmp

    map_rows(work, m, threads)
    return DenseTensor(out)

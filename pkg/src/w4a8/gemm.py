"""Software mixed-precision GEMM pipelines with instruction-class counters.

Five engines share the ``O = A @ W^T`` contract with weights stored
``(N, K)`` and activations ``(M, K)``:

* ``gemm_w4a16_grouped``   dequantize each INT4 group to float, float MACs
* ``gemm_w4a8_finegrained`` INT8 MACs per group, every group sub-sum rescaled
* ``gemm_w4a8_asymmetric``  offset nibbles widened to 32 bits and shifted by
  the zero point before the MACs
* ``gemm_w4a8_fast``        nibbles dropped into the high half of an int8
  lane (value * 16), one MAC pass, one arithmetic shift, one rescale
* ``gemm_w8a8``             INT8 MACs, one rescale per output

Integer accumulation is exact. It runs through float64 BLAS: every operand is
an integer below 2**15 in magnitude and every partial sum stays far below
2**53, so the float result is the exact integer sum in any order. The 32-bit
accumulator is then enforced by an explicit overflow check.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from .parallel import map_rows
from .tensor import (
    DenseTensor,
    Granularity,
    PackedInt4Buffer,
    QuantizedTensor,
    QuantScheme,
    _check_int4,
    as_array,
    pack_int4,
    pack_nibbles,
    unpack_int4,
)

INT32_MIN, INT32_MAX = -(2**31), 2**31 - 1
UINT4_OFFSET = 8


class SchemeError(ValueError):
    """An operand's quantization scheme does not suit the engine."""


@dataclass
class GemmCounters:
    """Instruction-class tallies for one or more GEMM calls.

    ``dequant_events`` counts integer-to-float conversions with their FMA;
    ``final_scale_ops`` counts rescales applied once a full K-sum is done.
    """

    int8_mac_ops: int = 0
    dequant_events: int = 0
    zero_point_sub_ops: int = 0
    final_scale_ops: int = 0

    def add(self, other: "GemmCounters") -> "GemmCounters":
        for f in fields(self):
            setattr(self, f.name, getattr(self, f.name) + getattr(other, f.name))
        return self

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _record(counters: Optional[GemmCounters], **counts) -> None:
    if counters is not None:
        counters.add(GemmCounters(**counts))


# -- nibble conversions ----------------------------------------------------


def pack_sint4_high_nibble(q) -> PackedInt4Buffer:
    """Store the low 4 two's-complement bits of each code (e.g. -7 -> 1001)."""
    return pack_int4(q)


def unpack_sint4_high_nibble(buf: PackedInt4Buffer) -> np.ndarray:
    """Place each nibble in the high half of an int8: the code times 16."""
    if buf.encoding != "sint4":
        raise SchemeError(f"expected two's-complement nibbles, got {buf.encoding}")
    out = np.empty(buf.data.size * 2, dtype=np.uint8)
    out[0::2] = buf.data << 4
    out[1::2] = buf.data & 0xF0
    return out[: buf.element_count].view(np.int8)


def pack_uint4_offset(q) -> PackedInt4Buffer:
    """Store ``q + 8`` as an unsigned nibble (e.g. -7 -> 0001)."""
    q = _check_int4(q).astype(np.int16)
    return pack_nibbles((q + UINT4_OFFSET).astype(np.uint8), "uint4_offset")


def unpack_uint4_offset(buf: PackedInt4Buffer, zero_points=UINT4_OFFSET, cols: Optional[int] = None) -> np.ndarray:
    """Widen offset nibbles to int32 and subtract the zero point.

    A per-row ``zero_points`` vector needs ``cols`` to lay out the rows.
    """
    if buf.encoding != "uint4_offset":
        raise SchemeError(f"expected offset nibbles, got {buf.encoding}")
    wide = buf.nibbles().astype(np.int32)
    zp = np.asarray(zero_points, dtype=np.int32)
    if zp.ndim == 0:
        return wide - zp
    if cols is None:
        raise ValueError("per-row zero points need the row length")
    return (wide.reshape(-1, cols) - zp[:, None]).reshape(-1)


# -- integer core ----------------------------------------------------------


def int_matmul(a_codes: np.ndarray, b_codes: np.ndarray) -> np.ndarray:
    """Exact ``a @ b.T`` over integers into int32 accumulators."""
    if a_codes.shape[1] != b_codes.shape[1]:
        raise ValueError(f"inner dimensions disagree: {a_codes.shape} x {b_codes.shape}^T")
    k = a_codes.shape[1]
    bound = float(np.abs(a_codes).max(initial=0)) * float(np.abs(b_codes).max(initial=0)) * k
    if bound >= 2.0**53:
        raise OverflowError("operands too large for exact accumulation")
    acc = a_codes.astype(np.float64) @ b_codes.astype(np.float64).T
    if acc.size and (acc.min() < INT32_MIN or acc.max() > INT32_MAX):
        raise OverflowError("32-bit accumulator overflow")
    return acc.astype(np.int32)


def _require(q: QuantizedTensor, bits: int, granularity: Granularity, what: str, symmetric=True) -> None:
    s = q.scheme
    if s.bits != bits or s.granularity is not granularity or (symmetric and not s.symmetric):
        sym = "symmetric " if symmetric else ""
        raise SchemeError(
            f"{what} must be {sym}{bits}-bit {granularity.value}, got "
            f"{'symmetric' if s.symmetric else 'asymmetric'} {s.bits}-bit {s.granularity.value}"
        )


def _check_inner(m_k: int, n_k: int) -> None:
    if m_k != n_k:
        raise ValueError(f"inner dimensions disagree: activations have K={m_k}, weights K={n_k}")


# -- engines ---------------------------------------------------------------


def gemm_w4a16_grouped(a, w_q: QuantizedTensor, counters: Optional[GemmCounters] = None,
                       threads: Optional[int] = None) -> DenseTensor:
    """Float activations times groupwise INT4 weights, dequantized per group.

    The float K-sum runs left to right, so with a single group the result is
    exactly ``matmul_f32(a, dequantize(w_q))``.
    """
    a = np.asarray(as_array(a), dtype=np.float32)
    if w_q.scheme.bits != 4 or w_q.scheme.granularity is not Granularity.PER_GROUP:
        raise SchemeError("W4A16 engine needs a 4-bit per-group weight")
    m, k = a.shape
    n, wk = w_q.shape
    _check_inner(k, wk)
    g = w_q.scheme.group_size
    codes = unpack_int4(w_q.payload).reshape(n, k)
    scales, zps = w_q.scales, w_q.zero_points
    out = np.zeros((m, n), dtype=np.float32)

    def work(lo: int, hi: int) -> None:
        acc = out[lo:hi]
        tmp = np.empty_like(acc)
        for gi in range(k // g):
            sl = slice(gi * g, (gi + 1) * g)
            dq = codes[:, sl].astype(np.float32) * scales[:, gi, None]
            if zps is not None:
                dq += zps[:, gi, None]
            dq_t = np.ascontiguousarray(dq.T)
            for kk in range(g):
                np.multiply(a[lo:hi, sl.start + kk, None], dq_t[kk], out=tmp)
                acc += tmp

    map_rows(work, m, threads)
    _record(counters, dequant_events=m * n * k)
    return DenseTensor(out)


def gemm_w4a8_finegrained(a_q: QuantizedTensor, w_q: QuantizedTensor,
                          counters: Optional[GemmCounters] = None,
                          threads: Optional[int] = None) -> DenseTensor:
    """Per-token INT8 activations times groupwise INT4 weights.

    Each group's INT32 sub-sum is converted to float and rescaled by
    ``S_a[i] * S_w[j, g]`` before joining the float accumulator.
    """
    _require(a_q, 8, Granularity.PER_TOKEN, "activations")
    _require(w_q, 4, Granularity.PER_GROUP, "weights")
    m, k = a_q.shape
    n, wk = w_q.shape
    _check_inner(k, wk)
    g = w_q.scheme.group_size
    if k % g:
        raise SchemeError(f"group size {g} does not divide K={k}")
    a_codes = a_q.codes
    w_codes = unpack_int4(w_q.payload).reshape(n, k)
    sa, sw = a_q.scales, w_q.scales
    out = np.zeros((m, n), dtype=np.float32)

    def work(lo: int, hi: int) -> None:
        acc = out[lo:hi]
        for gi in range(k // g):
            sl = slice(gi * g, (gi + 1) * g)
            sub = int_matmul(a_codes[lo:hi, sl], w_codes[:, sl])
            acc += sub.astype(np.float32) * (sa[lo:hi, None] * sw[None, :, gi])

    map_rows(work, m, threads)
    _record(counters, int8_mac_ops=m * n * k, dequant_events=m * n * (k // g))
    return DenseTensor(out)


def offset_weights(w_q: QuantizedTensor):
    """Repack a symmetric per-channel INT4 weight for the asymmetric engine.

    Returns ``(buffer, scales, zero_points)`` with every zero point 8.
    """
    _require(w_q, 4, Granularity.PER_CHANNEL, "weights")
    n = w_q.shape[0]
    return pack_uint4_offset(w_q.codes), w_q.scales, np.full(n, UINT4_OFFSET, dtype=np.int32)


def gemm_w4a8_asymmetric(a_q: QuantizedTensor, w_offset: PackedInt4Buffer, scales, zero_points=None,
                         counters: Optional[GemmCounters] = None,
                         threads: Optional[int] = None) -> DenseTensor:
    """Per-token INT8 activations times offset-packed INT4 weights.

    Nibbles are widened to 32 bits and the integer zero point (8 for
    symmetric codes) is subtracted before the MACs, once per weight element.
    """
    _require(a_q, 8, Granularity.PER_TOKEN, "activations")
    m, k = a_q.shape
    scales = np.asarray(scales, dtype=np.float32).reshape(-1)
    n = scales.size
    if w_offset.element_count != n * k:
        raise ValueError(f"weight buffer holds {w_offset.element_count} codes, expected {n}x{k}")
    if zero_points is None:
        zero_points = np.full(n, UINT4_OFFSET, dtype=np.int32)
    zero_points = np.asarray(zero_points, dtype=np.int32).reshape(-1)
    if zero_points.size != n:
        raise ValueError(f"expected {n} zero points, got {zero_points.size}")
    w_wide = unpack_uint4_offset(w_offset, zero_points, cols=k).reshape(n, k)
    a_codes, sa = a_q.codes, a_q.scales
    out = np.empty((m, n), dtype=np.float32)

    def work(lo: int, hi: int) -> None:
        acc = int_matmul(a_codes[lo:hi], w_wide)
        out[lo:hi] = acc.astype(np.float32) * (sa[lo:hi, None] * scales[None, :])

    map_rows(work, m, threads)
    _record(counters, int8_mac_ops=m * n * k, dequant_events=m * n,
            zero_point_sub_ops=n * k, final_scale_ops=m * n)
    return DenseTensor(out)


def fast_accumulators(a_codes: np.ndarray, w_buf: PackedInt4Buffer, n: int) -> np.ndarray:
    """INT32 results of the high-nibble pass, already shifted right by 4."""
    k = a_codes.shape[1]
    if w_buf.element_count != n * k:
        raise ValueError(f"weight buffer holds {w_buf.element_count} codes, expected {n}x{k}")
    w16 = unpack_sint4_high_nibble(w_buf).reshape(n, k)
    acc = int_matmul(a_codes, w16)
    # every addend is a multiple of 16, so the shift is an exact division
    return np.right_shift(acc, 4)


def gemm_w4a8_fast(a_q: QuantizedTensor, w_q: QuantizedTensor,
                   counters: Optional[GemmCounters] = None,
                   threads: Optional[int] = None) -> DenseTensor:
    """Per-token INT8 activations times symmetric per-channel INT4 weights.

    One fused pass: nibble to high half of an int8 lane, INT8 MACs into
    INT32, ``>> 4``, then a single rescale by ``S_a[i] * S_w[j]``.
    """
    _require(a_q, 8, Granularity.PER_TOKEN, "activations")
    if not w_q.scheme.symmetric:
        raise SchemeError("the fast engine has no zero-point path; asymmetric weights are rejected")
    _require(w_q, 4, Granularity.PER_CHANNEL, "weights")
    m, k = a_q.shape
    n, wk = w_q.shape
    _check_inner(k, wk)
    a_codes, sa, sw = a_q.codes, a_q.scales, w_q.scales
    out = np.empty((m, n), dtype=np.float32)

    def work(lo: int, hi: int) -> None:
        acc = fast_accumulators(a_codes[lo:hi], w_q.payload, n)
        out[lo:hi] = acc.astype(np.float32) * (sa[lo:hi, None] * sw[None, :])

    map_rows(work, m, threads)
    _record(counters, int8_mac_ops=m * n * k, dequant_events=m * n, final_scale_ops=m * n)
    return DenseTensor(out)


def widen_to_int8(w_q: QuantizedTensor) -> QuantizedTensor:
    """The same codes and scales relabelled as an 8-bit per-channel weight."""
    _require(w_q, 4, Granularity.PER_CHANNEL, "weights")
    scheme = QuantScheme(bits=8, symmetric=True, granularity=Granularity.PER_CHANNEL)
    return QuantizedTensor(w_q.codes.copy(), w_q.scales, scheme, w_q.shape)


def gemm_w8a8(a_q: QuantizedTensor, w_q: QuantizedTensor,
              counters: Optional[GemmCounters] = None,
              threads: Optional[int] = None) -> DenseTensor:
    """Per-token INT8 activations times per-channel INT8 weights."""
    _require(a_q, 8, Granularity.PER_TOKEN, "activations")
    _require(w_q, 8, Granularity.PER_CHANNEL, "weights")
    m, k = a_q.shape
    n, wk = w_q.shape
    _check_inner(k, wk)
    a_codes, w_codes, sa, sw = a_q.codes, w_q.codes, a_q.scales, w_q.scales
    out = np.empty((m, n), dtype=np.float32)

    def work(lo: int, hi: int) -> None:
        acc = int_matmul(a_codes[lo:hi], w_codes)
        out[lo:hi] = acc.astype(np.float32) * (sa[lo:hi, None] * sw[None, :])

    map_rows(work, m, threads)
    _record(counters, int8_mac_ops=m * n * k, dequant_events=m * n, final_scale_ops=m * n)
    return DenseTensor(out)

"""Round-to-nearest quantization and dequantization.

Rounding is half away from zero. A channel whose range is zero gets
``MIN_SCALE`` so that division stays defined and its codes come out as 0.
"""

from __future__ import annotations

from typing import Tuple

import numpy as np

from .tensor import (
    DenseTensor,
    Granularity,
    QuantizedTensor,
    QuantScheme,
    as_array,
    int_range,
    pack_int4,
)

MIN_SCALE = np.float32(2.0**-24)
DEFAULT_GROUP_SIZE = 128


def round_half_away(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    t = np.trunc(x)
    frac = x - t  # exact for IEEE floats
    return t + np.where(np.abs(frac) >= 0.5, np.sign(x), 0).astype(x.dtype)


def _vector(w, name="w") -> np.ndarray:
    w = np.asarray(as_array(w), dtype=np.float32).reshape(-1)
    if w.size == 0:
        raise ValueError(f"{name} must be non-empty")
    return w


def _symmetric_scales(wmax, wmin, bits, gamma, beta) -> np.ndarray:
    """Vectorised scale rule over any broadcastable shapes."""
    qmax = np.float32(int_range(bits)[1])
    s = np.maximum(np.abs(np.float32(gamma) * wmax), np.abs(np.float32(beta) * wmin)) / qmax
    s = np.asarray(s, dtype=np.float32)
    return np.where(s > 0, s, MIN_SCALE).astype(np.float32)


def compute_scale_symmetric(w, bits: int, gamma: float = 1.0, beta: float = 1.0) -> np.float32:
    """Clipped abs-max scale ``max(|gamma*max(w)|, |beta*min(w)|) / (2^(N-1) - 1)``."""
    w = _vector(w)
    if not (0 < gamma <= 1 and 0 < beta <= 1):
        raise ValueError("gamma and beta must lie in (0, 1]")
    return np.float32(_symmetric_scales(w.max(), w.min(), bits, gamma, beta))


def quantize_codes(w: np.ndarray, scale, bits: int) -> np.ndarray:
    """clamp(round(w / scale)) with broadcasting; returns int8."""
    lo, hi = int_range(bits)
    q = round_half_away(np.asarray(w, dtype=np.float32) / np.asarray(scale, dtype=np.float32))
    return np.clip(q, lo, hi).astype(np.int8)


def quantize_symmetric(w, bits: int, gamma: float = 1.0, beta: float = 1.0) -> Tuple[np.ndarray, np.float32]:
    s = compute_scale_symmetric(w, bits, gamma, beta)
    return quantize_codes(_vector(w), s, bits), s


def _asymmetric_params(wmax, wmin, bits):
    lo, hi = int_range(bits)
    span = np.asarray(wmax, dtype=np.float32) - np.asarray(wmin, dtype=np.float32)
    s = (span / np.float32(hi - lo - 1)).astype(np.float32)
    s = np.where(s > 0, s, MIN_SCALE).astype(np.float32)
    z = ((np.asarray(wmax, dtype=np.float32) + np.asarray(wmin, dtype=np.float32)) / np.float32(2)).astype(np.float32)
    return s, z


def quantize_asymmetric(x, bits: int) -> Tuple[np.ndarray, np.float32, np.float32]:
    """Min-max quantization with a real zero point.

    ``q = round((x - z) / S)`` and ``x ~= q * S + z``; ``z`` is the range
    midpoint and ``S = (max - min) / (2^N - 2)`` so the extremes land on
    ``+-(2^(N-1) - 1)``.
    """
    x = _vector(x, "x")
    s, z = _asymmetric_params(x.max(), x.min(), bits)
    return quantize_codes(x - z, s, bits), np.float32(s), np.float32(z)


def _pack(codes: np.ndarray, bits: int):
    return pack_int4(codes) if bits == 4 else codes


def _reshape_groups(w: np.ndarray, group_size: int) -> np.ndarray:
    rows, cols = w.shape
    if group_size <= 0 or cols % group_size:
        raise ValueError(f"group size {group_size} does not divide {cols}")
    return w.reshape(rows, cols // group_size, group_size)


def quantize_weights(w, scheme: QuantScheme) -> QuantizedTensor:
    """Quantize a ``(out_features, in_features)`` weight per channel or per group.

    Clipping factors from ``scheme`` are per output channel and apply to every
    group of that channel.
    """
    w = np.asarray(as_array(w), dtype=np.float32)
    if w.ndim != 2 or w.size == 0:
        raise ValueError(f"weight must be a non-empty matrix, got shape {w.shape}")
    rows, cols = w.shape
    g = scheme.granularity
    if g is Granularity.PER_CHANNEL:
        view = w[:, None, :]
    elif g is Granularity.PER_GROUP:
        view = _reshape_groups(w, scheme.group_size)
    else:
        raise ValueError(f"weights are quantized per channel or per group, not {g.value}")

    wmax, wmin = view.max(axis=2), view.min(axis=2)
    zp = None
    if scheme.symmetric:
        gamma = scheme.gamma_for(rows)[:, None]
        beta = scheme.beta_for(rows)[:, None]
        scales = _symmetric_scales(wmax, wmin, scheme.bits, gamma, beta)
        codes = quantize_codes(view, scales[:, :, None], scheme.bits)
    else:
        scales, zp = _asymmetric_params(wmax, wmin, scheme.bits)
        codes = quantize_codes(view - zp[:, :, None], scales[:, :, None], scheme.bits)
    codes = codes.reshape(rows, cols)
    if g is Granularity.PER_CHANNEL:
        scales = scales[:, 0]
        zp = None if zp is None else zp[:, 0]
    return QuantizedTensor(_pack(codes, scheme.bits), scales, scheme, (rows, cols), zero_points=zp)


def quantize_activations_per_token(a, bits: int = 8) -> QuantizedTensor:
    """Dynamic symmetric abs-max quantization, one scale per token row."""
    a = np.asarray(as_array(a), dtype=np.float32)
    if a.ndim != 2 or a.size == 0:
        raise ValueError(f"activations must be a non-empty matrix, got shape {a.shape}")
    scheme = QuantScheme(bits=bits, symmetric=True, granularity=Granularity.PER_TOKEN)
    absmax = np.abs(a).max(axis=1)
    scales = _symmetric_scales(absmax, -absmax, bits, 1.0, 1.0)
    codes = quantize_codes(a, scales[:, None], bits)
    return QuantizedTensor(_pack(codes, bits), scales, scheme, a.shape)


def expand_scales(q: QuantizedTensor, values: np.ndarray) -> np.ndarray:
    """Broadcast per-channel/per-group/per-tensor values to the full shape."""
    rows, cols = q.shape
    g = q.scheme.granularity
    if g is Granularity.PER_TENSOR:
        return np.full((rows, cols), values[0], dtype=np.float32)
    if g is Granularity.PER_GROUP:
        return np.repeat(values, q.scheme.group_size, axis=1)
    return np.repeat(values[:, None], cols, axis=1)


def dequantize(q: QuantizedTensor) -> DenseTensor:
    out = q.codes.astype(np.float32) * expand_scales(q, q.scales)
    if q.zero_points is not None:
        out = out + expand_scales(q, q.zero_points)
    return DenseTensor(out)

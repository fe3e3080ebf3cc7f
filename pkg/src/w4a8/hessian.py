"""Hessian-weighted error compensation for per-channel weight quantization.

Columns are quantized one at a time with the per-channel scales frozen; each
column's rounding error is pushed onto the columns not yet quantized through
the upper Cholesky factor of the damped inverse Hessian.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .quantizer import _symmetric_scales, dequantize, quantize_codes
from .tensor import Granularity, QuantizedTensor, QuantScheme, as_array, pack_int4

DAMP_FRACTION = 0.01
BLOCK_SIZE = 128


@dataclass(frozen=True, eq=False)
class HessianState:
    """Running ``H = 2 * sum X^T X`` over calibration rows, kept in float64."""

    h: np.ndarray
    sample_count: int = 0

    @classmethod
    def empty(cls, in_features: int) -> "HessianState":
        return cls(np.zeros((in_features, in_features), dtype=np.float64), 0)

    @property
    def in_features(self) -> int:
        return self.h.shape[0]

    def _conditioned(self) -> np.ndarray:
        h = self.h.copy()
        dead = np.diag(h) == 0
        h[dead, dead] = 1.0
        return h

    @property
    def damping(self) -> float:
        """``0.01 * mean(diag H)`` after dead inputs are given a unit diagonal."""
        return DAMP_FRACTION * float(np.mean(np.diag(self._conditioned())))

    def inverse_factor(self, order: Optional[np.ndarray] = None) -> np.ndarray:
        """Upper Cholesky factor ``U`` with ``U^T U = (H + lambda I)^-1``.

        Zero-diagonal (dead) inputs get a unit diagonal first. ``order``
        permutes rows/columns of ``H`` before factoring.
        """
        h = self._conditioned()
        if order is not None:
            h = h[np.ix_(order, order)]
        h[np.diag_indices_from(h)] += self.damping
        try:
            lower = np.linalg.cholesky(h)
            eye = np.eye(h.shape[0])
            linv = np.linalg.solve(lower, eye) if h.shape[0] else eye
            hinv = linv.T @ linv
            return np.linalg.cholesky(hinv).T
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError(f"damped Hessian is not positive definite: {exc}") from None


def accumulate_hessian(state: HessianState, x_batch) -> HessianState:
    """Add ``2 * X^T X`` for a ``(tokens, in_features)`` batch."""
    x = np.asarray(as_array(x_batch), dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != state.in_features:
        raise ValueError(f"batch has {x.shape[1]} features, Hessian expects {state.in_features}")
    return HessianState(state.h + 2.0 * (x.T @ x), state.sample_count + x.shape[0])


def hessian_from(x) -> HessianState:
    x = np.asarray(as_array(x))
    return accumulate_hessian(HessianState.empty(x.shape[-1]), x)


def gptq_quantize_layer(
    w,
    state: HessianState,
    scheme: QuantScheme,
    reorder: bool = False,
    block_size: int = BLOCK_SIZE,
) -> QuantizedTensor:
    """Quantize ``w`` column by column with Hessian-based error feedback.

    Scales come from ``scheme`` (clipped abs-max on the original weight) and
    stay fixed. With ``reorder`` columns are visited by descending ``diag(H)``.
    """
    if not scheme.symmetric or scheme.granularity is not Granularity.PER_CHANNEL:
        raise ValueError("compensation supports symmetric per-channel schemes only")
    w0 = np.asarray(as_array(w), dtype=np.float32)
    rows, cols = w0.shape
    if cols != state.in_features:
        raise ValueError(f"weight has {cols} inputs, Hessian covers {state.in_features}")

    scales = _symmetric_scales(
        w0.max(axis=1), w0.min(axis=1), scheme.bits, scheme.gamma_for(rows), scheme.beta_for(rows)
    )
    scale64 = scales.astype(np.float64)[:, None]

    order = np.argsort(-np.diag(state.h), kind="stable") if reorder else np.arange(cols)
    u = state.inverse_factor(order if reorder else None)
    work = w0.astype(np.float64)[:, order]
    dead = (np.diag(state.h) == 0)[order]
    work[:, dead] = 0.0

    codes = np.zeros((rows, cols), dtype=np.int8)
    for b0 in range(0, cols, block_size):
        b1 = min(b0 + block_size, cols)
        blk = work[:, b0:b1].copy()
        err = np.zeros_like(blk)
        ublk = u[b0:b1, b0:b1]
        for i in range(b1 - b0):
            col = blk[:, i]
            q = quantize_codes(col.astype(np.float32), scales, scheme.bits)
            codes[:, b0 + i] = q
            e = (col - q * scale64[:, 0]) / ublk[i, i]
            blk[:, i:] -= np.outer(e, ublk[i, i:])
            err[:, i] = e
        work[:, b1:] -= err @ u[b0:b1, b1:]

    inv = np.argsort(order)
    codes = np.ascontiguousarray(codes[:, inv])
    payload = pack_int4(codes) if scheme.bits == 4 else codes
    return QuantizedTensor(payload, scales, scheme, (rows, cols))


def layerwise_error(w, w_q: QuantizedTensor, x) -> float:
    """Squared Frobenius norm of ``(W - dequantize(W_q)) X^T``; ``x`` is (tokens, in)."""
    w = np.asarray(as_array(w), dtype=np.float64)
    x = np.asarray(as_array(x), dtype=np.float64)
    if w.shape != w_q.shape:
        raise ValueError(f"weight shape {w.shape} differs from quantized {w_q.shape}")
    if x.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ValueError(f"activations {x.shape} do not match {w.shape[1]} inputs")
    delta = w - dequantize(w_q).data.astype(np.float64)
    r = delta @ x.T
    return float(np.sum(r * r))

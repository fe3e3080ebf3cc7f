"""Per-channel search for weight clipping factors.

Each output channel gets the pair ``(gamma, beta)`` from a candidate grid that
minimises its fake-quantization MSE under the clipped symmetric scale. The
grid always holds 1.0, so no channel ends up worse than plain min-max RTN.
Ties go to the larger ``gamma + beta`` and then the larger ``gamma``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .quantizer import _symmetric_scales, quantize_codes
from .tensor import as_array


@dataclass(frozen=True)
class ClipGrid:
    """Candidates ``minimum, minimum + step, ..., 1.0`` for both factors."""

    minimum: float = 0.5
    step: float = 0.01

    def __post_init__(self):
        if not 0 < self.minimum <= 1:
            raise ValueError("grid minimum must lie in (0, 1]")
        if self.step <= 0:
            raise ValueError("grid step must be positive")

    def values(self) -> np.ndarray:
        n = int(np.floor((1.0 - self.minimum) / self.step + 1e-9))
        vals = np.round(1.0 - self.step * np.arange(n + 1), 10)
        vals = vals[vals >= self.minimum - 1e-12]
        return np.sort(vals).astype(np.float32)


@dataclass(frozen=True, eq=False)
class ClipResult:
    gamma: np.ndarray
    beta: np.ndarray
    mse_before: np.ndarray
    mse_after: np.ndarray


def channel_quant_mse(w_c, bits: int, gamma: float = 1.0, beta: float = 1.0) -> float:
    """Mean squared error between a channel and its fake-quantized copy."""
    w = np.asarray(as_array(w_c), dtype=np.float32).reshape(-1)
    if w.size == 0:
        raise ValueError("channel must be non-empty")
    s = _symmetric_scales(w.max(), w.min(), bits, gamma, beta)
    return float(_mse(w[None, :], s.reshape(1, 1), bits)[0])


def _mse(w: np.ndarray, scales: np.ndarray, bits: int) -> np.ndarray:
    """Row-wise MSE of ``w`` (broadcast against ``scales`` of shape (c, 1))."""
    recon = quantize_codes(w, scales, bits).astype(np.float32) * scales
    err = (w.astype(np.float64) - recon.astype(np.float64)) ** 2
    return err.mean(axis=-1)


def _search_channel(w: np.ndarray, bits: int, cands: np.ndarray):
    n = cands.size
    gam = np.repeat(cands, n)  # (n*n,) gamma-major
    bet = np.tile(cands, n)
    scales = _symmetric_scales(w.max(), w.min(), bits, gam, bet)
    uniq, inverse = np.unique(scales, return_inverse=True)
    mse_u = _mse(w[None, :], uniq[:, None], bits)
    mse = mse_u[inverse]
    best = mse.min()
    tied = np.flatnonzero(mse == best)
    key = np.lexsort((gam[tied], gam[tied] + bet[tied]))
    pick = tied[key[-1]]
    return gam[pick], bet[pick], best


def optimize_clipping(w, bits: int = 4, grid: Optional[ClipGrid] = None) -> ClipResult:
    """Grid-search ``(gamma, beta)`` for every row of ``w``."""
    if bits not in (4, 8):
        raise ValueError(f"bits must be 4 or 8, got {bits}")
    w = np.asarray(as_array(w), dtype=np.float32)
    if w.ndim == 1:
        w = w[None, :]
    if w.size == 0:
        raise ValueError("weight must be non-empty")
    cands = (grid or ClipGrid()).values()
    if not np.any(cands == 1.0):
        raise ValueError("clip grid must contain 1.0")
    rows = w.shape[0]
    gamma = np.empty(rows, dtype=np.float32)
    beta = np.empty(rows, dtype=np.float32)
    before = np.empty(rows)
    after = np.empty(rows)
    for r in range(rows):
        before[r] = channel_quant_mse(w[r], bits)
        gamma[r], beta[r], after[r] = _search_channel(w[r], bits, cands)
    return ClipResult(gamma, beta, before, after)


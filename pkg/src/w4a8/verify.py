"""Exactness checks for the nibble conversions and the GEMM engines."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import gemm
from .bench import relative_error
from .quantizer import quantize_activations_per_token, quantize_weights
from .tensor import Granularity, PackedInt4Buffer, QuantScheme, pack_int4, unpack_int4


@dataclass
class VerifyReport:
    counts: dict = field(default_factory=dict)
    failures: List[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures

    def _tally(self, name: str, n: int) -> None:
        self.counts[name] = self.counts.get(name, 0) + n


def scalar_sweep(report: VerifyReport) -> None:
    """Every (INT4 weight, INT8 activation) pair through the high-nibble path."""
    w = np.repeat(np.arange(-8, 8, dtype=np.int8), 256)
    a = np.tile(np.arange(-128, 128, dtype=np.int16), 16).astype(np.int8)
    w16 = gemm.unpack_sint4_high_nibble(gemm.pack_sint4_high_nibble(w)).astype(np.int32)
    got = np.right_shift(w16 * a.astype(np.int32), 4)
    want = w.astype(np.int32) * a.astype(np.int32)
    for idx in np.flatnonzero(got != want)[:10]:
        report.failures.append(f"scalar: w={w[idx]} a={a[idx]} gave {got[idx]}, expected {want[idx]}")
    report._tally("scalar_pairs", w.size)


def pack_roundtrips(report: VerifyReport, rng: np.random.Generator, vectors: int = 20) -> None:
    samples = [np.arange(-8, 8)] + [rng.integers(-8, 8, size=rng.integers(1, 200)) for _ in range(vectors)]
    for v in samples:
        s = unpack_int4(gemm.pack_sint4_high_nibble(v))
        hi = gemm.unpack_sint4_high_nibble(gemm.pack_sint4_high_nibble(v)).astype(np.int32) >> 4
        u = gemm.unpack_uint4_offset(gemm.pack_uint4_offset(v))
        for name, got in (("sint4", s), ("sint4_high", hi), ("uint4_offset", u)):
            if not np.array_equal(got, v):
                report.failures.append(f"pack round-trip {name} failed on length-{v.size} vector")
    report._tally("pack_roundtrips", 3 * len(samples))


def _flip_first_nibble(buf: PackedInt4Buffer) -> PackedInt4Buffer:
    data = buf.data.copy()
    data[0] ^= 0x01
    return PackedInt4Buffer(data, buf.element_count, buf.encoding)


def matrix_cases(report: VerifyReport, rng: np.random.Generator, cases: int = 100, max_dim: int = 64,
                 inject_fault: bool = False) -> None:
    """High-nibble accumulators against an int64 sign-extension oracle."""
    for c in range(cases):
        m, n, k = (int(v) for v in rng.integers(1, max_dim + 1, size=3))
        a = rng.integers(-128, 128, size=(m, k)).astype(np.int8)
        w = rng.integers(-8, 8, size=(n, k)).astype(np.int8)
        buf = pack_int4(w)
        if inject_fault and c == 0:
            buf = _flip_first_nibble(buf)
        got = gemm.fast_accumulators(a, buf, n)
        want = a.astype(np.int64) @ w.astype(np.int64).T
        bad = np.argwhere(got != want)
        if bad.size:
            i, j = (int(v) for v in bad[0])
            used = unpack_int4(buf).reshape(n, k)
            ks = np.flatnonzero(used[j] != w[j])
            kk = int(ks[0]) if ks.size else -1
            report.failures.append(
                f"matrix case {c} ({m}x{n}x{k}): {len(bad)} mismatches, first at (i={i}, j={j}, k={kk}): "
                f"{got[i, j]} != {want[i, j]}"
            )
    report._tally("matrix_cases", cases)


def engine_agreement(report: VerifyReport, rng: np.random.Generator, cases: int = 50, max_dim: int = 64,
                     rtol: float = 1e-5) -> None:
    """fast, asymmetric, fine-grained (g = K) and W8A8 on the same codes."""
    for c in range(cases):
        m, n, k = (int(v) for v in rng.integers(1, max_dim + 1, size=3))
        a = rng.standard_normal((m, k)).astype(np.float32)
        w = (0.05 * rng.standard_normal((n, k))).astype(np.float32)
        a_q = quantize_activations_per_token(a)
        w_pc = quantize_weights(w, QuantScheme(4))
        w_pg = quantize_weights(w, QuantScheme(4, granularity=Granularity.PER_GROUP, group_size=k))
        fast = gemm.gemm_w4a8_fast(a_q, w_pc).data
        others = {
            "asymmetric": gemm.gemm_w4a8_asymmetric(a_q, *gemm.offset_weights(w_pc)).data,
            "finegrained": gemm.gemm_w4a8_finegrained(a_q, w_pg).data,
            "w8a8": gemm.gemm_w8a8(a_q, gemm.widen_to_int8(w_pc)).data,
        }
        for name, out in others.items():
            err = relative_error(out, fast.astype(np.float64))
            if not err <= rtol:
                report.failures.append(f"agreement case {c} ({m}x{n}x{k}): {name} vs fast rel err {err:.3g}")
    report._tally("agreement_cases", cases)


def run_all(seed: int = 0, cases: int = 100, agreement_cases: int = 50, max_dim: int = 64,
            inject_fault: bool = False, rng: Optional[np.random.Generator] = None) -> VerifyReport:
    rng = rng or np.random.default_rng(seed)
    report = VerifyReport()
    scalar_sweep(report)
    pack_roundtrips(report, rng)
    matrix_cases(report, rng, cases, max_dim, inject_fault)
    engine_agreement(report, rng, agreement_cases, max_dim)
    return report

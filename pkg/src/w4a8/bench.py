"""Shape sweeps over the GEMM engines: counters, wall time, speedups."""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import gemm
from .quantizer import dequantize, quantize_activations_per_token, quantize_weights
from .tensor import Granularity, QuantScheme

log = logging.getLogger(__name__)

ENGINES = ("w4a16", "finegrained", "asymmetric", "fast", "w8a8")
DEFAULT_BASELINE = "finegrained"
AGREEMENT_RTOL = 1e-5
WARMUP = 2

# (N, K) per layer GEMM, each run at M=1024 (context decode) and M=1 (self-decode)
DEFAULT_NK = ((4096, 4096), (1024, 8192), (11088, 4096), (5120, 5120))
DEFAULT_M = (1024, 1)

CSV_COLUMNS = (
    "case_id", "engine", "m", "n", "k", "g", "median_ns", "int8_mac_ops", "dequant_events",
    "zero_point_sub_ops", "final_scale_ops", "speedup_vs_baseline", "checksum",
)


class VerificationError(RuntimeError):
    """Engine output disagrees with its float64 reference."""


@dataclass(frozen=True)
class BenchCase:
    m: int
    n: int
    k: int
    group_size: int = 128
    engines: Tuple[str, ...] = ENGINES
    repeats: int = 5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "engines", tuple(self.engines))
        if min(self.m, self.n, self.k) <= 0:
            raise ValueError(f"shape must be positive, got {self.m}x{self.n}x{self.k}")
        if self.repeats < 3:
            raise ValueError("repeats must be >= 3")
        unknown = set(self.engines) - set(ENGINES)
        if unknown:
            raise ValueError(f"unknown engines: {', '.join(sorted(unknown))}")
        grouped = {"w4a16", "finegrained"} & set(self.engines)
        if grouped and (self.group_size <= 0 or self.k % self.group_size):
            raise ValueError(f"group size {self.group_size} does not divide K={self.k}")

    @property
    def case_id(self) -> str:
        return f"m{self.m}_n{self.n}_k{self.k}"


@dataclass
class EngineResult:
    engine: str
    median_ns: int
    counters: gemm.GemmCounters
    checksum: str
    speedup: float = float("nan")


@dataclass
class BenchReport:
    case: BenchCase
    baseline: str
    results: List[EngineResult] = field(default_factory=list)

    def result(self, engine: str) -> EngineResult:
        for r in self.results:
            if r.engine == engine:
                return r
        raise KeyError(engine)


def default_cases(scale: int = 8, group_size: int = 128, engines: Sequence[str] = ENGINES,
                 repeats: int = 5, seed: int = 0) -> List[BenchCase]:
    """The eight benchmark shapes, every dimension divided by ``scale`` (M=1 kept)."""
    cases = []
    for m in DEFAULT_M:
        for n, k in DEFAULT_NK:
            cases.append(BenchCase(max(1, m // scale), max(1, n // scale), max(1, k // scale),
                                   group_size, tuple(engines), repeats, seed))
    return cases


def checksum(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()[:16]


def _inputs(case: BenchCase):
    rng = np.random.default_rng(case.seed)
    a = rng.standard_normal((case.m, case.k)).astype(np.float32)
    w = (0.02 * rng.standard_normal((case.n, case.k))).astype(np.float32)
    a_q = quantize_activations_per_token(a)
    w_pc = quantize_weights(w, QuantScheme(4))
    needs_group = {"w4a16", "finegrained"} & set(case.engines)
    w_pg = None
    if needs_group:
        w_pg = quantize_weights(w, QuantScheme(4, granularity=Granularity.PER_GROUP, group_size=case.group_size))
    return a, a_q, w_pc, w_pg


def _engine_calls(case: BenchCase, threads: Optional[int]) -> Dict[str, Tuple[Callable, np.ndarray]]:
    """Engine closures paired with float64 references on the same codes."""
    a, a_q, w_pc, w_pg = _inputs(case)
    a_dq = dequantize(a_q).data.astype(np.float64)
    calls = {}
    for name in case.engines:
        if name == "w4a16":
            ref = a.astype(np.float64) @ dequantize(w_pg).data.astype(np.float64).T
            fn = lambda c, w=w_pg: gemm.gemm_w4a16_grouped(a, w, c, threads)
        elif name == "finegrained":
            ref = a_dq @ dequantize(w_pg).data.astype(np.float64).T
            fn = lambda c, w=w_pg: gemm.gemm_w4a8_finegrained(a_q, w, c, threads)
        elif name == "asymmetric":
            ref = a_dq @ dequantize(w_pc).data.astype(np.float64).T
            buf, s, z = gemm.offset_weights(w_pc)
            fn = lambda c, buf=buf, s=s, z=z: gemm.gemm_w4a8_asymmetric(a_q, buf, s, z, c, threads)
        elif name == "fast":
            ref = a_dq @ dequantize(w_pc).data.astype(np.float64).T
            fn = lambda c: gemm.gemm_w4a8_fast(a_q, w_pc, c, threads)
        else:
            w8 = gemm.widen_to_int8(w_pc)
            ref = a_dq @ dequantize(w8).data.astype(np.float64).T
            fn = lambda c, w8=w8: gemm.gemm_w8a8(a_q, w8, c, threads)
        calls[name] = (fn, ref)
    return calls


def relative_error(out: np.ndarray, ref: np.ndarray) -> float:
    denom = max(float(np.abs(ref).max(initial=0.0)), np.finfo(np.float32).tiny)
    return float(np.abs(out.astype(np.float64) - ref).max(initial=0.0)) / denom


def run_bench(case: BenchCase, baseline: str = DEFAULT_BASELINE, threads: Optional[int] = None,
              timer: Callable[[], int] = time.perf_counter_ns) -> BenchReport:
    """Verify then time every engine of ``case``; only the GEMM call is timed."""
    if baseline not in case.engines:
        raise ValueError(f"baseline {baseline!r} is not among the engines {case.engines}")
    report = BenchReport(case, baseline)
    for name, (fn, ref) in _engine_calls(case, threads).items():
        counters = gemm.GemmCounters()
        out = fn(counters).data
        err = relative_error(out, ref)
        if not err <= AGREEMENT_RTOL:
            raise VerificationError(
                f"{case.case_id}: engine {name} deviates from reference by {err:.3g} (> {AGREEMENT_RTOL})"
            )
        digest = checksum(out)
        for _ in range(WARMUP):
            fn(None)
        times = []
        for _ in range(case.repeats):
            t0 = timer()
            res = fn(None)
            times.append(timer() - t0)
            if checksum(res.data) != digest:
                raise VerificationError(f"{case.case_id}: engine {name} is not reproducible across repeats")
        report.results.append(EngineResult(name, int(statistics.median(times)), counters, digest))
    base = report.result(baseline).median_ns
    for r in report.results:
        r.speedup = base / r.median_ns if r.median_ns > 0 else float("inf")
    return report


def run_sweep(cases: Iterable[BenchCase], baseline: str = DEFAULT_BASELINE, threads: Optional[int] = None,
              parallel_cases: bool = False) -> List[BenchReport]:
    cases = list(cases)
    if parallel_cases and len(cases) > 1:
        with ThreadPoolExecutor(max_workers=len(cases)) as pool:
            return list(pool.map(lambda c: run_bench(c, baseline, threads), cases))
    return [run_bench(c, baseline, threads) for c in cases]


def wall_time_warnings(reports: Iterable[BenchReport]) -> List[str]:
    """Soft check: the fast engine should not be slower than fine-grained or asymmetric."""
    msgs = []
    for rep in reports:
        engines = {r.engine: r for r in rep.results}
        if "fast" not in engines:
            continue
        for other in ("finegrained", "asymmetric"):
            if other in engines and engines["fast"].median_ns > engines[other].median_ns:
                msgs.append(
                    f"{rep.case.case_id}: fast ({engines['fast'].median_ns} ns) slower than "
                    f"{other} ({engines[other].median_ns} ns)"
                )
    for m in msgs:
        log.warning(m)
    return msgs


def _rows(reports: Iterable[BenchReport], timing: bool = True):
    for rep in reports:
        c = rep.case
        for r in rep.results:
            g = c.group_size if r.engine in ("w4a16", "finegrained") else c.k
            cnt = r.counters
            yield [
                c.case_id, r.engine, c.m, c.n, c.k, g,
                r.median_ns if timing else "",
                cnt.int8_mac_ops, cnt.dequant_events, cnt.zero_point_sub_ops, cnt.final_scale_ops,
                f"{r.speedup:.4f}" if timing else "",
                r.checksum,
            ]


def emit_report(reports, fmt: str = "csv", timing: bool = True) -> str:
    """Render reports as CSV or an aligned text table.

    ``timing=False`` blanks the wall-clock columns so output is reproducible.
    """
    if isinstance(reports, BenchReport):
        reports = [reports]
    rows = list(_rows(reports, timing))
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        writer.writerows(rows)
        return buf.getvalue()
    if fmt != "table":
        raise ValueError(f"unknown format {fmt!r}")
    cells = [list(CSV_COLUMNS)] + [[str(v) for v in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(CSV_COLUMNS))]
    lines = ["  ".join(v.rjust(w) for v, w in zip(r, widths)) for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"

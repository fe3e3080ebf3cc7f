import csv
import io

import numpy as np
import pytest

from w4a8 import bench, gemm
from w4a8.bench import BenchCase, VerificationError, default_cases, emit_report, run_bench, run_sweep

SMALL = dict(m=4, n=16, k=64, group_size=16, repeats=3)


def parse(text):
    return list(csv.DictReader(io.StringIO(text)))


class TestCases:
    def test_default_shapes_unscaled(self):
        cases = default_cases(scale=1)
        got = {(c.m, c.n, c.k) for c in cases}
        want = {(m, n, k) for m in (1024, 1) for n, k in
                [(4096, 4096), (1024, 8192), (11088, 4096), (5120, 5120)]}
        assert got == want and len(cases) == 8

    def test_scaled_keeps_decode_row(self):
        cases = default_cases(scale=8)
        assert sorted({c.m for c in cases}) == [1, 128]
        assert all(c.k % c.group_size == 0 for c in cases)

    @pytest.mark.parametrize("kwargs", [dict(repeats=2), dict(k=60), dict(engines=("nope",)), dict(m=0)])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            BenchCase(**{**SMALL, **kwargs})

    def test_baseline_must_be_run(self):
        with pytest.raises(ValueError):
            run_bench(BenchCase(**SMALL, engines=("fast",)), baseline="finegrained")


class TestRun:
    def test_counters_and_ratio(self):
        case = BenchCase(1, 32, 128, group_size=32, repeats=3)
        rep = run_bench(case)
        fine, fast = rep.result("finegrained").counters, rep.result("fast").counters
        assert fine.dequant_events / fast.dequant_events == case.k / case.group_size
        assert rep.result("w4a16").counters.dequant_events == 32 * 128
        assert rep.result("asymmetric").counters.zero_point_sub_ops == 32 * 128
        assert fast.zero_point_sub_ops == 0

    def test_verification_guard(self, monkeypatch):
        real = gemm.gemm_w4a8_fast

        def broken(a_q, w_q, counters=None, threads=None):
            out = real(a_q, w_q, counters, threads)
            return type(out)(out.data * np.float32(1.001))

        monkeypatch.setattr(gemm, "gemm_w4a8_fast", broken)
        with pytest.raises(VerificationError, match="fast"):
            run_bench(BenchCase(**SMALL))

    def test_speedup_definition(self, monkeypatch):
        clock = [0]
        for name, cost in (("gemm_w4a8_fast", 10), ("gemm_w4a8_finegrained", 30)):
            real = getattr(gemm, name)

            def slow(*args, _real=real, _cost=cost, **kw):
                clock[0] += _cost
                return _real(*args, **kw)

            monkeypatch.setattr(gemm, name, slow)
        rep = run_bench(BenchCase(**SMALL, engines=("fast", "finegrained")), timer=lambda: clock[0])
        assert len(rep.results) == 2
        assert rep.result("fast").median_ns == 10
        assert rep.result("finegrained").median_ns == 30
        assert rep.result("fast").speedup == 3.0
        assert rep.result("finegrained").speedup == 1.0

    def test_deterministic_non_timing_fields(self):
        case = BenchCase(**SMALL)
        a = emit_report(run_bench(case), timing=False)
        b = emit_report(run_bench(case), timing=False)
        assert a == b

    def test_seed_changes_checksum(self):
        a = run_bench(BenchCase(**SMALL, seed=0)).result("fast").checksum
        b = run_bench(BenchCase(**SMALL, seed=1)).result("fast").checksum
        assert a != b

    def test_parallel_cases_identical(self):
        cases = [BenchCase(**SMALL, seed=s) for s in range(3)]
        serial = emit_report(run_sweep(cases), timing=False)
        par = emit_report(run_sweep(cases, parallel_cases=True), timing=False)
        assert serial == par

    def test_threads_identical(self):
        case = BenchCase(**SMALL)
        assert emit_report(run_bench(case, threads=1), timing=False) == \
            emit_report(run_bench(case, threads=4), timing=False)


class TestReport:
    def test_empty_sweep_header_only(self):
        text = emit_report(run_sweep([]))
        assert text == ",".join(bench.CSV_COLUMNS) + "\n"

    def test_schema(self):
        rows = parse(emit_report(run_bench(BenchCase(**SMALL))))
        assert len(rows) == 5
        assert list(rows[0].keys()) == list(bench.CSV_COLUMNS)
        by = {r["engine"]: r for r in rows}
        assert by["finegrained"]["g"] == "16" and by["fast"]["g"] == "64"
        assert float(by["finegrained"]["speedup_vs_baseline"]) == 1.0
        assert all(int(r["median_ns"]) > 0 for r in rows)

    def test_table_format(self):
        text = emit_report(run_bench(BenchCase(**SMALL, engines=("fast", "finegrained"))), fmt="table")
        lines = text.splitlines()
        assert lines[0].split() == list(bench.CSV_COLUMNS)
        assert set(lines[1].replace(" ", "")) == {"-"}
        assert len(lines) == 4

    def test_unknown_format(self):
        with pytest.raises(ValueError):
            emit_report([], fmt="json")

    def test_wall_time_warning(self):
        case = BenchCase(**SMALL, engines=("fast", "finegrained"))
        rep = bench.BenchReport(case, "finegrained", [
            bench.EngineResult("fast", 50, gemm.GemmCounters(), "x"),
            bench.EngineResult("finegrained", 10, gemm.GemmCounters(), "y"),
        ])
        msgs = bench.wall_time_warnings([rep])
        assert len(msgs) == 1 and "slower" in msgs[0]

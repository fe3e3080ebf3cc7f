import csv
import subprocess
import sys

import numpy as np
import pytest

from w4a8.cli import main
from w4a8.otf import write_tensor
from w4a8.synthetic import make_checkpoint
from w4a8.tensor import DenseTensor


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def tree_bytes(root):
    return sorted((str(p.relative_to(root)), p.read_bytes()) for p in root.rglob("*") if p.is_file())


@pytest.fixture
def ckpt(tmp_path):
    make_checkpoint(tmp_path / "ck", n_layers=3, rows=16, cols=32, calib_rows=64, seed=3)
    return tmp_path / "ck"


class TestQuantize:
    def test_lwc_never_worse_than_rtn(self, ckpt, tmp_path):
        for recipe in ("rtn", "lwc"):
            assert main(["quantize", str(ckpt / "weights"), "--out", str(tmp_path / recipe), "--recipe", recipe]) == 0
        rtn = read_csv(tmp_path / "rtn" / "report.csv")
        lwc = read_csv(tmp_path / "lwc" / "report.csv")
        assert [r["layer"] for r in rtn] == ["layer0", "layer1", "layer2"]
        for a, b in zip(rtn, lwc):
            assert float(b["mse_after"]) <= float(a["mse_after"])
            assert float(a["mse_before"]) == float(a["mse_after"]) == float(b["mse_before"])

    def test_gptq_needs_calib(self, ckpt, tmp_path, capsys):
        assert main(["quantize", str(ckpt / "weights"), "--out", str(tmp_path / "o"), "--recipe", "lwc+gptq"]) == 2
        assert "--calib" in capsys.readouterr().err

    def test_gptq_writes_layers(self, ckpt, tmp_path):
        out = tmp_path / "o"
        rc = main(["quantize", str(ckpt / "weights"), "--calib", str(ckpt / "calib"), "--out", str(out)])
        assert rc == 0
        assert (out / "layer0" / "payload.otf").exists()
        rows = read_csv(out / "report.csv")
        assert all(float(r["layerwise_error"]) > 0 for r in rows)

    def test_asymmetric_rejected_by_fast_engine(self, ckpt, tmp_path):
        argv = ["quantize", str(ckpt / "weights"), "--out", str(tmp_path / "o"), "--recipe", "rtn",
                "--asymmetric", "--engine", "fast"]
        assert main(argv) == 2

    def test_missing_input(self, tmp_path, capsys):
        assert main(["quantize", str(tmp_path / "nope"), "--out", str(tmp_path / "o"), "--recipe", "rtn"]) == 2
        assert "nope" in capsys.readouterr().err

    def test_corrupt_layer(self, ckpt, tmp_path, capsys):
        (ckpt / "weights" / "layer1.otf").write_bytes(b"XXXX" + bytes(20))
        assert main(["quantize", str(ckpt / "weights"), "--out", str(tmp_path / "o"), "--recipe", "rtn"]) == 2
        assert "layer1.otf" in capsys.readouterr().err

    def test_per_group(self, ckpt, tmp_path):
        argv = ["quantize", str(ckpt / "weights"), "--out", str(tmp_path / "o"), "--recipe", "rtn",
                "--granularity", "per-group", "--group-size", "8"]
        assert main(argv) == 0
        assert "group_size=8" in (tmp_path / "o" / "layer0" / "scheme.txt").read_text()

    def test_threads_and_reruns_identical(self, ckpt, tmp_path):
        base = ["quantize", str(ckpt / "weights"), "--calib", str(ckpt / "calib")]
        assert main(["--threads", "1"] + base + ["--out", str(tmp_path / "a")]) == 0
        assert main(["--threads", "4"] + base + ["--out", str(tmp_path / "b")]) == 0
        assert main(base + ["--out", str(tmp_path / "c")]) == 0
        a = tree_bytes(tmp_path / "a")
        assert a == tree_bytes(tmp_path / "b") == tree_bytes(tmp_path / "c")


def test_recipe_ordering_across_seeds(tmp_path):
    ok = total = 0
    for seed in range(5):
        ck = tmp_path / f"s{seed}"
        make_checkpoint(ck, n_layers=4, rows=32, cols=32, calib_rows=128, seed=seed)
        errs = {}
        for recipe in ("rtn", "lwc", "lwc+gptq"):
            out = tmp_path / f"s{seed}-{recipe}"
            assert main(["quantize", str(ck / "weights"), "--calib", str(ck / "calib"), "--out", str(out),
                         "--recipe", recipe]) == 0
            errs[recipe] = [float(r["layerwise_error"]) for r in read_csv(out / "report.csv")]
        for g, l, r in zip(errs["lwc+gptq"], errs["lwc"], errs["rtn"]):
            total += 1
            ok += g <= l <= r
    assert ok >= 0.95 * total


class TestVerify:
    def test_passes(self, capsys):
        assert main(["verify", "--cases", "20", "--agreement-cases", "10", "--max-dim", "16"]) == 0
        out = capsys.readouterr().out
        assert "4096 checks" in out
        assert "all checks passed" in out

    def test_injected_fault(self, capsys):
        assert main(["verify", "--cases", "5", "--agreement-cases", "2", "--max-dim", "8", "--inject-fault"]) == 1
        assert "FAIL" in capsys.readouterr().err


class TestGemmBench:
    def test_default_sweep_has_eight_cases(self, tmp_path):
        out = tmp_path / "r.csv"
        argv = ["gemm-bench", "--scale", "32", "--group-size", "32", "--repeats", "3", "--format", "csv", "--out", str(out)]
        assert main(argv) == 0
        rows = read_csv(out)
        assert len({r["case_id"] for r in rows}) == 8
        assert len(rows) == 40

    def test_engine_subset_and_baseline(self, tmp_path):
        out = tmp_path / "r.csv"
        argv = ["gemm-bench", "--scale", "32", "--group-size", "32", "--repeats", "3", "--engines", "fast,finegrained",
                "--baseline", "finegrained", "--format", "csv", "--out", str(out)]
        assert main(argv) == 0
        rows = read_csv(out)
        assert {r["engine"] for r in rows} == {"fast", "finegrained"}
        for r in rows:
            if r["engine"] == "finegrained":
                assert float(r["speedup_vs_baseline"]) == 1.0

    def test_shapes_file(self, tmp_path, capsys):
        shapes = tmp_path / "s.txt"
        shapes.write_text("# m,n,k\n2,8,32\n1 4 64\n")
        assert main(["gemm-bench", "--shapes", str(shapes), "--group-size", "16", "--repeats", "3",
                     "--format", "csv"]) == 0
        rows = list(csv.DictReader(capsys.readouterr().out.splitlines()))
        assert {r["case_id"] for r in rows} == {"m2_n8_k32", "m1_n4_k64"}

    @pytest.mark.parametrize("argv", [
        ["--engines", "fast,bogus"],
        ["--engines", "fast", "--baseline", "finegrained"],
        ["--group-size", "7"],
    ])
    def test_usage_errors(self, argv):
        assert main(["gemm-bench", "--scale", "64", "--repeats", "3"] + argv) == 2

    def test_threads_identical(self, tmp_path):
        base = ["gemm-bench", "--scale", "32", "--group-size", "32", "--repeats", "3", "--format", "csv", "--no-timing"]
        assert main(["--threads", "1"] + base + ["--out", str(tmp_path / "a.csv")]) == 0
        assert main(["--threads", "3"] + base + ["--out", str(tmp_path / "b.csv")]) == 0
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


class TestEvalMSE:
    def test_synthetic(self, capsys):
        assert main(["eval-mse", "--layers", "2", "--rows", "8", "--cols", "16", "--calib-rows", "32"]) == 0
        rows = list(csv.DictReader(capsys.readouterr().out.splitlines()))
        assert len(rows) == 6
        assert {r["recipe"] for r in rows} == {"rtn", "lwc", "lwc+gptq"}

    def test_input_without_calib(self, tmp_path, capsys):
        d = tmp_path / "w"
        d.mkdir()
        write_tensor(DenseTensor(np.random.default_rng(0).standard_normal((4, 8))), d / "fc.otf")
        (d / "manifest.txt").write_text("fc\n")
        assert main(["eval-mse", "--input", str(d)]) == 0
        rows = list(csv.DictReader(capsys.readouterr().out.splitlines()))
        assert [r["recipe"] for r in rows] == ["rtn", "lwc"]
        assert rows[0]["layerwise_error"] == ""


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "w4a8", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    assert "gemm-bench" in res.stdout

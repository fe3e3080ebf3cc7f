"""Command-line front end: ``quantize``, ``verify``, ``gemm-bench``, ``eval-mse``.

Exit codes: 0 success, 1 verification or numeric failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
import tempfile
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import bench, parallel
from .clipping import ClipGrid
from .otf import OTFError, read_tensor, write_tensor
from .recipe import RECIPES, check_recipe, quantize_layer
from .synthetic import make_checkpoint
from .tensor import DenseTensor, Granularity, QuantScheme
from .verify import run_all

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

# engine -> weight (bits, granularity) it consumes
ENGINE_WEIGHT_SCHEMES = {
    "fast": (4, Granularity.PER_CHANNEL),
    "asymmetric": (4, Granularity.PER_CHANNEL),
    "finegrained": (4, Granularity.PER_GROUP),
    "w4a16": (4, Granularity.PER_GROUP),
    "w8a8": (8, Granularity.PER_CHANNEL),
}


class UsageError(Exception):
    pass


def _scheme_from_args(args) -> QuantScheme:
    gran = Granularity.PER_GROUP if args.granularity == "per-group" else Granularity.PER_CHANNEL
    try:
        return QuantScheme(
            bits=args.bits,
            symmetric=not args.asymmetric,
            granularity=gran,
            group_size=args.group_size if gran is Granularity.PER_GROUP else None,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _check_engine(engine: Optional[str], scheme: QuantScheme) -> None:
    if engine is None:
        return
    bits, gran = ENGINE_WEIGHT_SCHEMES[engine]
    if engine == "fast" and not scheme.symmetric:
        raise UsageError("the fast engine needs symmetric weights: it has no zero-point subtraction path")
    if scheme.bits != bits or scheme.granularity is not gran:
        raise UsageError(
            f"engine {engine} consumes {bits}-bit {gran.value.replace('_', '-')} weights, "
            f"scheme is {scheme.bits}-bit {scheme.granularity.value.replace('_', '-')}"
        )


def _grid(args) -> ClipGrid:
    try:
        return ClipGrid(args.clip_grid_min, args.clip_grid_step)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _read_manifest(directory: Path) -> List[str]:
    manifest = directory / "manifest.txt"
    if manifest.exists():
        names = [ln.strip() for ln in manifest.read_text().splitlines() if ln.strip() and not ln.startswith("#")]
    else:
        names = sorted(p.stem for p in directory.glob("*.otf"))
    if not names:
        raise UsageError(f"{directory}: no layers found")
    return names


def _load_dense(path: Path) -> np.ndarray:
    if not path.exists():
        raise UsageError(f"missing tensor file {path}")
    t = read_tensor(path)
    if not isinstance(t, DenseTensor):
        raise UsageError(f"{path}: expected an f32 tensor")
    return t.data


def _load_layers(directory: Path, calib: Optional[Path]):
    if not directory.is_dir():
        raise UsageError(f"{directory} is not a directory")
    if calib is not None and not calib.is_dir():
        raise UsageError(f"calibration path {calib} is not a directory")
    for name in _read_manifest(directory):
        w = _load_dense(directory / f"{name}.otf")
        x = _load_dense(calib / f"{name}.otf") if calib is not None else None
        if x is not None and x.shape[1] != w.shape[1]:
            raise UsageError(f"{name}: calibration has {x.shape[1]} features, weight has {w.shape[1]} inputs")
        yield name, w, x


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def cmd_quantize(args) -> int:
    scheme = _scheme_from_args(args)
    try:
        check_recipe(args.recipe, scheme)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    _check_engine(args.engine, scheme)
    if args.recipe == "lwc+gptq" and args.calib is None:
        raise UsageError("recipe lwc+gptq needs --calib <dir>")
    grid = _grid(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    names = []
    for name, w, x in _load_layers(Path(args.input), Path(args.calib) if args.calib else None):
        res = quantize_layer(w, args.recipe, scheme, x, grid, reorder=args.reorder)
        write_tensor(res.quantized, out / name)
        names.append(name)
        rows.append([name, args.recipe, _fmt(res.weight_mse_rtn), _fmt(res.weight_mse), _fmt(res.layer_error)])
    (out / "manifest.txt").write_text("\n".join(names) + "\n")
    with open(out / "report.csv", "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["layer", "recipe", "mse_before", "mse_after", "layerwise_error"])
        writer.writerows(rows)
    print(f"quantized {len(names)} layers with recipe {args.recipe} into {out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    report = run_all(seed=args.seed, cases=args.cases, agreement_cases=args.agreement_cases,
                     max_dim=args.max_dim, inject_fault=args.inject_fault)
    for name, n in report.counts.items():
        print(f"{name}: {n} checks")
    for msg in report.failures:
        print(f"FAIL {msg}", file=sys.stderr)
    if report.ok:
        print("verify: all checks passed")
        return EXIT_OK
    print(f"verify: {len(report.failures)} failing checks", file=sys.stderr)
    return EXIT_FAIL


def _parse_shapes(path: Path) -> List[tuple]:
    try:
        text = path.read_text()
    except OSError as exc:
        raise UsageError(f"cannot read shapes file {path}: {exc.strerror}") from None
    shapes = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.replace(",", " ").split()
        try:
            m, n, k = (int(p) for p in parts)
        except ValueError:
            raise UsageError(f"{path}:{lineno}: expected 'M,N,K', got {raw!r}") from None
        shapes.append((m, n, k))
    return shapes


def cmd_gemm_bench(args) -> int:
    engines = tuple(e.strip() for e in args.engines.split(",") if e.strip())
    unknown = [e for e in engines if e not in bench.ENGINES]
    if unknown or not engines:
        raise UsageError(f"unknown engines {unknown}; choose from {', '.join(bench.ENGINES)}")
    baseline = args.baseline or (bench.DEFAULT_BASELINE if bench.DEFAULT_BASELINE in engines else engines[0])
    if baseline not in engines:
        raise UsageError(f"baseline {baseline} is not among --engines")
    if args.scale < 1:
        raise UsageError("--scale must be >= 1")
    try:
        if args.shapes:
            cases = [bench.BenchCase(m, n, k, args.group_size, engines, args.repeats, args.seed)
                     for m, n, k in _parse_shapes(Path(args.shapes))]
        else:
            cases = bench.default_cases(args.scale, args.group_size, engines, args.repeats, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    reports = bench.run_sweep(cases, baseline, parallel_cases=args.parallel_cases)
    text = bench.emit_report(reports, args.format, timing=not args.no_timing)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    status = EXIT_OK
    for rep in reports:
        names = {r.engine: r for r in rep.results}
        if "fast" in names and "finegrained" in names and rep.case.k > rep.case.group_size:
            if not names["fast"].counters.dequant_events < names["finegrained"].counters.dequant_events:
                print(f"FAIL {rep.case.case_id}: counter ordering fast < finegrained violated", file=sys.stderr)
                status = EXIT_FAIL
    for msg in bench.wall_time_warnings(reports):
        print(f"warning: {msg}", file=sys.stderr)
    return status


def cmd_eval_mse(args) -> int:
    grid = _grid(args)
    scheme = QuantScheme(bits=args.bits)
    with tempfile.TemporaryDirectory() as tmp:
        if args.input:
            wdir = Path(args.input)
            cdir = Path(args.calib) if args.calib else None
        else:
            make_checkpoint(tmp, args.layers, args.rows, args.cols, args.calib_rows, args.seed)
            wdir, cdir = Path(tmp) / "weights", Path(tmp) / "calib"
        recipes = [r for r in RECIPES if cdir is not None or r != "lwc+gptq"]
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["layer", "recipe", "weight_mse", "layerwise_error"])
        for name, w, x in _load_layers(wdir, cdir):
            for recipe in recipes:
                res = quantize_layer(w, recipe, scheme, x, grid)
                writer.writerow([name, recipe, _fmt(res.weight_mse), _fmt(res.layer_error)])
    text = buf.getvalue()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _add_clip_grid(p: argparse.ArgumentParser) -> None:
    p.add_argument("--clip-grid-min", type=float, default=0.5, help="smallest clipping factor (default 0.5)")
    p.add_argument("--clip-grid-step", type=float, default=0.01, help="clipping grid step (default 0.01)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="w4a8", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=int, default=None,
                        help=f"worker threads (default: hardware count; {parallel.ENV_THREADS} overrides)")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    q = sub.add_parser("quantize", help="quantize a directory of OTF weight tensors")
    q.add_argument("input", help="directory of <layer>.otf weights with manifest.txt")
    q.add_argument("--out", required=True, help="output directory")
    q.add_argument("--recipe", choices=RECIPES, default="lwc+gptq")
    q.add_argument("--calib", help="directory of <layer>.otf calibration activations (tokens x in)")
    q.add_argument("--bits", type=int, choices=(4, 8), default=4)
    q.add_argument("--granularity", choices=("per-channel", "per-group"), default="per-channel")
    q.add_argument("--group-size", type=int, default=128)
    q.add_argument("--asymmetric", action="store_true", help="asymmetric weights (RTN only)")
    q.add_argument("--engine", choices=tuple(ENGINE_WEIGHT_SCHEMES), help="check the scheme suits this GEMM engine")
    q.add_argument("--reorder", action="store_true", help="compensate columns by descending Hessian diagonal")
    _add_clip_grid(q)
    q.set_defaults(func=cmd_quantize)

    v = sub.add_parser("verify", help="exactness checks for the nibble paths and GEMM engines")
    v.add_argument("--cases", type=int, default=100)
    v.add_argument("--agreement-cases", type=int, default=50)
    v.add_argument("--max-dim", type=int, default=64)
    v.add_argument("--inject-fault", action="store_true", help="flip one weight nibble (negative control)")
    v.set_defaults(func=cmd_verify)

    b = sub.add_parser("gemm-bench", help="benchmark the GEMM engines over a shape sweep")
    b.add_argument("--shapes", help="file of 'M,N,K' lines (default: built-in sweep)")
    b.add_argument("--engines", default=",".join(bench.ENGINES))
    b.add_argument("--baseline", help=f"engine speedups are relative to (default {bench.DEFAULT_BASELINE})")
    b.add_argument("--group-size", type=int, default=128)
    b.add_argument("--scale", type=int, default=8, help="divide built-in shapes by this factor (default 8)")
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--format", choices=("table", "csv"), default="table")
    b.add_argument("--out", help="write the report here instead of stdout")
    b.add_argument("--parallel-cases", action="store_true")
    b.add_argument("--no-timing", action="store_true", help="blank wall-clock columns")
    b.set_defaults(func=cmd_gemm_bench)

    e = sub.add_parser("eval-mse", help="weight MSE and layerwise error per recipe")
    e.add_argument("--input", help="weight directory (default: synthetic checkpoint)")
    e.add_argument("--calib", help="calibration directory")
    e.add_argument("--layers", type=int, default=4)
    e.add_argument("--rows", type=int, default=64)
    e.add_argument("--cols", type=int, default=64)
    e.add_argument("--calib-rows", type=int, default=256)
    e.add_argument("--bits", type=int, choices=(4, 8), default=4)
    e.add_argument("--out")
    _add_clip_grid(e)
    e.set_defaults(func=cmd_eval_mse)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(message)s")
    try:
        parallel.set_threads(args.threads)
        parallel.get_threads()
    except ValueError as exc:
        print(f"w4a8: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"w4a8 {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OTFError as exc:
        print(f"w4a8 {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except bench.VerificationError as exc:
        print(f"w4a8 {args.command}: verification failed: {exc}", file=sys.stderr)
        return EXIT_FAIL
    finally:
        parallel.set_threads(None)


if __name__ == "__main__":
    sys.exit(main())

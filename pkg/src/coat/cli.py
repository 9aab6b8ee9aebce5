"""Command-line entry point: ``coat {verify,params,forward,bench}``.

Exit codes: 0 ok, 1 check failure, 2 usage error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np
from threadpoolctl import threadpool_limits

from coat import bench as BN
from coat import model as M
from coat import tensor as T
from coat import verify as V
from coat.errors import CoatError

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _model_name(text: str) -> str:
    if text not in M.MODELS:
        raise argparse.ArgumentTypeError(f"unknown model {text!r}; valid names: {', '.join(M.MODELS)}")
    return text


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = _Parser(prog="coat", description="Conv-attention and co-scale verification tool.", formatter_class=fmt)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    v = sub.add_parser("verify", help="run oracle/invariant/gradient suites", formatter_class=fmt)
    v.add_argument("--suite", choices=V.SUITES, default="all")
    v.add_argument("--precision", choices=("f32", "f64"), default="f64",
                   help="gradient checks run only at f64")

    pa = sub.add_parser("params", help="parameter and FLOP accounting vs the reference budgets",
                        formatter_class=fmt)
    pa.add_argument("model", type=_model_name)
    pa.add_argument("--size", type=int, default=224, help="input side for FLOP accounting")

    f = sub.add_parser("forward", help="run one forward pass and print a logits checksum", formatter_class=fmt)
    f.add_argument("model", type=_model_name)
    f.add_argument("--seed", type=int, default=0, help="seeds both weights and the input image")
    f.add_argument("--size", type=int, default=224, help="input side, divisible by 32")
    f.add_argument("--precision", choices=("f32", "f64"), default="f32")
    f.add_argument("--threads", type=int, default=1, help="BLAS threads")
    f.add_argument("--dump-params", metavar="PATH", help="write parameters (PATH.bin + PATH.manifest)")
    f.add_argument("--load-params", metavar="PATH", help="read parameters written by --dump-params")

    b = sub.add_parser("bench", help="complexity-scaling benchmark", formatter_class=fmt)
    b.add_argument("--op", choices=BN.OPS + ("all",), default="all")
    b.add_argument("--Ns", type=_int_list, default=BN.doubling_sizes(), help="comma-separated token counts")
    b.add_argument("--C", type=int, default=64)
    b.add_argument("--M", type=int, default=3, help="CRPE window size")
    b.add_argument("--repeats", type=int, default=9)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", required=True, help="CSV output path")
    return p


def cmd_verify(args) -> int:
    checks = V.run(args.suite, args.precision)
    failed = [c for c in checks if not c.passed and not c.skipped]
    for c in checks:
        print(c.line())
    skipped = sum(c.skipped for c in checks)
    print(f"SUMMARY passed={len(checks) - len(failed) - skipped} failed={len(failed)} skipped={skipped}")
    return EXIT_FAIL if failed else EXIT_OK


def cmd_params(args) -> int:
    spec = M.get_spec(args.model)
    model = M.CoaT(spec)
    for block, n in M.params_by_block(model).items():
        print(f"{block:<10} {n:>12,d}")
    total = M.count_params(model)
    dev = total / spec.target_params - 1
    print(f"{'total':<10} {total:>12,d}  target {spec.target_params / 1e6:g}M  deviation {dev:+.2%}")
    ok = abs(dev) <= 0.03
    gflops = M.count_flops(spec, args.size) / 1e9
    target = spec.target_gflops.get(args.size)
    line = f"{'GFLOPs':<10} {gflops:>12.3f}  @{args.size}px"
    if target is not None:
        fdev = gflops / target - 1
        line += f"  target {target:g}  deviation {fdev:+.2%}"
        ok &= abs(fdev) <= 0.15
    print(line)
    return EXIT_OK if ok else EXIT_FAIL


def cmd_forward(args) -> int:
    if args.size % 32:
        print(f"coat forward: error: --size {args.size} is not divisible by 32", file=sys.stderr)
        return EXIT_USAGE
    with threadpool_limits(limits=args.threads):
        model = M.build_model(args.model, seed=args.seed, dtype=args.precision)
        try:
            if args.load_params:
                M.load_params(model, args.load_params)
            if args.dump_params:
                M.dump_params(model, args.dump_params)
        except OSError as exc:
            print(f"coat forward: {exc}", file=sys.stderr)
            return EXIT_IO
        image = T.Tensor(T.rng(args.seed).uniform(-1.0, 1.0, (args.size, args.size, 3)), args.precision)
        logits = model(image)
    data = logits.data
    print(f"shape {list(data.shape)}")
    print(f"min {float(data.min()):.6g} max {float(data.max()):.6g}")
    print(f"checksum {M.logits_checksum(logits)}")
    return EXIT_OK if np.isfinite(data).all() else EXIT_FAIL


def cmd_bench(args) -> int:
    ops = BN.OPS if args.op == "all" else (args.op,)
    records = []
    for op in ops:
        recs = BN.measure_scaling(op, args.Ns, args.C, args.M, args.repeats, seed=args.seed,
                                  require_range=False)
        records.extend(recs)
        usable = [r for r in recs if not r.truncated]
        if len(usable) >= 4:
            print(f"{op}: time slope {BN.fit_loglog_slope(usable):.3f}  "
                  f"peak-bytes slope {BN.fit_loglog_slope(usable, 'peak_bytes'):.3f}")
        else:
            print(f"{op}: fewer than 4 usable sizes, no slope fitted")
        for r in recs:
            if r.truncated:
                print(f"{op}: N={r.N} truncated (does not fit in memory)")
    try:
        BN.write_csv(records, args.out)
    except OSError as exc:
        print(f"coat bench: cannot write {args.out}: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


COMMANDS = {"verify": cmd_verify, "params": cmd_params, "forward": cmd_forward, "bench": cmd_bench}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except CoatError as exc:
        print(f"coat {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

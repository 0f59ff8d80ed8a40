"""Command-line entry point.

Exit status is 0 on success, 1 when a result breaches its tolerance and 2
for usage errors (bad flags, unreadable files, unknown devices).
"""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import os
import re
import sys
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path

from .analysis import DEFAULT_SIZES, emit_report, render_report, sweep
from .conv import conv2d, conv2d_naive, supports
from .core import (
    ConvAlgo,
    ConvAlgoParams,
    ConvShape,
    GemmConfig,
    GemmShape,
    Matrix,
    Op,
    Padding,
    get_device,
    max_rel_error,
    seeded_rng,
    table2_configs,
)
from .errors import ParseError, TilekitError, TuningError
from .gemm import DEFAULT_CONFIG, gemm_naive, gemm_tiled, validate_config
from .tuner import (
    BenchOptions,
    ConvProblem,
    GemmProblem,
    ParamSpace,
    benchmark_config,
    default_db_path,
    load_db,
    parse_config,
    preferred_config,
    save_db,
    tune,
)

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

# --------------------------------------------------------------------------- layer tables

LAYER_COLUMNS = ("Layer", "Window", "Stride", "Input", "Output")
_DIMS = re.compile(r"^(\d+)x(\d+)x(\d+)$")
BUILTIN_TABLES = {"vgg": "vgg_layers.csv", "resnet": "resnet_layers.csv"}


@dataclass(frozen=True)
class LayerRow:
    name: str
    window: int
    stride: int
    input: tuple[int, int, int]
    output: tuple[int, int, int]

    @property
    def padding(self) -> Padding:
        (h, w, _), (oh, ow, _) = self.input, self.output
        same = oh == -(-h // self.stride) and ow == -(-w // self.stride)
        return Padding.SAME if same else Padding.VALID

    def to_shape(self, batch: int = 1) -> ConvShape:
        h, w, c = self.input
        return ConvShape(batch, h, w, c, self.output[2], self.window, self.window,
                         self.stride, self.padding)

    def to_csv_row(self) -> list[str]:
        return [self.name, str(self.window), str(self.stride),
                "x".join(map(str, self.input)), "x".join(map(str, self.output))]


def _parse_dims(text: str, line: int, column: str) -> tuple[int, int, int]:
    m = _DIMS.match(text.strip())
    if not m or min(int(g) for g in m.groups()) < 1:
        raise ParseError(f"expected positive HxWxC dims, got {text!r}", line, column)
    return tuple(int(g) for g in m.groups())


def _parse_positive(text: str, line: int, column: str) -> int:
    try:
        value = int(text.strip())
    except ValueError:
        raise ParseError(f"expected an integer, got {text!r}", line, column) from None
    if value < 1:
        raise ParseError(f"must be >= 1, got {value}", line, column)
    return value


def resolve_layer_file(name: str | os.PathLike) -> Path:
    """A path, or one of the builtin table names ``vgg`` / ``resnet``."""
    text = os.fspath(name)
    if text in BUILTIN_TABLES:
        return Path(str(resources.files("tilekit") / "data" / BUILTIN_TABLES[text]))
    return Path(text)


def read_layers(path: str | os.PathLike) -> list[LayerRow]:
    """Parse a layer table.  Lines starting with ``#`` are comments."""
    path = resolve_layer_file(path)
    with open(path, encoding="utf-8", newline="") as fh:
        numbered = [(i, line) for i, line in enumerate(fh, start=1)
                    if line.strip() and not line.lstrip().startswith("#")]
    if not numbered:
        raise ParseError(f"{path}: no header row")
    rows = list(csv.reader(line for _, line in numbered))
    header_line, header = numbered[0][0], [h.strip() for h in rows[0]]
    for col in LAYER_COLUMNS:
        if col not in header:
            raise ParseError(f"{path}: missing column", header_line, col)
    index = {col: header.index(col) for col in LAYER_COLUMNS}
    out = []
    for (line, _), cells in zip(numbered[1:], rows[1:]):
        values = {}
        for col in LAYER_COLUMNS:
            if index[col] >= len(cells) or not cells[index[col]].strip():
                raise ParseError("missing value", line, col)
            values[col] = cells[index[col]].strip()
        row = LayerRow(
            name=values["Layer"],
            window=_parse_positive(values["Window"], line, "Window"),
            stride=_parse_positive(values["Stride"], line, "Stride"),
            input=_parse_dims(values["Input"], line, "Input"),
            output=_parse_dims(values["Output"], line, "Output"),
        )
        try:
            shape = row.to_shape()
        except ValueError as exc:
            raise ParseError(str(exc), line, "Output") from None
        if (shape.out_rows, shape.out_cols) != row.output[:2]:
            raise ParseError(
                f"output {row.output[0]}x{row.output[1]} does not follow from input, "
                f"window and stride", line, "Output",
            )
        out.append(row)
    return out


def load_layers(path: str | os.PathLike, batch: int = 1) -> list[ConvShape]:
    return [row.to_shape(batch) for row in read_layers(path)]


def write_layers(rows: list[LayerRow], path: str | os.PathLike | None = None) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LAYER_COLUMNS)
    for row in rows:
        writer.writerow(row.to_csv_row())
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


# --------------------------------------------------------------------------- problems from flags


def _gemm_problem(args) -> GemmProblem:
    ops = args.ops.upper()
    if len(ops) != 2 or set(ops) - {"N", "T"}:
        raise ValueError(f"--ops must be two of N/T, got {args.ops!r}")
    return GemmProblem(GemmShape(args.m, args.n, args.k, args.alpha, args.beta, Op(ops[0]), Op(ops[1])))


def _conv_problem(args, gemm_config: GemmConfig | None = None) -> ConvProblem:
    shape = ConvShape(args.batch, args.height, args.width, args.channels, args.features,
                      args.window, args.window, args.stride, Padding(args.padding))
    return ConvProblem(shape, gemm_config)


def _problem(args):
    return _gemm_problem(args) if args.op == "gemm" else _conv_problem(args)


def _opts(args, **overrides) -> BenchOptions:
    values = dict(warmup=args.warmup, samples=args.samples, seed=args.seed)
    values.update(overrides)
    return BenchOptions(**values)


def _db_path(args) -> Path:
    return Path(args.db) if args.db else default_db_path()


def _db_records(args) -> list:
    path = _db_path(args)
    return load_db(path) if path.exists() else []


# --------------------------------------------------------------------------- commands


def _verify_gemm(args, dev, out) -> int:
    configs = [GemmConfig.parse(args.config)] if args.config else table2_configs()
    top = args.max_dim
    dims = sorted({d for d in (1, 7, 64, 65, top - 1, top) if 1 <= d <= top})
    failures = checked = 0
    for cfg in configs:
        verdict = validate_config(cfg, dev)
        if not verdict:
            print(f"skip {verdict}", file=out)
            continue
        worst = 0.0
        for (m, n, k), oa, ob, (alpha, beta) in itertools.product(
            [(d, d, d) for d in dims] + [(dims[-1], dims[0], dims[len(dims) // 2])],
            Op, Op, ((1.0, 0.0), (0.5, -1.0)),
        ):
            shape = GemmShape(m, n, k, alpha, beta, oa, ob)
            prob = GemmProblem(shape)
            a, b, c = prob.make_inputs(args.seed)
            err = max_rel_error(gemm_tiled(a, b, c, shape, cfg, dev), gemm_naive(a, b, c, shape))
            worst = max(worst, err)
            checked += 1
            if err > 1e-4:
                failures += 1
                print(f"FAIL {cfg.name} {prob.key} rel_err={err:.3g}", file=out)
        print(f"{cfg.name}: max rel err {worst:.3g}", file=out)
    # The naive kernel itself against a float64 product.
    shape = GemmShape(dims[-1], dims[-1], dims[-1], 1.0, 0.0)
    rng = seeded_rng("verify-naive", args.seed)
    a, b = Matrix.random(dims[-1], dims[-1], rng), Matrix.random(dims[-1], dims[-1], rng)
    ref = a.to_array().astype(float) @ b.to_array().astype(float)
    err = max_rel_error(gemm_naive(a, b, Matrix.zeros(dims[-1], dims[-1]), shape).to_array(), ref)
    if err > 1e-5:
        failures += 1
        print(f"FAIL naive vs float64 rel_err={err:.3g}", file=out)
    print(f"gemm: {checked} cases, {failures} failures", file=out)
    return EXIT_FAIL if failures else EXIT_OK


_VERIFY_CONV_PARAMS = (
    ConvAlgoParams.parse("tiled_1x1_v1x1"),
    ConvAlgoParams.parse("tiled_4x5_v4x2"),
    ConvAlgoParams.parse("tiled_2x3_v8x4"),
    ConvAlgoParams(ConvAlgo.IM2COL),
    ConvAlgoParams(ConvAlgo.WINOGRAD, 2, 2),
    ConvAlgoParams(ConvAlgo.WINOGRAD, 4, 4),
)


def _verify_conv(args, dev, out) -> int:
    params = [ConvAlgoParams.parse(args.config)] if args.config else list(_VERIFY_CONV_PARAMS)
    sizes = [s for s in (4, 7, 12) if s <= args.max_dim] or [args.max_dim]
    failures = checked = 0
    tol = {ConvAlgo.NAIVE: 0.0, ConvAlgo.TILED: 1e-4, ConvAlgo.IM2COL: 1e-5, ConvAlgo.WINOGRAD: 1e-3}
    features = {1: 3, 3: 8, 8: 1}
    for h, w, c, win, stride, pad in itertools.product(
        sizes, sizes, (1, 3, 8), (1, 3), (1, 2), tuple(Padding)
    ):
        if pad is Padding.VALID and win > min(h, w):
            continue
        batch = 2 if h == w else 1
        shape = ConvShape(batch, h, w, c, features[c], win, win, stride, pad)
        prob = ConvProblem(shape)
        x, f = prob.make_inputs(args.seed)
        ref = conv2d_naive(x, f, shape)
        for p in params:
            if not supports(p, shape):
                continue
            err = max_rel_error(conv2d(x, f, shape, p, device=dev), ref)
            checked += 1
            if err > tol[p.algo]:
                failures += 1
                print(f"FAIL {p.name} {prob.key} rel_err={err:.3g}", file=out)
    print(f"conv: {checked} cases, {failures} failures", file=out)
    return EXIT_FAIL if failures else EXIT_OK


def cmd_verify(args, out=sys.stdout) -> int:
    dev = get_device(args.device)
    return (_verify_gemm if args.op == "gemm" else _verify_conv)(args, dev, out)


def _space(args) -> ParamSpace:
    if args.space == "table2":
        return ParamSpace.table2()
    return ParamSpace()


def cmd_tune(args, out=sys.stdout) -> int:
    dev = get_device(args.device)
    problem = _problem(args)
    path = _db_path(args)

    def show(rec):
        flag = "" if rec.valid else "  INVALID"
        print(f"{rec.config:24s} median {rec.median_ns / 1e6:10.3f} ms  {rec.gflops:8.3f} GF/s{flag}",
              file=out)

    try:
        best, records = tune(problem, _space(args), dev, _opts(args), progress=show)
    except TuningError as exc:
        print(f"tuning failed: {exc}", file=sys.stderr)
        for name, why in sorted(exc.diagnostics.items()):
            print(f"  {name}: {why}", file=sys.stderr)
        return EXIT_FAIL
    save_db(records, path)
    print(f"best {best.name} for {problem.key} on {dev.name} ({len(records)} records -> {path})",
          file=out)
    return EXIT_OK


def cmd_bench(args, out=sys.stdout) -> int:
    dev = get_device(args.device)
    problem = _problem(args)
    if args.config:
        config = parse_config(args.config)
    elif args.op == "gemm":
        config = DEFAULT_CONFIG
    else:
        config = ConvAlgoParams.parse("tiled_4x4_v4x4")
    rec = benchmark_config(problem, config, _opts(args), dev)
    print(json.dumps(asdict(rec)), file=out)
    if args.db:
        save_db([rec], args.db)
    return EXIT_OK if rec.valid else EXIT_FAIL


def cmd_roofline(args, out=sys.stdout) -> int:
    dev = get_device(args.device)
    if args.config:
        configs = [GemmConfig.parse(c) for c in args.config.split(",")]
    else:
        configs = [DEFAULT_CONFIG]
    sizes = [int(s) for s in args.sizes.split(",")] if args.sizes else list(DEFAULT_SIZES)
    template = GemmProblem(GemmShape(1, 1, 1, args.alpha, args.beta))
    points = sweep(template, configs, sizes, _opts(args, verify=not args.no_verify), dev)
    if args.out:
        emit_report(points, args.out, args.format)
        print(f"{len(points)} points -> {args.out}", file=out)
    else:
        out.write(render_report(points, args.format or "csv"))
    return EXIT_OK if all(p.ok for p in points) else EXIT_FAIL


LAYER_REPORT_COLUMNS = ("layer", "algo", "config", "median_ns", "gflops", "status")


def _layer_params(algo: str, layer_problem: ConvProblem, records, dev_name: str) -> ConvAlgoParams:
    choice = preferred_config(records, layer_problem, dev_name)
    if isinstance(choice, ConvAlgoParams) and choice.algo.value == algo:
        return choice
    if algo == "tiled":
        return ConvAlgoParams.parse("tiled_4x4_v4x4")
    if algo == "winograd":
        return ConvAlgoParams(ConvAlgo.WINOGRAD, 2, 2)
    return ConvAlgoParams(ConvAlgo(algo))


def cmd_layers(args, out=sys.stdout) -> int:
    dev = get_device(args.device)
    rows = read_layers(args.file)
    algos = [a.strip().lower() for a in args.algos.split(",") if a.strip()]
    for algo in algos:
        ConvAlgo(algo)
    records = _db_records(args)
    opts = _opts(args)
    report = []
    failed = False
    for row in rows:
        shape = row.to_shape(args.batch)
        # im2col uses the tuned GEMM for its lowered matrix shape when the DB has one.
        gshape = GemmShape(shape.batch * shape.out_rows * shape.out_cols, shape.features,
                           shape.window_rows * shape.window_cols * shape.channels,
                           op_b=Op.TRANSPOSE)
        gcfg = preferred_config(records, GemmProblem(gshape), dev.name)
        for algo in algos:
            problem = ConvProblem(shape, gcfg if algo == "im2col" and isinstance(gcfg, GemmConfig) else None)
            params = _layer_params(algo, problem, records, dev.name)
            if not supports(params, shape):
                report.append((row.name, algo, params.name, "", "", "unsupported"))
                continue
            rec = benchmark_config(problem, params, opts, dev)
            failed |= not rec.valid
            report.append((row.name, algo, params.name, str(rec.median_ns), repr(rec.gflops),
                           "ok" if rec.valid else "mismatch"))
            print(f"{row.name:20s} {params.name:18s} {rec.gflops:8.3f} GF/s", file=sys.stderr)
    if args.format == "json":
        text = json.dumps([dict(zip(LAYER_REPORT_COLUMNS, r)) for r in report], indent=1) + "\n"
    else:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(LAYER_REPORT_COLUMNS)
        writer.writerows(report)
        text = buf.getvalue()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        out.write(text)
    return EXIT_FAIL if failed else EXIT_OK


# --------------------------------------------------------------------------- parser


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _add_common(p: argparse.ArgumentParser, warmup: int, samples: int) -> None:
    p.add_argument("--device", default="host-cpu", help="builtin device name or a .toml file")
    p.add_argument("--warmup", type=_positive, default=warmup)
    p.add_argument("--samples", type=int, default=samples)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--db", help="tuning DB path (default: $TILEKIT_DB or the user cache)")


def _add_problem(p: argparse.ArgumentParser) -> None:
    p.add_argument("--op", choices=("gemm", "conv"), default="gemm")
    p.add_argument("--m", type=_positive, default=512)
    p.add_argument("--n", type=_positive, default=512)
    p.add_argument("--k", type=_positive, default=512)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--beta", type=float, default=0.0)
    p.add_argument("--ops", default="NN", help="transpose flags for A and B, e.g. NT")
    p.add_argument("--batch", type=_positive, default=1)
    p.add_argument("--height", type=_positive, default=56)
    p.add_argument("--width", type=_positive, default=56)
    p.add_argument("--channels", type=_positive, default=64)
    p.add_argument("--features", type=_positive, default=64)
    p.add_argument("--window", type=_positive, default=3)
    p.add_argument("--stride", type=_positive, default=1)
    p.add_argument("--padding", choices=("same", "valid"), default="same")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tilekit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="check every kernel against the naive oracle")
    p.add_argument("--op", choices=("gemm", "conv"), default="gemm")
    p.add_argument("--max-dim", type=_positive, default=128)
    p.add_argument("--config", help="check only this configuration")
    _add_common(p, 1, 3)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("tune", help="benchmark every configuration that fits the device")
    _add_problem(p)
    p.add_argument("--space", choices=("full", "table2"), default="full",
                   help="table2: the seven published GEMM configs and four conv tiles")
    _add_common(p, 5, 20)
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("bench", help="time one configuration and print its record")
    _add_problem(p)
    p.add_argument("--config")
    _add_common(p, 5, 20)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("roofline", help="sweep GEMM sizes and emit an intensity report")
    p.add_argument("--config", help="comma-separated GEMM configurations")
    p.add_argument("--sizes", help="comma-separated sizes (default 64,128,256,512,1024)")
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--format", choices=("csv", "json"))
    p.add_argument("--out")
    p.add_argument("--no-verify", action="store_true", help="skip the per-point oracle check")
    _add_common(p, 1, 3)
    p.set_defaults(func=cmd_roofline)

    p = sub.add_parser("layers", help="benchmark network layers from a layer table")
    p.add_argument("--file", required=True, help="layer CSV, or 'vgg' / 'resnet'")
    p.add_argument("--batch", type=_positive, default=1)
    p.add_argument("--algos", default="naive,tiled,im2col,winograd")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--out")
    _add_common(p, 1, 3)
    p.set_defaults(func=cmd_layers)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return args.func(args, sys.stdout)
    except (OSError, KeyError, TilekitError, ValueError) as exc:
        print(f"tilekit {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

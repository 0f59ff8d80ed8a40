"""Operational intensity, roofline sweeps and report files."""

from __future__ import annotations

import csv
import itertools
import json
import math
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .conv import conv_flops
from .core import ELEM_BYTES, ConvShape, DeviceSpec, GemmShape
from .tuner import BenchOptions, Config, ConvProblem, GemmProblem, Problem, benchmark_config

DEFAULT_SIZES = (64, 128, 256, 512, 1024)
CSV_HEADER = ("problem", "config", "oi_flops_per_byte", "gflops")


def gemm_bytes(shape: GemmShape) -> int:
    """Compulsory traffic: A and B read once, C written once and read when beta != 0."""
    m, n, k = shape.m, shape.n, shape.k
    c_passes = 2 if shape.beta != 0 else 1
    return ELEM_BYTES * (m * k + k * n + m * n * c_passes)


def gemm_oi(shape: GemmShape) -> float:
    return shape.flops / gemm_bytes(shape)


def conv_bytes(shape: ConvShape) -> int:
    elems = math.prod(shape.input_dims) + math.prod(shape.filter_dims) + math.prod(shape.output_dims)
    return ELEM_BYTES * elems


def conv_oi(shape: ConvShape) -> float:
    return conv_flops(shape) / conv_bytes(shape)


def problem_oi(problem: Problem) -> float:
    if isinstance(problem, GemmProblem):
        return gemm_oi(problem.shape)
    return conv_oi(problem.shape)


@dataclass(frozen=True)
class RooflinePoint:
    """One measured kernel: flops per byte against achieved Gflop/s.

    ``ok`` is false when the measurement failed or did not verify; gflops
    is then NaN for failures.
    """

    problem: str
    config: str
    oi: float
    gflops: float
    ok: bool = True
    error: str = ""


def sweep_problems(template: Problem, sizes: Sequence[int] = DEFAULT_SIZES) -> list[Problem]:
    """Problems obtained by substituting every size combination into ``template``.

    GEMM templates take the cartesian cube over (m, n, k); convolution
    templates take square spatial sizes.
    """
    if not sizes:
        raise ValueError("sizes must be nonempty")
    if isinstance(template, GemmProblem):
        return [
            GemmProblem(replace(template.shape, m=m, n=n, k=k))
            for m, n, k in itertools.product(sizes, repeat=3)
        ]
    return [
        ConvProblem(replace(template.shape, in_rows=s, in_cols=s), template.gemm_config)
        for s in sizes
    ]


def sweep(
    template: Problem,
    configs: Iterable[Config],
    sizes: Sequence[int] = DEFAULT_SIZES,
    opts: BenchOptions | None = None,
    device: DeviceSpec | None = None,
    *,
    bench: Callable = benchmark_config,
) -> list[RooflinePoint]:
    """Benchmark each config at each size; failures are flagged, not raised."""
    configs = list(configs)
    points = []
    for problem in sweep_problems(template, sizes):
        oi = problem_oi(problem)
        for cfg in configs:
            try:
                rec = bench(problem, cfg, opts, device)
            except Exception as exc:  # keep sweeping; the point records why it failed
                points.append(RooflinePoint(problem.key, cfg.name, oi, math.nan, False,
                                            f"{type(exc).__name__}: {exc}"))
                continue
            points.append(RooflinePoint(problem.key, cfg.name, oi, rec.gflops, rec.valid,
                                        "" if rec.valid else "oracle mismatch"))
    return points


# --------------------------------------------------------------------------- reports


def _ordered(points: Iterable[RooflinePoint]) -> list[RooflinePoint]:
    return sorted(points, key=lambda p: (p.problem, p.config))


def _format_of(path: Path, fmt: str | None) -> str:
    fmt = (fmt or path.suffix.lstrip(".") or "csv").lower()
    if fmt not in ("csv", "json"):
        raise ValueError(f"unknown report format {fmt!r}; use csv or json")
    return fmt


def render_report(points: Iterable[RooflinePoint], fmt: str = "csv") -> str:
    rows = _ordered(points)
    if fmt == "json":
        data = [
            {
                "problem": p.problem,
                "config": p.config,
                "oi_flops_per_byte": p.oi,
                "gflops": None if math.isnan(p.gflops) else p.gflops,
            }
            for p in rows
        ]
        return json.dumps(data, indent=1) + "\n"
    lines = [",".join(CSV_HEADER)]
    lines += [f"{p.problem},{p.config},{p.oi!r},{p.gflops!r}" for p in rows]
    return "\n".join(lines) + "\n"


def emit_report(points: Iterable[RooflinePoint], path: str | os.PathLike,
                fmt: str | None = None) -> Path:
    """Write points sorted by problem then config; format from ``fmt`` or the suffix."""
    path = Path(path)
    text = render_report(points, _format_of(path, fmt))
    try:
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write report {path}: {exc.strerror}") from exc
    return path


def read_report(path: str | os.PathLike, fmt: str | None = None) -> list[RooflinePoint]:
    path = Path(path)
    fmt = _format_of(path, fmt)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(exc.errno, f"cannot read report {path}: {exc.strerror}") from exc
    if fmt == "json":
        rows = json.loads(text)
    else:
        reader = csv.DictReader(text.splitlines())
        if tuple(reader.fieldnames or ()) != CSV_HEADER:
            raise ValueError(f"{path}: expected header {','.join(CSV_HEADER)}")
        rows = list(reader)
    out = []
    for row in rows:
        gflops = row["gflops"]
        gflops = math.nan if gflops is None else float(gflops)
        out.append(RooflinePoint(row["problem"], row["config"], float(row["oi_flops_per_byte"]),
                                 gflops, not math.isnan(gflops)))
    return out


__all__ = [
    "DEFAULT_SIZES", "CSV_HEADER", "gemm_bytes", "gemm_oi", "conv_bytes", "conv_oi",
    "problem_oi", "RooflinePoint", "sweep_problems", "sweep", "render_report",
    "emit_report", "read_report",
]

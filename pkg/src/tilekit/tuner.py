"""Exhaustive kernel-parameter search: enumerate, filter, benchmark, select, persist."""

from __future__ import annotations

import itertools
import json
import os
import re
import statistics
import time
import warnings
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Union

from .conv import (
    conv2d,
    conv2d_naive,
    conv_flops,
    supports,
)
from .core import (
    ConvAlgo,
    ConvAlgoParams,
    ConvShape,
    DeviceSpec,
    GemmConfig,
    GemmShape,
    Layout,
    Matrix,
    Op,
    Padding,
    Tensor4,
    VECTOR_WIDTHS,
    host_cpu,
    max_rel_error,
    seeded_rng,
    table2_configs,
)
from .errors import ConfigError, ParseError, ResourceError, TuningError
from .gemm import gemm_naive, gemm_tiled, validate_config

Config = Union[GemmConfig, ConvAlgoParams]

PROXY_GEMM_DIM = 128
PROXY_CONV_DIM = 16
GEMM_TOLERANCE = 1e-4
CONV_TOLERANCE = {
    ConvAlgo.NAIVE: 0.0,
    ConvAlgo.TILED: 1e-4,
    ConvAlgo.IM2COL: 1e-5,
    ConvAlgo.WINOGRAD: 1e-3,
}


# --------------------------------------------------------------------------- problems


def _fmt_scalar(v: float) -> str:
    return repr(float(v))


_GEMM_KEY = re.compile(
    r"^gemm:(\d+)x(\d+)x(\d+):([NT])([NT]):a=([^:]+):b=([^:]+)$"
)
_CONV_KEY = re.compile(
    r"^conv:n(\d+):(\d+)x(\d+)x(\d+):k(\d+):w(\d+)x(\d+):s(\d+):(same|valid)$"
)


@dataclass(frozen=True)
class GemmProblem:
    shape: GemmShape

    kind = "gemm"

    @property
    def key(self) -> str:
        s = self.shape
        return (
            f"gemm:{s.m}x{s.n}x{s.k}:{s.op_a.value}{s.op_b.value}"
            f":a={_fmt_scalar(s.alpha)}:b={_fmt_scalar(s.beta)}"
        )

    @property
    def flops(self) -> int:
        return self.shape.flops

    def make_inputs(self, seed: int = 0):
        s = self.shape
        rng = seeded_rng(self.key, seed)
        return (
            Matrix.random(*s.a_dims, rng),
            Matrix.random(*s.b_dims, rng),
            Matrix.random(s.m, s.n, rng),
        )

    def run(self, config: GemmConfig, inputs, device: DeviceSpec | None = None):
        return gemm_tiled(*inputs, self.shape, config, device)

    def reference(self, inputs):
        return gemm_naive(*inputs, self.shape)

    def tolerance(self, config: GemmConfig) -> float:
        del config
        return GEMM_TOLERANCE

    def proxy(self) -> GemmProblem:
        s = self.shape
        return GemmProblem(GemmShape(
            min(s.m, PROXY_GEMM_DIM), min(s.n, PROXY_GEMM_DIM), min(s.k, PROXY_GEMM_DIM),
            s.alpha, s.beta, s.op_a, s.op_b,
        ))


@dataclass(frozen=True)
class ConvProblem:
    shape: ConvShape
    gemm_config: GemmConfig | None = None

    kind = "conv"

    @property
    def key(self) -> str:
        s = self.shape
        return (
            f"conv:n{s.batch}:{s.in_rows}x{s.in_cols}x{s.channels}:k{s.features}"
            f":w{s.window_rows}x{s.window_cols}:s{s.stride}:{s.padding.value}"
        )

    @property
    def flops(self) -> int:
        return conv_flops(self.shape)

    def make_inputs(self, seed: int = 0):
        s = self.shape
        rng = seeded_rng(self.key, seed)
        return (
            Tensor4.random(s.input_dims, rng),
            Tensor4.random(s.filter_dims, rng, Layout.FILTER_HWCK),
        )

    def run(self, config: ConvAlgoParams, inputs, device: DeviceSpec | None = None):
        return conv2d(*inputs, self.shape, config, gemm_config=self.gemm_config, device=device)

    def reference(self, inputs):
        return conv2d_naive(*inputs, self.shape)

    def tolerance(self, config: ConvAlgoParams) -> float:
        return CONV_TOLERANCE[config.algo]

    def proxy(self) -> ConvProblem:
        s = self.shape
        h = min(s.in_rows, max(PROXY_CONV_DIM, s.window_rows))
        w = min(s.in_cols, max(PROXY_CONV_DIM, s.window_cols))
        return ConvProblem(ConvShape(
            min(s.batch, 2), h, w, min(s.channels, PROXY_CONV_DIM), min(s.features, PROXY_CONV_DIM),
            s.window_rows, s.window_cols, s.stride, s.padding,
        ), self.gemm_config)


Problem = Union[GemmProblem, ConvProblem]


def parse_problem(key: str) -> Problem:
    """Inverse of ``problem.key``."""
    m = _GEMM_KEY.match(key)
    if m:
        mm, nn, kk, oa, ob, alpha, beta = m.groups()
        try:
            return GemmProblem(GemmShape(int(mm), int(nn), int(kk), float(alpha), float(beta),
                                         Op(oa), Op(ob)))
        except ValueError as exc:
            raise ParseError(f"bad problem key {key!r}: {exc}") from None
    m = _CONV_KEY.match(key)
    if m:
        n, h, w, c, k, r, s, st, pad = m.groups()
        return ConvProblem(ConvShape(int(n), int(h), int(w), int(c), int(k), int(r), int(s),
                                     int(st), Padding(pad)))
    raise ParseError(f"bad problem key {key!r}")


def parse_config(name: str) -> Config:
    """GEMM or convolution configuration from its canonical name."""
    try:
        return GemmConfig.parse(name)
    except ParseError:
        return ConvAlgoParams.parse(name)


# --------------------------------------------------------------------------- parameter space


@dataclass(frozen=True)
class ParamSpace:
    """Sets of kernel parameters to search.

    ``gemm_configs`` and ``tiled_configs`` replace the cartesian products
    with explicit lists when given.  Conv tiles sweep 1x1 through 5x5.
    """

    h: tuple[int, ...] = (1, 2, 4, 8)
    w: tuple[int, ...] = (1, 2, 4, 8)
    r: tuple[int, ...] = (4, 8, 16)
    c: tuple[int, ...] = (4, 8, 16)
    local: tuple[bool, ...] = (True, False)
    double_buffer: tuple[bool, ...] = (True, False)
    gemm_configs: tuple[GemmConfig, ...] | None = None
    tile_rows: tuple[int, ...] = (1, 2, 3, 4, 5)
    tile_cols: tuple[int, ...] = (1, 2, 3, 4, 5)
    channel_vectors: tuple[int, ...] = VECTOR_WIDTHS
    feature_vectors: tuple[int, ...] = VECTOR_WIDTHS
    conv_algos: tuple[ConvAlgo, ...] = tuple(ConvAlgo)
    winograd_tiles: tuple[tuple[int, int], ...] = ((2, 2), (4, 4))
    tiled_configs: tuple[ConvAlgoParams, ...] | None = None

    @classmethod
    def table2(cls) -> ParamSpace:
        """The seven published GEMM configs plus a handful of conv tiles.

        Every tiled conv variant is a separately compiled kernel, so the
        full 400-point conv space is slow on a cold kernel cache.
        """
        tiles = ("tiled_1x1_v1x1", "tiled_2x2_v4x4", "tiled_4x4_v4x4", "tiled_2x4_v2x8")
        return cls(gemm_configs=tuple(table2_configs()),
                   tiled_configs=tuple(ConvAlgoParams.parse(t) for t in tiles))

    def gemm_candidates(self) -> list[GemmConfig]:
        if self.gemm_configs is not None:
            return list(self.gemm_configs)
        out = []
        for h, w, r, c, loc, db in itertools.product(
            self.h, self.w, self.r, self.c, self.local, self.double_buffer
        ):
            if db and not loc:
                continue
            out.append(GemmConfig(h, w, r, c, use_local_memory=loc, double_buffer=db))
        return out

    def conv_candidates(self) -> list[ConvAlgoParams]:
        out = []
        for algo in self.conv_algos:
            if algo is ConvAlgo.TILED and self.tiled_configs is not None:
                out += list(self.tiled_configs)
            elif algo is ConvAlgo.TILED:
                out += [
                    ConvAlgoParams(ConvAlgo.TILED, tr, tc, cv, fv)
                    for tr, tc, cv, fv in itertools.product(
                        self.tile_rows, self.tile_cols, self.channel_vectors, self.feature_vectors
                    )
                ]
            elif algo is ConvAlgo.WINOGRAD:
                out += [ConvAlgoParams(ConvAlgo.WINOGRAD, m, n) for m, n in self.winograd_tiles]
            else:
                out.append(ConvAlgoParams(algo))
        return out


class ConfigList(list):
    """Enumerated configurations plus a note on what filtered the rest out."""

    def __init__(self, items=(), diagnostic: str = ""):
        super().__init__(items)
        self.diagnostic = diagnostic


def _summarize(total: int, rejected: Counter, what: str) -> str:
    if not rejected:
        return f"{total} candidates, none rejected"
    parts = ", ".join(f"{name} ({count})" for name, count in rejected.most_common())
    return f"{what}: {sum(rejected.values())} of {total} rejected by {parts}"


def enumerate_configs(space: ParamSpace, dev: DeviceSpec, problem: Problem) -> ConfigList:
    """Every candidate in ``space`` that fits ``dev``, sorted by name."""
    rejected: Counter = Counter()
    keep = []
    if problem.kind == "gemm":
        cands = space.gemm_candidates()
        for cfg in cands:
            verdict = validate_config(cfg, dev, problem.shape)
            if verdict:
                keep.append(cfg)
            else:
                rejected.update(verdict.budgets())
    else:
        cands = space.conv_candidates()
        for params in cands:
            if params.registers > dev.register_budget:
                rejected["registers"] += 1
            elif not supports(params, problem.shape):
                rejected["capability"] += 1
            else:
                keep.append(params)
    keep = sorted(set(keep), key=lambda cfg: cfg.name)
    note = _summarize(len(cands), rejected, f"{problem.key} on {dev.name}")
    if not keep:
        note = "no configuration fits; " + note
    return ConfigList(keep, note)


# --------------------------------------------------------------------------- benchmarking


def time_call(fn: Callable[[], object]) -> int:
    t0 = time.perf_counter_ns()
    fn()
    return time.perf_counter_ns() - t0


@dataclass(frozen=True)
class BenchOptions:
    """``timer`` runs its argument once and returns the elapsed nanoseconds."""

    warmup: int = 5
    samples: int = 20
    seed: int = 0
    verify: bool = True
    timer: Callable[[Callable[[], object]], int] = field(default=time_call, compare=False)

    def __post_init__(self):
        if self.samples < 3:
            raise ValueError("samples must be >= 3")
        if self.warmup < 1:
            raise ValueError("warmup must be >= 1")


@dataclass(frozen=True)
class TuningRecord:
    problem: str
    config: str
    device: str
    samples: int
    median_ns: int
    min_ns: int
    mean_ns: int
    gflops: float
    valid: bool

    @property
    def key(self) -> tuple[str, str, str]:
        return self.problem, self.config, self.device

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=False)

    @classmethod
    def from_dict(cls, obj: dict) -> TuningRecord:
        names = [f.name for f in fields(cls)]
        missing = [n for n in names if n not in obj]
        if missing:
            raise ValueError(f"missing fields {missing}")
        return cls(
            problem=str(obj["problem"]),
            config=str(obj["config"]),
            device=str(obj["device"]),
            samples=int(obj["samples"]),
            median_ns=int(obj["median_ns"]),
            min_ns=int(obj["min_ns"]),
            mean_ns=int(obj["mean_ns"]),
            gflops=float(obj["gflops"]),
            valid=bool(obj["valid"]),
        )


def record_from_samples(problem: Problem, config: Config, device: str,
                        samples: list[int], valid: bool = True) -> TuningRecord:
    median = round(statistics.median(samples))
    return TuningRecord(
        problem=problem.key,
        config=config.name,
        device=device,
        samples=len(samples),
        median_ns=median,
        min_ns=min(samples),
        mean_ns=round(statistics.fmean(samples)),
        gflops=problem.flops / max(median, 1),
        valid=valid,
    )


def oracle_error(problem: Problem, config: Config, device: DeviceSpec | None = None,
                 seed: int = 0) -> float:
    """Relative error of ``config`` against the naive kernel on the problem's proxy."""
    proxy = problem.proxy()
    inputs = proxy.make_inputs(seed)
    return max_rel_error(proxy.run(config, inputs, device), proxy.reference(inputs))


def benchmark_config(
    problem: Problem,
    config: Config,
    opts: BenchOptions | None = None,
    device: DeviceSpec | None = None,
    *,
    oracle: Callable[[Problem, Config], float] | None = None,
) -> TuningRecord:
    """Time ``config`` on fixed inputs and check it once against the oracle.

    A failed check marks the record invalid; it does not raise.
    """
    opts = opts or BenchOptions()
    device = device or host_cpu()
    try:
        inputs = problem.make_inputs(opts.seed)
    except MemoryError as exc:
        raise ResourceError(f"cannot allocate inputs for {problem.key}: {exc}") from exc

    def once():
        return problem.run(config, inputs, device)

    try:
        for _ in range(opts.warmup):
            once()
        samples = [int(opts.timer(once)) for _ in range(opts.samples)]
    except MemoryError as exc:
        raise ResourceError(f"out of memory running {config.name} on {problem.key}") from exc

    valid = True
    if opts.verify:
        check = oracle or (lambda p, c: oracle_error(p, c, device, opts.seed))
        err = check(problem, config)
        valid = bool(err <= problem.tolerance(config))
    return record_from_samples(problem, config, device.name, samples, valid)


# --------------------------------------------------------------------------- selection


def _local_cost(cfg: Config) -> int:
    # Proportional to local_mem_elems: the cache-line factor is common to one device.
    if isinstance(cfg, GemmConfig) and cfg.use_local_memory:
        per = cfg.h * cfg.r + cfg.w * cfg.c
        return 2 * per if cfg.double_buffer else per
    return 0


def selection_key(rec: TuningRecord) -> tuple:
    cfg = parse_config(rec.config)
    return (rec.median_ns, cfg.registers, _local_cost(cfg), rec.config)


def select_best(records: Iterable[TuningRecord]) -> TuningRecord:
    """Lowest median among valid records; ties go to fewer registers, then
    less local memory, then the lexicographically smaller name."""
    valid = [r for r in records if r.valid]
    if not valid:
        raise TuningError("no valid records to select from")
    return min(valid, key=selection_key)


def best_by_problem(records: Iterable[TuningRecord], device: str | None = None) -> dict[str, str]:
    """Winning config name per problem key (optionally for one device)."""
    groups: dict[str, list[TuningRecord]] = {}
    for rec in records:
        if device is None or rec.device == device:
            groups.setdefault(rec.problem, []).append(rec)
    out = {}
    for key in sorted(groups):
        try:
            out[key] = select_best(groups[key]).config
        except TuningError:
            continue
    return out


def preferred_config(records: Iterable[TuningRecord], problem: Problem, device: str) -> Config | None:
    """Tuned choice for ``problem`` on ``device`` if the records have one."""
    name = best_by_problem(records, device).get(problem.key)
    return parse_config(name) if name else None


def tune(
    problem: Problem,
    space: ParamSpace,
    dev: DeviceSpec,
    opts: BenchOptions | None = None,
    *,
    progress: Callable[[TuningRecord], None] | None = None,
) -> tuple[Config, list[TuningRecord]]:
    """Benchmark every enumerated config and return the winner with all records."""
    configs = enumerate_configs(space, dev, problem)
    if not configs:
        raise TuningError(configs.diagnostic, {"*": configs.diagnostic})
    records = []
    diagnostics = {}
    for cfg in configs:
        try:
            rec = benchmark_config(problem, cfg, opts, dev)
        except (ConfigError, NotImplementedError) as exc:
            diagnostics[cfg.name] = str(exc)
            continue
        records.append(rec)
        if not rec.valid:
            diagnostics[cfg.name] = "output differs from the naive oracle"
        if progress:
            progress(rec)
    if not any(r.valid for r in records):
        raise TuningError(f"no valid configuration for {problem.key} on {dev.name}", diagnostics)
    return parse_config(select_best(records).config), records


# --------------------------------------------------------------------------- database


def default_db_path() -> Path:
    env = os.environ.get("TILEKIT_DB")
    if env:
        return Path(env)
    base = os.environ.get("XDG_CACHE_HOME") or os.path.join(os.path.expanduser("~"), ".cache")
    return Path(base) / "tilekit" / "tuning.ndjson"


def save_db(records: Iterable[TuningRecord], path: str | os.PathLike) -> None:
    """Append records, one JSON object per line."""
    path = Path(path)
    if path.parent != Path():
        path.parent.mkdir(parents=True, exist_ok=True)
    lines = "".join(rec.to_json() + "\n" for rec in records)
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(lines)


def load_db(path: str | os.PathLike) -> list[TuningRecord]:
    """Read a tuning DB.  Later lines replace earlier ones with the same
    (problem, config, device) key, with a warning."""
    table: dict[tuple[str, str, str], TuningRecord] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                if not isinstance(obj, dict):
                    raise ValueError("expected a JSON object")
                rec = TuningRecord.from_dict(obj)
            except (ValueError, TypeError) as exc:
                raise ParseError(f"{path}: {exc}", line=lineno) from None
            if rec.key in table:
                warnings.warn(f"{path}:{lineno}: duplicate record {rec.key} replaces an earlier one",
                              stacklevel=2)
                del table[rec.key]
            table[rec.key] = rec
    return list(table.values())


__all__ = [
    "GemmProblem", "ConvProblem", "parse_problem", "parse_config", "ParamSpace",
    "ConfigList", "enumerate_configs", "BenchOptions", "TuningRecord", "time_call",
    "record_from_samples", "oracle_error", "benchmark_config", "select_best",
    "best_by_problem", "preferred_config", "tune", "default_db_path", "save_db", "load_db",
]

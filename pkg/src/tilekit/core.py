"""Domain types: devices, dense operands, kernel configurations, problem shapes.

Every value type here is immutable after construction.  Element type is
always float32 and all byte arithmetic assumes 4-byte elements.
"""

from __future__ import annotations

import enum
import math
import os
import re
import sys
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import ConfigError, ParseError, ShapeError

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10 only
    import tomli as tomllib

ELEM_BYTES = 4
DTYPE = np.float32

DEFAULT_REGISTER_BUDGET = 256
DEFAULT_MAX_WORKGROUP = 256


def _frozen_array(data, length: int | None = None) -> np.ndarray:
    arr = np.array(data, dtype=DTYPE, copy=True).reshape(-1)
    if length is not None and arr.size != length:
        raise ShapeError(f"expected {length} elements, got {arr.size}")
    arr.setflags(write=False)
    return arr


# --------------------------------------------------------------------------- devices


@dataclass(frozen=True)
class DeviceSpec:
    """Resource description of a compute device.

    ``local_memory_bytes == 0`` means the device has no dedicated local
    memory.  ``register_budget`` is the number of scalar registers a thread
    may use before spilling.
    """

    name: str
    cache_line_bytes: int
    local_memory_bytes: int
    compute_units: int
    register_budget: int = DEFAULT_REGISTER_BUDGET
    max_workgroup_size: int = DEFAULT_MAX_WORKGROUP

    def __post_init__(self):
        line = self.cache_line_bytes
        if line < ELEM_BYTES or line & (line - 1):
            raise ValueError(f"cache_line_bytes must be a power of two >= 4, got {line}")
        if self.local_memory_bytes < 0:
            raise ValueError("local_memory_bytes must be non-negative")
        for attr in ("compute_units", "register_budget", "max_workgroup_size"):
            if getattr(self, attr) < 1:
                raise ValueError(f"{attr} must be positive")

    @property
    def line_elems(self) -> int:
        """Elements of float32 per cache line (the X of the local-memory formula)."""
        return self.cache_line_bytes // ELEM_BYTES

    @property
    def has_local_memory(self) -> bool:
        return self.local_memory_bytes > 0

    def with_budgets(self, **changes) -> DeviceSpec:
        return replace(self, **changes)


KIB = 1024

# Published device metrics; register/work-group limits are model defaults.
_TABLE1 = (
    ("Intel Core i7-6700K CPU", 64, 0, 8),
    ("Intel Core i7-6700K GPU", 64, 64 * KIB, 24),
    ("ARM Mali G71 GPU", 64, 0, 8),
    ("Renesas V3M", 128, 447 * KIB, 2),
    ("Renesas V3H", 128, 409 * KIB, 5),
    ("AMD R9 Nano", 128, 32 * KIB, 64),
)


def _read_sysfs_int(path: Path) -> int | None:
    try:
        text = path.read_text().strip()
    except OSError:
        return None
    mult = 1
    if text.endswith("K"):
        text, mult = text[:-1], KIB
    elif text.endswith("M"):
        text, mult = text[:-1], KIB * KIB
    try:
        return int(text) * mult
    except ValueError:
        return None


def _l1d_geometry() -> tuple[int, int]:
    line, size = 64, 32 * KIB
    base = Path("/sys/devices/system/cpu/cpu0/cache")
    for index in sorted(base.glob("index*")):
        try:
            level = (index / "level").read_text().strip()
            kind = (index / "type").read_text().strip()
        except OSError:
            continue
        if level == "1" and kind in ("Data", "Unified"):
            line = _read_sysfs_int(index / "coherency_line_size") or line
            size = _read_sysfs_int(index / "size") or size
            break
    return line, size


@lru_cache(maxsize=None)
def host_cpu() -> DeviceSpec:
    """Describe the machine we are running on.

    The L1 data cache stands in for local memory: on a CPU the staging
    buffer is a cache-blocking buffer and must fit in L1 to help.
    """
    line, l1 = _l1d_geometry()
    return DeviceSpec(
        name="host-cpu",
        cache_line_bytes=line,
        local_memory_bytes=l1,
        compute_units=os.cpu_count() or 1,
    )


def builtin_devices() -> list[DeviceSpec]:
    devices = [DeviceSpec(name, line, local, cu) for name, line, local, cu in _TABLE1]
    devices.append(host_cpu())
    return devices


def _normalize(name: str) -> str:
    return re.sub(r"[^a-z0-9]+", "", name.lower())


def get_device(name_or_path: str | os.PathLike) -> DeviceSpec:
    """Look up a builtin device by (case/punctuation-insensitive) name, or load a TOML file."""
    text = os.fspath(name_or_path)
    if text.endswith(".toml"):
        return load_devices_toml(text)[0]
    wanted = _normalize(text)
    for dev in builtin_devices():
        if _normalize(dev.name) == wanted:
            return dev
    known = ", ".join(d.name for d in builtin_devices())
    raise KeyError(f"unknown device {text!r}; known: {known}")


_DEVICE_FIELDS = (
    "name",
    "cache_line_bytes",
    "local_memory_bytes",
    "compute_units",
    "register_budget",
    "max_workgroup_size",
)


def _device_from_mapping(table: dict, where: str) -> DeviceSpec:
    unknown = set(table) - set(_DEVICE_FIELDS)
    if unknown:
        raise ParseError(f"{where}: unknown device keys {sorted(unknown)}")
    try:
        return DeviceSpec(**table)
    except TypeError as exc:
        raise ParseError(f"{where}: {exc}") from None


def load_devices_toml(path: str | os.PathLike) -> list[DeviceSpec]:
    """Read devices from TOML.

    Either the top level holds one device's fields, or ``[[device]]``
    array-of-tables entries hold several.
    """
    with open(path, "rb") as fh:
        doc = tomllib.load(fh)
    if "device" in doc:
        return [_device_from_mapping(t, f"{path}[device {i}]") for i, t in enumerate(doc["device"])]
    return [_device_from_mapping(doc, str(path))]


def device_to_toml(dev: DeviceSpec) -> str:
    lines = []
    for key in _DEVICE_FIELDS:
        value = getattr(dev, key)
        lines.append(f'{key} = "{value}"' if isinstance(value, str) else f"{key} = {value}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------- operands


@dataclass(frozen=True, eq=False)
class Matrix:
    """Dense column-major float32 matrix; element (i, j) lives at ``i + j*rows``."""

    rows: int
    cols: int
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ShapeError(f"matrix dims must be positive, got {self.rows}x{self.cols}")
        object.__setattr__(self, "data", _frozen_array(self.data, self.rows * self.cols))

    @classmethod
    def from_array(cls, arr) -> Matrix:
        a = np.asarray(arr, dtype=DTYPE)
        if a.ndim != 2:
            raise ShapeError("from_array expects a 2-D array")
        return cls(a.shape[0], a.shape[1], a.ravel(order="F"))

    @classmethod
    def zeros(cls, rows: int, cols: int) -> Matrix:
        return cls(rows, cols, np.zeros(rows * cols, DTYPE))

    @classmethod
    def random(cls, rows: int, cols: int, rng: np.random.Generator) -> Matrix:
        return cls(rows, cols, rng.uniform(-1.0, 1.0, rows * cols).astype(DTYPE))

    def index(self, i: int, j: int) -> int:
        if not (0 <= i < self.rows and 0 <= j < self.cols):
            raise IndexError((i, j))
        return i + j * self.rows

    def coords(self, flat: int) -> tuple[int, int]:
        return flat % self.rows, flat // self.rows

    def __getitem__(self, ij: tuple[int, int]) -> float:
        return float(self.data[self.index(*ij)])

    def to_array(self) -> np.ndarray:
        """(rows, cols) read-only view."""
        return self.data.reshape(self.cols, self.rows).T

    def __eq__(self, other):
        if not isinstance(other, Matrix):
            return NotImplemented
        return (self.rows, self.cols) == (other.rows, other.cols) and np.array_equal(
            self.data, other.data
        )

    __hash__ = None


class Layout(enum.Enum):
    INPUT_NHWC = "NHWC"
    FILTER_HWCK = "HWCK"


@dataclass(frozen=True, eq=False)
class Tensor4:
    """Four-dimensional float32 tensor, innermost dimension last.

    INPUT_NHWC dims are (batch, height, width, channels); convolution outputs
    use the same layout with features as the channel dim.  FILTER_HWCK dims
    are (rows, cols, channels, features).
    """

    dims: tuple[int, int, int, int]
    data: np.ndarray = field(repr=False)
    layout: Layout = Layout.INPUT_NHWC

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 4 or min(dims) < 1:
            raise ShapeError(f"Tensor4 needs four positive dims, got {self.dims}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "data", _frozen_array(self.data, math.prod(dims)))

    @classmethod
    def input(cls, batch: int, height: int, width: int, channels: int, data) -> Tensor4:
        return cls((batch, height, width, channels), data, Layout.INPUT_NHWC)

    @classmethod
    def filter(cls, rows: int, cols: int, channels: int, features: int, data) -> Tensor4:
        return cls((rows, cols, channels, features), data, Layout.FILTER_HWCK)

    @classmethod
    def random(cls, dims, rng: np.random.Generator, layout=Layout.INPUT_NHWC) -> Tensor4:
        return cls(tuple(dims), rng.uniform(-1.0, 1.0, math.prod(dims)).astype(DTYPE), layout)

    def index(self, a: int, b: int, c: int, d: int) -> int:
        d0, d1, d2, d3 = self.dims
        for v, lim in zip((a, b, c, d), self.dims):
            if not 0 <= v < lim:
                raise IndexError((a, b, c, d))
        return ((a * d1 + b) * d2 + c) * d3 + d

    def coords(self, flat: int) -> tuple[int, int, int, int]:
        _, d1, d2, d3 = self.dims
        flat, d = divmod(flat, d3)
        flat, c = divmod(flat, d2)
        a, b = divmod(flat, d1)
        return a, b, c, d

    def to_array(self) -> np.ndarray:
        return self.data.reshape(self.dims)

    def __eq__(self, other):
        if not isinstance(other, Tensor4):
            return NotImplemented
        return (
            self.dims == other.dims
            and self.layout == other.layout
            and np.array_equal(self.data, other.data)
        )

    __hash__ = None


# --------------------------------------------------------------------------- GEMM config / shape

_CONFIG_RE = re.compile(
    r"^(?P<h>\d+)[x×](?P<w>\d+)_(?P<r>\d+)[x×](?P<c>\d+)_(?P<loc>loc|noloc)"
    r"(?P<db>_db)?(?:_k(?P<k>\d+))?$"
)


@dataclass(frozen=True, order=True)
class GemmConfig:
    """Register tile ``h x w`` per thread on an ``r x c`` work-group.

    Text form is ``{h}x{w}_{r}x{c}_{loc|noloc}[_db]`` with an optional
    ``_k{n}`` suffix when the register-stage k step is not 1.
    """

    h: int
    w: int
    r: int
    c: int
    use_local_memory: bool = True
    double_buffer: bool = False
    k_step: int = 1

    def __post_init__(self):
        for attr in ("h", "w", "r", "c", "k_step"):
            if getattr(self, attr) < 1:
                raise ValueError(f"GemmConfig.{attr} must be positive")
        if self.double_buffer and not self.use_local_memory:
            raise ValueError("double buffering requires local memory")

    @property
    def registers(self) -> int:
        return self.h * self.w

    @property
    def workgroup_size(self) -> int:
        return self.r * self.c

    @property
    def block_rows(self) -> int:
        return self.h * self.r

    @property
    def block_cols(self) -> int:
        return self.w * self.c

    @property
    def name(self) -> str:
        text = f"{self.h}x{self.w}_{self.r}x{self.c}_{'loc' if self.use_local_memory else 'noloc'}"
        if self.double_buffer:
            text += "_db"
        if self.k_step != 1:
            text += f"_k{self.k_step}"
        return text

    def __str__(self) -> str:
        return self.name

    @classmethod
    def parse(cls, text: str) -> GemmConfig:
        m = _CONFIG_RE.match(text.strip().lower())
        if not m:
            raise ParseError(f"bad GEMM config name {text!r}; expected hxw_rxc_loc|noloc[_db]")
        return cls(
            h=int(m["h"]),
            w=int(m["w"]),
            r=int(m["r"]),
            c=int(m["c"]),
            use_local_memory=m["loc"] == "loc",
            double_buffer=m["db"] is not None,
            k_step=int(m["k"] or 1),
        )


# Published tuned configurations.  The `_loc` rows' memory column assumes
# double buffering, so table2_configs() turns it on for them.
TABLE2_NAMES = (
    "4x4_8x8_loc",
    "4x4_16x16_loc",
    "8x4_8x16_loc",
    "8x2_4x16_loc",
    "8x4_8x16_noloc",
    "8x4_4x8_noloc",
    "4x4_8x8_noloc",
)


def table2_configs(double_buffer: bool = True) -> list[GemmConfig]:
    out = []
    for name in TABLE2_NAMES:
        cfg = GemmConfig.parse(name)
        if cfg.use_local_memory and double_buffer:
            cfg = replace(cfg, double_buffer=True)
        out.append(cfg)
    return out


class Op(enum.Enum):
    IDENTITY = "N"
    TRANSPOSE = "T"


@dataclass(frozen=True)
class GemmShape:
    """Sizes of C = alpha * op_a(A) * op_b(B) + beta * C after applying the ops."""

    m: int
    n: int
    k: int
    alpha: float = 1.0
    beta: float = 0.0
    op_a: Op = Op.IDENTITY
    op_b: Op = Op.IDENTITY

    def __post_init__(self):
        if min(self.m, self.n, self.k) < 1:
            raise ShapeError(f"GEMM dims must be positive, got {self.m}x{self.n}x{self.k}")
        object.__setattr__(self, "alpha", float(np.float32(self.alpha)))
        object.__setattr__(self, "beta", float(np.float32(self.beta)))

    @property
    def a_dims(self) -> tuple[int, int]:
        return (self.m, self.k) if self.op_a is Op.IDENTITY else (self.k, self.m)

    @property
    def b_dims(self) -> tuple[int, int]:
        return (self.k, self.n) if self.op_b is Op.IDENTITY else (self.n, self.k)

    @property
    def flops(self) -> int:
        return 2 * self.m * self.n * self.k

    def check_operands(self, a: Matrix, b: Matrix, c: Matrix) -> None:
        for label, mat, want in (("A", a, self.a_dims), ("B", b, self.b_dims), ("C", c, (self.m, self.n))):
            if (mat.rows, mat.cols) != want:
                raise ShapeError(
                    f"operand {label} is {mat.rows}x{mat.cols}, expected {want[0]}x{want[1]}"
                )


# --------------------------------------------------------------------------- convolution


class Padding(enum.Enum):
    VALID = "valid"
    SAME = "same"


@dataclass(frozen=True)
class ConvShape:
    """2-D convolution problem over NHWC inputs and HWCK filters.

    Same padding follows the usual zero-fill convention: output extent
    ``ceil(in / stride)``, with the odd padding element at the bottom/right.
    """

    batch: int
    in_rows: int
    in_cols: int
    channels: int
    features: int
    window_rows: int
    window_cols: int
    stride: int = 1
    padding: Padding = Padding.SAME

    def __post_init__(self):
        for attr in (
            "batch", "in_rows", "in_cols", "channels", "features",
            "window_rows", "window_cols", "stride",
        ):
            if getattr(self, attr) < 1:
                raise ShapeError(f"ConvShape.{attr} must be positive")
        if self.padding is Padding.VALID and (
            self.window_rows > self.in_rows or self.window_cols > self.in_cols
        ):
            raise ShapeError("valid convolution window exceeds the input")

    @property
    def out_rows(self) -> int:
        if self.padding is Padding.VALID:
            return (self.in_rows - self.window_rows) // self.stride + 1
        return -(-self.in_rows // self.stride)

    @property
    def out_cols(self) -> int:
        if self.padding is Padding.VALID:
            return (self.in_cols - self.window_cols) // self.stride + 1
        return -(-self.in_cols // self.stride)

    def _pad_before(self, size: int, out: int, window: int) -> int:
        if self.padding is Padding.VALID:
            return 0
        return max((out - 1) * self.stride + window - size, 0) // 2

    @property
    def pad_top(self) -> int:
        return self._pad_before(self.in_rows, self.out_rows, self.window_rows)

    @property
    def pad_left(self) -> int:
        return self._pad_before(self.in_cols, self.out_cols, self.window_cols)

    @property
    def input_dims(self) -> tuple[int, int, int, int]:
        return (self.batch, self.in_rows, self.in_cols, self.channels)

    @property
    def filter_dims(self) -> tuple[int, int, int, int]:
        return (self.window_rows, self.window_cols, self.channels, self.features)

    @property
    def output_dims(self) -> tuple[int, int, int, int]:
        return (self.batch, self.out_rows, self.out_cols, self.features)

    def check_operands(self, inp: Tensor4, flt: Tensor4) -> None:
        if inp.dims != self.input_dims:
            raise ShapeError(f"input tensor is {inp.dims}, expected {self.input_dims}")
        if flt.dims != self.filter_dims:
            raise ShapeError(f"filter tensor is {flt.dims}, expected {self.filter_dims}")


class ConvAlgo(enum.Enum):
    NAIVE = "naive"
    TILED = "tiled"
    IM2COL = "im2col"
    WINOGRAD = "winograd"


VECTOR_WIDTHS = (1, 2, 4, 8)

_CONV_RE = re.compile(
    r"^(?:(?P<simple>naive|im2col)"
    r"|winograd_(?P<wm>\d+)x(?P<wn>\d+)"
    r"|tiled_(?P<tr>\d+)x(?P<tc>\d+)_v(?P<cv>\d+)x(?P<fv>\d+))$"
)


@dataclass(frozen=True)
class ConvAlgoParams:
    """Convolution algorithm choice plus its tile shape and vector widths.

    For Winograd the tile is the output tile of the transform.  Names:
    ``naive``, ``im2col``, ``winograd_{M}x{N}``, ``tiled_{r}x{c}_v{cv}x{fv}``.
    """

    algo: ConvAlgo = ConvAlgo.NAIVE
    tile_rows: int = 1
    tile_cols: int = 1
    channel_vector: int = 1
    feature_vector: int = 1

    def __post_init__(self):
        if self.tile_rows < 1 or self.tile_cols < 1:
            raise ValueError("tile dims must be positive")
        if self.channel_vector not in VECTOR_WIDTHS or self.feature_vector not in VECTOR_WIDTHS:
            raise ConfigError(
                f"vector widths must be in {VECTOR_WIDTHS}, got "
                f"({self.channel_vector}, {self.feature_vector})"
            )

    @property
    def registers(self) -> int:
        """Per-thread register estimate: accumulators, filter block, input vector."""
        if self.algo is ConvAlgo.TILED:
            fv, cv = self.feature_vector, self.channel_vector
            return self.tile_rows * self.tile_cols * fv + cv * fv + cv
        if self.algo is ConvAlgo.WINOGRAD:
            return (self.tile_rows + 2) * (self.tile_cols + 2)
        return 1

    @property
    def name(self) -> str:
        if self.algo is ConvAlgo.TILED:
            return (
                f"tiled_{self.tile_rows}x{self.tile_cols}"
                f"_v{self.channel_vector}x{self.feature_vector}"
            )
        if self.algo is ConvAlgo.WINOGRAD:
            return f"winograd_{self.tile_rows}x{self.tile_cols}"
        return self.algo.value

    def __str__(self) -> str:
        return self.name

    @classmethod
    def parse(cls, text: str) -> ConvAlgoParams:
        m = _CONV_RE.match(text.strip().lower())
        if not m:
            raise ParseError(f"bad convolution config name {text!r}")
        if m["simple"]:
            return cls(ConvAlgo(m["simple"]))
        if m["wm"]:
            return cls(ConvAlgo.WINOGRAD, int(m["wm"]), int(m["wn"]))
        return cls(ConvAlgo.TILED, int(m["tr"]), int(m["tc"]), int(m["cv"]), int(m["fv"]))


# --------------------------------------------------------------------------- comparisons


def max_rel_error(actual, expected, floor: float = 1e-6) -> float:
    """Normwise relative error ``max|a - e| / max(max|e|, floor)``."""
    a = np.asarray(getattr(actual, "data", actual), dtype=np.float64)
    e = np.asarray(getattr(expected, "data", expected), dtype=np.float64)
    if a.shape != e.shape:
        raise ShapeError(f"cannot compare shapes {a.shape} and {e.shape}")
    if a.size == 0:
        return 0.0
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(e))):
        return 0.0 if np.array_equal(a, e, equal_nan=True) else math.inf
    return float(np.max(np.abs(a - e)) / max(float(np.max(np.abs(e))), floor))


def seeded_rng(*parts: object) -> np.random.Generator:
    """Generator seeded deterministically from arbitrary printable parts."""
    import zlib

    return np.random.default_rng(zlib.crc32("|".join(map(str, parts)).encode()))


__all__ = [
    "ELEM_BYTES", "DeviceSpec", "builtin_devices", "host_cpu", "get_device",
    "load_devices_toml", "device_to_toml", "Matrix", "Layout", "Tensor4",
    "GemmConfig", "TABLE2_NAMES", "table2_configs", "Op", "GemmShape",
    "Padding", "ConvShape", "ConvAlgo", "ConvAlgoParams", "VECTOR_WIDTHS",
    "max_rel_error", "seeded_rng",
]

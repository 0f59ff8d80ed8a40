"""Parametrized GEMM and convolution kernels with a device-aware tuner."""

from .core import (
    ConvAlgo,
    ConvAlgoParams,
    ConvShape,
    DeviceSpec,
    GemmConfig,
    GemmShape,
    Matrix,
    Op,
    Padding,
    Tensor4,
    builtin_devices,
    get_device,
    host_cpu,
    table2_configs,
)
from .errors import (
    CapabilityError,
    ConfigError,
    ContractError,
    ParseError,
    ResourceError,
    ShapeError,
    TilekitError,
    TuningError,
)

__version__ = "0.1.0"

__all__ = [
    "ConvAlgo", "ConvAlgoParams", "ConvShape", "DeviceSpec", "GemmConfig", "GemmShape",
    "Matrix", "Op", "Padding", "Tensor4", "builtin_devices", "get_device", "host_cpu",
    "table2_configs", "CapabilityError", "ConfigError", "ContractError", "ParseError",
    "ResourceError", "ShapeError", "TilekitError", "TuningError",
]

"""Fixed-point transformer inference with streaming-pipeline latency and
FPGA resource estimation."""

from .fixedpoint import (
    FixedFormat,
    FixedScalar,
    QTensor,
    accumulate,
    dequantize,
    fx_add,
    fx_mul,
    parse_format,
    quantize,
)
from .lut import LutSpec, LutTable, build_lut, lookup
from .model import ModelGraph, build_example_models, count_parameters, float_forward, load_model, save_model
from .kernels import OpCounter, QuantConfig, default_quant_config, quantize_model

__all__ = [
    "FixedFormat", "FixedScalar", "QTensor", "accumulate", "dequantize",
    "fx_add", "fx_mul", "parse_format", "quantize",
    "LutSpec", "LutTable", "build_lut", "lookup",
    "ModelGraph", "build_example_models", "count_parameters", "float_forward",
    "load_model", "save_model",
    "OpCounter", "QuantConfig", "default_quant_config", "quantize_model",
]

"""Second-order vector quantization for weight matrices."""

from ._core import (
    CompressionReport,
    Error,
    Hessian,
    QuantConfig,
    QuantizedMatrix,
    QuantStats,
    TrainOptions,
    accumulate_hessian,
    aggregate_reports,
    compression_report,
    hessian_from_matrix,
    identity_hessian,
    load,
    pack,
    proxy_loss,
    proxy_loss_decomposed,
    quantize_matrix,
    unpack,
)

__version__ = "0.1.0"

__all__ = [
    "CompressionReport",
    "Error",
    "Hessian",
    "QuantConfig",
    "QuantizedMatrix",
    "QuantStats",
    "TrainOptions",
    "accumulate_hessian",
    "aggregate_reports",
    "compression_report",
    "hessian_from_matrix",
    "identity_hessian",
    "load",
    "pack",
    "proxy_loss",
    "proxy_loss_decomposed",
    "quantize_matrix",
    "unpack",
]

"""Weight-only post-training quantization with channel-wise bit budgets.

Compresses dense weight matrices to any average width in [2, 4] bits by
mixing 2/3/4-bit channels according to activation salience, fitting a
K-means codebook per channel, and keeping the most damaging values in an
fp16 sparse matrix.  Ships a packed container format, a reference
mixed-precision forward path, and a benchmark harness.
"""

from .allocation import PrecisionMap, Thresholds, allocate, nominal_avg_bits
from .calibration import ActivationNorms, accumulate_norms, load_norms
from .errors import CmpqError
from .inference import dequantize_layer, forward
from .layer import CmpqContainer, QuantizeConfig, QuantizedLayer
from .outliers import (
    ChannelOutlierSet,
    ElementOutlierSet,
    SparseMatrixCSR,
    extract_activation_outliers,
    extract_quant_outliers,
    to_csr,
)
from .pipeline import effective_bits, quantize_layer, quantize_model, quantize_with_map
from .quantizer import (
    ChannelCodebook,
    dequantize_channel,
    kmeans_channel,
    kmeans_exact_1d,
    quantize_channel,
    uniform_dequantize,
    uniform_quantize,
)
from .tensor_store import NamedTensorSet, load_tensors, read_container, write_container, write_tensors

__version__ = "0.1.0"

__all__ = [
    "ActivationNorms",
    "ChannelCodebook",
    "ChannelOutlierSet",
    "CmpqContainer",
    "CmpqError",
    "ElementOutlierSet",
    "NamedTensorSet",
    "PrecisionMap",
    "QuantizeConfig",
    "QuantizedLayer",
    "SparseMatrixCSR",
    "Thresholds",
    "accumulate_norms",
    "allocate",
    "dequantize_channel",
    "dequantize_layer",
    "effective_bits",
    "extract_activation_outliers",
    "extract_quant_outliers",
    "forward",
    "kmeans_channel",
    "kmeans_exact_1d",
    "load_norms",
    "load_tensors",
    "nominal_avg_bits",
    "quantize_channel",
    "quantize_layer",
    "quantize_model",
    "quantize_with_map",
    "read_container",
    "to_csr",
    "uniform_dequantize",
    "uniform_quantize",
    "write_container",
    "write_tensors",
]

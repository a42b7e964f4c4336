"""Simulator for bandwidth-limited distributed training of small MLPs.

The package trains feed-forward networks with manual backpropagation while
compressing the traffic that a real cluster would put on the wire: top-k
masking of activations and their gradients at model-parallel split points,
and thresholded sparsification with error feedback for data-parallel weight
gradients.  Thresholds are refreshed on a configurable lifespan so most
iterations reuse a stale cutoff instead of re-sorting.

Layout
------
``nn``        dense forward/backward, parameter containers, scoring
``codecs``    sparsifiers, error buffers, split hooks, threshold state
``wire``      byte-level frame format, links, channel meters, cost model
``runtime``   synchronous and multi-stream training loops, probes
``data``      synthetic dataset generators, csv io, batch iteration
``config``    yaml experiment descriptions
``verify``    self-contained numeric checks (gradients, contraction, ...)
``kernels``   compiled selection kernels with a numpy fallback
"""

from .codecs import (
    CodecConfig,
    DpCompressor,
    ErrorBuffer,
    FixedThresholdHook,
    MaskMatrix,
    SketchConfig,
    SketchHook,
    SparseUpdate,
    SplitHook,
    ThresholdState,
    ThresholdTraceHook,
    TopKMaskHook,
    XGradTopKHook,
    compress_dp,
    kept_rank,
    mask_backward,
    mask_forward,
    row_thresholds,
    topk_threshold,
)
from .data import BatchStream, Dataset, DatasetSpec, bayes_accuracy, make_dataset, read_csv, write_csv
from .errors import (
    ConfigError,
    DctsimError,
    MaskLifecycleError,
    NumericOverflowError,
    ShapeError,
    StalenessError,
    StateMismatchError,
    WireFormatError,
)
from .kernels import BACKEND as KERNEL_BACKEND
from .nn import Batch, LayerGraph, ModelParams, backward, evaluate, forward, init_params, sgd_step
from .runtime import ProbeReport, RunResult, run_async, run_sync, theorem_probe
from .wire import ChannelMeter, CostModel, WireMessage, decode, encode, encoded_length

from . import config, report, verify  # noqa: E402  (submodule handles, kept last)

__version__ = "0.1.0"

__all__ = [
    "Batch",
    "BatchStream",
    "ChannelMeter",
    "CodecConfig",
    "ConfigError",
    "CostModel",
    "Dataset",
    "DatasetSpec",
    "DctsimError",
    "DpCompressor",
    "ErrorBuffer",
    "FixedThresholdHook",
    "KERNEL_BACKEND",
    "LayerGraph",
    "MaskLifecycleError",
    "MaskMatrix",
    "ModelParams",
    "NumericOverflowError",
    "ProbeReport",
    "RunResult",
    "ShapeError",
    "SketchConfig",
    "SketchHook",
    "SparseUpdate",
    "SplitHook",
    "StalenessError",
    "StateMismatchError",
    "ThresholdState",
    "ThresholdTraceHook",
    "TopKMaskHook",
    "WireFormatError",
    "WireMessage",
    "XGradTopKHook",
    "backward",
    "bayes_accuracy",
    "compress_dp",
    "config",
    "decode",
    "encode",
    "encoded_length",
    "evaluate",
    "forward",
    "init_params",
    "kept_rank",
    "make_dataset",
    "mask_backward",
    "mask_forward",
    "read_csv",
    "report",
    "row_thresholds",
    "run_async",
    "run_sync",
    "sgd_step",
    "theorem_probe",
    "topk_threshold",
    "verify",
    "write_csv",
]

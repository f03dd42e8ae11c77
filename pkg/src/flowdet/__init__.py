"""flowdet: flow-guided video object detection at mobile-class compute budgets.

Subpackages:
  tensor / ops   deterministic NCHW kernels with analytic backward passes
  lightflow      Light Flow optical flow network + multi-resolution fusion
  flow_training  synthetic-motion dataset and toy Adam training loop
  aggregation    flow-guided GRU and weighted-average feature aggregation
  detector       MobileNet backbone, RPN, position-sensitive RoI head
  pipeline       key-frame scheduler: extract on key frames, warp elsewhere
  analyzer       static parameter / FLOP cost model and amortized costs
"""

from .tensor import Tensor, no_grad
from .ops import (
    ConvParams,
    BnParams,
    conv2d,
    depthwise_separable,
    batch_norm,
    leaky_relu,
    nearest_upsample_2x,
    bilinear_warp,
    concat_channels,
)
from .lightflow import (
    build_light_flow,
    predict_flow,
    fuse_multiresolution,
    resample_flow,
    epe_loss,
)

__all__ = [
    "Tensor",
    "no_grad",
    "ConvParams",
    "BnParams",
    "conv2d",
    "depthwise_separable",
    "batch_norm",
    "leaky_relu",
    "nearest_upsample_2x",
    "bilinear_warp",
    "concat_channels",
    "build_light_flow",
    "predict_flow",
    "fuse_multiresolution",
    "resample_flow",
    "epe_loss",
]

__version__ = "0.1.0"

"""Depthwise over-parameterized convolution in plain numpy."""

from .conv import ConvGeometry, conv_forward, depthwise_forward, grouped_conv_forward
from .errors import (
    DoConvError,
    FormatError,
    GeometryError,
    NumericError,
    ShapeError,
    UnsupportedConfigError,
)
from .io import Dataset, load_idx, load_model, save_idx, save_model
from .nn import DOConv, Network, NetworkSpec, build_network, reference_spec
from .overparam import (
    DO_CONV,
    DO_DCONV,
    DO_GCONV,
    DoConvParams,
    MaccReport,
    conv_macc,
    doconv_forward,
    doconv_forward_feature,
    doconv_forward_kernel,
    dodconv_forward,
    fold_kernel,
    identity_fill,
    init_params,
    kernel_delta_H,
    macc_estimate,
)
from .train import OptimizerState, TrainConfig, TrainReport, sgd_step, train_run

__version__ = "0.1.0"

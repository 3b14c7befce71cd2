"""Thickness-aware depth shift operators and 2D-to-3D network conversion."""

from .tensor import (
    DimensionError,
    ThicknessMeta,
    Volume4D,
    VolumeFormatError,
    new_volume,
    read_v4d,
    slice_depth,
    sum_channel_slice,
    write_v4d,
)
from .shift import (
    AlignFactorError,
    ShiftConfig,
    ShiftConfigError,
    align_factor,
    align_shift,
    align_shift_adjoint,
    tsm_shift,
    tsm_shift_adjoint,
)
from .resample import (
    Action,
    ResampleError,
    ThicknessPolicyDecision,
    normalize_for_policy,
    resample_depth,
    thickness_policy,
)
from .convert import (
    ConversionError,
    LayerSpec,
    NetworkSpec,
    NormStats,
    convert_layer,
    convert_network,
    inflate_conv_weights,
    load_network,
    save_network,
)

__version__ = "0.1.0"

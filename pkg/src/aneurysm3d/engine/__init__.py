"""Minimal 5-axis tensor engine: layers with analytic backward passes,
Glorot initialization, Adam, and finite-difference gradient checks."""

from .functional import (
    conv3d_backward,
    conv3d_forward,
    dense_backward,
    dense_forward,
    dropout_backward,
    dropout_forward,
    global_max_pool_backward,
    global_max_pool_forward,
    instance_norm_backward,
    instance_norm_forward,
    leaky_relu_backward,
    leaky_relu_forward,
    sigmoid_backward,
    sigmoid_forward,
    softmax_channels_backward,
    softmax_channels_forward,
    upsample_repeat_backward,
    upsample_repeat_forward,
)
from .gradcheck import grad_check, numeric_grad, numeric_vjp, relative_error
from .init import derive_rng, glorot_limit, glorot_uniform, make_rng
from .layers import (
    Conv3d,
    ConvNormAct,
    Dense,
    Dropout,
    InstanceNorm3d,
    LeakyReLU,
    Module,
    Parameter,
    SEBlock,
    Sequential,
    UpsampleRepeat,
)
from .optim import Adam, AdamState, adam_step

"""Tensor autodiff core: ops, layers, Adam, checkpoints, gradient checks."""

from .tensor import (  # noqa: F401
    Tensor,
    abs_,
    add,
    conv2d,
    conv2d_transpose,
    default_dtype,
    global_avg_pool,
    leaky_relu,
    matmul,
    maxpool2d,
    mul,
    pow_const,
    relu,
    reshape,
    set_default_dtype,
    sigmoid,
    softmax,
    softmax_xent,
    tanh,
    tmean,
    transpose,
    tsum,
    upsample_nearest,
)
from .layers import (  # noqa: F401
    BatchNorm2d,
    Conv2d,
    ConvTranspose2d,
    Dense,
    InstanceNorm2d,
    ParameterStore,
)
from .optim import Adam, AdamConfig, adam_step  # noqa: F401
from .checkpoint import load_checkpoint, save_checkpoint  # noqa: F401
from .gradcheck import grad_check, grad_check_params  # noqa: F401

from .tensor import (
    Tensor,
    absolute,
    add,
    as_tensor,
    concatenate,
    corrupt_gradient,
    div,
    exp,
    get_default_dtype,
    getitem,
    is_grad_enabled,
    leaky_relu,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    power,
    precision,
    relu,
    reshape,
    set_default_dtype,
    sigmoid,
    softmax,
    sqrt,
    stack,
    sub,
    tanh,
    transpose,
    tsum,
)
from .functional import (
    avg_pool2d,
    conv2d,
    conv_transpose2d,
    instance_norm,
    layer_norm,
    linear,
    max_pool2d,
)
from .optim import Adam, OptimState, adam_step
from .gradcheck import grad_check, numerical_gradient
from .checkpoint import MAGIC, CheckpointError, load_checkpoint, save_checkpoint

from .gradcheck import finite_diff_grad, relative_error
from .optim import SGD, Adam, Optimizer, make_optimizer, optimizer_step
from .tensor import (
    NumericError,
    Tensor,
    as_tensor,
    avg_pool2d,
    backward,
    concat,
    conv2d,
    cross_entropy,
    log_softmax,
    no_grad,
    softmax,
    stack,
    zero_grad,
)

from .tensor import (
    Tensor,
    Tape,
    add,
    backward,
    gelu,
    layer_norm,
    masked_mse,
    matmul,
    mean_tensors,
    multihead_attention,
    no_grad,
    record,
    reshape,
    scale,
    softmax_cross_entropy,
    take_rows,
    transpose,
)
from .optim import AdamWState, adamw_step, clip_grad_norm, cosine_lr, grad_global_norm
from .serialize import read_container, write_container

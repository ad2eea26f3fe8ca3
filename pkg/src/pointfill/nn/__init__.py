from .tensor import (
    Tape,
    add_rows,
    Tensor,
    add,
    as_const,
    backward,
    bias_add,
    concat_lastdim,
    group_slots,
    linear,
    masked_softmax_neighbors,
    matmul,
    max_lastdim,
    mean_all,
    mse_loss,
    mul,
    relu,
    reshape,
    sigmoid,
    slice_lastdim,
    softmax_lastdim,
    sub,
    sum_all,
    swish,
    take_rows,
    tile_axis1,
    transpose_last2,
    weighted_sum,
)
from .optim import Adam, adam_step
from .checkpoint import load_params, save_params

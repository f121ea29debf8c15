from gadlab.numcore.tensor import (
    Parameter, Tensor, add, backward, concat, cross_entropy, detach, embedding, gelu,
    layer_norm, log_softmax, mask_fill, matmul, mean_all, mul, replace_columns, replace_rows,
    reshape, scale, slice_axis, softmax, sub, sum_all, take_positions, transpose,
)
from gadlab.numcore.optim import AdamW, lr_schedule
from gadlab.numcore.gradcheck import grad_check, numeric_grad

__all__ = [
    "Parameter", "Tensor", "add", "backward", "concat", "cross_entropy", "detach", "embedding",
    "gelu", "layer_norm", "log_softmax", "mask_fill", "matmul", "mean_all", "mul",
    "replace_columns", "replace_rows", "reshape", "scale", "slice_axis", "softmax", "sub",
    "sum_all", "take_positions", "transpose", "AdamW", "lr_schedule", "grad_check", "numeric_grad",
]

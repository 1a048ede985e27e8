from .optim import Adam, OptimizerState, adam_step, clip_grad_norm
from .tensor import (ShapeError, Tensor, add, as_tensor, backward, causal_masked_attention,
                     cross_entropy, dropout, embedding, gelu, getitem, layer_norm, linear, matmul,
                     mul, reshape, softmax, stack, sum_all)

__all__ = [
    "Adam", "OptimizerState", "ShapeError", "Tensor", "adam_step", "add", "as_tensor", "backward",
    "causal_masked_attention", "clip_grad_norm", "cross_entropy", "dropout", "embedding", "gelu",
    "getitem", "layer_norm", "linear", "matmul", "mul", "reshape", "softmax", "stack", "sum_all",
]

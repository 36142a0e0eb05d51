"""Minimal reverse-mode automatic differentiation on numpy arrays."""
from .nn import MLP, LayerNorm, Linear, Module, MultiHeadAttention, Parameter
from .tensor import (
    MASK_BIAS,
    Tensor,
    add,
    backward,
    bce_with_logits,
    broadcast_to,
    concat,
    default_dtype,
    dropout,
    embedding,
    gelu,
    get_default_dtype,
    layer_norm,
    linear,
    matmul,
    mean,
    mul,
    no_grad,
    parameters_grad_norm,
    reshape,
    set_default_dtype,
    sigmoid,
    softmax,
    sub,
    sum_,
    topological_order,
    transpose,
)

"""Two-branch stop-gradient segmentation toolkit (C++ core)."""

from hfgd._core import (
    Model,
    ModelConfig,
    Tensor,
    add,
    add_scalar,
    backward,
    cross_entropy,
    divide,
    generate_sample,
    grad_audit,
    matmul,
    mean_all,
    mul,
    relu,
    reshape,
    scale,
    softmax,
    stop_gradient,
    sub,
    sum_all,
)

__all__ = [
    "Model",
    "ModelConfig",
    "Tensor",
    "add",
    "add_scalar",
    "backward",
    "cross_entropy",
    "divide",
    "generate_sample",
    "grad_audit",
    "matmul",
    "mean_all",
    "mul",
    "relu",
    "reshape",
    "scale",
    "softmax",
    "stop_gradient",
    "sub",
    "sum_all",
]

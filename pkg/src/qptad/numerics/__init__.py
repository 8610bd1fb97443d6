from .gradcheck import GradCheckReport, grad_check, rel_error
from .nn import (LN_EPS, LayerNorm, Linear, Module, bce_with_logits, interp_sample, layer_norm, linear,
                 softmax)
from .tensor import (Parameter, Tensor, abs_, add, as_tensor, clip, concat, div, exp, grad_enabled, index,
                     inject_backward_fault, log, make_op, matmul, max_, maximum, mean, min_, minimum, mul,
                     no_grad, relu, reshape, sigmoid, softplus, stack, sub, sum_, swap_last, transpose)

__all__ = [
    "GradCheckReport", "grad_check", "rel_error", "LN_EPS", "LayerNorm", "Linear", "Module",
    "bce_with_logits", "interp_sample", "layer_norm", "linear", "softmax", "Parameter", "Tensor",
    "abs_", "add", "as_tensor", "clip", "concat", "div", "exp", "grad_enabled", "index",
    "inject_backward_fault", "log", "make_op", "matmul", "max_", "maximum", "mean", "min_", "minimum",
    "mul", "no_grad", "relu", "reshape", "sigmoid", "softplus", "stack", "sub", "sum_", "swap_last",
    "transpose",
]

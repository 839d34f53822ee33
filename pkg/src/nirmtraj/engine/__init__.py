"""Reverse-mode automatic differentiation with exact second-order support.

Dense float64 tensors, a trace-once/replay-many program structure, and a
tangent pass threaded through the reverse pass for gradients of gradient
norms. Smooth primitives only, so recorded programs are differentiable to
the orders this package needs.
"""

from .engine import (
    GradientResult,
    evaluate,
    evaluate_with_tangent,
    grad_norm_sq,
    gradient,
    gradient_of_gradient_norm,
)
from .graph import (
    Builder,
    EngineError,
    Program,
    ShapeError,
    Sym,
    add,
    affine,
    bcast_rows,
    concat,
    mean_all,
    mul,
    mul_rowvec,
    neg,
    permute_rows,
    reshape,
    scale,
    slice_axis,
    softplus,
    sqrt,
    square,
    sub,
    sum_all,
    tanh,
    trace,
)
from .params import ParameterSet

__all__ = [
    "Builder",
    "EngineError",
    "GradientResult",
    "ParameterSet",
    "Program",
    "ShapeError",
    "Sym",
    "add",
    "affine",
    "bcast_rows",
    "concat",
    "evaluate",
    "evaluate_with_tangent",
    "grad_norm_sq",
    "gradient",
    "gradient_of_gradient_norm",
    "mean_all",
    "mul",
    "mul_rowvec",
    "neg",
    "permute_rows",
    "reshape",
    "scale",
    "slice_axis",
    "softplus",
    "sqrt",
    "square",
    "sub",
    "sum_all",
    "tanh",
    "trace",
]

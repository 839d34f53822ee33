"""Execution of recorded programs: forward values, tangents, and gradients.

Second-order quantities use a directional-derivative (tangent) pass threaded
through the reverse pass: seeding tangents on one parameter group while
differentiating with respect to another yields mixed Hessian-vector products
without ever materializing a Hessian. All arithmetic is float64.

Instance batching: any input may be bound with extra leading axes relative to
its traced shape. The leading axes flow through evaluation and gradients, so a
single-sample program can be applied to thousands of samples at once, and
``per_sample=True`` keeps per-instance gradients of shared inputs separate
instead of summing them.
"""

from __future__ import annotations

from collections.abc import Mapping, Sequence

import numpy as np

from .graph import EngineError, Program, ShapeError
from .ops import OPS


def _bind(program: Program, inputs: Mapping[str, np.ndarray], what: str) -> dict[str, np.ndarray]:
    bound = {}
    for name, nominal in program.input_shapes.items():
        if name not in inputs:
            if what == "tangent":
                continue
            raise EngineError(f"missing input {name!r}")
        arr = np.asarray(inputs[name], dtype=np.float64)
        nd = len(nominal)
        if nd and arr.shape[arr.ndim - nd:] != nominal:
            raise ShapeError(
                f"{what} {name!r}: trailing dims of {arr.shape} do not match traced shape {nominal}")
        if arr.ndim < nd:
            raise ShapeError(f"{what} {name!r}: rank {arr.ndim} below traced rank {nd}")
        bound[name] = arr
    extra = set(inputs) - set(program.input_shapes)
    if extra:
        raise EngineError(f"unknown {what}s: {sorted(extra)}")
    return bound


def _forward(program: Program, inputs, tangents=None):
    bound = _bind(program, inputs, "input")
    tbound = _bind(program, tangents, "tangent") if tangents else {}
    n = len(program.nodes)
    vals: list = [None] * n
    tans: list = [None] * n
    for i, node in enumerate(program.nodes):
        op = node.op
        if op == "input":
            vals[i] = bound[node.meta]
            tans[i] = tbound.get(node.meta)
        elif op == "const":
            vals[i] = node.meta
        else:
            rule = OPS[op]
            argv = [vals[a] for a in node.args]
            vals[i] = rule.fwd(argv, node.meta)
            if tbound:
                argt = [tans[a] for a in node.args]
                if any(t is not None for t in argt):
                    tans[i] = rule.jvp(argv, argt, vals[i], node.meta)
    return vals, tans


def evaluate(program: Program, inputs: Mapping[str, np.ndarray],
             check_finite: bool = True) -> np.ndarray:
    """Replay the program on concrete inputs; deterministic for identical inputs."""
    vals, _ = _forward(program, inputs)
    out = vals[program.output]
    if check_finite and not np.all(np.isfinite(out)):
        raise EngineError("non-finite value in program output")
    return out


def evaluate_with_tangent(program: Program, inputs, tangents) -> tuple[np.ndarray, np.ndarray]:
    """Forward value together with its directional derivative along ``tangents``."""
    vals, tans = _forward(program, inputs, tangents)
    out = vals[program.output]
    tan = tans[program.output]
    if tan is None:
        tan = np.zeros_like(out)
    return out, tan


class GradientResult:
    """Value, gradients, and (when tangents were seeded) their directional derivatives."""

    __slots__ = ("value", "value_tangent", "grads", "grad_tangents")

    def __init__(self, value, value_tangent, grads, grad_tangents):
        self.value = value
        self.value_tangent = value_tangent
        self.grads = grads
        self.grad_tangents = grad_tangents


def _reduce_to(arr: np.ndarray, target_shape: tuple[int, ...]) -> np.ndarray:
    """Sum out leading axes produced by broadcasting so ``arr`` matches the target."""
    extra = arr.ndim - len(target_shape)
    if extra > 0:
        arr = arr.sum(axis=tuple(range(extra)))
    if arr.shape != tuple(target_shape):
        # Broadcast within kept axes (e.g. adjoint of a shared leaf): sum them.
        axes = tuple(d for d in range(arr.ndim) if arr.shape[d] != target_shape[d])
        arr = arr.sum(axis=axes, keepdims=True).reshape(target_shape)
    return arr


def gradient(
    program: Program,
    inputs: Mapping[str, np.ndarray],
    wrt: Sequence[str],
    tangents: Mapping[str, np.ndarray] | None = None,
    per_sample: bool = False,
    check_finite: bool = True,
) -> GradientResult:
    """Reverse-mode gradient of a scalar program with respect to named inputs.

    With ``tangents`` seeded, the returned ``grad_tangents`` hold the
    directional derivative of each gradient (a Hessian-vector product).
    With ``per_sample=True``, gradients of inputs bound *without* leading
    instance axes keep one gradient per instance instead of the summed one.
    """
    if program.out_shape != ():
        raise EngineError(f"gradient requires a scalar-valued program, got output shape {program.out_shape}")
    wrt = list(wrt)
    needed = program.needed_mask(frozenset(wrt))
    vals, tans = _forward(program, inputs, tangents)
    n = len(program.nodes)
    out_val = vals[program.output]

    adj_p: list = [None] * n
    adj_t: list = [None] * n
    adj_p[program.output] = np.ones_like(out_val)

    dual = tangents is not None
    for i in range(n - 1, -1, -1):
        g_p = adj_p[i]
        if g_p is None or not needed[i]:
            continue
        node = program.nodes[i]
        if not node.args:
            continue
        rule = OPS[node.op]
        argp = [vals[a] for a in node.args]
        argt = [tans[a] for a in node.args] if dual else [None] * len(node.args)
        g_t = adj_t[i]
        out_t = tans[i] if dual else None
        for k, a in enumerate(node.args):
            if not needed[a]:
                continue
            cp, ct = rule.vjp(k, g_p, g_t, argp, argt, vals[i], out_t, node.meta)
            adj_p[a] = cp if adj_p[a] is None else adj_p[a] + cp
            if ct is not None:
                adj_t[a] = ct if adj_t[a] is None else adj_t[a] + ct

    lead = out_val.shape
    grads: dict[str, np.ndarray] = {}
    grad_tans: dict[str, np.ndarray] | None = {} if dual else None
    for name in wrt:
        idx = program.input_ids[name]
        bound_shape = np.asarray(inputs[name]).shape
        target = (lead + program.input_shapes[name]) if per_sample else bound_shape
        g = adj_p[idx]
        if g is None:
            grads[name] = np.zeros(target)
        else:
            g = np.broadcast_to(g, np.broadcast_shapes(g.shape, target)) if per_sample else g
            grads[name] = _reduce_to(g, target)
        if dual:
            t = adj_t[idx]
            if t is None:
                grad_tans[name] = np.zeros(target)
            else:
                t = np.broadcast_to(t, np.broadcast_shapes(t.shape, target)) if per_sample else t
                grad_tans[name] = _reduce_to(t, target)

    if check_finite:
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise EngineError(f"non-finite gradient for input {name!r}")
    out_tan = tans[program.output] if dual else None
    if dual and out_tan is None:
        out_tan = np.zeros_like(out_val)
    return GradientResult(out_val, out_tan, grads, grad_tans)


def grad_norm_sq(program: Program, inputs: Mapping[str, np.ndarray], wrt: Sequence[str]) -> float:
    """Squared Euclidean norm of the gradient with respect to the named inputs."""
    res = gradient(program, inputs, wrt)
    return float(sum(np.sum(g * g) for g in res.grads.values()))


def gradient_of_gradient_norm(
    program: Program,
    inputs: Mapping[str, np.ndarray],
    inner: Sequence[str],
    outer: Sequence[str],
) -> dict[str, np.ndarray]:
    """Gradient w.r.t. ``outer`` of the squared gradient norm w.r.t. ``inner``.

    Inner inputs are held at their bound values; the result is
    ``2 * H[outer, inner] @ grad_inner`` from one tangent-seeded reverse pass.
    """
    first = gradient(program, inputs, wrt=inner)
    seeded = gradient(program, inputs, wrt=outer, tangents=first.grads)
    return {name: 2.0 * t for name, t in seeded.grad_tangents.items()}

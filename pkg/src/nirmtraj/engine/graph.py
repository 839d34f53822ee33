"""Recorded computations: tracing, shape checking, and the program structure.

A :class:`Program` is an immutable, topologically ordered list of primitive
operations over named inputs. It is built once (via :class:`Builder` or
:func:`trace`) and replayed many times with fresh input bindings, so training
loops pay the graph-construction cost only on the first step.
"""

from __future__ import annotations

import math
from collections.abc import Callable, Mapping, Sequence

import numpy as np


class EngineError(Exception):
    """Base class for recorded-computation failures."""


class ShapeError(EngineError):
    """Raised when shapes are inconsistent; identifies the offending operation."""


Shape = tuple[int, ...]


class Node:
    __slots__ = ("op", "args", "meta", "shape")

    def __init__(self, op: str, args: tuple[int, ...], meta, shape: Shape):
        self.op = op
        self.args = args
        self.meta = meta
        self.shape = shape


class Program:
    """An acyclic, topologically ordered record of primitive operations.

    Every value is reachable from the declared inputs and constants; this
    holds by construction because nodes can only reference earlier nodes.
    """

    def __init__(self, nodes: list[Node], input_ids: dict[str, int], output: int):
        self.nodes = nodes
        self.input_ids = input_ids
        self.output = output
        self.out_shape: Shape = nodes[output].shape
        self.input_shapes: dict[str, Shape] = {name: nodes[i].shape for name, i in input_ids.items()}
        self._needed_cache: dict[frozenset[str], np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def needed_mask(self, wrt: frozenset[str]) -> np.ndarray:
        """Boolean mask of nodes lying on a path from a ``wrt`` input to anywhere."""
        cached = self._needed_cache.get(wrt)
        if cached is not None:
            return cached
        unknown = wrt - set(self.input_ids)
        if unknown:
            raise EngineError(f"unknown inputs in wrt: {sorted(unknown)}")
        mask = np.zeros(len(self.nodes), dtype=bool)
        for name in wrt:
            mask[self.input_ids[name]] = True
        for i, node in enumerate(self.nodes):
            if node.args and any(mask[a] for a in node.args):
                mask[i] = True
        self._needed_cache[wrt] = mask
        return mask


class Sym:
    """Handle to a node under construction; supports +, -, * and unary -."""

    __slots__ = ("builder", "idx", "shape")

    def __init__(self, builder: "Builder", idx: int, shape: Shape):
        self.builder = builder
        self.idx = idx
        self.shape = shape

    def __add__(self, other: "Sym") -> "Sym":
        return add(self, other)

    def __sub__(self, other: "Sym") -> "Sym":
        return sub(self, other)

    def __mul__(self, other: "Sym") -> "Sym":
        return mul(self, other)

    def __neg__(self) -> "Sym":
        return neg(self)


class Builder:
    """Accumulates nodes; topological order falls out of construction order."""

    def __init__(self):
        self._nodes: list[Node] = []
        self._inputs: dict[str, int] = {}

    def _emit(self, op: str, args: tuple[int, ...], meta, shape: Shape) -> Sym:
        self._nodes.append(Node(op, args, meta, tuple(shape)))
        return Sym(self, len(self._nodes) - 1, tuple(shape))

    def input(self, name: str, shape: Sequence[int]) -> Sym:
        if name in self._inputs:
            raise EngineError(f"duplicate input name {name!r}")
        sym = self._emit("input", (), name, tuple(shape))
        self._inputs[name] = sym.idx
        return sym

    def const(self, value) -> Sym:
        arr = np.asarray(value, dtype=np.float64)
        return self._emit("const", (), arr, arr.shape)

    def build(self, output: Sym) -> Program:
        if output.builder is not self:
            raise EngineError("output belongs to a different builder")
        return Program(self._nodes, dict(self._inputs), output.idx)


def trace(fn: Callable[[Mapping[str, Sym]], Sym], shapes: Mapping[str, Sequence[int]]) -> Program:
    """Record ``fn`` applied to fresh symbolic inputs with the given shapes."""
    b = Builder()
    syms = {name: b.input(name, shape) for name, shape in shapes.items()}
    return b.build(fn(syms))


def _same_builder(*syms: Sym) -> Builder:
    b = syms[0].builder
    for s in syms[1:]:
        if s.builder is not b:
            raise EngineError("cannot mix nodes from different builders")
    return b


def _check(cond: bool, op: str, msg: str) -> None:
    if not cond:
        raise ShapeError(f"{op}: {msg}")


def affine(x: Sym, w: Sym, b: Sym) -> Sym:
    bld = _same_builder(x, w, b)
    _check(len(x.shape) == 2, "affine", f"x must be 2-D, got {x.shape}")
    _check(len(w.shape) == 2, "affine", f"w must be 2-D, got {w.shape}")
    _check(len(b.shape) == 1, "affine", f"b must be 1-D, got {b.shape}")
    _check(x.shape[1] == w.shape[0], "affine", f"inner dims differ: {x.shape} @ {w.shape}")
    _check(b.shape[0] == w.shape[1], "affine", f"bias {b.shape} does not match output width {w.shape[1]}")
    return bld._emit("affine", (x.idx, w.idx, b.idx), None, (x.shape[0], w.shape[1]))


def _binary(op: str, a: Sym, b: Sym) -> Sym:
    bld = _same_builder(a, b)
    _check(a.shape == b.shape, op, f"shapes differ: {a.shape} vs {b.shape}")
    return bld._emit(op, (a.idx, b.idx), None, a.shape)


def add(a: Sym, b: Sym) -> Sym:
    return _binary("add", a, b)


def sub(a: Sym, b: Sym) -> Sym:
    return _binary("sub", a, b)


def mul(a: Sym, b: Sym) -> Sym:
    return _binary("mul", a, b)


def neg(x: Sym) -> Sym:
    return x.builder._emit("neg", (x.idx,), None, x.shape)


def scale(x: Sym, c: float) -> Sym:
    c = float(c)
    _check(math.isfinite(c), "scale", f"scale factor must be finite, got {c}")
    return x.builder._emit("scale", (x.idx,), c, x.shape)


def _unary(op: str, x: Sym) -> Sym:
    return x.builder._emit(op, (x.idx,), None, x.shape)


def tanh(x: Sym) -> Sym:
    return _unary("tanh", x)


def softplus(x: Sym) -> Sym:
    return _unary("softplus", x)


def square(x: Sym) -> Sym:
    return _unary("square", x)


def sqrt(x: Sym) -> Sym:
    return _unary("sqrt", x)


def sum_all(x: Sym) -> Sym:
    return x.builder._emit("sum", (x.idx,), x.shape, ())


def mean_all(x: Sym) -> Sym:
    _check(int(np.prod(x.shape)) > 0, "mean", "cannot average an empty tensor")
    return x.builder._emit("mean", (x.idx,), x.shape, ())


def concat(parts: Sequence[Sym], axis: int) -> Sym:
    _check(len(parts) > 0, "concat", "needs at least one part")
    bld = _same_builder(*parts)
    nd = len(parts[0].shape)
    _check(all(len(p.shape) == nd for p in parts), "concat", "rank mismatch among parts")
    _check(-nd <= axis < nd, "concat", f"axis {axis} out of range for rank {nd}")
    axis_neg = axis - nd if axis >= 0 else axis
    for p in parts[1:]:
        for d in range(nd):
            if d - nd == axis_neg:
                continue
            _check(p.shape[d] == parts[0].shape[d], "concat",
                   f"non-concat dims differ: {p.shape} vs {parts[0].shape}")
    sizes = tuple(p.shape[axis_neg] for p in parts)
    out = list(parts[0].shape)
    out[axis_neg] = sum(sizes)
    meta = (axis_neg, sizes, tuple(len(p.shape) for p in parts))
    return bld._emit("concat", tuple(p.idx for p in parts), meta, tuple(out))


def slice_axis(x: Sym, start: int, stop: int, axis: int = -1) -> Sym:
    nd = len(x.shape)
    _check(-nd <= axis < nd, "slice", f"axis {axis} out of range for rank {nd}")
    axis_neg = axis - nd if axis >= 0 else axis
    size = x.shape[axis_neg]
    _check(0 <= start < stop <= size, "slice", f"bounds [{start}:{stop}] invalid for size {size}")
    out = list(x.shape)
    out[axis_neg] = stop - start
    meta = (axis_neg, start, stop, x.shape)
    return x.builder._emit("slice", (x.idx,), meta, tuple(out))


def bcast_rows(x: Sym, rows: int) -> Sym:
    _check(len(x.shape) >= 1, "bcast_rows", "needs at least rank 1")
    _check(rows > 0, "bcast_rows", f"rows must be positive, got {rows}")
    out = x.shape[:-1] + (rows, x.shape[-1])
    return x.builder._emit("bcast_rows", (x.idx,), rows, out)


def mul_rowvec(x: Sym, w: Sym) -> Sym:
    bld = _same_builder(x, w)
    _check(len(x.shape) == 2, "mul_rowvec", f"x must be 2-D, got {x.shape}")
    _check(len(w.shape) == 1, "mul_rowvec", f"w must be 1-D, got {w.shape}")
    _check(x.shape[1] == w.shape[0], "mul_rowvec", f"widths differ: {x.shape} vs {w.shape}")
    return bld._emit("mul_rowvec", (x.idx, w.idx), None, x.shape)


def permute_rows(x: Sym, perm: Sequence[int]) -> Sym:
    _check(len(x.shape) == 2, "permute_rows", f"x must be 2-D, got {x.shape}")
    perm = np.asarray(perm, dtype=np.intp)
    _check(perm.shape == (x.shape[0],), "permute_rows",
           f"permutation length {perm.shape} does not match rows {x.shape[0]}")
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm), dtype=np.intp)
    return x.builder._emit("permute_rows", (x.idx,), (perm, inv), x.shape)


def reshape(x: Sym, shape: Sequence[int]) -> Sym:
    shape = tuple(int(s) for s in shape)
    _check(int(np.prod(shape)) == int(np.prod(x.shape)), "reshape",
           f"cannot reshape {x.shape} to {shape}")
    return x.builder._emit("reshape", (x.idx,), (x.shape, shape), shape)

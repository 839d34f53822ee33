"""Numeric rules for every graph primitive.

Conventions shared by all rules:

- Values are float64 numpy arrays. Each traced node has a *nominal* shape;
  at run time arrays may carry extra leading instance axes which every rule
  must preserve (numpy broadcasting does most of the work).
- Tangents (directional derivatives) travel alongside primal values as a
  second array, or ``None`` when structurally zero. The reverse pass runs on
  (primal, tangent) pairs as well, which is what makes second-order
  quantities (gradients of gradient norms) exact rather than re-derived.
- ``vjp(i, ...)`` returns the adjoint contribution for argument ``i``.
  Contributions may be wider than the argument (extra leading axes); the
  engine reduces them when extracting input gradients.
"""

from __future__ import annotations

import numpy as np


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _add_opt(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return a + b


def _expand_rowvec(v: np.ndarray) -> np.ndarray:
    """Insert a row axis so a nominal (m,) vector broadcasts against (..., r, m)."""
    if v.ndim > 1:
        return v.reshape(v.shape[:-1] + (1, v.shape[-1]))
    return v


def _trailing_axes(nd: int) -> tuple[int, ...]:
    return tuple(range(-nd, 0))


def _broadcast_trailing(g: np.ndarray, nominal: tuple[int, ...]) -> np.ndarray:
    """Expand a reduced adjoint back over the nominal trailing axes."""
    expanded = g.reshape(g.shape + (1,) * len(nominal))
    return np.broadcast_to(expanded, g.shape + nominal)


# --- affine: out = X @ W + b, X nominal (r, k), W (k, m), b (m,) ---

def affine_fwd(args, meta):
    x, w, b = args
    return np.matmul(x, w) + _expand_rowvec(b)


def affine_jvp(args, tans, out, meta):
    x, w, b = args
    dx, dw, db = tans
    t = None
    if dx is not None:
        t = _add_opt(t, np.matmul(dx, w))
    if dw is not None:
        t = _add_opt(t, np.matmul(x, dw))
    if db is not None:
        t = _add_opt(t, _expand_rowvec(db))
    return t


def affine_vjp(i, adj_p, adj_t, argp, argt, outp, outt, meta):
    x, w, b = argp
    dx, dw, db = argt
    if i == 0:
        wt = np.swapaxes(w, -1, -2)
        p = np.matmul(adj_p, wt)
        t = None
        if adj_t is not None:
            t = _add_opt(t, np.matmul(adj_t, wt))
        if dw is not None:
            t = _add_opt(t, np.matmul(adj_p, np.swapaxes(dw, -1, -2)))
        return p, t
    if i == 1:
        xt = np.swapaxes(x, -1, -2)
        p = np.matmul(xt, adj_p)
        t = None
        if adj_t is not None:
            t = _add_opt(t, np.matmul(xt, adj_t))
        if dx is not None:
            t = _add_opt(t, np.matmul(np.swapaxes(dx, -1, -2), adj_p))
        return p, t
    p = adj_p.sum(axis=-2)
    t = None if adj_t is None else adj_t.sum(axis=-2)
    return p, t


# --- elementwise arithmetic ---

def add_fwd(args, meta):
    return args[0] + args[1]


def add_jvp(args, tans, out, meta):
    return _add_opt(tans[0], tans[1])


def add_vjp(i, adj_p, adj_t, argp, argt, outp, outt, meta):
    return adj_p, adj_t


def sub_fwd(args, meta):
    return args[0] - args[1]


def sub_jvp(args, tans, out, meta):
    a, b = tans
    if b is None:
        return a
    if a is None:
        return -b
    return a - b


def sub_vjp(i, adj_p, adj_t, argp, argt, outp, outt, meta):
    if i == 0:
        return adj_p, adj_t
    return -adj_p, None if adj_t is None else -adj_t


def neg_fwd(args, meta):
    return -args[0]


def neg_jvp(args, tans, out, meta):
    return None if tans[0] is None else -tans[0]


def neg_vjp(i, adj_p, adj_t, argp, argt, outp, outt, meta):
    return -adj_p, None if adj_t is None else -adj_t


def mul_fwd(args, meta):
    return args[0] * args[1]


def mul_jvp(args, tans, out, meta):
    a, b = args
    da, db = tans
    t = None
    if da is not None:
        t = _add_opt(t, da * b)
    if db is not None:
        t = _add_opt(t, a * db)
    return t


def _dual_mul(ap, at, bp, bt):
    p = ap * bp
    t = None
    if at is not None:
        t = _add_opt(t, at * bp)
    if bt is not None:
        t = _add_opt(t, ap * bt)
    return p, t


def mul_vjp(i, adj_p, adj_t, argp, argt, outp, outt, meta):
    j = 1 - i
    return _dual_mul(adj_p, adj_t, argp[j], argt[j])


def scale_fwd(args, meta):
    return args[0] * meta


def scale_jvp(args, tans, out, meta):
    return None if tans[0] is None else tans[0] * meta


def scale_vjp(i, adj_p, adj_t, argp, argt, outp, outt, meta):
    return adj_p * meta, None if adj_t is None else adj_t * meta


# --- smooth nonlinearities ---

def tanh_fwd(args, meta):
    return np.tanh(args[0])


def tanh_jvp(args, tans, out, meta):
    if tans[0] is None:
        return None
    return tans[0] * (1.0 - out * out)


def tanh_vjp(i, adj_p, adj_t, argp, argt, outp, outt, meta):
    deriv_p = 1.0 - outp * outp
    deriv_t = None if outt is None else -2.0 * outp * outt
    return _dual_mul(adj_p, adj_t, deriv_p, deriv_t)


def softplus_fwd(args, meta):
    return np.logaddexp(0.0, args[0])


def softplus_jvp(args, tans, out, meta):
    if tans[0] is None:
        return None
    return tans[0] * _sigmoid(args[0])


def softplus_vjp(i, adj_p, adj_t, argp, argt, outp, outt, meta):
    s = _sigmoid(argp[0])
    st = None if argt[0] is None else s * (1.0 - s) * argt[0]
    return _dual_mul(adj_p, adj_t, s, st)


def square_fwd(args, meta):
    return args[0] * args[0]


def square_jvp(args, tans, out, meta):
    if tans[0] is None:
        return None
    return 2.0 * args[0] * tans[0]


def square_vjp(i, adj_p, adj_t, argp, argt, outp, outt, meta):
    deriv_t = None if argt[0] is None else 2.0 * argt[0]
    return _dual_mul(adj_p, adj_t, 2.0 * argp[0], deriv_t)


def sqrt_fwd(args, meta):
    return np.sqrt(args[0])


def sqrt_jvp(args, tans, out, meta):
    if tans[0] is None:
        return None
    return tans[0] * (0.5 / out)


def sqrt_vjp(i, adj_p, adj_t, argp, argt, outp, outt, meta):
    deriv_p = 0.5 / outp
    deriv_t = None if outt is None else -0.5 * outt / (outp * outp)
    return _dual_mul(adj_p, adj_t, deriv_p, deriv_t)


# --- reductions (over nominal trailing axes; meta = nominal input shape) ---

def sum_fwd(args, meta):
    nd = len(meta)
    if nd == 0:
        return args[0]
    return args[0].sum(axis=_trailing_axes(nd))


def sum_jvp(args, tans, out, meta):
    if tans[0] is None:
        return None
    return sum_fwd(tans, meta)


def sum_vjp(i, adj_p, adj_t, argp, argt, outp, outt, meta):
    p = _broadcast_trailing(adj_p, meta)
    t = None if adj_t is None else _broadcast_trailing(adj_t, meta)
    return p, t


def mean_fwd(args, meta):
    scale = 1.0 / max(1, int(np.prod(meta)))
    return sum_fwd(args, meta) * scale


def mean_jvp(args, tans, out, meta):
    if tans[0] is None:
        return None
    return mean_fwd(tans, meta)


def mean_vjp(i, adj_p, adj_t, argp, argt, outp, outt, meta):
    scale = 1.0 / max(1, int(np.prod(meta)))
    p = _broadcast_trailing(adj_p * scale, meta)
    t = None if adj_t is None else _broadcast_trailing(adj_t * scale, meta)
    return p, t


# --- structure ops ---

def _common_lead(args, nominal_ndims):
    lead = ()
    for a, nd in zip(args, nominal_ndims):
        cur = a.shape[:a.ndim - nd]
        if len(cur) > len(lead):
            lead = cur
    return lead


def concat_fwd(args, meta):
    axis, sizes, nominal_ndims = meta
    lead = _common_lead(args, nominal_ndims)
    if lead:
        args = [np.broadcast_to(a, lead + a.shape[a.ndim - nd:]) for a, nd in zip(args, nominal_ndims)]
    return np.concatenate(args, axis=axis)


def concat_jvp(args, tans, out, meta):
    if all(t is None for t in tans):
        return None
    axis, sizes, nominal_ndims = meta
    filled = [t if t is not None else np.zeros_like(np.asarray(a)) for t, a in zip(tans, args)]
    lead = _common_lead(filled, nominal_ndims)
    if lead:
        filled = [np.broadcast_to(a, lead + a.shape[a.ndim - nd:]) for a, nd in zip(filled, nominal_ndims)]
    return np.concatenate(filled, axis=axis)


def _concat_slicer(meta, i):
    axis, sizes, _ = meta
    start = sum(sizes[:i])
    stop = start + sizes[i]
    sl = [slice(None)] * (-axis)
    sl[0] = slice(start, stop)
    return (Ellipsis, *sl)


def concat_vjp(i, adj_p, adj_t, argp, argt, outp, outt, meta):
    slicer = _concat_slicer(meta, i)
    return adj_p[slicer], None if adj_t is None else adj_t[slicer]


def slice_fwd(args, meta):
    axis, start, stop, _ = meta
    sl = [slice(None)] * (-axis)
    sl[0] = slice(start, stop)
    return args[0][(Ellipsis, *sl)]


def slice_jvp(args, tans, out, meta):
    if tans[0] is None:
        return None
    return slice_fwd(tans, meta)


def slice_vjp(i, adj_p, adj_t, argp, argt, outp, outt, meta):
    axis, start, stop, nominal_in = meta
    nd = len(nominal_in)
    sl = [slice(None)] * (-axis)
    sl[0] = slice(start, stop)
    slicer = (Ellipsis, *sl)

    def embed(g):
        out = np.zeros(g.shape[:g.ndim - nd] + nominal_in)
        out[slicer] = g
        return out

    return embed(adj_p), None if adj_t is None else embed(adj_t)


def bcast_rows_fwd(args, meta):
    rows = meta
    x = args[0]
    expanded = x.reshape(x.shape[:-1] + (1, x.shape[-1]))
    return np.broadcast_to(expanded, x.shape[:-1] + (rows, x.shape[-1]))


def bcast_rows_jvp(args, tans, out, meta):
    if tans[0] is None:
        return None
    return bcast_rows_fwd(tans, meta)


def bcast_rows_vjp(i, adj_p, adj_t, argp, argt, outp, outt, meta):
    return adj_p.sum(axis=-2), None if adj_t is None else adj_t.sum(axis=-2)


def mul_rowvec_fwd(args, meta):
    x, w = args
    return x * _expand_rowvec(w)


def mul_rowvec_jvp(args, tans, out, meta):
    x, w = args
    dx, dw = tans
    t = None
    if dx is not None:
        t = _add_opt(t, dx * _expand_rowvec(w))
    if dw is not None:
        t = _add_opt(t, x * _expand_rowvec(dw))
    return t


def mul_rowvec_vjp(i, adj_p, adj_t, argp, argt, outp, outt, meta):
    x, w = argp
    dx, dw = argt
    if i == 0:
        wp = _expand_rowvec(w)
        wt = None if dw is None else _expand_rowvec(dw)
        return _dual_mul(adj_p, adj_t, wp, wt)
    p, t = _dual_mul(adj_p, adj_t, x, dx)
    return p.sum(axis=-2), None if t is None else t.sum(axis=-2)


def permute_rows_fwd(args, meta):
    perm, _ = meta
    return args[0][..., perm, :]


def permute_rows_jvp(args, tans, out, meta):
    if tans[0] is None:
        return None
    return permute_rows_fwd(tans, meta)


def permute_rows_vjp(i, adj_p, adj_t, argp, argt, outp, outt, meta):
    _, inv = meta
    return adj_p[..., inv, :], None if adj_t is None else adj_t[..., inv, :]


def reshape_fwd(args, meta):
    nominal_in, nominal_out = meta
    x = args[0]
    lead = x.shape[:x.ndim - len(nominal_in)]
    return x.reshape(lead + nominal_out)


def reshape_jvp(args, tans, out, meta):
    if tans[0] is None:
        return None
    return reshape_fwd(tans, meta)


def reshape_vjp(i, adj_p, adj_t, argp, argt, outp, outt, meta):
    nominal_in, nominal_out = meta
    nd = len(nominal_out)

    def back(g):
        return g.reshape(g.shape[:g.ndim - nd] + nominal_in)

    return back(adj_p), None if adj_t is None else back(adj_t)


class OpDef:
    __slots__ = ("name", "fwd", "jvp", "vjp")

    def __init__(self, name, fwd, jvp, vjp):
        self.name = name
        self.fwd = fwd
        self.jvp = jvp
        self.vjp = vjp


OPS: dict[str, OpDef] = {
    name: OpDef(name, f, j, v)
    for name, f, j, v in [
        ("affine", affine_fwd, affine_jvp, affine_vjp),
        ("add", add_fwd, add_jvp, add_vjp),
        ("sub", sub_fwd, sub_jvp, sub_vjp),
        ("neg", neg_fwd, neg_jvp, neg_vjp),
        ("mul", mul_fwd, mul_jvp, mul_vjp),
        ("scale", scale_fwd, scale_jvp, scale_vjp),
        ("tanh", tanh_fwd, tanh_jvp, tanh_vjp),
        ("softplus", softplus_fwd, softplus_jvp, softplus_vjp),
        ("square", square_fwd, square_jvp, square_vjp),
        ("sqrt", sqrt_fwd, sqrt_jvp, sqrt_vjp),
        ("sum", sum_fwd, sum_jvp, sum_vjp),
        ("mean", mean_fwd, mean_jvp, mean_vjp),
        ("concat", concat_fwd, concat_jvp, concat_vjp),
        ("slice", slice_fwd, slice_jvp, slice_vjp),
        ("bcast_rows", bcast_rows_fwd, bcast_rows_jvp, bcast_rows_vjp),
        ("mul_rowvec", mul_rowvec_fwd, mul_rowvec_jvp, mul_rowvec_vjp),
        ("permute_rows", permute_rows_fwd, permute_rows_jvp, permute_rows_vjp),
        ("reshape", reshape_fwd, reshape_jvp, reshape_vjp),
    ]
}

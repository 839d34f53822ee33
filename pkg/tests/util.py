"""Shared finite-difference oracles for the test suite.

These stay deliberately independent of the reverse-mode path they check:
they only ever call evaluate() (or first-order gradient(), for second-order
checks) at perturbed inputs.
"""

from __future__ import annotations

import numpy as np

from nirmtraj import engine as eg


def fd_gradient(prog, inputs, wrt, h=1e-6):
    """Central-difference gradient of a scalar program."""
    out = {}
    for name in wrt:
        base = np.asarray(inputs[name], dtype=np.float64)
        g = np.zeros_like(base)
        flat = base.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            bumped = flat.copy()
            bumped[i] = flat[i] + h
            hi = float(eg.evaluate(prog, {**inputs, name: bumped.reshape(base.shape)}))
            bumped[i] = flat[i] - h
            lo = float(eg.evaluate(prog, {**inputs, name: bumped.reshape(base.shape)}))
            gflat[i] = (hi - lo) / (2 * h)
        out[name] = g
    return out


def fd_grad_norm_gradient(prog, inputs, inner, outer, h=1e-5):
    """Central differences (over the outer inputs) of the inner gradient-norm."""

    def norm_sq(bound):
        res = eg.gradient(prog, bound, wrt=inner)
        return float(sum(np.sum(g * g) for g in res.grads.values()))

    out = {}
    for name in outer:
        base = np.asarray(inputs[name], dtype=np.float64)
        g = np.zeros_like(base)
        flat = base.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            bumped = flat.copy()
            bumped[i] = flat[i] + h
            hi = norm_sq({**inputs, name: bumped.reshape(base.shape)})
            bumped[i] = flat[i] - h
            lo = norm_sq({**inputs, name: bumped.reshape(base.shape)})
            gflat[i] = (hi - lo) / (2 * h)
        out[name] = g
    return out


def random_mlp_program(rng, sizes, n_rows=3, act=eg.tanh):
    """A small smooth network program plus matching random inputs in [-2, 2]."""
    b = eg.Builder()
    x = b.input("x", (n_rows, sizes[0]))
    h = x
    inputs = {"x": rng.uniform(-2, 2, size=(n_rows, sizes[0]))}
    for i in range(len(sizes) - 1):
        w = b.input(f"w{i}", (sizes[i], sizes[i + 1]))
        bias = b.input(f"b{i}", (sizes[i + 1],))
        inputs[f"w{i}"] = rng.uniform(-2, 2, size=(sizes[i], sizes[i + 1]))
        inputs[f"b{i}"] = rng.uniform(-2, 2, size=(sizes[i + 1],))
        h = eg.affine(h, w, bias)
        if i < len(sizes) - 2:
            h = act(h)
    return b.build(eg.mean_all(eg.square(h))), inputs

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nirmtraj import engine as eg
from nirmtraj.engine import ParameterSet

from util import fd_gradient, fd_grad_norm_gradient, random_mlp_program


def vectors(n=4, lo=-2.0, hi=2.0):
    return st.lists(st.floats(min_value=lo, max_value=hi, allow_nan=False),
                    min_size=n, max_size=n).map(lambda v: np.array(v))


# --- evaluate ---

def test_evaluate_sum_of_squares():
    prog = eg.trace(lambda s: eg.sum_all(eg.square(s["x"])), {"x": (2,)})
    assert eg.evaluate(prog, {"x": [1.0, 2.0]}) == 5.0


def test_evaluate_identity_program():
    prog = eg.trace(lambda s: s["x"], {"x": (1,)})
    assert eg.evaluate(prog, {"x": [3.0]})[0] == 3.0


def test_evaluate_annihilator():
    prog = eg.trace(lambda s: eg.scale(s["x"], 0.0), {"x": (1,)})
    assert eg.evaluate(prog, {"x": [7.0]})[0] == 0.0


def test_evaluate_missing_and_unknown_inputs():
    prog = eg.trace(lambda s: eg.sum_all(s["x"]), {"x": (2,)})
    with pytest.raises(eg.EngineError, match="missing input 'x'"):
        eg.evaluate(prog, {})
    with pytest.raises(eg.EngineError, match="unknown"):
        eg.evaluate(prog, {"x": np.zeros(2), "y": np.zeros(2)})


def test_shape_mismatch_identifies_operation():
    b = eg.Builder()
    x = b.input("x", (2, 3))
    w = b.input("w", (4, 5))
    with pytest.raises(eg.ShapeError, match="affine"):
        eg.affine(x, w, b.input("b", (5,)))


def test_binding_shape_mismatch_rejected():
    prog = eg.trace(lambda s: eg.sum_all(s["x"]), {"x": (2, 3)})
    with pytest.raises(eg.ShapeError, match="'x'"):
        eg.evaluate(prog, {"x": np.zeros((2, 4))})


# --- first-order gradients ---

def test_gradient_square():
    prog = eg.trace(lambda s: eg.sum_all(eg.square(s["w"])), {"w": ()})
    res = eg.gradient(prog, {"w": 3.0}, wrt=["w"])
    assert res.grads["w"] == pytest.approx(6.0)


def test_gradient_of_constant_function_is_zero():
    def f(s):
        b = s["w"].builder
        return eg.sum_all(b.const(np.array([4.0])))

    b = eg.Builder()
    w = b.input("w", (3,))
    prog = b.build(f({"w": w}))
    res = eg.gradient(prog, {"w": np.ones(3)}, wrt=["w"])
    assert np.array_equal(res.grads["w"], np.zeros(3))


def test_gradient_of_sum_is_ones():
    prog = eg.trace(lambda s: eg.sum_all(s["w"]), {"w": (3,)})
    res = eg.gradient(prog, {"w": np.ones(3)}, wrt=["w"])
    assert np.array_equal(res.grads["w"], np.ones(3))


def test_gradient_rejects_nonscalar_output():
    prog = eg.trace(lambda s: eg.square(s["x"]), {"x": (2,)})
    with pytest.raises(eg.EngineError, match="scalar"):
        eg.gradient(prog, {"x": np.ones(2)}, wrt=["x"])


def _primitive_cases():
    rng = np.random.default_rng(7)

    def u(*shape):
        return rng.uniform(-2, 2, size=shape)

    cases = {
        "affine": (lambda s: eg.mean_all(eg.square(eg.affine(s["x"], s["w"], s["b"]))),
                   {"x": u(3, 4), "w": u(4, 5), "b": u(5)}),
        "add": (lambda s: eg.sum_all(eg.square(eg.add(s["a"], s["b"]))), {"a": u(3, 2), "b": u(3, 2)}),
        "sub": (lambda s: eg.sum_all(eg.square(eg.sub(s["a"], s["b"]))), {"a": u(3, 2), "b": u(3, 2)}),
        "neg": (lambda s: eg.sum_all(eg.square(eg.neg(s["a"]))), {"a": u(4)}),
        "mul": (lambda s: eg.sum_all(eg.square(eg.mul(s["a"], s["b"]))), {"a": u(5), "b": u(5)}),
        "scale": (lambda s: eg.sum_all(eg.square(eg.scale(s["a"], -1.7))), {"a": u(5)}),
        "tanh": (lambda s: eg.sum_all(eg.square(eg.tanh(s["a"]))), {"a": u(6)}),
        "softplus": (lambda s: eg.sum_all(eg.square(eg.softplus(s["a"]))), {"a": u(6)}),
        "square": (lambda s: eg.sum_all(eg.square(eg.square(s["a"]))), {"a": u(6)}),
        "sqrt": (lambda s: eg.sum_all(eg.square(eg.sqrt(s["a"]))),
                 {"a": rng.uniform(0.5, 2, size=6)}),
        "mean": (lambda s: eg.square(eg.mean_all(eg.square(s["a"]))), {"a": u(3, 2)}),
        "concat": (lambda s: eg.sum_all(eg.square(eg.concat([s["a"], s["b"]], axis=1))),
                   {"a": u(3, 2), "b": u(3, 4)}),
        "concat0": (lambda s: eg.sum_all(eg.square(eg.concat([s["a"], s["b"]], axis=0))),
                    {"a": u(2, 3), "b": u(4, 3)}),
        "slice": (lambda s: eg.sum_all(eg.square(eg.slice_axis(s["a"], 1, 3, axis=1))), {"a": u(3, 4)}),
        "bcast_rows": (lambda s: eg.sum_all(eg.square(eg.mul(eg.bcast_rows(s["a"], 4), s["m"]))),
                       {"a": u(3), "m": u(4, 3)}),
        "mul_rowvec": (lambda s: eg.sum_all(eg.square(eg.mul_rowvec(s["a"], s["w"]))),
                       {"a": u(3, 4), "w": u(4)}),
        "permute_rows": (lambda s: eg.sum_all(eg.square(eg.mul(
            eg.permute_rows(s["a"], [2, 0, 3, 1]), s["m"]))), {"a": u(4, 2), "m": u(4, 2)}),
        "reshape": (lambda s: eg.sum_all(eg.square(eg.reshape(s["a"], (2, 6)))), {"a": u(3, 4)}),
    }
    return cases


@pytest.mark.parametrize("name", sorted(_primitive_cases()))
def test_primitive_gradient_matches_finite_differences(name):
    fn, inputs = _primitive_cases()[name]
    prog = eg.trace(fn, {k: np.asarray(v).shape for k, v in inputs.items()})
    res = eg.gradient(prog, inputs, wrt=list(inputs))
    fd = fd_gradient(prog, inputs, list(inputs), h=1e-6)
    for k in inputs:
        np.testing.assert_allclose(res.grads[k], fd[k], rtol=1e-5, atol=1e-8)


def test_gradient_linearity():
    rng = np.random.default_rng(3)
    x = rng.uniform(-2, 2, size=5)

    def f_expr(s):
        return eg.sum_all(eg.square(s["x"]))

    def g_expr(s):
        return eg.sum_all(eg.mul(eg.tanh(s["x"]), s["x"]))

    a, bco = 2.5, -1.25
    prog_f = eg.trace(f_expr, {"x": (5,)})
    prog_g = eg.trace(g_expr, {"x": (5,)})
    prog_c = eg.trace(lambda s: eg.add(eg.scale(f_expr(s), a), eg.scale(g_expr(s), bco)), {"x": (5,)})
    gf = eg.gradient(prog_f, {"x": x}, wrt=["x"]).grads["x"]
    gg = eg.gradient(prog_g, {"x": x}, wrt=["x"]).grads["x"]
    gc = eg.gradient(prog_c, {"x": x}, wrt=["x"]).grads["x"]
    np.testing.assert_allclose(gc, a * gf + bco * gg, rtol=1e-12)


def test_replay_is_bit_identical():
    rng = np.random.default_rng(11)
    prog, inputs = random_mlp_program(rng, [4, 8, 1])
    v1 = eg.evaluate(prog, inputs)
    v2 = eg.evaluate(prog, inputs)
    assert np.array_equal(v1, v2)
    g1 = eg.gradient(prog, inputs, wrt=["w0", "b0"]).grads
    g2 = eg.gradient(prog, inputs, wrt=["w0", "b0"]).grads
    assert all(np.array_equal(g1[k], g2[k]) for k in g1)


@given(vectors(5))
@settings(max_examples=25, deadline=None)
def test_sum_gradient_is_ones_property(x):
    prog = eg.trace(lambda s: eg.sum_all(s["x"]), {"x": (5,)})
    res = eg.gradient(prog, {"x": x}, wrt=["x"])
    assert np.array_equal(res.grads["x"], np.ones(5))


@given(vectors(4), st.floats(min_value=-3, max_value=3, allow_nan=False))
@settings(max_examples=25, deadline=None)
def test_scale_commutes_with_gradient(x, c):
    base = eg.trace(lambda s: eg.sum_all(eg.square(s["x"])), {"x": (4,)})
    scaled = eg.trace(lambda s: eg.scale(eg.sum_all(eg.square(s["x"])), c), {"x": (4,)})
    gb = eg.gradient(base, {"x": x}, wrt=["x"]).grads["x"]
    gs = eg.gradient(scaled, {"x": x}, wrt=["x"]).grads["x"]
    np.testing.assert_allclose(gs, c * gb, rtol=1e-12, atol=1e-12)


# --- second order ---

def test_grad_norm_gradient_zero_at_stationary_point():
    # f(th, w) = (w*th - 1)^2 at th=1, w=1: inner gradient is 0, so the
    # penalty sits at a stationary point and its outer gradient vanishes.
    prog = eg.trace(lambda s: eg.square(eg.sub(eg.mul(s["w"], s["th"]), s["one"])),
                    {"w": (), "th": (), "one": ()})
    out = eg.gradient_of_gradient_norm(prog, {"w": 1.0, "th": 1.0, "one": 1.0},
                                       inner=["w"], outer=["th"])
    assert out["th"] == pytest.approx(0.0, abs=1e-14)


def test_grad_norm_gradient_bilinear():
    # f(th, w) = w*th: |df/dw|^2 = th^2, gradient w.r.t. th is 2*th.
    prog = eg.trace(lambda s: eg.mul(s["w"], s["th"]), {"w": (), "th": ()})
    for th in (0.4, -1.3, 2.0):
        out = eg.gradient_of_gradient_norm(prog, {"w": 0.77, "th": th}, inner=["w"], outer=["th"])
        assert out["th"] == pytest.approx(2 * th, rel=1e-12)


def test_grad_norm_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    prog, inputs = random_mlp_program(rng, [3, 6, 4, 1])
    inner = ["w1", "b1"]
    outer = ["w0", "b0", "w2", "b2"]
    got = eg.gradient_of_gradient_norm(prog, inputs, inner=inner, outer=outer)
    fd = fd_grad_norm_gradient(prog, inputs, inner=inner, outer=outer, h=1e-5)
    for k in outer:
        np.testing.assert_allclose(got[k], fd[k], rtol=1e-4, atol=1e-7)


def test_grad_norm_gradient_overlapping_groups():
    # inner == outer exercises the symmetric Hessian path: d/dw of (df/dw)^2
    # for f = w^3 is 2*(3w^2)*(6w) = 36 w^3.
    prog = eg.trace(lambda s: eg.mul(eg.square(s["w"]), s["w"]), {"w": ()})
    out = eg.gradient_of_gradient_norm(prog, {"w": 1.5}, inner=["w"], outer=["w"])
    assert out["w"] == pytest.approx(36 * 1.5 ** 3, rel=1e-12)


def test_evaluate_with_tangent_directional_derivative():
    prog = eg.trace(lambda s: eg.sum_all(eg.square(s["x"])), {"x": (3,)})
    x = np.array([1.0, -2.0, 0.5])
    d = np.array([0.3, 0.1, -0.2])
    val, tan = eg.evaluate_with_tangent(prog, {"x": x}, {"x": d})
    assert val == pytest.approx(np.sum(x ** 2))
    assert tan == pytest.approx(2 * np.sum(x * d), rel=1e-12)


# --- instance batching ---

def test_instance_batched_evaluate_matches_loop():
    rng = np.random.default_rng(13)
    prog, inputs = random_mlp_program(rng, [4, 6, 1])
    X = rng.uniform(-2, 2, size=(5, 3, 4))
    batched = eg.evaluate(prog, {**inputs, "x": X})
    singles = np.array([eg.evaluate(prog, {**inputs, "x": X[i]}) for i in range(5)])
    np.testing.assert_array_equal(batched, singles)


def test_per_sample_gradients_match_loop():
    rng = np.random.default_rng(17)
    prog, inputs = random_mlp_program(rng, [4, 6, 1])
    X = rng.uniform(-2, 2, size=(5, 3, 4))
    res = eg.gradient(prog, {**inputs, "x": X}, wrt=["w0", "b1"], per_sample=True)
    for i in range(5):
        single = eg.gradient(prog, {**inputs, "x": X[i]}, wrt=["w0", "b1"])
        np.testing.assert_array_equal(res.grads["w0"][i], single.grads["w0"])
        np.testing.assert_array_equal(res.grads["b1"][i], single.grads["b1"])


def test_summed_shared_gradient_matches_loop_sum():
    rng = np.random.default_rng(19)
    prog, inputs = random_mlp_program(rng, [4, 6, 1])
    X = rng.uniform(-2, 2, size=(5, 3, 4))
    res = eg.gradient(prog, {**inputs, "x": X}, wrt=["w0"])
    total = sum(eg.gradient(prog, {**inputs, "x": X[i]}, wrt=["w0"]).grads["w0"] for i in range(5))
    np.testing.assert_allclose(res.grads["w0"], total, rtol=1e-12)


def test_per_sample_tangent_seeding_matches_loop():
    # Batched tangent seeds on a shared input reproduce per-sample
    # Hessian-vector products from individual seeded passes.
    rng = np.random.default_rng(23)
    prog, inputs = random_mlp_program(rng, [3, 5, 1])
    X = rng.uniform(-2, 2, size=(4, 3, 3))
    seeds = rng.uniform(-1, 1, size=(4,) + inputs["w0"].shape)
    res = eg.gradient(prog, {**inputs, "x": X}, wrt=["b1"],
                      tangents={"w0": seeds}, per_sample=True)
    for i in range(4):
        single = eg.gradient(prog, {**inputs, "x": X[i]}, wrt=["b1"], tangents={"w0": seeds[i]})
        np.testing.assert_allclose(res.grad_tangents["b1"][i], single.grad_tangents["b1"],
                                   rtol=1e-10, atol=1e-12)


# --- ParameterSet ---

def test_parameter_set_flatten_roundtrip():
    ps = ParameterSet({"a": np.arange(6, dtype=float).reshape(2, 3), "b": np.array([7.0])})
    flat = ps.flatten()
    assert flat.shape == (7,)
    back = ps.unflatten(flat)
    assert back.names() == ps.names()
    assert all(np.array_equal(back[k], ps[k]) for k in ps)


def test_parameter_set_unflatten_rejects_wrong_length():
    ps = ParameterSet({"a": np.zeros(3)})
    with pytest.raises(ValueError):
        ps.unflatten(np.zeros(4))


def test_parameter_set_names_unique_and_ordered():
    ps = ParameterSet()
    ps["b"] = np.zeros(1)
    ps["a"] = np.zeros(2)
    ps["b"] = np.ones(1)  # overwrite keeps position and uniqueness
    assert ps.names() == ["b", "a"]
    assert ps["b"][0] == 1.0

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nirmtraj import engine as eg
from nirmtraj import models as md

from util import fd_gradient

CFG = md.ArchitectureConfig()
SMALL = md.ArchitectureConfig(d_z=3, decoder_hidden=(8, 8), encoder_hidden=(8,),
                              critic_hidden=(8,), n_points=4, obs_dim=5)


def test_architecture_config_validation():
    with pytest.raises(ValueError):
        md.ArchitectureConfig(n_points=1)
    with pytest.raises(ValueError):
        md.ArchitectureConfig(horizon=0.0)
    with pytest.raises(ValueError):
        md.ArchitectureConfig(decoder_hidden=(0,))


def test_grid_times_default():
    times = md.grid_times(CFG)
    assert times[0] == pytest.approx(0.1875)
    assert times[1] == pytest.approx(0.375)
    assert times[-1] == pytest.approx(3.0)
    assert len(times) == 16
    np.testing.assert_allclose(np.diff(times), times[0])


@given(st.integers(min_value=0, max_value=10_000), st.floats(min_value=0, max_value=10))
@settings(max_examples=20, deadline=None)
def test_decode_anchored_at_origin(seed, v):
    w = md.init_decoder_params(SMALL, seed)
    z = np.random.default_rng(seed).normal(size=SMALL.d_z)
    assert md.decode(w, 0.0, z, v, SMALL) == (0.0, 0.0)


def test_decode_deterministic():
    w = md.init_decoder_params(CFG, 0)
    z = np.zeros(CFG.d_z)
    a = md.decode(w, 1.0, z, 5.0, CFG)
    b = md.decode(w, 1.0, z, 5.0, CFG)
    assert a == b
    assert all(np.isfinite(a))


def test_decode_rejects_time_outside_horizon():
    w = md.init_decoder_params(SMALL, 0)
    z = np.zeros(SMALL.d_z)
    with pytest.raises(ValueError, match="query time"):
        md.decode(w, SMALL.horizon + 0.1, z, 1.0, SMALL)
    with pytest.raises(ValueError, match="query time"):
        md.decode(w, -0.1, z, 1.0, SMALL)


def test_decode_rejects_speed_outside_range():
    w = md.init_decoder_params(SMALL, 0)
    with pytest.raises(ValueError, match="speed"):
        md.decode(w, 1.0, np.zeros(SMALL.d_z), SMALL.v_max + 1, SMALL)


def test_decode_grid_equals_pointwise_decode_exactly():
    w = md.init_decoder_params(CFG, 3)
    z = np.random.default_rng(3).normal(size=CFG.d_z)
    traj = md.decode_grid(w, z, 4.0, CFG)
    for k, tk in enumerate(traj.times):
        assert tuple(traj.points[k]) == md.decode(w, tk, z, 4.0, CFG)


def test_decode_grid_first_point_at_horizon_over_n():
    w = md.init_decoder_params(SMALL, 1)
    z = np.ones(SMALL.d_z)
    traj = md.decode_grid(w, z, 2.0, SMALL)
    assert traj.times[0] == pytest.approx(SMALL.horizon / SMALL.n_points)
    assert tuple(traj.points[0]) == md.decode(w, traj.times[0], z, 2.0, SMALL)


def test_decode_grid_batch_matches_single():
    rng = np.random.default_rng(9)
    w = md.init_decoder_params(SMALL, 2)
    Z = rng.normal(size=(6, SMALL.d_z))
    V = rng.uniform(0, SMALL.v_max, size=6)
    batch = md.decode_grid_batch(w, Z, V, SMALL)
    for i in range(6):
        single = md.decode_grid_batch(w, Z[i:i + 1], V[i:i + 1], SMALL)[0]
        np.testing.assert_allclose(batch[i], single, rtol=1e-12, atol=1e-14)


def test_velocity_matches_finite_difference_of_decode():
    rng = np.random.default_rng(21)
    w = md.init_decoder_params(CFG, 4)
    eps = 1e-5
    for _ in range(10):
        z = rng.normal(size=CFG.d_z)
        v = rng.uniform(0, CFG.v_max)
        t = rng.uniform(0.1, CFG.horizon - 0.1)
        der = md.decode_derivatives(w, t, z, v, CFG)
        hi = np.array(md.decode(w, t + eps, z, v, CFG))
        lo = np.array(md.decode(w, t - eps, z, v, CFG))
        np.testing.assert_allclose(der.velocity[0], (hi - lo) / (2 * eps), rtol=1e-4, atol=1e-9)


def test_acceleration_matches_finite_difference_of_velocity():
    rng = np.random.default_rng(22)
    w = md.init_decoder_params(CFG, 5)
    eps = 1e-5
    for _ in range(10):
        z = rng.normal(size=CFG.d_z)
        v = rng.uniform(0, CFG.v_max)
        t = rng.uniform(0.1, CFG.horizon - 0.1)
        der = md.decode_derivatives(w, t, z, v, CFG)
        hi = md.decode_derivatives(w, t + eps, z, v, CFG).velocity[0]
        lo = md.decode_derivatives(w, t - eps, z, v, CFG).velocity[0]
        np.testing.assert_allclose(der.acceleration[0], (hi - lo) / (2 * eps), rtol=1e-3, atol=1e-8)


def test_constant_decoder_has_zero_derivatives():
    w = md.init_decoder_params(SMALL, 0)
    w["dec.w1"] = np.zeros_like(w["dec.w1"])
    w["dec.b1"] = np.zeros_like(w["dec.b1"])
    der = md.decode_derivatives(w, [0.5, 1.5], np.ones(SMALL.d_z), 3.0, SMALL)
    np.testing.assert_array_equal(der.velocity, 0.0)
    np.testing.assert_array_equal(der.acceleration, 0.0)


def test_encode_zero_parameters_gives_zero_latent():
    theta = md.init_encoder_params(SMALL, 0).zeros_like()
    obs = np.random.default_rng(0).normal(size=SMALL.obs_dim)
    np.testing.assert_array_equal(md.encode(theta, obs, SMALL), np.zeros(SMALL.d_z))


def test_encode_deterministic_and_batch_consistent():
    theta = md.init_encoder_params(SMALL, 7)
    obs = np.random.default_rng(7).normal(size=SMALL.obs_dim)
    a = md.encode(theta, obs, SMALL)
    b = md.encode(theta, obs, SMALL)
    assert np.array_equal(a, b)
    np.testing.assert_array_equal(md.encode_batch(theta, obs[None, :], SMALL)[0], a)


def test_encode_rejects_dimension_mismatch():
    theta = md.init_encoder_params(SMALL, 0)
    with pytest.raises(ValueError, match="obs_dim"):
        md.encode(theta, np.zeros(SMALL.obs_dim + 1), SMALL)


def test_encode_norm_gradient_matches_finite_differences():
    theta = md.init_encoder_params(SMALL, 3)
    obs = np.random.default_rng(3).normal(size=(1, SMALL.obs_dim))

    b = eg.Builder()
    p = md.param_syms(b, theta)
    o = b.input("obs", (1, SMALL.obs_dim))
    prog = b.build(eg.sum_all(eg.square(md.encoder_graph(p, o, SMALL))))
    inputs = {**theta.as_dict(), "obs": obs}
    res = eg.gradient(prog, inputs, wrt=theta.names())
    fd = fd_gradient(prog, inputs, theta.names(), h=1e-6)
    for k in theta.names():
        np.testing.assert_allclose(res.grads[k], fd[k], rtol=1e-5, atol=1e-9)


def test_critic_zero_parameters_scores_zero():
    cp = md.init_critic_params(SMALL, 0).zeros_like()
    pts = np.random.default_rng(0).normal(size=2 * SMALL.n_points)
    assert md.critic_score(cp, pts, 1.0, SMALL) == 0.0


def test_critic_finite_on_wide_input_range():
    cp = md.init_critic_params(SMALL, 1)
    rng = np.random.default_rng(1)
    for _ in range(20):
        pts = rng.uniform(-100, 100, size=2 * SMALL.n_points)
        v = rng.uniform(-100, 100)
        assert np.isfinite(md.critic_score(cp, pts, v, SMALL))


def test_critic_rejects_wrong_length():
    cp = md.init_critic_params(SMALL, 0)
    with pytest.raises(ValueError, match="flattened"):
        md.critic_score(cp, np.zeros(2 * SMALL.n_points + 3), 1.0, SMALL)


def test_critic_input_gradient_matches_finite_differences():
    cp = md.init_critic_params(SMALL, 4)
    rng = np.random.default_rng(4)
    x = rng.normal(size=(1, 2 * SMALL.n_points + 1))

    b = eg.Builder()
    p = md.param_syms(b, cp)
    xin = b.input("x", (1, 2 * SMALL.n_points + 1))
    prog = b.build(eg.sum_all(md.critic_graph(p, xin, SMALL)))
    inputs = {**cp.as_dict(), "x": x}
    res = eg.gradient(prog, inputs, wrt=["x"])
    fd = fd_gradient(prog, inputs, ["x"], h=1e-6)
    np.testing.assert_allclose(res.grads["x"], fd["x"], rtol=1e-5, atol=1e-9)


def test_parameter_init_deterministic_and_scaled():
    a = md.init_decoder_params(CFG, 123)
    b = md.init_decoder_params(CFG, 123)
    assert a.allclose(b) and all(np.array_equal(a[k], b[k]) for k in a)
    c = md.init_decoder_params(CFG, 124)
    assert not a.allclose(c)
    fan_in = 2 + CFG.d_z
    assert np.abs(a["dec.w0"]).max() <= 1.0 / np.sqrt(fan_in)


def test_trajectory_validation():
    with pytest.raises(ValueError, match="strictly increasing"):
        md.Trajectory(points=np.zeros((2, 2)), times=np.array([1.0, 1.0]), condition_speed=1.0)
    with pytest.raises(ValueError, match="points"):
        md.Trajectory(points=np.zeros((2, 3)), times=np.array([1.0, 2.0]), condition_speed=1.0)

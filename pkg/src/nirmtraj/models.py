"""Parametric function families: trajectory decoder, observation encoder, critic.

The decoder maps (query time, latent vector, condition speed) to a
longitudinal/lateral displacement and is anchored so its output at t=0 is
exactly the origin. All networks use smooth activations only, so time
derivatives and gradient-norm penalties are well defined to second order.

Model evaluation is pure: parameters plus inputs determine outputs exactly,
and recorded programs are cached per input shape so repeated calls replay
rather than retrace.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import engine as eg
from .engine import Builder, ParameterSet, Program, Sym

# Roles used to derive independent parameter-init streams from one seed.
_ROLE_DECODER = 0
_ROLE_ENCODER = 1
_ROLE_CRITIC = 2
_ROLE_HEAD = 3

# A latent vector is a plain float64 vector of dimension d_z.
LatentVector = np.ndarray


@dataclass(frozen=True)
class ArchitectureConfig:
    """Sizes and physical ranges shared by all models."""

    d_z: int = 8
    decoder_hidden: tuple[int, ...] = (64, 64, 64)
    encoder_hidden: tuple[int, ...] = (64, 64)
    critic_hidden: tuple[int, ...] = (64, 64)
    horizon: float = 3.0
    n_points: int = 16
    v_max: float = 10.0
    obs_dim: int = 17

    def __post_init__(self):
        if self.d_z <= 0 or self.obs_dim <= 0:
            raise ValueError("d_z and obs_dim must be positive")
        for widths in (self.decoder_hidden, self.encoder_hidden, self.critic_hidden):
            if not widths or any(w <= 0 for w in widths):
                raise ValueError(f"layer widths must be positive, got {widths}")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if self.n_points < 2:
            raise ValueError("n_points must be at least 2")
        if self.v_max <= 0:
            raise ValueError("v_max must be positive")


@dataclass
class Trajectory:
    """Displacement points at strictly increasing query times, plus the condition speed."""

    points: np.ndarray
    times: np.ndarray
    condition_speed: float

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.times = np.asarray(self.times, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 2:
            raise ValueError(f"points must be (N, 2), got {self.points.shape}")
        if self.times.shape != (self.points.shape[0],):
            raise ValueError("times must match the number of points")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    def flat_points(self) -> np.ndarray:
        """Fixed interleaved order: long_1, lat_1, ..., long_N, lat_N."""
        return self.points.reshape(-1)


@dataclass
class TrajectoryDerivatives:
    velocity: np.ndarray
    acceleration: np.ndarray
    times: np.ndarray


def grid_times(cfg: ArchitectureConfig) -> np.ndarray:
    """Equal-interval query times t_k = k * horizon / N for k = 1..N."""
    k = np.arange(1, cfg.n_points + 1, dtype=np.float64)
    return k * (cfg.horizon / cfg.n_points)


# --- parameter initialization ---

def _init_mlp(prefix: str, sizes: list[int], rng: np.random.Generator) -> ParameterSet:
    params = ParameterSet()
    for i in range(len(sizes) - 1):
        fan_in = sizes[i]
        s = 1.0 / np.sqrt(fan_in)
        params[f"{prefix}.w{i}"] = rng.uniform(-s, s, size=(fan_in, sizes[i + 1]))
        params[f"{prefix}.b{i}"] = rng.uniform(-s, s, size=(sizes[i + 1],))
    return params


def _rng(seed: int, role: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(role,))))


def init_decoder_params(cfg: ArchitectureConfig, seed: int) -> ParameterSet:
    sizes = [2 + cfg.d_z, *cfg.decoder_hidden, 2]
    return _init_mlp("dec", sizes, _rng(seed, _ROLE_DECODER))


def init_encoder_params(cfg: ArchitectureConfig, seed: int) -> ParameterSet:
    sizes = [cfg.obs_dim, *cfg.encoder_hidden, cfg.d_z]
    return _init_mlp("enc", sizes, _rng(seed, _ROLE_ENCODER))


def init_critic_params(cfg: ArchitectureConfig, seed: int) -> ParameterSet:
    sizes = [2 * cfg.n_points + 1, *cfg.critic_hidden, 1]
    return _init_mlp("cri", sizes, _rng(seed, _ROLE_CRITIC))


def init_head_params(cfg: ArchitectureConfig, seed: int, out_dim: int, in_dim: int | None = None) -> ParameterSet:
    """Linear output head (used by the direct point-regression variant)."""
    sizes = [in_dim if in_dim is not None else cfg.encoder_hidden[-1], out_dim]
    return _init_mlp("head", sizes, _rng(seed, _ROLE_HEAD))


# --- graph builders (composed by the objectives in losses/pipelines) ---

def param_syms(b: Builder, params: ParameterSet) -> dict[str, Sym]:
    return {name: b.input(name, value.shape) for name, value in params.items()}


def _mlp_graph(p: dict[str, Sym], x: Sym, prefix: str, n_layers: int, act) -> Sym:
    h = x
    for i in range(n_layers):
        h = eg.affine(h, p[f"{prefix}.w{i}"], p[f"{prefix}.b{i}"])
        if i < n_layers - 1:
            h = act(h)
    return h


def decoder_graph(b: Builder, p: dict[str, Sym], t: Sym, z: Sym, v: Sym,
                  cfg: ArchitectureConfig) -> Sym:
    """Anchored decoder: rows of t (n_t, 1) against a single (z, v); output (n_t, 2).

    The output is f(t, z, v) - f(0, z, v), so displacement at t=0 is exactly zero.
    """
    n_t = t.shape[0]
    n_layers = len(cfg.decoder_hidden) + 1

    def stack(t_col: Sym, rows: int) -> Sym:
        zr = eg.bcast_rows(z, rows)
        vr = eg.bcast_rows(eg.scale(v, 1.0 / cfg.v_max), rows)
        return eg.concat([t_col, zr, vr], axis=1)

    x = stack(eg.scale(t, 1.0 / cfg.horizon), n_t)
    f_t = _mlp_graph(p, x, "dec", n_layers, eg.tanh)
    x0 = stack(b.const(np.zeros((1, 1))), 1)
    f_0 = _mlp_graph(p, x0, "dec", n_layers, eg.tanh)
    anchor = eg.bcast_rows(eg.reshape(f_0, (2,)), n_t)
    return eg.sub(f_t, anchor)


def encoder_graph(p: dict[str, Sym], obs: Sym, cfg: ArchitectureConfig) -> Sym:
    """Observation rows (n, obs_dim) -> latent rows (n, d_z). Speed column normalized."""
    norm = np.ones(cfg.obs_dim)
    norm[-1] = 1.0 / cfg.v_max
    scaled = eg.mul_rowvec(obs, obs.builder.const(norm))
    return _mlp_graph(p, scaled, "enc", len(cfg.encoder_hidden) + 1, eg.tanh)


def critic_graph(p: dict[str, Sym], x: Sym, cfg: ArchitectureConfig) -> Sym:
    """Flattened trajectory rows plus speed (n, 2N+1) -> unbounded scores (n, 1)."""
    scale_in = np.full(2 * cfg.n_points + 1, 1.0 / (cfg.horizon * cfg.v_max))
    scale_in[-1] = 1.0 / cfg.v_max
    scaled = eg.mul_rowvec(x, x.builder.const(scale_in))
    return _mlp_graph(p, scaled, "cri", len(cfg.critic_hidden) + 1, eg.softplus)


def decoder_grid_graph(b: Builder, p: dict[str, Sym], z: Sym, v: Sym,
                       cfg: ArchitectureConfig) -> Sym:
    """Grid decode for a batch of latents: z (n, d_z), v (n, 1) -> points (n, 2N).

    Output rows are interleaved long_1, lat_1, ..., long_N, lat_N, matching
    Trajectory.flat_points. Query times enter as constants here; use
    decode_derivatives for anything that differentiates in time.
    """
    n = z.shape[0]
    n_points = cfg.n_points
    n_layers = len(cfg.decoder_hidden) + 1
    v_n = eg.scale(v, 1.0 / cfg.v_max)
    t_norm = grid_times(cfg) / cfg.horizon
    blocks = [eg.concat([b.const(np.full((n, 1), tk)), z, v_n], axis=1) for tk in t_norm]
    x = eg.concat(blocks, axis=0)
    f_t = _mlp_graph(p, x, "dec", n_layers, eg.tanh)
    x0 = eg.concat([b.const(np.zeros((n, 1))), z, v_n], axis=1)
    f_0 = _mlp_graph(p, x0, "dec", n_layers, eg.tanh)
    anchored = eg.sub(f_t, eg.concat([f_0] * n_points, axis=0))
    # Time-major blocks -> sample-major rows, then flatten per sample.
    idx = np.arange(n_points * n).reshape(n, n_points)
    perm = (idx % n_points) * n + idx // n_points
    ordered = eg.permute_rows(anchored, perm.reshape(-1))
    return eg.reshape(ordered, (n, 2 * n_points))


# --- cached single-purpose programs ---

_PROGRAMS: dict[tuple, Program] = {}


def _decoder_point_program(cfg: ArchitectureConfig, n_t: int) -> Program:
    key = ("dec_point", cfg, n_t)
    if key not in _PROGRAMS:
        b = Builder()
        params = init_decoder_params(cfg, 0)
        p = param_syms(b, params)
        t = b.input("t", (n_t, 1))
        z = b.input("z", (cfg.d_z,))
        v = b.input("v", (1,))
        _PROGRAMS[key] = b.build(decoder_graph(b, p, t, z, v, cfg))
    return _PROGRAMS[key]


def _decoder_sum_component_program(cfg: ArchitectureConfig, n_t: int, col: int) -> Program:
    key = ("dec_sum", cfg, n_t, col)
    if key not in _PROGRAMS:
        b = Builder()
        p = param_syms(b, init_decoder_params(cfg, 0))
        t = b.input("t", (n_t, 1))
        z = b.input("z", (cfg.d_z,))
        v = b.input("v", (1,))
        out = decoder_graph(b, p, t, z, v, cfg)
        _PROGRAMS[key] = b.build(eg.sum_all(eg.slice_axis(out, col, col + 1, axis=1)))
    return _PROGRAMS[key]


def _decoder_flat_program(cfg: ArchitectureConfig, n: int) -> Program:
    key = ("dec_flat", cfg, n)
    if key not in _PROGRAMS:
        b = Builder()
        p = param_syms(b, init_decoder_params(cfg, 0))
        z = b.input("z", (n, cfg.d_z))
        v = b.input("v", (n, 1))
        _PROGRAMS[key] = b.build(decoder_grid_graph(b, p, z, v, cfg))
    return _PROGRAMS[key]


def _encoder_program(cfg: ArchitectureConfig, n: int) -> Program:
    key = ("enc", cfg, n)
    if key not in _PROGRAMS:
        b = Builder()
        p = param_syms(b, init_encoder_params(cfg, 0))
        obs = b.input("obs", (n, cfg.obs_dim))
        _PROGRAMS[key] = b.build(encoder_graph(p, obs, cfg))
    return _PROGRAMS[key]


def _critic_program(cfg: ArchitectureConfig, n: int) -> Program:
    key = ("cri", cfg, n)
    if key not in _PROGRAMS:
        b = Builder()
        p = param_syms(b, init_critic_params(cfg, 0))
        x = b.input("x", (n, 2 * cfg.n_points + 1))
        _PROGRAMS[key] = b.build(critic_graph(p, x, cfg))
    return _PROGRAMS[key]


# --- public operations ---

def _check_time(t: np.ndarray, cfg: ArchitectureConfig) -> None:
    if np.any(t < 0.0) or np.any(t > cfg.horizon):
        raise ValueError(f"query time outside [0, {cfg.horizon}]: {t[(t < 0) | (t > cfg.horizon)]}")


def _check_speed(v: float, cfg: ArchitectureConfig) -> None:
    if not 0.0 <= v <= cfg.v_max:
        raise ValueError(f"condition speed {v} outside [0, {cfg.v_max}]")


def decode(w: ParameterSet, t: float, z: np.ndarray, v: float,
           cfg: ArchitectureConfig) -> tuple[float, float]:
    """Displacement (longitudinal, lateral) at query time t; exactly (0, 0) at t=0."""
    t_arr = np.array([[float(t)]])
    _check_time(t_arr, cfg)
    _check_speed(v, cfg)
    prog = _decoder_point_program(cfg, 1)
    out = eg.evaluate(prog, {**w.as_dict(), "t": t_arr, "z": z, "v": [float(v)]})
    return float(out[0, 0]), float(out[0, 1])


def decode_grid(w: ParameterSet, z: np.ndarray, v: float, cfg: ArchitectureConfig) -> Trajectory:
    """Decode at the equal-interval grid t_k = k * horizon / N.

    Evaluates the same single-point program once per grid time, so every point
    equals the corresponding decode() call bit for bit.
    """
    _check_speed(v, cfg)
    times = grid_times(cfg)
    prog = _decoder_point_program(cfg, 1)
    base = {**w.as_dict(), "z": z, "v": [float(v)]}
    pts = np.vstack([eg.evaluate(prog, {**base, "t": [[tk]]}) for tk in times])
    return Trajectory(points=pts, times=times, condition_speed=float(v))


def decode_grid_batch(w: ParameterSet, Z: np.ndarray, V: np.ndarray,
                      cfg: ArchitectureConfig) -> np.ndarray:
    """Vectorized grid decode: Z (B, d_z), V (B,) -> points (B, N, 2).

    Shares the traced layout used inside the training objectives, so
    predictions here are bit-identical to the ones those objectives see.
    """
    Z = np.asarray(Z, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    prog = _decoder_flat_program(cfg, Z.shape[0])
    flat = eg.evaluate(prog, {**w.as_dict(), "z": Z, "v": V[:, None]})
    return flat.reshape(Z.shape[0], cfg.n_points, 2)


def decode_derivatives(w: ParameterSet, t, z: np.ndarray, v: float,
                       cfg: ArchitectureConfig) -> TrajectoryDerivatives:
    """Analytic time derivatives of the decoder output at the query times.

    Velocity is the first partial derivative in t and acceleration the second,
    both taken through the recorded computation (no finite differences).
    """
    t_arr = np.atleast_1d(np.asarray(t, dtype=np.float64))
    _check_time(t_arr, cfg)
    _check_speed(v, cfg)
    n_t = t_arr.shape[0]
    inputs = {**w.as_dict(), "t": t_arr[:, None], "z": z, "v": [float(v)]}
    seed = {"t": np.ones((n_t, 1))}
    vel = np.empty((n_t, 2))
    acc = np.empty((n_t, 2))
    for col in range(2):
        prog = _decoder_sum_component_program(cfg, n_t, col)
        res = eg.gradient(prog, inputs, wrt=["t"], tangents=seed)
        vel[:, col] = res.grads["t"][:, 0]
        acc[:, col] = res.grad_tangents["t"][:, 0]
    return TrajectoryDerivatives(velocity=vel, acceleration=acc, times=t_arr)


def encode(theta: ParameterSet, obs: np.ndarray, cfg: ArchitectureConfig) -> LatentVector:
    """Observation vector -> latent vector of dimension d_z."""
    obs = np.asarray(obs, dtype=np.float64)
    if obs.shape != (cfg.obs_dim,):
        raise ValueError(f"observation shape {obs.shape} does not match obs_dim {cfg.obs_dim}")
    prog = _encoder_program(cfg, 1)
    return eg.evaluate(prog, {**theta.as_dict(), "obs": obs[None, :]})[0]


def encode_batch(theta: ParameterSet, obs: np.ndarray, cfg: ArchitectureConfig) -> np.ndarray:
    obs = np.asarray(obs, dtype=np.float64)
    if obs.ndim != 2 or obs.shape[1] != cfg.obs_dim:
        raise ValueError(f"observation batch shape {obs.shape} does not match obs_dim {cfg.obs_dim}")
    prog = _encoder_program(cfg, obs.shape[0])
    return eg.evaluate(prog, {**theta.as_dict(), "obs": obs})


def critic_score(params: ParameterSet, traj_points: np.ndarray, v: float,
                 cfg: ArchitectureConfig) -> float:
    """Unbounded critic score of a flattened trajectory with its condition speed."""
    traj_points = np.asarray(traj_points, dtype=np.float64).reshape(-1)
    if traj_points.shape != (2 * cfg.n_points,):
        raise ValueError(
            f"expected {2 * cfg.n_points} flattened coordinates, got {traj_points.shape[0]}")
    x = np.concatenate([traj_points, [float(v)]])[None, :]
    prog = _critic_program(cfg, 1)
    return float(eg.evaluate(prog, {**params.as_dict(), "x": x})[0, 0])

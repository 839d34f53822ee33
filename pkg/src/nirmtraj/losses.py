"""Objectives: weighted trajectory risk, environment-wise gradient-norm
penalties, dummy-classifier penalties, adversarial losses, and the latent
inference objective.

Each objective exists twice: as a concrete value function on arrays (the
surface the tests pin down) and as a recorded program that the training
pipelines differentiate. Per-sample terms reduce in fixed sample order, so
every value is bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import engine as eg
from . import models as md
from .engine import Builder, ParameterSet, Program
from .models import ArchitectureConfig, Trajectory


@dataclass(frozen=True)
class RiskConfig:
    """Lateral error weight and the penalty weights used across objectives."""

    alpha: float = 5.0
    lambda_irm: float = 1.0
    lambda_z: float = 1e-3

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.lambda_irm < 0 or self.lambda_z < 0:
            raise ValueError("penalty weights must be non-negative")


@dataclass
class EnvironmentBatch:
    """All samples of one environment, stacked into arrays.

    observations (n, obs_dim), speeds (n,), truth_points (n, N, 2), and the
    shared query-time grid (N,).
    """

    environment_id: int
    observations: np.ndarray
    speeds: np.ndarray
    truth_points: np.ndarray
    times: np.ndarray

    def __post_init__(self):
        self.observations = np.asarray(self.observations, dtype=np.float64)
        self.speeds = np.asarray(self.speeds, dtype=np.float64)
        self.truth_points = np.asarray(self.truth_points, dtype=np.float64)
        self.times = np.asarray(self.times, dtype=np.float64)
        n = self.observations.shape[0]
        if n == 0:
            raise ValueError("environment batch must be non-empty")
        if self.speeds.shape != (n,) or self.truth_points.shape[:1] != (n,):
            raise ValueError("per-sample arrays disagree on sample count")
        if self.truth_points.shape[1] != self.times.shape[0]:
            raise ValueError("trajectory points do not match the time grid")

    @property
    def n_samples(self) -> int:
        return self.observations.shape[0]

    def truth_flat(self) -> np.ndarray:
        return self.truth_points.reshape(self.n_samples, -1)

    def subset(self, idx: np.ndarray) -> "EnvironmentBatch":
        return EnvironmentBatch(self.environment_id, self.observations[idx],
                                self.speeds[idx], self.truth_points[idx], self.times)


def alpha_pattern(alpha: float, n_points: int) -> np.ndarray:
    """Per-coordinate weights (1, alpha, 1, alpha, ...) over interleaved long/lat."""
    w = np.ones(2 * n_points)
    w[1::2] = alpha
    return w


# --- concrete value functions ---

def risk(predicted: Trajectory, truth: Trajectory, cfg: RiskConfig) -> float:
    """Sum over grid points of squared longitudinal error plus alpha times squared lateral error."""
    if predicted.n_points != truth.n_points or not np.array_equal(predicted.times, truth.times):
        raise ValueError("trajectories are not on the same time grid")
    d = predicted.points - truth.points
    return float(np.sum(d[:, 0] ** 2) + cfg.alpha * np.sum(d[:, 1] ** 2))


def _risk_rows(pred_flat: np.ndarray, truth_flat: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Per-sample weighted squared error, fixed reduction order."""
    d = pred_flat - truth_flat
    return (d * d * weights).sum(axis=-1)


def erm_objective(theta: ParameterSet, w: ParameterSet, batches: list[EnvironmentBatch],
                  cfg: RiskConfig, arch: ArchitectureConfig) -> float:
    """Mean per-sample risk over all samples pooled across environments."""
    if not batches:
        raise ValueError("need at least one environment batch")
    weights = alpha_pattern(cfg.alpha, arch.n_points)
    total = 0.0
    count = 0
    for batch in batches:
        z = md.encode_batch(theta, batch.observations, arch)
        pred = md.decode_grid_batch(w, z, batch.speeds, arch).reshape(batch.n_samples, -1)
        total += float(_risk_rows(pred, batch.truth_flat(), weights).sum())
        count += batch.n_samples
    return total / count


def nirm_penalty(theta: ParameterSet, w0: ParameterSet, batch: EnvironmentBatch,
                 cfg: RiskConfig, arch: ArchitectureConfig) -> float:
    """Squared norm of the decoder-parameter gradient of the batch risk, at w0."""
    prog = env_risk_program(arch, batch.n_samples)
    inputs = _env_risk_inputs(theta, w0, batch, cfg, arch)
    return eg.grad_norm_sq(prog, inputs, wrt=list(w0.names()))


def nirm_objective(theta: ParameterSet, w0: ParameterSet, batches: list[EnvironmentBatch],
                   cfg: RiskConfig, arch: ArchitectureConfig) -> float:
    """Sum over environments of mean risk plus lambda times the gradient-norm penalty.

    With lambda_irm = 0 this equals the sum of per-environment mean risks; for
    equal-sized environments that is len(batches) * erm_objective.
    """
    if not batches:
        raise ValueError("need at least one environment batch")
    total = 0.0
    for batch in batches:
        prog = env_risk_program(arch, batch.n_samples)
        inputs = _env_risk_inputs(theta, w0, batch, cfg, arch)
        if cfg.lambda_irm > 0:
            res = eg.gradient(prog, inputs, wrt=list(w0.names()))
            pen = float(sum(np.sum(g * g) for g in res.grads.values()))
            total += float(res.value) + cfg.lambda_irm * pen
        else:
            total += float(eg.evaluate(prog, inputs))
    return total


def irmv1_penalty(preds: np.ndarray, truths: np.ndarray, weights: np.ndarray | None = None) -> float:
    """Squared derivative of the weighted squared-error risk in a scalar output
    multiplier, evaluated at multiplier 1: (sum of 2 * w * (pred - truth) * pred)^2."""
    preds = np.atleast_2d(np.asarray(preds, dtype=np.float64))
    truths = np.atleast_2d(np.asarray(truths, dtype=np.float64))
    if preds.shape != truths.shape:
        raise ValueError(f"prediction shape {preds.shape} does not match truth {truths.shape}")
    if weights is None:
        weights = np.ones(preds.shape[1])
    g = float(np.sum(2.0 * weights * (preds - truths) * preds))
    return g * g


def gradient_penalty(critic_params: ParameterSet, xhat: np.ndarray,
                     arch: ArchitectureConfig, program: Program | None = None) -> float:
    """Mean over rows of (||input gradient of the critic score|| - 1)^2."""
    prog = program if program is not None else critic_sum_program(arch, xhat.shape[0])
    grads = eg.gradient(prog, {**critic_params.as_dict(), "x": xhat}, wrt=["x"]).grads["x"]
    norms = np.sqrt((grads * grads).sum(axis=1))
    return float(np.mean((norms - 1.0) ** 2))


def wgan_critic_loss(critic_params: ParameterSet, real: tuple[np.ndarray, np.ndarray],
                     fake: tuple[np.ndarray, np.ndarray], gp_weight: float,
                     arch: ArchitectureConfig, eps: np.ndarray,
                     program: Program | None = None) -> float:
    """Wasserstein critic loss with gradient penalty on per-sample interpolates.

    real/fake are (flat_points (n, 2N), speeds (n,)) pairs; eps (n,) holds the
    per-sample interpolation draws in [0, 1]. ``program`` swaps in a different
    row-sum scorer over the same "x" input (the tests use a linear one).
    """
    xr = _critic_input(real, arch)
    xf = _critic_input(fake, arch)
    if xr.shape != xf.shape:
        raise ValueError("real and fake batches must have equal size")
    n = xr.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    eps = np.asarray(eps, dtype=np.float64).reshape(n, 1)
    prog = program if program is not None else critic_sum_program(arch, n)
    cp = critic_params.as_dict()
    w_term = float(eg.evaluate(prog, {**cp, "x": xf}) - eg.evaluate(prog, {**cp, "x": xr})) / n
    xhat = eps * xr + (1.0 - eps) * xf
    return w_term + gp_weight * gradient_penalty(critic_params, xhat, arch, prog)


def wgan_generator_loss(critic_params: ParameterSet, fake: tuple[np.ndarray, np.ndarray],
                        arch: ArchitectureConfig) -> float:
    """Negative mean critic score of the generated batch."""
    xf = _critic_input(fake, arch)
    if xf.shape[0] == 0:
        raise ValueError("empty batch")
    prog = critic_sum_program(arch, xf.shape[0])
    return -float(eg.evaluate(prog, {**critic_params.as_dict(), "x": xf})) / xf.shape[0]


def latent_inference_objective(z: np.ndarray, w0: ParameterSet, truth: Trajectory,
                               v: float, cfg: RiskConfig, arch: ArchitectureConfig) -> float:
    """Reconstruction risk plus the decoder gradient-norm penalty plus the latent norm term."""
    prog = latent_risk_program(arch, 1)
    inputs = {**w0.as_dict(),
              "z": np.asarray(z, dtype=np.float64),
              "v": [float(v)],
              "truth": truth.flat_points(),
              "risk_w": alpha_pattern(cfg.alpha, arch.n_points)}
    if cfg.lambda_irm > 0:
        res = eg.gradient(prog, inputs, wrt=list(w0.names()))
        value = float(res.value)
        value += cfg.lambda_irm * float(sum(np.sum(g * g) for g in res.grads.values()))
    else:
        value = float(eg.evaluate(prog, inputs))
    return value + cfg.lambda_z * float(np.sum(np.asarray(z) ** 2))


def _critic_input(batch: tuple[np.ndarray, np.ndarray], arch: ArchitectureConfig) -> np.ndarray:
    pts, speeds = batch
    pts = np.asarray(pts, dtype=np.float64)
    speeds = np.asarray(speeds, dtype=np.float64)
    if pts.ndim == 3:
        pts = pts.reshape(pts.shape[0], -1)
    if pts.shape[1] != 2 * arch.n_points:
        raise ValueError(f"expected {2 * arch.n_points} coordinates per row, got {pts.shape[1]}")
    return np.concatenate([pts, speeds[:, None]], axis=1)


def stack_trajectories(trajs: list[Trajectory]) -> tuple[np.ndarray, np.ndarray]:
    pts = np.stack([t.flat_points() for t in trajs])
    speeds = np.array([t.condition_speed for t in trajs])
    return pts, speeds


# --- recorded objective programs (differentiated by the pipelines) ---

_PROGRAMS: dict[tuple, Program] = {}


def _risk_expr(pred_flat, truth_flat, risk_w, n: int):
    """Mean over samples of the weighted squared error (graph expression)."""
    d = eg.sub(pred_flat, truth_flat)
    return eg.scale(eg.sum_all(eg.mul_rowvec(eg.square(d), risk_w)), 1.0 / n)


def env_risk_program(arch: ArchitectureConfig, n: int) -> Program:
    """Mean risk of encode->decode-grid predictions over an n-sample environment.

    Inputs: encoder params, decoder params, obs (n, obs_dim), v (n, 1),
    truth (n, 2N), risk_w (2N,). Output: scalar.
    """
    key = ("env_risk", arch, n)
    if key not in _PROGRAMS:
        b = Builder()
        p_enc = md.param_syms(b, md.init_encoder_params(arch, 0))
        p_dec = md.param_syms(b, md.init_decoder_params(arch, 0))
        obs = b.input("obs", (n, arch.obs_dim))
        v = b.input("v", (n, 1))
        truth = b.input("truth", (n, 2 * arch.n_points))
        risk_w = b.input("risk_w", (2 * arch.n_points,))
        z = md.encoder_graph(p_enc, obs, arch)
        pred = md.decoder_grid_graph(b, p_dec, z, v, arch)
        _PROGRAMS[key] = b.build(_risk_expr(pred, truth, risk_w, n))
    return _PROGRAMS[key]


def _env_risk_inputs(theta: ParameterSet, w: ParameterSet, batch: EnvironmentBatch,
                     cfg: RiskConfig, arch: ArchitectureConfig) -> dict:
    return {**theta.as_dict(), **w.as_dict(),
            "obs": batch.observations,
            "v": batch.speeds[:, None],
            "truth": batch.truth_flat(),
            "risk_w": alpha_pattern(cfg.alpha, arch.n_points)}


def latent_risk_program(arch: ArchitectureConfig, n_instances: int = 1) -> Program:
    """Single-sample reconstruction risk of decode-grid against a target.

    Traced per-sample (z (d_z,), v (1,), truth (2N,)); instance-batch the call
    to process many samples at once.
    """
    key = ("latent_risk", arch)
    if key not in _PROGRAMS:
        b = Builder()
        p_dec = md.param_syms(b, md.init_decoder_params(arch, 0))
        z = b.input("z", (arch.d_z,))
        v = b.input("v", (1,))
        truth = b.input("truth", (2 * arch.n_points,))
        risk_w = b.input("risk_w", (2 * arch.n_points,))
        z_row = eg.reshape(z, (1, arch.d_z))
        v_row = eg.reshape(v, (1, 1))
        pred = md.decoder_grid_graph(b, p_dec, z_row, v_row, arch)
        d = eg.sub(eg.reshape(pred, (2 * arch.n_points,)), truth)
        _PROGRAMS[key] = b.build(eg.sum_all(eg.mul(eg.square(d), risk_w)))
    return _PROGRAMS[key]


def point_regression_program(arch: ArchitectureConfig, n: int) -> Program:
    """Direct point regression: encoder backbone plus a linear head to the grid points.

    Output: mean risk plus lam times the dummy-classifier penalty, so one
    program serves both the plain and penalized regressions (bind lam).
    """
    key = ("pointreg", arch, n)
    if key not in _PROGRAMS:
        b = Builder()
        p_enc = md.param_syms(b, md.init_encoder_params(arch, 0))
        p_head = md.param_syms(b, md.init_head_params(arch, 0, 2 * arch.n_points, arch.d_z))
        obs = b.input("obs", (n, arch.obs_dim))
        truth = b.input("truth", (n, 2 * arch.n_points))
        risk_w = b.input("risk_w", (2 * arch.n_points,))
        lam = b.input("lam", ())
        feats = md.encoder_graph(p_enc, obs, arch)
        pred = eg.affine(feats, p_head["head.w0"], p_head["head.b0"])
        obj = _risk_expr(pred, truth, risk_w, n)
        pen = eg.square(eg.sum_all(eg.scale(eg.mul_rowvec(eg.mul(eg.sub(pred, truth), pred), risk_w), 2.0)))
        _PROGRAMS[key] = b.build(eg.add(obj, eg.mul(pen, lam)))
    return _PROGRAMS[key]


def latent_regression_program(arch: ArchitectureConfig, n: int) -> Program:
    """Latent-target regression of the encoder with the dummy-classifier penalty.

    Output: mean squared latent error plus lam times the penalty (bind lam 0
    for the plain pretraining regression).
    """
    key = ("latreg", arch, n)
    if key not in _PROGRAMS:
        b = Builder()
        p_enc = md.param_syms(b, md.init_encoder_params(arch, 0))
        obs = b.input("obs", (n, arch.obs_dim))
        zhat = b.input("zhat", (n, arch.d_z))
        lam = b.input("lam", ())
        phi = md.encoder_graph(p_enc, obs, arch)
        d = eg.sub(phi, zhat)
        mse = eg.scale(eg.sum_all(eg.square(d)), 1.0 / n)
        pen = eg.square(eg.scale(eg.sum_all(eg.mul(d, phi)), 2.0))
        _PROGRAMS[key] = b.build(eg.add(mse, eg.mul(pen, lam)))
    return _PROGRAMS[key]


def critic_sum_program(arch: ArchitectureConfig, n: int) -> Program:
    """Sum of critic scores over input rows (n, 2N+1); rows are independent."""
    key = ("critic_sum", arch, n)
    if key not in _PROGRAMS:
        b = Builder()
        p = md.param_syms(b, md.init_critic_params(arch, 0))
        x = b.input("x", (n, 2 * arch.n_points + 1))
        _PROGRAMS[key] = b.build(eg.sum_all(md.critic_graph(p, x, arch)))
    return _PROGRAMS[key]


def generator_score_program(arch: ArchitectureConfig, n: int) -> Program:
    """Mean critic score of decoded fake trajectories; inputs z (n, d_z), v (n, 1)."""
    key = ("gen_score", arch, n)
    if key not in _PROGRAMS:
        b = Builder()
        p_dec = md.param_syms(b, md.init_decoder_params(arch, 0))
        p_cri = md.param_syms(b, md.init_critic_params(arch, 0))
        z = b.input("z", (n, arch.d_z))
        v = b.input("v", (n, 1))
        pts = md.decoder_grid_graph(b, p_dec, z, v, arch)
        x = eg.concat([pts, v], axis=1)
        _PROGRAMS[key] = b.build(eg.mean_all(md.critic_graph(p_cri, x, arch)))
    return _PROGRAMS[key]

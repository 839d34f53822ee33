"""Staged training: adversarial decoder pretraining, latent inference plus
encoder regression, and fixed-decoder fine-tuning with the gradient-norm
penalty, together with every ablation variant.

All randomness flows from TrainConfig.seed through named substreams, so two
runs with the same config produce bit-identical loss curves and checkpoints.
A run aborts on the first non-finite loss instead of clipping.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import engine as eg
from . import losses as ls
from . import models as md
from .checkpoint import load_checkpoint, save_checkpoint
from .engine import ParameterSet
from .losses import EnvironmentBatch, RiskConfig
from .models import ArchitectureConfig

VARIANTS = ("ours", "e2e_nt", "e2e_nt_nirm", "random_nt_nirm", "traj_irm", "latent_irmv1")

# Seed-substream keys, one per consumer of randomness.
_KEY_GAN = 10
_KEY_REGRESS = 12
_KEY_FINETUNE = 13
_KEY_E2E = 14
_KEY_COVERAGE = 15


class PipelineError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    """Every knob of a training run; hashable and JSON-serializable."""

    seed: int = 0
    variant: str = "ours"
    batch_size: int = 32
    lr: float = 3e-4
    lr_latent: float = 0.1
    gan_steps: int = 20_000
    critic_per_gen: int = 5
    latent_steps: int = 200
    regress_steps: int = 5_000
    finetune_steps: int = 5_000
    gp_weight: float = 10.0
    warmup_frac: float = 0.2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    gan_beta1: float = 0.5
    gan_beta2: float = 0.9
    log_every: int = 100
    latent_chunk: int = 512
    risk: RiskConfig = RiskConfig()
    arch: ArchitectureConfig = ArchitectureConfig()

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        for name in ("batch_size", "critic_per_gen", "latent_steps", "regress_steps",
                     "finetune_steps", "log_every", "latent_chunk"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.gan_steps < 0:
            raise ValueError("gan_steps must be non-negative")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ValueError("warmup_frac must be in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "TrainConfig":
        payload = dict(payload)
        if "risk" in payload:
            payload["risk"] = RiskConfig(**payload["risk"])
        if "arch" in payload:
            arch = dict(payload["arch"])
            for key in ("decoder_hidden", "encoder_hidden", "critic_hidden"):
                if key in arch:
                    arch[key] = tuple(arch[key])
            payload["arch"] = ArchitectureConfig(**arch)
        return cls(**payload)


@dataclass
class RunRecord:
    """What a training run produced: config snapshot, curves, checkpoints, timings."""

    variant: str
    config: dict
    curves: list[tuple[str, int, str, float]] = field(default_factory=list)
    checkpoints: dict[str, str] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict)
    excluded_samples: dict[str, list[int]] = field(default_factory=dict)
    notes: dict[str, float] = field(default_factory=dict)

    def log(self, stage: str, step: int, metric: str, value: float) -> None:
        value = float(value)
        if not math.isfinite(value):
            raise PipelineError(f"non-finite {metric} at {stage} step {step}")
        self.curves.append((stage, step, metric, value))

    def save(self, out_dir: str | Path) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        payload = {
            "variant": self.variant,
            "config": self.config,
            "checkpoints": self.checkpoints,
            "timings": {k: round(v, 3) for k, v in self.timings.items()},
            "excluded_samples": self.excluded_samples,
            "notes": self.notes,
            "n_curve_points": len(self.curves),
        }
        (out_dir / "run_record.json").write_text(json.dumps(payload, indent=2, sort_keys=True))
        lines = ["stage,step,metric,value"]
        lines += [f"{s},{i},{m},{v!r}" for s, i, m, v in self.curves]
        (out_dir / "curves.csv").write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, out_dir: str | Path) -> "RunRecord":
        out_dir = Path(out_dir)
        payload = json.loads((out_dir / "run_record.json").read_text())
        rec = cls(variant=payload["variant"], config=payload["config"],
                  checkpoints=payload["checkpoints"], timings=payload["timings"],
                  excluded_samples=payload["excluded_samples"], notes=payload["notes"])
        curves_path = out_dir / "curves.csv"
        if curves_path.exists():
            for line in curves_path.read_text().splitlines()[1:]:
                stage, step, metric, value = line.split(",")
                rec.curves.append((stage, int(step), metric, float(value)))
        return rec


class Adam:
    """Adaptive moment estimation on a flat parameter vector (bias-corrected)."""

    def __init__(self, size: int, lr: float, beta1: float, beta2: float, eps: float):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, x: np.ndarray, g: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.v = self.beta2 * self.v + (1 - self.beta2) * g * g
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return x - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _rng(seed: int, key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(key,))))


def _flat(params: ParameterSet, grads: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([np.asarray(grads[name]).reshape(-1) for name in params.names()])


def _grad_norm_sq_value(grads: dict[str, np.ndarray]) -> float:
    return float(sum(np.sum(g * g) for g in grads.values()))


def params_digest(params: ParameterSet) -> str:
    h = hashlib.sha256()
    for name, value in params.items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(value, dtype="<f8").tobytes())
    return h.hexdigest()


# --- stage 1: adversarial decoder training ---

def train_decoder_gan(batches: list[EnvironmentBatch], cfg: TrainConfig,
                      record: RunRecord | None = None) -> tuple[ParameterSet, ParameterSet]:
    """Alternating critic/generator updates on pooled training trajectories.

    Latents draw from a standard normal, condition speeds uniformly from
    [0, v_max]; the returned generator parameters become the frozen decoder.
    """
    arch, rc = cfg.arch, cfg.risk
    record = record if record is not None else RunRecord(cfg.variant, cfg.to_dict())
    w = md.init_decoder_params(arch, cfg.seed)
    critic = md.init_critic_params(arch, cfg.seed)
    if cfg.gan_steps == 0:
        return w, critic

    real_pts = np.vstack([b.truth_flat() for b in batches])
    real_v = np.concatenate([b.speeds for b in batches])
    n_real = real_pts.shape[0]
    B = cfg.batch_size
    rng = _rng(cfg.seed, _KEY_GAN)

    csum = ls.critic_sum_program(arch, B)
    gen_prog = ls.generator_score_program(arch, B)
    cnames = critic.names()
    wnames = w.names()
    adam_c = Adam(critic.n_params, cfg.lr, cfg.gan_beta1, cfg.gan_beta2, cfg.adam_eps)
    adam_w = Adam(w.n_params, cfg.lr, cfg.gan_beta1, cfg.gan_beta2, cfg.adam_eps)

    try:
        for step in range(cfg.gan_steps):
            for _ in range(cfg.critic_per_gen):
                idx = rng.choice(n_real, size=B, replace=False)
                z = rng.standard_normal((B, arch.d_z))
                vt = rng.uniform(0.0, arch.v_max, size=B)
                fake_pts = md.decode_grid_batch(w, z, vt, arch).reshape(B, -1)
                xr = np.concatenate([real_pts[idx], real_v[idx][:, None]], axis=1)
                xf = np.concatenate([fake_pts, vt[:, None]], axis=1)
                eps = rng.uniform(size=(B, 1))
                xhat = eps * xr + (1.0 - eps) * xf

                cp = critic.as_dict()
                res_f = eg.gradient(csum, {**cp, "x": xf}, wrt=cnames)
                res_r = eg.gradient(csum, {**cp, "x": xr}, wrt=cnames)
                gx = eg.gradient(csum, {**cp, "x": xhat}, wrt=["x"]).grads["x"]
                norms = np.sqrt((gx * gx).sum(axis=1))
                coeff = np.where(norms > 1e-12, 2.0 * (norms - 1.0) / np.maximum(norms, 1e-12), 0.0)
                seeded = eg.gradient(csum, {**cp, "x": xhat}, wrt=cnames,
                                     tangents={"x": coeff[:, None] * gx})
                g_total = {
                    name: (res_f.grads[name] - res_r.grads[name]) / B
                    + (cfg.gp_weight / B) * seeded.grad_tangents[name]
                    for name in cnames
                }
                critic = critic.unflatten(adam_c.step(critic.flatten(), _flat(critic, g_total)))
                critic_loss = (float(res_f.value - res_r.value) / B
                               + cfg.gp_weight * float(np.mean((norms - 1.0) ** 2)))

            z = rng.standard_normal((B, arch.d_z))
            vt = rng.uniform(0.0, arch.v_max, size=B)
            res_g = eg.gradient(gen_prog, {**w.as_dict(), **critic.as_dict(),
                                           "z": z, "v": vt[:, None]}, wrt=wnames)
            g_w = {name: -res_g.grads[name] for name in wnames}
            w = w.unflatten(adam_w.step(w.flatten(), _flat(w, g_w)))

            if step % cfg.log_every == 0 or step == cfg.gan_steps - 1:
                record.log("gan", step, "critic_loss", critic_loss)
                record.log("gan", step, "generator_loss", -float(res_g.value))
    except eg.EngineError as err:
        raise PipelineError(f"adversarial stage diverged at step {step}: {err}") from err
    return w, critic


# --- stage 2a: latent inference ---

def infer_latents(w0: ParameterSet, batches: list[EnvironmentBatch], cfg: TrainConfig,
                  record: RunRecord | None = None) -> dict[int, np.ndarray]:
    """Per-sample latent targets by gradient descent on the latent objective.

    Every sample starts at z = 0 and keeps its best-objective iterate, so the
    returned objective never exceeds the one at initialization. Samples whose
    objective goes non-finite are flagged, frozen, and reported.
    """
    arch, rc = cfg.arch, cfg.risk
    record = record if record is not None else RunRecord(cfg.variant, cfg.to_dict())
    prog = ls.latent_risk_program(arch)
    wnames = w0.names()
    risk_w = ls.alpha_pattern(rc.alpha, arch.n_points)
    out: dict[int, np.ndarray] = {}

    for batch in batches:
        n = batch.n_samples
        z_best = np.zeros((n, arch.d_z))
        excluded: list[int] = []
        for lo in range(0, n, cfg.latent_chunk):
            hi = min(n, lo + cfg.latent_chunk)
            m = hi - lo
            Z = np.zeros((m, arch.d_z))
            truth = batch.truth_flat()[lo:hi]
            v_col = batch.speeds[lo:hi, None]
            adam = Adam(m * arch.d_z, cfg.lr_latent, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
            best_obj = np.full(m, np.inf)
            best_z = Z.copy()
            alive = np.ones(m, dtype=bool)

            def objective_and_grad(Z):
                inputs = {**w0.as_dict(), "z": Z, "v": v_col, "truth": truth, "risk_w": risk_w}
                if rc.lambda_irm > 0:
                    res_w = eg.gradient(prog, inputs, wrt=wnames, per_sample=True,
                                        check_finite=False)
                    pen = sum((g.reshape(m, -1) ** 2).sum(axis=1) for g in res_w.grads.values())
                    res_z = eg.gradient(prog, inputs, wrt=["z"], tangents=res_w.grads,
                                        check_finite=False)
                    g = (res_z.grads["z"] + 2.0 * rc.lambda_irm * res_z.grad_tangents["z"]
                         + 2.0 * rc.lambda_z * Z)
                else:
                    res_z = eg.gradient(prog, inputs, wrt=["z"], check_finite=False)
                    pen = np.zeros(m)
                    g = res_z.grads["z"] + 2.0 * rc.lambda_z * Z
                obj = res_z.value + rc.lambda_irm * pen + rc.lambda_z * (Z ** 2).sum(axis=1)
                return obj, g

            for step in range(cfg.latent_steps):
                obj, g = objective_and_grad(Z)
                bad = ~np.isfinite(obj)
                if bad.any():
                    alive &= ~bad
                    g = np.where(alive[:, None], g, 0.0)
                    obj = np.where(alive, obj, np.inf)
                improve = alive & (obj < best_obj)
                best_obj = np.where(improve, obj, best_obj)
                best_z[improve] = Z[improve]
                Z = adam.step(Z.reshape(-1), g.reshape(-1)).reshape(m, arch.d_z)
            obj, _ = objective_and_grad(Z)
            improve = alive & np.isfinite(obj) & (obj < best_obj)
            best_obj = np.where(improve, obj, best_obj)
            best_z[improve] = Z[improve]

            z_best[lo:hi] = best_z
            excluded.extend((lo + np.nonzero(~alive | ~np.isfinite(best_obj))[0]).tolist())
            record.log("latent_inference", hi, f"env{batch.environment_id}_mean_objective",
                       float(np.mean(best_obj[np.isfinite(best_obj)])))
        if excluded:
            record.excluded_samples[str(batch.environment_id)] = sorted(set(excluded))
        out[batch.environment_id] = z_best
    return out


# --- stage 2b: encoder pretraining ---

def pretrain_encoder(zhat: dict[int, np.ndarray], batches: list[EnvironmentBatch],
                     cfg: TrainConfig, record: RunRecord | None = None) -> ParameterSet:
    """Fit the encoder to the inferred latent targets by mean squared error."""
    arch = cfg.arch
    record = record if record is not None else RunRecord(cfg.variant, cfg.to_dict())
    theta = md.init_encoder_params(arch, cfg.seed)
    obs, targets = _regression_pairs(zhat, batches, record)
    n = obs.shape[0]
    B = min(cfg.batch_size, n)
    prog = ls.latent_regression_program(arch, B)
    tnames = theta.names()
    adam = Adam(theta.n_params, cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    rng = _rng(cfg.seed, _KEY_REGRESS)

    try:
        mse = float("nan")
        for step in range(cfg.regress_steps):
            idx = rng.choice(n, size=B, replace=False)
            res = eg.gradient(prog, {**theta.as_dict(), "obs": obs[idx],
                                     "zhat": targets[idx], "lam": 0.0}, wrt=tnames)
            theta = theta.unflatten(adam.step(theta.flatten(), _flat(theta, res.grads)))
            mse = float(res.value)
            if step % cfg.log_every == 0 or step == cfg.regress_steps - 1:
                record.log("encoder_pretrain", step, "latent_mse", mse)
        record.notes["final_pretrain_mse"] = mse
    except eg.EngineError as err:
        raise PipelineError(f"encoder pretraining diverged at step {step}: {err}") from err
    return theta


def _regression_pairs(zhat, batches, record):
    obs_parts, target_parts = [], []
    for batch in batches:
        targets = zhat[batch.environment_id]
        keep = np.ones(batch.n_samples, dtype=bool)
        for i in record.excluded_samples.get(str(batch.environment_id), []):
            keep[i] = False
        obs_parts.append(batch.observations[keep])
        target_parts.append(targets[keep])
    return np.vstack(obs_parts), np.vstack(target_parts)


# --- stage 3: fixed-decoder fine-tuning (and its free-decoder sibling) ---

def finetune_encoder_nirm(theta0: ParameterSet, w0: ParameterSet,
                          batches: list[EnvironmentBatch], cfg: TrainConfig,
                          record: RunRecord | None = None, stage: str = "finetune",
                          free_decoder: bool = False, steps: int | None = None,
                          rng_key: int = _KEY_FINETUNE) -> tuple[ParameterSet, ParameterSet]:
    """Minimize the environment-summed risk plus gradient-norm penalty.

    With free_decoder=False (the default) the decoder is exactly frozen: its
    parameter bytes are asserted identical before and after. The penalty
    weight follows the warmup schedule: zero for the first warmup_frac of
    steps, then lambda_irm. With lambda_irm = 0 this is plain risk descent,
    which is what the ERM fine-tuning baseline runs.
    """
    arch, rc = cfg.arch, cfg.risk
    record = record if record is not None else RunRecord(cfg.variant, cfg.to_dict())
    steps = cfg.finetune_steps if steps is None else steps
    theta = theta0.copy()
    w = w0.copy()
    w_digest = params_digest(w0)
    B = cfg.batch_size
    progs = {b.environment_id: ls.env_risk_program(arch, min(B, b.n_samples)) for b in batches}
    risk_w = ls.alpha_pattern(rc.alpha, arch.n_points)
    tnames, wnames = theta.names(), w.names()
    adam_t = Adam(theta.n_params, cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    adam_w = Adam(w.n_params, cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps) if free_decoder else None
    rng = _rng(cfg.seed, rng_key)
    warmup = int(cfg.warmup_frac * steps)

    try:
        for step in range(steps):
            lam = rc.lambda_irm if step >= warmup else 0.0
            g_theta = {name: 0.0 for name in tnames}
            g_w = {name: 0.0 for name in wnames} if free_decoder else None
            total = 0.0
            for batch in batches:
                nb = min(B, batch.n_samples)
                idx = rng.choice(batch.n_samples, size=nb, replace=False)
                inputs = {**theta.as_dict(), **w.as_dict(),
                          "obs": batch.observations[idx], "v": batch.speeds[idx][:, None],
                          "truth": batch.truth_flat()[idx], "risk_w": risk_w}
                prog = progs[batch.environment_id]
                wrt = tnames + wnames if free_decoder or lam > 0 else tnames
                res = eg.gradient(prog, inputs, wrt=wrt)
                for name in tnames:
                    g_theta[name] = g_theta[name] + res.grads[name]
                if free_decoder:
                    for name in wnames:
                        g_w[name] = g_w[name] + res.grads[name]
                total += float(res.value)
                if lam > 0:
                    v_w = {name: res.grads[name] for name in wnames}
                    seeded = eg.gradient(prog, inputs,
                                         wrt=tnames + (wnames if free_decoder else []),
                                         tangents=v_w)
                    for name in tnames:
                        g_theta[name] = g_theta[name] + 2.0 * lam * seeded.grad_tangents[name]
                    if free_decoder:
                        for name in wnames:
                            g_w[name] = g_w[name] + 2.0 * lam * seeded.grad_tangents[name]
                    total += lam * _grad_norm_sq_value(v_w)
            theta = theta.unflatten(adam_t.step(theta.flatten(), _flat(theta, g_theta)))
            if free_decoder:
                w = w.unflatten(adam_w.step(w.flatten(), _flat(w, g_w)))
            if step % cfg.log_every == 0 or step == steps - 1:
                record.log(stage, step, "objective", total)
    except eg.EngineError as err:
        raise PipelineError(f"{stage} diverged at step {step}: {err}") from err

    if not free_decoder and params_digest(w) != w_digest:
        raise PipelineError("decoder parameters changed during fixed-decoder fine-tuning")
    return theta, w


# --- single-phase baselines ---

def train_pooled_erm(batches: list[EnvironmentBatch], cfg: TrainConfig,
                     record: RunRecord, steps: int | None = None
                     ) -> tuple[ParameterSet, ParameterSet]:
    """Joint encoder+decoder training on the pooled mean risk (no environments)."""
    arch, rc = cfg.arch, cfg.risk
    steps = cfg.finetune_steps if steps is None else steps
    theta = md.init_encoder_params(arch, cfg.seed)
    w = md.init_decoder_params(arch, cfg.seed)
    obs = np.vstack([b.observations for b in batches])
    speeds = np.concatenate([b.speeds for b in batches])
    truth = np.vstack([b.truth_flat() for b in batches])
    n = obs.shape[0]
    B = min(cfg.batch_size, n)
    prog = ls.env_risk_program(arch, B)
    risk_w = ls.alpha_pattern(rc.alpha, arch.n_points)
    names = theta.names() + w.names()
    adam_t = Adam(theta.n_params, cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    adam_w = Adam(w.n_params, cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    rng = _rng(cfg.seed, _KEY_E2E)

    try:
        for step in range(steps):
            idx = rng.choice(n, size=B, replace=False)
            res = eg.gradient(prog, {**theta.as_dict(), **w.as_dict(), "obs": obs[idx],
                                     "v": speeds[idx][:, None], "truth": truth[idx],
                                     "risk_w": risk_w}, wrt=names)
            theta = theta.unflatten(adam_t.step(theta.flatten(), _flat(theta, res.grads)))
            w = w.unflatten(adam_w.step(w.flatten(), _flat(w, res.grads)))
            if step % cfg.log_every == 0 or step == steps - 1:
                record.log("e2e", step, "risk", float(res.value))
    except eg.EngineError as err:
        raise PipelineError(f"pooled training diverged at step {step}: {err}") from err
    return theta, w


def train_dummy_penalty(batches: list[EnvironmentBatch], cfg: TrainConfig, record: RunRecord,
                        mode: str, zhat: dict[int, np.ndarray] | None = None,
                        steps: int | None = None) -> tuple[ParameterSet, ParameterSet | None]:
    """First-order dummy-classifier training: direct point regression
    (mode="points") or latent-target regression (mode="latent")."""
    arch, rc = cfg.arch, cfg.risk
    steps = cfg.finetune_steps if steps is None else steps
    theta = md.init_encoder_params(arch, cfg.seed)
    head = md.init_head_params(arch, cfg.seed, 2 * arch.n_points, arch.d_z) if mode == "points" else None
    risk_w = ls.alpha_pattern(rc.alpha, arch.n_points)
    B = cfg.batch_size
    names = theta.names() + (head.names() if head is not None else [])
    adam = Adam(theta.n_params + (head.n_params if head is not None else 0),
                cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    rng = _rng(cfg.seed, _KEY_FINETUNE)
    warmup = int(cfg.warmup_frac * steps)
    stage = "traj_irm" if mode == "points" else "latent_irmv1"

    def pack(g):
        parts = [np.asarray(g[k]).reshape(-1) for k in theta.names()]
        if head is not None:
            parts += [np.asarray(g[k]).reshape(-1) for k in head.names()]
        return np.concatenate(parts)

    try:
        for step in range(steps):
            lam = rc.lambda_irm if step >= warmup else 0.0
            g_acc = {name: 0.0 for name in names}
            total = 0.0
            for batch in batches:
                nb = min(B, batch.n_samples)
                idx = rng.choice(batch.n_samples, size=nb, replace=False)
                if mode == "points":
                    prog = ls.point_regression_program(arch, nb)
                    inputs = {**theta.as_dict(), **head.as_dict(),
                              "obs": batch.observations[idx],
                              "truth": batch.truth_flat()[idx],
                              "risk_w": risk_w, "lam": lam}
                else:
                    prog = ls.latent_regression_program(arch, nb)
                    inputs = {**theta.as_dict(), "obs": batch.observations[idx],
                              "zhat": zhat[batch.environment_id][idx], "lam": lam}
                res = eg.gradient(prog, inputs, wrt=names)
                for name in names:
                    g_acc[name] = g_acc[name] + res.grads[name]
                total += float(res.value)
            flat = adam.step(np.concatenate([theta.flatten()] +
                                            ([head.flatten()] if head is not None else [])),
                             pack(g_acc))
            theta = theta.unflatten(flat[:theta.n_params])
            if head is not None:
                head = head.unflatten(flat[theta.n_params:])
            if step % cfg.log_every == 0 or step == steps - 1:
                record.log(stage, step, "objective", total)
    except eg.EngineError as err:
        raise PipelineError(f"{stage} diverged at step {step}: {err}") from err
    return theta, head


# --- variant orchestration ---

def _save(out_dir: Path, name: str, params: ParameterSet, cfg: TrainConfig, kind: str) -> str:
    path = save_checkpoint(out_dir / name, params, cfg.arch, cfg.seed, cfg.variant, kind)
    return str(path)


def _stage_done(out_dir: Path, *names: str) -> bool:
    return all((out_dir / f"{n}.json").exists() and (out_dir / f"{n}.bin").exists()
               for n in names)


def _load_params(out_dir: Path, name: str) -> ParameterSet:
    params, _ = load_checkpoint(out_dir / name)
    return params


def _latents_to_params(zhat: dict[int, np.ndarray]) -> ParameterSet:
    return ParameterSet((f"env_{k}", v) for k, v in sorted(zhat.items()))


def _params_to_latents(params: ParameterSet) -> dict[int, np.ndarray]:
    return {int(name.split("_", 1)[1]): value for name, value in params.items()}


def generated_lateral_signs(w: ParameterSet, cfg: TrainConfig, n_draws: int = 256) -> np.ndarray:
    """Final lateral displacements of prior draws (mode-coverage diagnostic)."""
    rng = _rng(cfg.seed, _KEY_COVERAGE)
    z = rng.standard_normal((n_draws, cfg.arch.d_z))
    vt = rng.uniform(0.0, cfg.arch.v_max, size=n_draws)
    pts = md.decode_grid_batch(w, z, vt, cfg.arch)
    return pts[:, -1, 1]


def train_variant(tag: str, train_batches: list[EnvironmentBatch], cfg: TrainConfig,
                  out_dir: str | Path, resume: bool = True) -> RunRecord:
    """Run one ablation variant end to end, checkpointing each stage.

    Stage artifacts already present under out_dir are reused when resume=True,
    so a run can restart from any completed stage. Every variant emits the
    same RunRecord schema.
    """
    if tag not in VARIANTS:
        raise PipelineError(f"unknown variant {tag!r}; expected one of {VARIANTS}")
    if cfg.variant != tag:
        cfg = TrainConfig(**{**cfg.to_dict(), "variant": tag,
                             "risk": cfg.risk, "arch": cfg.arch})
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    record = RunRecord(tag, cfg.to_dict())
    t0 = time.perf_counter()

    if tag == "ours":
        _run_ours(train_batches, cfg, out_dir, record, resume)
    elif tag == "e2e_nt":
        theta, w = train_pooled_erm(train_batches, cfg, record)
        record.checkpoints["encoder"] = _save(out_dir, "encoder", theta, cfg, "encoder")
        record.checkpoints["decoder"] = _save(out_dir, "decoder", w, cfg, "decoder")
    elif tag == "e2e_nt_nirm":
        theta0 = md.init_encoder_params(cfg.arch, cfg.seed)
        w_init = md.init_decoder_params(cfg.arch, cfg.seed)
        theta, w = finetune_encoder_nirm(theta0, w_init, train_batches, cfg, record,
                                         stage="e2e_nirm", free_decoder=True)
        record.checkpoints["encoder"] = _save(out_dir, "encoder", theta, cfg, "encoder")
        record.checkpoints["decoder"] = _save(out_dir, "decoder", w, cfg, "decoder")
    elif tag == "random_nt_nirm":
        theta0 = md.init_encoder_params(cfg.arch, cfg.seed)
        w_frozen = md.init_decoder_params(cfg.arch, cfg.seed)
        digest_before = params_digest(w_frozen)
        theta, w = finetune_encoder_nirm(theta0, w_frozen, train_batches, cfg, record,
                                         stage="random_nirm")
        assert params_digest(w) == digest_before
        record.checkpoints["encoder"] = _save(out_dir, "encoder", theta, cfg, "encoder")
        record.checkpoints["decoder"] = _save(out_dir, "decoder", w, cfg, "decoder")
    elif tag == "traj_irm":
        theta, head = train_dummy_penalty(train_batches, cfg, record, mode="points")
        record.checkpoints["encoder"] = _save(out_dir, "encoder", theta, cfg, "encoder")
        record.checkpoints["head"] = _save(out_dir, "head", head, cfg, "head")
    elif tag == "latent_irmv1":
        w0, critic, zhat = _shared_stages(train_batches, cfg, out_dir, record, resume)
        theta, _ = train_dummy_penalty(train_batches, cfg, record, mode="latent", zhat=zhat)
        record.checkpoints["encoder"] = _save(out_dir, "encoder", theta, cfg, "encoder")

    record.timings["total_s"] = time.perf_counter() - t0
    record.save(out_dir)
    return record


def _shared_stages(train_batches, cfg, out_dir, record, resume):
    """Stage 1 (adversarial decoder) and stage 2a (latent inference), with resume."""
    if resume and _stage_done(out_dir, "decoder", "critic"):
        w0 = _load_params(out_dir, "decoder")
        critic = _load_params(out_dir, "critic")
    else:
        t = time.perf_counter()
        w0, critic = train_decoder_gan(train_batches, cfg, record)
        record.timings["stage1_s"] = time.perf_counter() - t
        record.checkpoints["decoder"] = _save(out_dir, "decoder", w0, cfg, "decoder")
        record.checkpoints["critic"] = _save(out_dir, "critic", critic, cfg, "critic")
    record.checkpoints.setdefault("decoder", str(out_dir / "decoder.json"))
    record.checkpoints.setdefault("critic", str(out_dir / "critic.json"))

    if resume and _stage_done(out_dir, "latents"):
        zhat = _params_to_latents(_load_params(out_dir, "latents"))
    else:
        t = time.perf_counter()
        zhat = infer_latents(w0, train_batches, cfg, record)
        record.timings["stage2a_s"] = time.perf_counter() - t
        record.checkpoints["latents"] = _save(out_dir, "latents", _latents_to_params(zhat),
                                              cfg, "latent_table")
    record.checkpoints.setdefault("latents", str(out_dir / "latents.json"))
    return w0, critic, zhat


def _run_ours(train_batches, cfg, out_dir, record, resume):
    w0, critic, zhat = _shared_stages(train_batches, cfg, out_dir, record, resume)

    if resume and _stage_done(out_dir, "encoder_pretrained"):
        theta0 = _load_params(out_dir, "encoder_pretrained")
    else:
        t = time.perf_counter()
        theta0 = pretrain_encoder(zhat, train_batches, cfg, record)
        record.timings["stage2b_s"] = time.perf_counter() - t
        record.checkpoints["encoder_pretrained"] = _save(out_dir, "encoder_pretrained",
                                                         theta0, cfg, "encoder")
    record.checkpoints.setdefault("encoder_pretrained", str(out_dir / "encoder_pretrained.json"))

    digest_before = params_digest(w0)
    t = time.perf_counter()
    theta, w_after = finetune_encoder_nirm(theta0, w0, train_batches, cfg, record)
    record.timings["stage3_s"] = time.perf_counter() - t
    assert params_digest(w_after) == digest_before
    record.notes["decoder_digest_preserved"] = 1.0
    record.checkpoints["encoder"] = _save(out_dir, "encoder", theta, cfg, "encoder")

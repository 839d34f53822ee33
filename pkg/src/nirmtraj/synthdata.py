"""Deterministic synthetic multi-environment driving data with a controllable
spurious correlation.

Each sample is a maneuver (curvature plus a speed ramp) rendered as a
constant-curvature arc trajectory, observed through two feature groups:

- invariant features: a fixed affine embedding of the maneuver intent
  (curvature, target speed) plus Gaussian noise, valid in every environment;
- spurious features: a noiseless embedding of the same intent with
  probability p, otherwise of an independently redrawn decoy maneuver.

Training environments use high p, the test environment low p, so a model
leaning on the shortcut collapses out of distribution. Everything derives
from one seed; regenerating with the same seed is byte-identical.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .losses import EnvironmentBatch
from .models import Trajectory

SCHEMA_VERSION = 1
_KAPPA_EPS = 1e-9  # below this the arc degenerates to a straight line


@dataclass(frozen=True)
class ManeuverSpec:
    """Constant-curvature arc with a linear speed ramp toward a target speed."""

    curvature: float
    initial_speed: float
    target_speed: float
    accel: float


@dataclass(frozen=True)
class EnvironmentSpec:
    environment_id: int
    spurious_correlation: float
    noise_scale: float
    sample_count: int
    role: str = "train"

    def __post_init__(self):
        if not 0.0 <= self.spurious_correlation <= 1.0:
            raise ValueError(f"spurious_correlation must be in [0, 1], got {self.spurious_correlation}")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be non-negative")
        if self.sample_count <= 0:
            raise ValueError("sample_count must be positive")
        if self.role not in ("train", "test"):
            raise ValueError(f"role must be 'train' or 'test', got {self.role!r}")


@dataclass(frozen=True)
class GenerationConfig:
    """Physical ranges, feature dimensions, and maneuver sampling ranges."""

    horizon: float = 3.0
    n_points: int = 16
    v_max: float = 10.0
    kappa_max: float = 0.2
    invariant_dim: int = 8
    spurious_dim: int = 8
    kappa_sample: float = 0.12
    speed_low: float = 1.0
    speed_high: float = 9.0
    ramp_time: float = 2.0
    heldout_fraction: float = 0.25

    def __post_init__(self):
        if not 0 < self.kappa_sample <= self.kappa_max:
            raise ValueError("kappa_sample must be in (0, kappa_max]")
        if not 0 <= self.speed_low < self.speed_high <= self.v_max:
            raise ValueError("speed range must satisfy 0 <= low < high <= v_max")
        if not 0 < self.heldout_fraction < 1:
            raise ValueError("heldout_fraction must be in (0, 1)")

    @property
    def obs_dim(self) -> int:
        return self.invariant_dim + self.spurious_dim + 1


@dataclass
class Observation:
    """Per-sample sensor surrogate."""

    invariant_features: np.ndarray
    spurious_features: np.ndarray
    speed: float
    environment_id: int

    def vector(self) -> np.ndarray:
        return np.concatenate([self.invariant_features, self.spurious_features, [self.speed]])


@dataclass
class DatasetManifest:
    seed: int
    generation: GenerationConfig
    environments: list[EnvironmentSpec]
    files: dict[int, str]
    checksums: dict[str, str]
    schema_version: int = SCHEMA_VERSION

    def to_json(self) -> str:
        payload = {
            "schema_version": self.schema_version,
            "seed": self.seed,
            "generation": asdict(self.generation),
            "environments": [asdict(e) for e in self.environments],
            "files": {str(k): v for k, v in self.files.items()},
            "checksums": self.checksums,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        payload = json.loads(text)
        if payload["schema_version"] != SCHEMA_VERSION:
            raise ValueError(f"unsupported manifest schema version {payload['schema_version']}")
        return cls(
            seed=payload["seed"],
            generation=GenerationConfig(**payload["generation"]),
            environments=[EnvironmentSpec(**e) for e in payload["environments"]],
            files={int(k): v for k, v in payload["files"].items()},
            checksums=payload["checksums"],
            schema_version=payload["schema_version"],
        )


def grid_times(gen: GenerationConfig) -> np.ndarray:
    k = np.arange(1, gen.n_points + 1, dtype=np.float64)
    return k * (gen.horizon / gen.n_points)


def _arc_lengths(v0, target, accel, times):
    """Distance traveled under a speed ramp clamped at the target speed.

    Speeds move from v0 toward target at rate accel and stay there; with
    accel zero or pointing away from the target the speed holds at v0.
    """
    v0 = np.atleast_1d(np.asarray(v0, dtype=np.float64))[:, None]
    target = np.atleast_1d(np.asarray(target, dtype=np.float64))[:, None]
    accel = np.atleast_1d(np.asarray(accel, dtype=np.float64))[:, None]
    toward = accel * (target - v0) > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        t_hit = np.where(toward, (target - v0) / np.where(accel == 0, 1.0, accel), np.inf)
    t = np.asarray(times, dtype=np.float64)
    ramp = np.minimum(t, t_hit)
    s = v0 * ramp + 0.5 * np.where(toward, accel, 0.0) * ramp ** 2
    s = s + np.where(t > t_hit, target * (t - t_hit), 0.0)
    return s


def _arc_positions(kappa, s):
    """Constant-curvature positions; the |kappa| -> 0 limit is the straight line (s, 0)."""
    kappa = np.atleast_1d(np.asarray(kappa, dtype=np.float64))[:, None]
    straight = np.abs(kappa) < _KAPPA_EPS
    k_safe = np.where(straight, 1.0, kappa)
    lon = np.where(straight, s, np.sin(k_safe * s) / k_safe)
    lat = np.where(straight, 0.0, (1.0 - np.cos(k_safe * s)) / k_safe)
    return np.stack([lon, lat], axis=-1)


def _validate_maneuver(m: ManeuverSpec, gen: GenerationConfig) -> None:
    if abs(m.curvature) > gen.kappa_max:
        raise ValueError(f"curvature {m.curvature} exceeds kappa_max {gen.kappa_max}")
    for name, v in (("initial_speed", m.initial_speed), ("target_speed", m.target_speed)):
        if not 0.0 <= v <= gen.v_max:
            raise ValueError(f"{name} {v} outside [0, {gen.v_max}]")


def gt_trajectory(m: ManeuverSpec, gen: GenerationConfig) -> Trajectory:
    """Ground-truth trajectory of one maneuver on the equal-interval grid."""
    _validate_maneuver(m, gen)
    times = grid_times(gen)
    s = _arc_lengths(m.initial_speed, m.target_speed, m.accel, times)[0]
    pts = _arc_positions(m.curvature, s[None, :])[0]
    return Trajectory(points=pts, times=times, condition_speed=m.initial_speed)


def _embedding(rng: np.random.Generator, out_dim: int):
    a = rng.normal(size=(out_dim, 2))
    b = rng.normal(size=out_dim)
    return a, b


def _embed(a, b, kappa, target, gen: GenerationConfig):
    x = np.stack([kappa / gen.kappa_max, target / gen.v_max], axis=-1)
    return x @ a.T + b


def _sample_maneuvers(rng: np.random.Generator, n: int, gen: GenerationConfig):
    kappa = rng.uniform(-gen.kappa_sample, gen.kappa_sample, size=n)
    v0 = rng.uniform(gen.speed_low, gen.speed_high, size=n)
    target = rng.uniform(gen.speed_low, gen.speed_high, size=n)
    accel = (target - v0) / gen.ramp_time
    return kappa, v0, target, accel


def _env_rng(seed: int, environment_id: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(0, environment_id))))


def _embedding_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(1, 0))))


def _generate_environment(spec: EnvironmentSpec, seed: int, gen: GenerationConfig,
                          emb) -> np.ndarray:
    """Record rows: invariant feats, spurious feats, speed, interleaved points."""
    a_inv, b_inv, a_sp, b_sp = emb
    rng = _env_rng(seed, spec.environment_id)
    n = spec.sample_count
    kappa, v0, target, accel = _sample_maneuvers(rng, n, gen)
    dec_kappa, _, dec_target, _ = _sample_maneuvers(rng, n, gen)
    keep = rng.uniform(size=n) < spec.spurious_correlation
    noise = rng.normal(size=(n, gen.invariant_dim))

    s = _arc_lengths(v0, target, accel, grid_times(gen))
    pts = _arc_positions(kappa, s)

    inv = _embed(a_inv, b_inv, kappa, target, gen) + spec.noise_scale * noise
    sp_kappa = np.where(keep, kappa, dec_kappa)
    sp_target = np.where(keep, target, dec_target)
    sp = _embed(a_sp, b_sp, sp_kappa, sp_target, gen)

    return np.concatenate([inv, sp, v0[:, None], pts.reshape(n, -1)], axis=1)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def make_dataset(specs: list[EnvironmentSpec], seed: int, out_dir: str | Path,
                 gen: GenerationConfig = GenerationConfig()) -> DatasetManifest:
    """Generate per-environment data files plus a checksummed manifest.

    Fully seed-deterministic: the same (specs, seed, gen) produce byte-identical
    files. Environments draw from independent seed streams, so they can be
    regenerated in any order.
    """
    if not specs:
        raise ValueError("need at least one environment spec")
    ids = [s.environment_id for s in specs]
    if len(set(ids)) != len(ids):
        raise ValueError("environment ids must be unique")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    emb_rng = _embedding_rng(seed)
    a_inv, b_inv = _embedding(emb_rng, gen.invariant_dim)
    a_sp, b_sp = _embedding(emb_rng, gen.spurious_dim)

    files: dict[int, str] = {}
    checksums: dict[str, str] = {}
    for spec in specs:
        rows = _generate_environment(spec, seed, gen, (a_inv, b_inv, a_sp, b_sp))
        name = f"env_{spec.environment_id}.bin"
        path = out_dir / name
        path.write_bytes(rows.astype("<f8").tobytes())
        files[spec.environment_id] = name
        checksums[name] = _sha256(path)

    manifest = DatasetManifest(seed=seed, generation=gen, environments=list(specs),
                               files=files, checksums=checksums)
    (out_dir / "manifest.json").write_text(manifest.to_json())
    return manifest


def _record_width(gen: GenerationConfig) -> int:
    return gen.invariant_dim + gen.spurious_dim + 1 + 2 * gen.n_points


def load_dataset(manifest_path: str | Path, split: str = "all") -> list[EnvironmentBatch]:
    """Load environment batches, verifying per-file checksums.

    split: "all" (every sample), "train" / "heldout" (the leading / trailing
    portion of each training environment, per heldout_fraction), or "ood"
    (test-role environments only).
    """
    if split not in ("all", "train", "heldout", "ood"):
        raise ValueError(f"unknown split {split!r}")
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    manifest = DatasetManifest.from_json(manifest_path.read_text())
    gen = manifest.generation
    width = _record_width(gen)
    times = grid_times(gen)

    batches = []
    for spec in manifest.environments:
        name = manifest.files[spec.environment_id]
        path = base / name
        if not path.exists():
            raise FileNotFoundError(f"data file missing: {path}")
        blob = path.read_bytes()
        digest = hashlib.sha256(blob).hexdigest()
        if digest != manifest.checksums[name]:
            raise ValueError(f"checksum mismatch for {name}")
        rows = np.frombuffer(blob, dtype="<f8")
        if rows.size != spec.sample_count * width:
            raise ValueError(f"truncated or oversized data file: {name}")
        rows = rows.reshape(spec.sample_count, width).astype(np.float64)

        if split == "ood":
            if spec.role != "test":
                continue
        elif split in ("train", "heldout"):
            if spec.role != "train":
                continue
            n_train = int(round(spec.sample_count * (1 - gen.heldout_fraction)))
            rows = rows[:n_train] if split == "train" else rows[n_train:]
            if rows.shape[0] == 0:
                continue

        obs = rows[:, :gen.obs_dim]
        speeds = rows[:, gen.obs_dim - 1]
        pts = rows[:, gen.obs_dim:].reshape(-1, gen.n_points, 2)
        batches.append(EnvironmentBatch(spec.environment_id, obs, speeds, pts, times))
    return batches


def default_environment_specs(samples_per_env: int = 2000) -> list[EnvironmentSpec]:
    """The shipped benchmark: two high-correlation training environments and
    one low-correlation test environment where the shortcut inverts."""
    return [
        EnvironmentSpec(0, spurious_correlation=0.9, noise_scale=0.5, sample_count=samples_per_env),
        EnvironmentSpec(1, spurious_correlation=0.8, noise_scale=0.5, sample_count=samples_per_env),
        EnvironmentSpec(2, spurious_correlation=0.1, noise_scale=0.5, sample_count=samples_per_env,
                        role="test"),
    ]

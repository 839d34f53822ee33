"""Metrics and reports: average displacement error per environment, in-domain
vs out-of-distribution comparison, and the ablation table."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import models as md
from . import svg
from .checkpoint import checkpoint_arch, load_checkpoint
from .engine import ParameterSet
from .losses import EnvironmentBatch, RiskConfig, alpha_pattern
from .models import ArchitectureConfig, Trajectory

# Ablation flag layout: decoder fixed, decoder pretrained, penalty kind.
VARIANT_FLAGS = {
    "e2e_nt": ("", "", ""),
    "e2e_nt_nirm": ("", "", "NIRM"),
    "random_nt_nirm": ("yes", "", "NIRM"),
    "traj_irm": ("yes", "", "IRMv1"),
    "latent_irmv1": ("yes", "yes", "IRMv1"),
    "ours": ("yes", "yes", "NIRM"),
}
VARIANT_ORDER = list(VARIANT_FLAGS)


def ade(predicted: Trajectory, truth: Trajectory) -> float:
    """Mean Euclidean distance between corresponding trajectory points."""
    if predicted.n_points != truth.n_points or not np.array_equal(predicted.times, truth.times):
        raise ValueError("trajectories are not on the same time grid")
    return float(np.mean(np.linalg.norm(predicted.points - truth.points, axis=1)))


def ade_rows(pred_points: np.ndarray, truth_points: np.ndarray) -> np.ndarray:
    """Per-sample ADE for stacked (n, N, 2) point arrays."""
    return np.linalg.norm(pred_points - truth_points, axis=2).mean(axis=1)


@dataclass
class EvalReport:
    variant: str
    checkpoint: str
    split: str
    per_environment: dict[int, dict[str, float]] = field(default_factory=dict)
    totals: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "variant": self.variant,
            "checkpoint": self.checkpoint,
            "split": self.split,
            "per_environment": {str(k): v for k, v in self.per_environment.items()},
            "totals": self.totals,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    def to_csv(self) -> str:
        lines = ["environment,n_samples,ade,risk"]
        for env_id in sorted(self.per_environment):
            row = self.per_environment[env_id]
            lines.append(f"{env_id},{int(row['n_samples'])},{row['ade']!r},{row['risk']!r}")
        lines.append(f"total,{int(self.totals['n_samples'])},{self.totals['ade']!r},"
                     f"{self.totals['risk']!r}")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        head = f"variant: {self.variant}   split: {self.split}"
        rows = [("environment", "n", "ade (m)", "risk (m^2)")]
        for env_id in sorted(self.per_environment):
            r = self.per_environment[env_id]
            rows.append((str(env_id), str(int(r["n_samples"])), f"{r['ade']:.4f}", f"{r['risk']:.4f}"))
        rows.append(("total", str(int(self.totals["n_samples"])),
                     f"{self.totals['ade']:.4f}", f"{self.totals['risk']:.4f}"))
        widths = [max(len(r[i]) for r in rows) for i in range(4)]
        lines = [head, ""]
        for r in rows:
            lines.append("  ".join(s.rjust(w) for s, w in zip(r, widths)))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        payload = json.loads(text)
        return cls(variant=payload["variant"], checkpoint=payload["checkpoint"],
                   split=payload["split"],
                   per_environment={int(k): v for k, v in payload["per_environment"].items()},
                   totals=payload["totals"])


@dataclass
class LoadedModel:
    """A prediction-ready model reassembled from checkpoints."""

    variant: str
    arch: ArchitectureConfig
    encoder: ParameterSet
    decoder: ParameterSet | None = None
    head: ParameterSet | None = None
    checkpoint: str = ""

    def predict_points(self, batch: EnvironmentBatch) -> np.ndarray:
        z = md.encode_batch(self.encoder, batch.observations, self.arch)
        if self.variant == "traj_irm":
            flat = z @ self.head["head.w0"] + self.head["head.b0"]
            return flat.reshape(batch.n_samples, self.arch.n_points, 2)
        return md.decode_grid_batch(self.decoder, z, batch.speeds, self.arch)


def load_model(run_dir: str | Path) -> LoadedModel:
    """Reassemble the final model of a run directory from its checkpoints."""
    run_dir = Path(run_dir)
    encoder, manifest = load_checkpoint(run_dir / "encoder")
    arch = checkpoint_arch(manifest)
    variant = manifest["variant"]
    decoder = head = None
    if variant == "traj_irm":
        head, _ = load_checkpoint(run_dir / "head")
    else:
        decoder, _ = load_checkpoint(run_dir / "decoder")
    return LoadedModel(variant=variant, arch=arch, encoder=encoder, decoder=decoder,
                       head=head, checkpoint=str(run_dir / "encoder.json"))


def evaluate_model(model: LoadedModel, batches: list[EnvironmentBatch], split: str,
                   risk_cfg: RiskConfig = RiskConfig()) -> EvalReport:
    """Per-environment ADE and risk; totals are sample-weighted means."""
    report = EvalReport(variant=model.variant, checkpoint=model.checkpoint, split=split)
    weights = alpha_pattern(risk_cfg.alpha, model.arch.n_points)
    total_ade = total_risk = 0.0
    total_n = 0
    for batch in batches:
        if batch.times.shape[0] != model.arch.n_points:
            raise ValueError("dataset grid does not match the checkpoint architecture")
        pred = model.predict_points(batch)
        per_ade = ade_rows(pred, batch.truth_points)
        d = (pred - batch.truth_points).reshape(batch.n_samples, -1)
        per_risk = (d * d * weights).sum(axis=1)
        report.per_environment[batch.environment_id] = {
            "n_samples": float(batch.n_samples),
            "ade": float(per_ade.mean()),
            "risk": float(per_risk.mean()),
        }
        total_ade += float(per_ade.sum())
        total_risk += float(per_risk.sum())
        total_n += batch.n_samples
    report.totals = {"n_samples": float(total_n),
                     "ade": total_ade / total_n,
                     "risk": total_risk / total_n}
    return report


def write_report(report: EvalReport, out_dir: str | Path, stem: str = "eval") -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "json": out_dir / f"{stem}.json",
        "csv": out_dir / f"{stem}.csv",
        "txt": out_dir / f"{stem}.txt",
    }
    paths["json"].write_text(report.to_json())
    paths["csv"].write_text(report.to_csv())
    paths["txt"].write_text(report.to_text())
    return paths


def overlay_samples(model: LoadedModel, batch: EnvironmentBatch, indices: list[int],
                    path: str | Path) -> Path:
    pred = model.predict_points(batch)
    pairs = [(batch.truth_points[i], pred[i]) for i in indices]
    return svg.trajectory_overlay(pairs, path)


# --- ablation table ---

def ablation_table(results: dict[str, dict[str, list[float]]]) -> tuple[str, str]:
    """CSV and aligned-text ablation table.

    results maps variant -> {"in_domain": [per-seed ADE], "ood": [per-seed ADE]};
    missing variants are marked absent rather than failing.
    """
    header = ["variant", "decoder_fixed", "decoder_pretrained", "penalty",
              "in_domain_ade", "ood_ade", "n_seeds"]
    csv_lines = [",".join(header)]
    text_rows = [tuple(header)]
    for variant in VARIANT_ORDER:
        fixed, pretrained, penalty = VARIANT_FLAGS[variant]
        entry = results.get(variant)
        if not entry or not entry.get("in_domain"):
            csv_lines.append(f"{variant},{fixed},{pretrained},{penalty},absent,absent,0")
            text_rows.append((variant, fixed, pretrained, penalty, "absent", "absent", "0"))
            continue
        id_ade = float(np.mean(entry["in_domain"]))
        ood_ade = float(np.mean(entry["ood"]))
        n = len(entry["in_domain"])
        csv_lines.append(f"{variant},{fixed},{pretrained},{penalty},{id_ade!r},{ood_ade!r},{n}")
        text_rows.append((variant, fixed, pretrained, penalty,
                          f"{id_ade:.4f}", f"{ood_ade:.4f}", str(n)))
    widths = [max(len(r[i]) for r in text_rows) for i in range(len(header))]
    text = "\n".join("  ".join(s.ljust(w) for s, w in zip(row, widths)).rstrip()
                     for row in text_rows) + "\n"
    return "\n".join(csv_lines) + "\n", text


def parse_ablation_csv(text: str) -> dict[str, dict[str, float | str]]:
    rows = {}
    lines = text.strip().splitlines()
    header = lines[0].split(",")
    for line in lines[1:]:
        parts = line.split(",")
        row = dict(zip(header, parts))
        for key in ("in_domain_ade", "ood_ade"):
            if row[key] != "absent":
                row[key] = float(row[key])
        rows[row["variant"]] = row
    return rows


def ablation_chart(results: dict[str, dict[str, list[float]]], path: str | Path) -> Path:
    labels = [v for v in VARIANT_ORDER if results.get(v, {}).get("in_domain")]
    groups = {
        "in_domain": [float(np.mean(results[v]["in_domain"])) for v in labels],
        "ood": [float(np.mean(results[v]["ood"])) for v in labels],
    }
    return svg.grouped_bars(labels, groups, path, title="average displacement error (m)")

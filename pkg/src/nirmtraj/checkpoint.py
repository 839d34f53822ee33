"""Checkpoint files: a JSON manifest plus a binary blob.

The manifest lists every tensor's name, shape, byte offset, and SHA-256; the
blob concatenates the tensors as little-endian float64, row-major, in manifest
order. Round-trips are bit-exact and loads verify every tensor digest, so a
flipped byte is reported with the tensor it corrupts.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .engine import ParameterSet
from .models import ArchitectureConfig

SCHEMA_VERSION = 1


class CheckpointError(Exception):
    pass


def save_checkpoint(stem: str | Path, params: ParameterSet, arch: ArchitectureConfig,
                    seed: int, variant: str, kind: str,
                    extra: dict | None = None) -> Path:
    """Write <stem>.json and <stem>.bin; returns the manifest path."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    tensors = []
    chunks = []
    offset = 0
    for name, value in params.items():
        raw = np.ascontiguousarray(value, dtype="<f8").tobytes()
        tensors.append({
            "name": name,
            "shape": list(value.shape),
            "offset": offset,
            "sha256": hashlib.sha256(raw).hexdigest(),
        })
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "kind": kind,
        "variant": variant,
        "seed": seed,
        "arch": asdict(arch),
        "tensors": tensors,
        "blob_bytes": len(blob),
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
    }
    if extra:
        manifest["extra"] = extra
    stem.with_suffix(".bin").write_bytes(blob)
    stem.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return stem.with_suffix(".json")


def load_checkpoint(stem: str | Path) -> tuple[ParameterSet, dict]:
    """Load and verify a checkpoint; returns the parameters and the manifest."""
    stem = Path(stem)
    manifest_path = stem if stem.suffix == ".json" else stem.with_suffix(".json")
    blob_path = manifest_path.with_suffix(".bin")
    if not manifest_path.exists():
        raise CheckpointError(f"checkpoint manifest missing: {manifest_path}")
    if not blob_path.exists():
        raise CheckpointError(f"checkpoint blob missing: {blob_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint schema version {manifest.get('schema_version')}")
    blob = blob_path.read_bytes()
    if len(blob) != manifest["blob_bytes"]:
        raise CheckpointError(f"blob length {len(blob)} does not match manifest "
                              f"{manifest['blob_bytes']} in {blob_path.name}")
    params = ParameterSet()
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        raw = blob[entry["offset"]:entry["offset"] + 8 * count]
        if hashlib.sha256(raw).hexdigest() != entry["sha256"]:
            raise CheckpointError(f"checksum mismatch in tensor {entry['name']!r}")
        params[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    return params, manifest


def checkpoint_arch(manifest: dict) -> ArchitectureConfig:
    arch = dict(manifest["arch"])
    for key in ("decoder_hidden", "encoder_hidden", "critic_hidden"):
        arch[key] = tuple(arch[key])
    return ArchitectureConfig(**arch)

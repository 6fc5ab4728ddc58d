"""Checkpoint persistence: a self-describing .npz container.

Layout (documented for external tools): one ``meta`` entry holding a JSON
string with ``format_version``, ``architecture`` (dict), ``arch_id``,
``class_count``, ``epoch``, ``metrics``, ``seed`` and ``config_digest``;
parameter blobs are stored as ``param/<key>`` float64 arrays, so a
save/load round trip is bit-exact.
"""
from __future__ import annotations

import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .models import ArchSpec, Model

FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    """A parameter snapshot plus the bookkeeping needed to reproduce it."""

    arch: ArchSpec
    params: dict
    epoch: int = 0
    metrics: dict = field(default_factory=dict)
    seed: int = 0
    config_digest: str = ""
    format_version: int = FORMAT_VERSION

    def to_model(self, role: str = "student") -> Model:
        model = Model(self.arch, role=role, init_seed=0)
        model.set_params(self.params)
        return model

    @classmethod
    def from_model(cls, model: Model, *, epoch: int = 0, metrics: dict | None = None,
                   seed: int = 0, config_digest: str = "") -> "Checkpoint":
        params = {k: v.copy() for k, v in model.params.items()}
        return cls(model.spec, params, epoch, dict(metrics or {}), seed, config_digest)


def save_checkpoint(model: Model, path, *, epoch: int = 0, metrics: dict | None = None,
                    seed: int = 0, config_digest: str = "") -> Checkpoint:
    """Write a checkpoint file; returns the in-memory Checkpoint."""
    ckpt = Checkpoint.from_model(
        model, epoch=epoch, metrics=metrics, seed=seed, config_digest=config_digest
    )
    meta = {
        "format_version": ckpt.format_version,
        "architecture": ckpt.arch.to_dict(),
        "arch_id": ckpt.arch.arch_id,
        "class_count": ckpt.arch.n_classes,
        "epoch": ckpt.epoch,
        "metrics": ckpt.metrics,
        "seed": ckpt.seed,
        "config_digest": ckpt.config_digest,
    }
    arrays = {f"param/{k}": v for k, v in ckpt.params.items()}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta)), **arrays)
    return ckpt


def load_checkpoint(path, expected_arch_id: str | None = None) -> Checkpoint:
    """Read a checkpoint; validates structure and (optionally) architecture."""
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as z:
            if "meta" not in z:
                raise CheckpointError(f"{path}: not a checkpoint file (missing meta entry)")
            meta = json.loads(str(z["meta"][()]))
            params = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
    except (OSError, ValueError, KeyError, zipfile.BadZipFile, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint format_version {meta.get('format_version')!r}"
        )
    arch = ArchSpec.from_dict(meta["architecture"])
    if expected_arch_id is not None and arch.arch_id != expected_arch_id:
        raise CheckpointError(
            f"{path}: architecture mismatch: file has {arch.arch_id}, expected {expected_arch_id}"
        )
    ckpt = Checkpoint(
        arch=arch,
        params=params,
        epoch=int(meta["epoch"]),
        metrics=dict(meta.get("metrics", {})),
        seed=int(meta.get("seed", 0)),
        config_digest=str(meta.get("config_digest", "")),
    )
    ckpt.to_model()  # structural validation: params must fit the declared arch
    return ckpt

"""Denoiser <-> checkpoint file."""

from __future__ import annotations

from pathlib import Path
from typing import Any

from ..errors import ValidationError
from .checkpoint import load_checkpoint, read_header, save_checkpoint
from .core import Denoiser
from .nets import TinyUNet
from .schedule import NoiseSchedule


def save_denoiser(
    path: str | Path,
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    *,
    class_id: int | None,
    training_config: dict | None = None,
    seed: int | None = None,
    extra: dict[str, Any] | None = None,
) -> Path:
    header = {
        "kind": "denoiser",
        "architecture": denoiser.descriptor,
        "prediction_type": denoiser.prediction_type,
        "prompts": denoiser.prompts,
        "schedule": schedule.to_dict(),
        "class_id": class_id,
        "training_config": training_config or {},
        "seed": seed,
        **(extra or {}),
    }
    return save_checkpoint(path, header, denoiser.net.state_dict())


def load_denoiser(path: str | Path) -> tuple[Denoiser, NoiseSchedule, dict]:
    header, state = load_checkpoint(path)
    if header.get("kind") != "denoiser":
        raise ValidationError(f"{path}: expected a denoiser checkpoint, got kind={header.get('kind')!r}")
    net = TinyUNet.from_descriptor(header["architecture"])
    net.load_state_dict(state)
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    den = Denoiser(net, header["prediction_type"], header["prompts"])
    return den, NoiseSchedule.from_dict(header["schedule"]), header


__all__ = ["save_denoiser", "load_denoiser", "read_header"]

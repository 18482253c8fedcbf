"""Experiment configuration: one structured file with a section per stage.

Defaults carry the full-scale settings; toy runs override the step counts.
Unknown keys and wrong types fail with the dotted path of the field.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path
from typing import Any

import yaml

from ..errors import ValidationError

DEFAULTS: dict[str, Any] = {
    "experiment": {"id": None, "seed": 0},
    "data": {
        "source": "toy",  # toy | manifest
        "manifest": None,
        "class_map": None,
        "toy": {"n_samples": 700, "image_size": 32, "n_classes": 3, "test_fraction": 200 / 700},
    },
    "ssi": {
        "steps": 1500,
        "lr": 1e-5,
        "batch": 16,
        "p_uncond": 0.1,
        "ema_decay": 0.0,
        "masked_loss": False,
        "base_channels": 16,
        "channel_mults": [1, 2, 2],
        "prediction_type": None,  # None: per-organ default
        "schedule": {"kind": "linear", "T": 1000, "beta_start": 1e-4, "beta_end": 0.02},
        "classes": None,  # None: every class in the class map
    },
    "scene_model": {"steps": 1500, "lr": 1e-5, "batch": 16, "ema_decay": 0.0},
    "adapter": {
        "classes": [],
        "steps": 2000,
        "lr": 1e-3,
        "batch": 16,
        "conditioning_scale": 0.5,
        "blur_sigma": 1.0,
        "true_mask_prob": 0.25,
        "max_dilation": 6,
        "masked_loss": True,
        "ema_decay": 0.995,
    },
    "generate": {
        "mask_source": "real",  # real | simulated
        "simulated_masks": None,  # directory of label-map PNGs
        "registry_dir": None,  # trained models from another experiment
        "n_scenes": 500,
        "n_steps": 30,
        "guidance": None,  # {class name: scale}; None: per-organ defaults
        "use_adapter": True,
        "context_noise": "noised",
        "batch": 64,
    },
    "refine": {"enabled": True, "strength": 0.3, "n_steps": 10, "guidance_scale": 1.0},
    "quality": {"feature_steps": 600, "kid_subset": 100, "kid_subsets": 50},
    "seg": {
        "schemes": ["real_noaug", "syn_only", "syn_plus_real"],
        "seeds": [0, 1, 2],
        "steps": 2000,
        "finetune_steps": 1000,
        "batch": 16,
        "lr": 2e-3,
    },
    "report": {"grid_rows": 8},
}

ENUMS = {
    "data.source": ("toy", "manifest"),
    "generate.mask_source": ("real", "simulated"),
    "generate.context_noise": ("clean", "noised"),
}
# fields whose default is None but must be of this type when given
OPTIONAL_TYPES = {
    "experiment.id": str,
    "data.manifest": str,
    "data.class_map": str,
    "ssi.prediction_type": str,
    "ssi.classes": list,
    "generate.simulated_masks": str,
    "generate.registry_dir": str,
    "generate.guidance": dict,
}


def _check(value, default, path: str):
    if isinstance(default, dict):
        if not isinstance(value, dict):
            raise ValidationError(f"{path}: expected a mapping")
        out = copy.deepcopy(default)
        for k, v in value.items():
            sub = f"{path}.{k}" if path else k
            if k not in default:
                raise ValidationError(f"{sub}: unknown field")
            out[k] = _check(v, default[k], sub)
        return out
    if default is None:
        want = OPTIONAL_TYPES.get(path)
        if value is not None and want is not None and not isinstance(value, want):
            raise ValidationError(f"{path}: expected {want.__name__} or null")
        return value
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ValidationError(f"{path}: expected {type(default).__name__}, got {type(value).__name__}")
    if path in ENUMS and value not in ENUMS[path]:
        raise ValidationError(f"{path}: must be one of {ENUMS[path]}, got {value!r}")
    return value


def validate_config(raw: dict | None) -> dict:
    """Merge ``raw`` over the defaults, checking every field."""
    cfg = _check(raw or {}, DEFAULTS, "")
    for path in ("ssi.steps", "scene_model.steps", "adapter.steps", "generate.n_scenes", "generate.n_steps", "seg.steps"):
        sec, key = path.split(".")
        if cfg[sec][key] < 0:
            raise ValidationError(f"{path}: must be non-negative")
    if not 0.0 <= cfg["refine"]["strength"] <= 1.0:
        raise ValidationError("refine.strength: must lie in [0, 1]")
    if not 0.0 <= cfg["adapter"]["conditioning_scale"] <= 1.0:
        raise ValidationError("adapter.conditioning_scale: must lie in [0, 1]")
    if cfg["data"]["source"] == "manifest" and not cfg["data"]["manifest"]:
        raise ValidationError("data.manifest: required when data.source is 'manifest'")
    if cfg["generate"]["mask_source"] == "simulated" and not cfg["generate"]["simulated_masks"]:
        raise ValidationError("generate.simulated_masks: required when generate.mask_source is 'simulated'")
    from ..seg_harness import SCHEME_KINDS

    for i, s in enumerate(cfg["seg"]["schemes"]):
        if s not in SCHEME_KINDS:
            raise ValidationError(f"seg.schemes[{i}]: unknown scheme {s!r}")
    return cfg


def load_config(path: str | Path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise
    try:
        raw = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ValidationError(f"{path}: cannot parse config: {exc}") from exc
    cfg = validate_config(raw)
    # relative paths resolve against the config's directory
    for sec, key in (("data", "manifest"), ("data", "class_map"), ("generate", "simulated_masks"), ("generate", "registry_dir")):
        v = cfg[sec][key]
        if v is not None and not Path(v).is_absolute():
            cfg[sec][key] = str((path.parent / v).resolve())
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()

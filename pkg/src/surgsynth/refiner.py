"""Partial-noising refinement of composed scenes with a scene-level model."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import torch

from .dataset_io import ClassMap, SampleRecord, make_prompt
from .diffusion.core import (
    Condition,
    Denoiser,
    SamplerConfig,
    TrainConfig,
    ddim_sample,
    fit,
    forward_diffuse,
    step_seed,
    to_model_space,
    to_uint8,
    training_loss,
)
from .diffusion.nets import TinyUNet
from .diffusion.schedule import NoiseSchedule
from .diffusion.store import save_denoiser
from .errors import RegistryLookupError, ValidationError
from .inpaint import ModelRegistry, TrainedModel
from .scene_composer import CompositeScene

DEFAULT_STRENGTH = 0.3


@dataclass
class RefineConfig:
    strength: float = DEFAULT_STRENGTH
    n_steps: int = 10
    seed: int = 0
    guidance_scale: float = 1.0
    scheduler_kind: str = "ddim"

    def __post_init__(self):
        if not 0.0 <= self.strength <= 1.0:
            raise ValidationError(f"strength must lie in [0, 1], got {self.strength}")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def start_step(strength: float, T: int) -> int:
    """Number of forward steps applied before denoising: ``round(strength * T)``."""
    return int(round(strength * T))


def start_state(x0: torch.Tensor, strength: float, schedule: NoiseSchedule, seed: int) -> tuple[torch.Tensor, int]:
    """Noised starting tensor and the timestep index it sits at.

    At full strength the start is pure seeded noise, independent of ``x0``.
    """
    k = start_step(strength, schedule.T)
    if k == 0:
        return x0.clone(), -1
    z = torch.randn(tuple(x0.shape), generator=torch.Generator().manual_seed(int(seed)))
    if k >= schedule.T:
        return z, schedule.T - 1
    return forward_diffuse(x0, k - 1, z, schedule), k - 1


def _resolve(scene_model) -> tuple[Denoiser, NoiseSchedule]:
    if scene_model is None:
        raise RegistryLookupError("no scene model given")
    if isinstance(scene_model, ModelRegistry):
        den, sched, _ = scene_model.load_scene()
        return den, sched
    if isinstance(scene_model, TrainedModel):
        return scene_model.denoiser, scene_model.schedule
    den, sched = scene_model[:2]
    return den, sched


def refine_image(image: np.ndarray, scene_model, config: RefineConfig, scene_prompt: str | None) -> np.ndarray:
    den, schedule = _resolve(scene_model)
    x0 = to_model_space(image)
    x, t_start = start_state(x0, config.strength, schedule, config.seed)
    if t_start < 0:
        return np.asarray(image).copy()
    sc = SamplerConfig(
        n_steps=min(config.n_steps, t_start + 1),
        guidance_scale=config.guidance_scale,
        scheduler_kind=config.scheduler_kind,
    )
    out = ddim_sample(den, x, Condition(prompt=scene_prompt), schedule, sc, t_start=t_start)
    return to_uint8(out)[0]


def refine(scene: CompositeScene, scene_model, config: RefineConfig, scene_prompt: str | None) -> CompositeScene:
    """Refined copy of ``scene``; the label map is passed through untouched."""
    image = refine_image(scene.image, scene_model, config, scene_prompt)
    prov = list(scene.provenance) + [{"stage": "refine", **config.to_dict(), "prompt": scene_prompt}]
    return CompositeScene(
        image=image,
        label_map=scene.label_map,
        provenance=prov,
        background_source=scene.background_source,
        id=scene.id,
    )


@dataclass
class SceneModelConfig(TrainConfig):
    steps: int = 1500
    lr: float = 1e-5
    batch: int = 16
    base_channels: int = 16
    channel_mults: tuple[int, ...] = (1, 2, 2)
    prediction_type: str = "epsilon"
    schedule: dict = field(default_factory=lambda: {"kind": "linear", "T": 1000, "beta_start": 1e-4, "beta_end": 0.02})

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["channel_mults"] = list(self.channel_mults)
        return d


def train_scene_model(
    dataset: Sequence[SampleRecord],
    class_map: ClassMap,
    config: SceneModelConfig | None = None,
    registry: ModelRegistry | None = None,
) -> TrainedModel:
    """Full-frame text-conditioned model over images with all organs together."""
    cfg = config or SceneModelConfig()
    if not dataset:
        raise ValidationError("scene model needs a non-empty dataset")
    prompt = make_prompt(None, class_map, "scene")
    x_all = to_model_space(np.stack([r.image for r in dataset]))
    schedule = NoiseSchedule.from_dict(cfg.schedule)
    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed)
        net = TinyUNet(3, 3, cfg.base_channels, cfg.channel_mults, 2, x_all.shape[-1])
    den = Denoiser(net, cfg.prediction_type, ["", prompt])
    n = x_all.shape[0]

    def loss_fn(step: int) -> torch.Tensor:
        rng = np.random.default_rng(step_seed(cfg.seed, step, 21))
        idx = rng.integers(0, n, size=cfg.batch)
        return training_loss(
            den, {"x0": x_all[idx], "condition": Condition(prompt=prompt)}, schedule, step_seed(cfg.seed, step, 22), cfg.p_uncond
        )

    net.train()
    losses = fit(net.parameters(), loss_fn, cfg)
    net.eval()
    for p in net.parameters():
        p.requires_grad_(False)
    out = TrainedModel(den, schedule, losses)
    if registry is not None:
        fname = "scene.ckpt"
        out.path = save_denoiser(
            registry.root / fname, den, schedule, class_id=None, training_config=cfg.to_dict(), seed=cfg.seed,
            extra={"role": "scene"},
        )
        registry.register_scene(fname)
    return out

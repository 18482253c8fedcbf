"""Per-class mask-guided inpainting models: training, registry and sampling."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .dataset_io import ClassMap, SampleRecord, extract_soft_edges, BinaryMask, make_prompt
from .diffusion import checkpoint as ckpt
from .diffusion.core import (
    Condition,
    Denoiser,
    SamplerConfig,
    TrainConfig,
    ddim_sample,
    fit,
    forward_diffuse,
    masks_to_tensor,
    resize_mask_nearest,
    step_seed,
    to_model_space,
    to_uint8,
    training_loss,
)
from .diffusion.nets import TinyUNet
from .diffusion.schedule import NoiseSchedule, build_schedule
from .diffusion.store import load_denoiser, save_denoiser
from .errors import EmptyClassError, RegistryLookupError, ValidationError

log = logging.getLogger(__name__)

# Per-organ prediction type and guidance scale used for the cholec models.
ORGAN_DEFAULTS: dict[str, tuple[str, float]] = {
    "abdominal wall": ("v", 0.6),
    "fat": ("epsilon", 5.0),
    "liver": ("epsilon", 6.0),
    "gall bladder": ("epsilon", 5.5),
    "ligament": ("epsilon", 5.0),
}
FALLBACK_DEFAULTS = ("epsilon", 5.5)


def organ_defaults(name: str) -> tuple[str, float]:
    """``(prediction_type, guidance_scale)`` for an organ name."""
    return ORGAN_DEFAULTS.get(name.lower(), FALLBACK_DEFAULTS)


def masked_blend(x_t: torch.Tensor, x0: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Keep ``x_t`` inside the mask and ``x0`` outside it."""
    if x_t.shape != x0.shape:
        raise ValidationError(f"x_t {tuple(x_t.shape)} and x0 {tuple(x0.shape)} differ in shape")
    m = mask.to(x_t.dtype)
    if not ((m == 0) | (m == 1)).all():
        raise ValidationError("mask must be binary")
    if m.ndim == x_t.ndim and m.shape[1] == 1:
        m = m.expand_as(x_t)
    return x_t * m + x0 * (1 - m)


@dataclass
class InpaintContext:
    x0_ref: torch.Tensor
    mask: torch.Tensor
    prompt: str
    class_id: int

    @classmethod
    def build(cls, source: np.ndarray, mask: np.ndarray, prompt: str, class_id: int, size: int) -> "InpaintContext":
        src = np.asarray(source)
        if src.ndim == 3:
            src = src[None]
        if src.shape[1:3] != (size, size):
            raise ValidationError(f"source image {src.shape[1:3]} must match model resolution {size}")
        m = np.asarray(mask)
        if m.ndim == 2:
            m = m[None]
        m = np.stack([resize_mask_nearest(mi, size) for mi in m])
        if not np.isin(m, (0, 1)).all():
            raise ValidationError("inpainting mask must be binary")
        return cls(to_model_space(src), masks_to_tensor(m), prompt, class_id)

    def condition(self, control=None) -> Condition:
        return Condition(
            prompt=self.prompt,
            mask=self.mask,
            masked_image=self.x0_ref * (1 - self.mask),
            control=control,
        )


# ---------------------------------------------------------------------------
# Registry


class ModelRegistry:
    """Directory of checkpoints plus ``index.json``.

    The index maps class ids to checkpoint filenames and records the
    scene-level model used for refinement. Loaded models are cached.
    """

    INDEX = "index.json"

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._cache: dict[str, tuple[Denoiser, NoiseSchedule, dict]] = {}
        idx = self.root / self.INDEX
        if idx.exists():
            data = json.loads(idx.read_text())
            self.classes = {int(k): v for k, v in data.get("classes", {}).items()}
            self.scene = data.get("scene")
            self.adapters = {int(k): v for k, v in data.get("adapters", {}).items()}
        else:
            self.classes, self.scene, self.adapters = {}, None, {}

    def _save_index(self) -> None:
        data = {
            "classes": {str(k): v for k, v in sorted(self.classes.items())},
            "scene": self.scene,
            "adapters": {str(k): v for k, v in sorted(self.adapters.items())},
        }
        (self.root / self.INDEX).write_text(json.dumps(data, indent=2, sort_keys=True))

    def register(self, class_id: int, filename: str) -> None:
        header = ckpt.read_header(self.root / filename)
        if header.get("class_id") != class_id:
            raise ValidationError(f"checkpoint {filename} has class_id {header.get('class_id')}, registry key {class_id}")
        if filename == self.scene:
            raise ValidationError("class checkpoint cannot be the scene checkpoint")
        self.classes[int(class_id)] = filename
        self._cache.pop(filename, None)
        self._save_index()

    def register_scene(self, filename: str) -> None:
        ckpt.read_header(self.root / filename)
        if filename in self.classes.values():
            raise ValidationError("scene checkpoint must differ from every class checkpoint")
        self.scene = filename
        self._cache.pop(filename, None)
        self._save_index()

    def register_adapter(self, class_id: int, filename: str) -> None:
        ckpt.read_header(self.root / filename)
        self.adapters[int(class_id)] = filename
        self._save_index()

    def path(self, class_id: int) -> Path:
        if class_id not in self.classes:
            raise RegistryLookupError(f"no model registered for class {class_id}")
        return self.root / self.classes[class_id]

    def scene_path(self) -> Path:
        if self.scene is None:
            raise RegistryLookupError("no scene model registered")
        return self.root / self.scene

    def header(self, class_id: int) -> dict:
        return ckpt.read_header(self.path(class_id))

    def _load(self, filename: str):
        if filename not in self._cache:
            self._cache[filename] = load_denoiser(self.root / filename)
        return self._cache[filename]

    def load(self, class_id: int) -> tuple[Denoiser, NoiseSchedule, dict]:
        self.path(class_id)
        return self._load(self.classes[class_id])

    def load_scene(self) -> tuple[Denoiser, NoiseSchedule, dict]:
        self.scene_path()
        return self._load(self.scene)


# ---------------------------------------------------------------------------
# Training


@dataclass
class SSIConfig(TrainConfig):
    """Per-class inpainting training; defaults follow the paper's fine-tuning setup."""

    steps: int = 1500
    lr: float = 1e-5
    batch: int = 16
    base_channels: int = 16
    channel_mults: tuple[int, ...] = (1, 2, 2)
    prediction_type: str | None = None  # None: per-organ default
    schedule: dict = field(default_factory=lambda: {"kind": "linear", "T": 1000, "beta_start": 1e-4, "beta_end": 0.02})

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["channel_mults"] = list(self.channel_mults)
        return d


@dataclass
class TrainedModel:
    denoiser: Denoiser
    schedule: NoiseSchedule
    losses: list[float]
    path: Path | None = None


def _class_training_tensors(class_id: int, dataset: Sequence[SampleRecord]):
    keep = [r for r in dataset if (r.label_map == class_id).any()]
    if not keep:
        raise EmptyClassError(f"no sample contains class {class_id}")
    x0 = to_model_space(np.stack([r.image for r in keep]))
    m = masks_to_tensor(np.stack([(r.label_map == class_id).astype(np.uint8) for r in keep]))
    return x0, m


def make_inpaint_denoiser(prompt: str, prediction_type: str, image_size: int, config: SSIConfig, seed: int) -> Denoiser:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        net = TinyUNet(7, 3, config.base_channels, config.channel_mults, 2, image_size)
    return Denoiser(net, prediction_type, ["", prompt])


def train_ssi(
    class_id: int,
    dataset: Sequence[SampleRecord],
    class_map: ClassMap,
    train_config: SSIConfig | None = None,
    registry: ModelRegistry | None = None,
) -> TrainedModel:
    """Train one inpainting model on the true masks of ``class_id``.

    Samples lacking the class are skipped. When ``registry`` is given the
    checkpoint is written there and registered under ``class_id``.
    """
    cfg = train_config or SSIConfig()
    entry = class_map.entry(class_id)
    x0_all, m_all = _class_training_tensors(class_id, dataset)
    pred_type = cfg.prediction_type or organ_defaults(entry.name)[0]
    schedule = NoiseSchedule.from_dict(cfg.schedule)
    prompt = make_prompt(class_id, class_map, "organ")
    den = make_inpaint_denoiser(prompt, pred_type, x0_all.shape[-1], cfg, cfg.seed)
    den.net.train()
    n = x0_all.shape[0]

    def loss_fn(step: int) -> torch.Tensor:
        rng = np.random.default_rng(step_seed(cfg.seed, step, 1))
        idx = rng.integers(0, n, size=cfg.batch)
        x0, m = x0_all[idx], m_all[idx]
        cond = Condition(prompt=prompt, mask=m, masked_image=x0 * (1 - m))
        return training_loss(
            den,
            {"x0": x0, "condition": cond},
            schedule,
            step_seed(cfg.seed, step, 2),
            p_uncond=cfg.p_uncond,
            noisy_transform=lambda x_t, x_ref: masked_blend(x_t, x_ref, m),
            loss_mask=m if cfg.masked_loss else None,
        )

    losses = fit(den.net.parameters(), loss_fn, cfg)
    den.net.eval()
    for p in den.net.parameters():
        p.requires_grad_(False)
    out = TrainedModel(den, schedule, losses)
    if registry is not None:
        fname = f"ssi_class{class_id}.ckpt"
        out.path = save_denoiser(
            registry.root / fname,
            den,
            schedule,
            class_id=class_id,
            training_config=cfg.to_dict(),
            seed=cfg.seed,
            extra={"final_loss": float(np.mean(losses[-50:])) if losses else None, "class_name": entry.name},
        )
        registry.register(class_id, fname)
    return out


# ---------------------------------------------------------------------------
# Sampling


def _item_generator(seed: int, *salt: int) -> torch.Generator:
    return torch.Generator().manual_seed(step_seed(seed, *salt) if salt else int(seed))


def _per_item_noise(seeds: Sequence[int], shape, salt: int | None = None) -> torch.Tensor:
    out = []
    for s in seeds:
        g = torch.Generator().manual_seed(int(s) if salt is None else step_seed(s, salt, 7))
        out.append(torch.randn(tuple(shape), generator=g))
    return torch.stack(out)


def inpaint_sample(
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    ctx: InpaintContext,
    sampler_config: SamplerConfig,
    seeds: Sequence[int],
    control=None,
    context_noise: str = "noised",
    trace: list | None = None,
) -> torch.Tensor:
    """Masked sampling on already-built tensors; returns float images in [-1, 1].

    ``context_noise`` picks what the unmasked region holds between steps:
    ``"clean"`` keeps the source pixels (the training-time input), ``"noised"``
    forward-diffuses the source to the current timestep with per-step noise.
    """
    if context_noise not in ("clean", "noised"):
        raise ValidationError(f"unknown context_noise {context_noise!r}")
    x0, m = ctx.x0_ref, ctx.mask
    shape = x0.shape[1:]
    eps = _per_item_noise(seeds, shape)
    x_T = masked_blend(eps, x0, m)

    def hook(x: torch.Tensor, t_next: int, i: int) -> torch.Tensor:
        if t_next < 0 or context_noise == "clean":
            ref = x0
        else:
            z = _per_item_noise(seeds, shape, salt=t_next)
            ref = forward_diffuse(x0, t_next, z, schedule)
        out = masked_blend(x, ref, m)
        if trace is not None:
            trace.append((t_next, out.clone(), ref.clone()))
        return out

    return ddim_sample(denoiser, x_T, ctx.condition(control), schedule, sampler_config, per_step_hook=hook)


def sample_inpaint(
    registry: ModelRegistry,
    class_id: int,
    source_image: np.ndarray,
    mask: np.ndarray,
    sampler_config: SamplerConfig,
    seed: int | Sequence[int],
    control=None,
    edges: np.ndarray | None = None,
    class_map: ClassMap | None = None,
    context_noise: str = "noised",
) -> np.ndarray:
    """Inpaint the organ ``class_id`` into ``source_image`` inside ``mask``.

    Accepts a single image (H,W,3) with mask (H,W) and an int seed, or a
    batch (B,H,W,3) / (B,H,W) with one seed per item. Returns uint8 in the
    same layout; pixels outside the mask equal the source bit-exactly.
    ``control`` is an optional ``ControlHandle``; its edge input defaults to
    soft edges extracted from ``mask``.
    """
    den, schedule, header = registry.load(class_id)
    single = np.asarray(source_image).ndim == 3
    seeds = [int(seed)] if np.isscalar(seed) else [int(s) for s in seed]
    size = den.descriptor["image_size"]
    prompt = den.prompts[1]
    ctx = InpaintContext.build(source_image, mask, prompt, class_id, size)
    if len(seeds) != ctx.x0_ref.shape[0]:
        raise ValidationError("need one seed per batch item")
    bound = None
    if control is not None:
        if edges is None:
            ms = ctx.mask[:, 0].numpy().astype(np.uint8)
            edges = np.stack([extract_soft_edges(BinaryMask(class_id, mi), control.blur_sigma).edges for mi in ms])
        bound = control.bind(edges)
    out = to_uint8(inpaint_sample(den, schedule, ctx, sampler_config, seeds, bound, context_noise))
    return out[0] if single else out

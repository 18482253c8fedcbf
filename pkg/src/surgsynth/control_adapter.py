"""Edge-conditioned control branch attached to a frozen inpainting model.

A trainable copy of the base encoder receives the stem features plus a
zero-initialised projection of the edge features; its outputs return to the
base skip sites through zero-initialised 1x1 projections, scaled by the
conditioning scale. With all projections at zero the combined model is the
base model, bit for bit.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .dataset_io import BinaryMask, ClassMap, SampleRecord, extract_soft_edges
from .diffusion import checkpoint as ckpt
from .diffusion.core import Condition, Denoiser, SamplerConfig, TrainConfig, fit, step_seed, to_model_space, training_loss
from .diffusion.schedule import NoiseSchedule
from .errors import CompatibilityError, EmptyClassError, RegistryLookupError, ValidationError
from .inpaint import ModelRegistry, masked_blend, sample_inpaint

log = logging.getLogger(__name__)

DEFAULT_CONDITIONING_SCALE = 0.5


def zero_conv(cin: int, cout: int) -> nn.Conv2d:
    conv = nn.Conv2d(cin, cout, 1)
    nn.init.zeros_(conv.weight)
    nn.init.zeros_(conv.bias)
    return conv


class ControlHandle(nn.Module):
    """Control branch bound to one base architecture.

    Parameters owned here: the edge feature encoder, the input projection,
    the encoder copy and one output projection per skip site. The base
    denoiser is referenced, never registered as a submodule, so it cannot be
    updated through this module.
    """

    def __init__(self, base: Denoiser, conditioning_scale: float = DEFAULT_CONDITIONING_SCALE, blur_sigma: float = 1.0):
        super().__init__()
        if not 0.0 <= conditioning_scale <= 1.0:
            raise ValidationError("conditioning_scale must lie in [0, 1]")
        self._base = [base]
        self.base_descriptor = dict(base.descriptor)
        self.conditioning_scale = float(conditioning_scale)
        self.blur_sigma = float(blur_sigma)
        c = base.descriptor["base_channels"]
        self.hint = nn.Sequential(
            nn.Conv2d(1, 16, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(16, 16, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(16, c, 3, padding=1),
            nn.SiLU(),
        )
        self.zero_in = zero_conv(c, c)
        self.encoder = copy.deepcopy(base.net.encoder)
        for p in self.encoder.parameters():
            p.requires_grad_(True)
        self.zero_out = nn.ModuleList(zero_conv(ch, ch) for ch in base.net.encoder.site_channels)

    @property
    def base(self) -> Denoiser:
        return self._base[0]

    def edge_features(self, edges: torch.Tensor) -> torch.Tensor:
        return self.hint(edges)

    def bind(self, edges, scale: float | None = None) -> "BoundControl":
        e = torch.as_tensor(np.asarray(edges, dtype=np.float32)) if not isinstance(edges, torch.Tensor) else edges.float()
        if e.ndim == 2:
            e = e[None, None]
        elif e.ndim == 3:
            e = e[:, None]
        return BoundControl(self, e, self.conditioning_scale if scale is None else float(scale))

    def header(self) -> dict:
        return {
            "kind": "control_adapter",
            "base_architecture": self.base_descriptor,
            "conditioning_scale": self.conditioning_scale,
            "blur_sigma": self.blur_sigma,
        }


def adapter_forward(
    handle: ControlHandle,
    S_f: torch.Tensor,
    c_f: torch.Tensor,
    emb: torch.Tensor,
    base_sites: list[torch.Tensor] | None = None,
    scale: float | None = None,
) -> list[torch.Tensor]:
    """Combined features at every skip site.

    ``y = B(S_f; base) + scale * C(B(S_f + C(c_f; in); copy); out)`` where the
    block ``B`` is the encoder and ``C`` the 1x1 projections. ``c_f`` are
    edge features with the stem's channel count.
    """
    if c_f.shape[0] != S_f.shape[0] or c_f.shape[2:] != S_f.shape[2:] or c_f.shape[1] != handle.zero_in.in_channels:
        raise ValidationError(f"control features {tuple(c_f.shape)} incompatible with stem {tuple(S_f.shape)}")
    s = handle.conditioning_scale if scale is None else scale
    if base_sites is None:
        base_sites = handle.base.net.encoder(S_f, emb)
    ctrl = handle.encoder(S_f + handle.zero_in(c_f), emb)
    return [b + s * proj(c) for b, proj, c in zip(base_sites, handle.zero_out, ctrl)]


class BoundControl:
    """A handle paired with a batch of edge images; plugs into ``TinyUNet.forward``."""

    def __init__(self, handle: ControlHandle, edges: torch.Tensor, scale: float):
        self.handle = handle
        self.edges = edges
        self.scale = scale

    def index(self, idx) -> "BoundControl":
        return BoundControl(self.handle, self.edges[idx], self.scale)

    def __call__(self, stem: torch.Tensor, sites: list[torch.Tensor], emb: torch.Tensor) -> list[torch.Tensor]:
        edges = self.edges
        if edges.shape[0] == 1 and stem.shape[0] > 1:
            edges = edges.expand(stem.shape[0], -1, -1, -1)
        if edges.shape[2:] != stem.shape[2:]:
            edges = F.interpolate(edges, size=stem.shape[2:], mode="bilinear", align_corners=False)
        c_f = self.handle.edge_features(edges)
        return adapter_forward(self.handle, stem, c_f, emb, base_sites=sites, scale=self.scale)


# ---------------------------------------------------------------------------
# Training and persistence


@dataclass
class AdapterConfig(TrainConfig):
    steps: int = 2000
    lr: float = 1e-3
    batch: int = 16
    masked_loss: bool = True
    ema_decay: float = 0.995
    true_mask_prob: float = 0.25
    max_dilation: int = 6
    blur_sigma: float = 1.0
    train_scale: float | None = None  # None: train at the conditioning scale used for sampling
    conditioning_scale: float = DEFAULT_CONDITIONING_SCALE


@dataclass
class TrainedAdapter:
    handle: ControlHandle
    losses: list[float]
    path: Path | None = None


def _load_base(base_checkpoint) -> tuple[Denoiser, NoiseSchedule, dict]:
    if isinstance(base_checkpoint, tuple) and isinstance(base_checkpoint[0], ModelRegistry):
        registry, class_id = base_checkpoint
        return registry.load(class_id)
    from .diffusion.store import load_denoiser

    path = Path(base_checkpoint)
    if not path.exists():
        raise RegistryLookupError(f"base checkpoint not found: {path}")
    return load_denoiser(path)


def dilate(mask: torch.Tensor, radius: int) -> torch.Tensor:
    """Square (Chebyshev) dilation of a 0/1 mask by ``radius`` pixels."""
    if radius <= 0:
        return mask.clone()
    k = 2 * radius + 1
    return F.max_pool2d(mask[None, None], k, stride=1, padding=radius)[0, 0]


def adapter_batch(records: Sequence[SampleRecord], class_id: int, blur_sigma: float):
    keep = [r for r in records if (r.label_map == class_id).any()]
    if not keep:
        raise EmptyClassError(f"no sample contains class {class_id}")
    x0 = to_model_space(np.stack([r.image for r in keep]))
    masks = np.stack([(r.label_map == class_id).astype(np.uint8) for r in keep])
    edges = np.stack([extract_soft_edges(BinaryMask(class_id, m), blur_sigma).edges for m in masks])
    return x0, torch.from_numpy(masks.astype(np.float32))[:, None], torch.from_numpy(edges.astype(np.float32))[:, None]


def train_adapter(
    base_checkpoint,
    dataset: Sequence[SampleRecord],
    class_id: int,
    train_config: AdapterConfig | None = None,
    out_path: str | Path | None = None,
    loss_probe: list | None = None,
) -> TrainedAdapter:
    """Fit the control branch with the base frozen, using the base's diffusion loss.

    ``base_checkpoint`` is a checkpoint path or a ``(registry, class_id)`` pair.
    A fraction ``true_mask_prob`` of the samples inpaint the true class mask;
    the rest inpaint the mask dilated by 1..``max_dilation`` pixels, so inside
    that region the edges are the only cue for where the organ ends.
    """
    cfg = train_config or AdapterConfig()
    base, schedule, header = _load_base(base_checkpoint)
    if not dataset:
        raise ValidationError("adapter training needs a non-empty dataset")
    for p in base.net.parameters():
        p.requires_grad_(False)
    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed)
        handle = ControlHandle(base, cfg.conditioning_scale, cfg.blur_sigma)
    x0_all, m_all, e_all = adapter_batch(dataset, class_id, cfg.blur_sigma)
    train_scale = cfg.conditioning_scale if cfg.train_scale is None else cfg.train_scale
    prompt = base.prompts[1] if len(base.prompts) > 1 else None
    n = x0_all.shape[0]

    def batch_at(step: int):
        rng = np.random.default_rng(step_seed(cfg.seed, step, 11))
        idx = rng.integers(0, n, size=cfg.batch)
        radii = np.where(rng.random(cfg.batch) < cfg.true_mask_prob, 0, rng.integers(1, cfg.max_dilation + 1, cfg.batch))
        m = torch.stack([dilate(m_all[i, 0], int(r)) for i, r in zip(idx, radii)])[:, None]
        return x0_all[idx], m, e_all[idx]

    def loss_with(step: int, control) -> torch.Tensor:
        x0, m, e = batch_at(step)
        cond = Condition(prompt=prompt, mask=m, masked_image=x0 * (1 - m), control=None if control is None else control(e))
        return training_loss(
            base,
            {"x0": x0, "condition": cond},
            schedule,
            step_seed(cfg.seed, step, 12),
            p_uncond=cfg.p_uncond,
            noisy_transform=lambda x_t, x_ref: masked_blend(x_t, x_ref, m),
            loss_mask=m if cfg.masked_loss else None,
        )

    if loss_probe is not None:
        with torch.no_grad():
            loss_probe.append(float(loss_with(0, None)))
            loss_probe.append(float(loss_with(0, lambda e: handle.bind(e, train_scale))))

    handle.train()
    losses = fit(
        [p for p in handle.parameters() if p.requires_grad],
        lambda step: loss_with(step, lambda e: handle.bind(e, train_scale)),
        cfg,
    )
    handle.eval()
    for p in handle.parameters():
        p.requires_grad_(False)
    out = TrainedAdapter(handle, losses)
    if out_path is not None:
        out.path = save_adapter(out_path, handle, class_id=class_id, training_config=cfg.to_dict(), seed=cfg.seed)
    return out


def save_adapter(path, handle: ControlHandle, *, class_id: int, training_config: dict, seed: int) -> Path:
    header = {**handle.header(), "class_id": class_id, "training_config": training_config, "seed": seed}
    return ckpt.save_checkpoint(path, header, handle.state_dict())


def check_compatible(base_descriptor: dict, handle_descriptor: dict) -> None:
    if dict(base_descriptor) != dict(handle_descriptor):
        raise CompatibilityError(
            f"adapter built for {handle_descriptor} cannot attach to base {base_descriptor}"
        )


def load_adapter(path, base: Denoiser) -> ControlHandle:
    header, state = ckpt.load_checkpoint(path)
    if header.get("kind") != "control_adapter":
        raise ValidationError(f"{path}: not a control adapter checkpoint")
    check_compatible(base.descriptor, header["base_architecture"])
    handle = ControlHandle(base, header["conditioning_scale"], header["blur_sigma"])
    handle.load_state_dict(state)
    handle.eval()
    for p in handle.parameters():
        p.requires_grad_(False)
    return handle


class SSICN:
    """Sampling context: a registered inpainting model with a control handle attached."""

    def __init__(self, registry: ModelRegistry, class_id: int, handle: ControlHandle):
        self.registry = registry
        self.class_id = class_id
        self.handle = handle

    def sample(self, source_image, mask, sampler_config: SamplerConfig, seed, edges=None, **kw) -> np.ndarray:
        return sample_inpaint(
            self.registry, self.class_id, source_image, mask, sampler_config, seed, control=self.handle, edges=edges, **kw
        )


def attach(registry: ModelRegistry, class_id: int, handle: ControlHandle) -> SSICN:
    check_compatible(registry.header(class_id)["architecture"], handle.base_descriptor)
    base, _, _ = registry.load(class_id)
    if handle.base is not base:
        # rebind the branch to the registry's instance of the same weights
        handle = copy.copy(handle)
        handle._base = [base]
    return SSICN(registry, class_id, handle)

"""Forward process, ε/v parameterizations, training loss, guidance and samplers."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Iterable, Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from ..errors import RegistryLookupError, ValidationError
from .nets import TinyUNet
from .schedule import NoiseSchedule

log = logging.getLogger(__name__)

PREDICTION_TYPES = ("epsilon", "v")
SCHEDULER_KINDS = ("ddim", "fast_multistep")

StepHook = Callable[[torch.Tensor, int, int], torch.Tensor]


def _coef(schedule: NoiseSchedule, t, like: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """sqrt(alpha_bar_t) and sqrt(1 - alpha_bar_t), broadcast against ``like``."""
    ab = schedule.alpha_bars
    if isinstance(t, torch.Tensor):
        t = t.detach().cpu().numpy()
    t = np.asarray(t)
    if t.ndim == 0:
        a = np.float64(ab[int(t)])
        sa = torch.tensor(np.sqrt(a), dtype=like.dtype)
        sb = torch.tensor(np.sqrt(1.0 - a), dtype=like.dtype)
        return sa, sb
    a = ab[t.astype(np.int64)]
    shape = (-1,) + (1,) * (like.ndim - 1)
    sa = torch.as_tensor(np.sqrt(a), dtype=like.dtype).reshape(shape)
    sb = torch.as_tensor(np.sqrt(1.0 - a), dtype=like.dtype).reshape(shape)
    return sa, sb


def _check_t(t, schedule: NoiseSchedule) -> None:
    tt = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
    if (tt < 0).any() or (tt >= schedule.T).any():
        raise ValidationError(f"timestep out of range [0, {schedule.T})")


def forward_diffuse(x0: torch.Tensor, t, z: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    if x0.shape != z.shape:
        raise ValidationError(f"noise shape {tuple(z.shape)} != image shape {tuple(x0.shape)}")
    _check_t(t, schedule)
    sa, sb = _coef(schedule, t, x0)
    return sa * x0 + sb * z


def v_from_eps(x0: torch.Tensor, z: torch.Tensor, t, schedule: NoiseSchedule) -> torch.Tensor:
    if x0.shape != z.shape:
        raise ValidationError("x0 and noise must share a shape")
    sa, sb = _coef(schedule, t, x0)
    return sa * z - sb * x0


def eps_from_v(x_t: torch.Tensor, v: torch.Tensor, t, schedule: NoiseSchedule) -> tuple[torch.Tensor, torch.Tensor]:
    """Invert the velocity parameterization; returns ``(eps, x0)``."""
    if x_t.shape != v.shape:
        raise ValidationError("x_t and v must share a shape")
    sa, sb = _coef(schedule, t, x_t)
    return sa * v + sb * x_t, sa * x_t - sb * v


# ---------------------------------------------------------------------------
# Conditioning and the denoiser wrapper


@dataclass
class Condition:
    """What the network sees besides ``(x_t, t)``.

    ``prompt=None`` is the null (unconditional) prompt. For inpainting models
    ``mask`` (B,1,H,W) and ``masked_image`` (B,3,H,W) are appended as input
    channels; ``control`` is a bound control branch (see ``control_adapter``).
    """

    prompt: str | Sequence[str | None] | None = None
    mask: torch.Tensor | None = None
    masked_image: torch.Tensor | None = None
    control: Any = None

    def null(self) -> "Condition":
        return replace(self, prompt=None)

    def index(self, idx) -> "Condition":
        prompt = self.prompt
        if prompt is not None and not isinstance(prompt, str):
            prompt = [prompt[i] for i in np.asarray(idx).tolist()]
        return Condition(
            prompt=prompt,
            mask=None if self.mask is None else self.mask[idx],
            masked_image=None if self.masked_image is None else self.masked_image[idx],
            control=None if self.control is None else self.control.index(idx),
        )


class Denoiser:
    """A prompt-conditioned noise (or velocity) predictor.

    Wraps a ``TinyUNet`` together with its prompt vocabulary (index 0 is the
    null prompt) and its prediction type.
    """

    def __init__(self, net: TinyUNet, prediction_type: str = "epsilon", prompts: Sequence[str] = ("",)):
        if prediction_type not in PREDICTION_TYPES:
            raise ValidationError(f"unknown prediction type {prediction_type!r}")
        if not prompts or prompts[0] != "":
            prompts = ["", *prompts]
        if len(prompts) > net.descriptor["n_prompts"]:
            raise ValidationError("more prompts than prompt-embedding slots")
        self.net = net
        self.prediction_type = prediction_type
        self.prompts = list(prompts)
        self._prompt_index = {p: i for i, p in enumerate(self.prompts)}

    @property
    def descriptor(self) -> dict:
        return self.net.descriptor

    @property
    def is_inpainting(self) -> bool:
        return self.descriptor["in_channels"] == 7

    def prompt_ids(self, prompt, batch: int) -> torch.Tensor:
        if prompt is None or isinstance(prompt, str):
            prompt = [prompt] * batch
        ids = []
        for p in prompt:
            if p is None or p == "":
                ids.append(0)
            elif p in self._prompt_index:
                ids.append(self._prompt_index[p])
            else:
                raise RegistryLookupError(f"prompt {p!r} unknown to this model ({self.prompts[1:]})")
        return torch.tensor(ids, dtype=torch.long)

    def network_input(self, x_t: torch.Tensor, cond: Condition) -> torch.Tensor:
        if not self.is_inpainting:
            return x_t
        if cond.mask is None or cond.masked_image is None:
            raise ValidationError("inpainting model needs mask and masked_image in the condition")
        return torch.cat([x_t, cond.mask.to(x_t.dtype), cond.masked_image.to(x_t.dtype)], dim=1)

    def __call__(self, x_t: torch.Tensor, t, cond: Condition) -> torch.Tensor:
        b = x_t.shape[0]
        t = torch.as_tensor(t, dtype=torch.long)
        if t.ndim == 0:
            t = t.expand(b)
        ids = self.prompt_ids(cond.prompt, b)
        return self.net(self.network_input(x_t, cond), t, ids, control=cond.control)

    def parameters(self):
        return self.net.parameters()


def to_epsilon(pred: torch.Tensor, x_t: torch.Tensor, t, prediction_type: str, schedule: NoiseSchedule) -> torch.Tensor:
    if prediction_type == "epsilon":
        return pred
    eps, _ = eps_from_v(x_t, pred, t, schedule)
    return eps


# ---------------------------------------------------------------------------
# Training


def draw_training_noise(shape: Sequence[int], T: int, seed: int, p_uncond: float = 0.1):
    """Seeded draw of ``(t, z, drop)`` for one loss evaluation.

    ``drop`` flags the batch items whose prompt is replaced by the null prompt.
    """
    g = torch.Generator().manual_seed(int(seed))
    b = shape[0]
    t = torch.randint(0, T, (b,), generator=g)
    z = torch.randn(tuple(shape), generator=g)
    drop = torch.rand(b, generator=g) < p_uncond
    return t, z, drop


def _drop_prompts(prompt, drop: torch.Tensor, batch: int):
    if prompt is None or isinstance(prompt, str):
        prompt = [prompt] * batch
    return [None if d else p for p, d in zip(prompt, drop.tolist())]


def training_loss(
    denoiser: Denoiser,
    batch: dict,
    schedule: NoiseSchedule,
    rng_seed: int,
    p_uncond: float = 0.1,
    noisy_transform: Callable[[torch.Tensor, torch.Tensor], torch.Tensor] | None = None,
    loss_mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """Mean squared error between the prediction and the ε or v target.

    ``batch`` holds ``x0`` (B,C,H,W) and ``condition`` (a ``Condition``).
    ``noisy_transform(x_t, x0)`` may rewrite the noised input before the
    network sees it (the masked blend for inpainting). ``loss_mask`` restricts
    the average to selected pixels.
    """
    x0 = batch["x0"]
    cond: Condition = batch["condition"]
    if x0.shape[0] == 0:
        raise ValidationError("empty batch")
    t, z, drop = draw_training_noise(x0.shape, schedule.T, rng_seed, p_uncond)
    z = z.to(x0.dtype)
    x_t = forward_diffuse(x0, t, z, schedule)
    if noisy_transform is not None:
        x_t = noisy_transform(x_t, x0)
    cond = replace(cond, prompt=_drop_prompts(cond.prompt, drop, x0.shape[0]))
    target = z if denoiser.prediction_type == "epsilon" else v_from_eps(x0, z, t, schedule)
    pred = denoiser(x_t, t, cond)
    err = (pred - target) ** 2
    if loss_mask is None:
        return err.mean()
    w = loss_mask.expand_as(err).to(err.dtype)
    return (err * w).sum() / w.sum().clamp_min(1.0)


@dataclass
class TrainConfig:
    steps: int = 1500
    lr: float = 1e-5
    batch: int = 16
    seed: int = 0
    p_uncond: float = 0.1
    masked_loss: bool = False
    ema_decay: float = 0.0
    log_every: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def fit(
    params: Iterable[torch.nn.Parameter],
    loss_fn: Callable[[int], torch.Tensor],
    config: TrainConfig,
) -> list[float]:
    """Adam loop; ``loss_fn(step)`` must be a deterministic function of the step.

    With ``config.ema_decay > 0`` the parameters end up holding their
    exponential moving average.
    """
    params = list(params)
    opt = torch.optim.Adam(params, lr=config.lr)
    ema = [p.detach().clone() for p in params] if config.ema_decay > 0 else None
    history = []
    for step in range(config.steps):
        loss = loss_fn(step)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if ema is not None:
            d = min(config.ema_decay, (1 + step) / (10 + step))
            with torch.no_grad():
                for e, p in zip(ema, params):
                    e.mul_(d).add_(p.detach(), alpha=1 - d)
        history.append(float(loss.detach()))
        if config.log_every and (step + 1) % config.log_every == 0:
            log.info("step %d loss %.5f", step + 1, np.mean(history[-config.log_every:]))
    if ema is not None:
        with torch.no_grad():
            for e, p in zip(ema, params):
                p.copy_(e)
    return history


def step_seed(seed: int, step: int, salt: int = 0) -> int:
    return int(np.random.SeedSequence([int(seed), int(step), int(salt)]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# Guidance and sampling


@dataclass
class SamplerConfig:
    n_steps: int = 30
    guidance_scale: float = 1.0
    scheduler_kind: str = "ddim"
    eta: float = 0.0
    clip_denoised: bool = True

    def validate(self, T: int) -> None:
        if not 1 <= self.n_steps <= T:
            raise ValidationError(f"n_steps must be in [1, {T}], got {self.n_steps}")
        if self.guidance_scale < 0:
            raise ValidationError("guidance_scale must be >= 0")
        if self.scheduler_kind not in SCHEDULER_KINDS:
            raise ValidationError(f"unknown scheduler {self.scheduler_kind!r}")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def cfg_predict(
    denoiser: Denoiser,
    x_t: torch.Tensor,
    t,
    condition: Condition,
    guidance_scale: float,
    schedule: NoiseSchedule,
) -> torch.Tensor:
    """Guided noise estimate ``eps_u + s * (eps_c - eps_u)`` in ε space."""
    s = float(guidance_scale)
    if s == 1.0:
        return to_epsilon(denoiser(x_t, t, condition), x_t, t, denoiser.prediction_type, schedule)
    eps_u = to_epsilon(denoiser(x_t, t, condition.null()), x_t, t, denoiser.prediction_type, schedule)
    if s == 0.0:
        return eps_u
    eps_c = to_epsilon(denoiser(x_t, t, condition), x_t, t, denoiser.prediction_type, schedule)
    return eps_u + s * (eps_c - eps_u)


def sampling_timesteps(t_start: int, n_steps: int) -> list[int]:
    """Evenly strided, strictly decreasing timesteps from ``t_start`` down to 0."""
    n = min(int(n_steps), t_start + 1)
    ts = np.rint(np.linspace(t_start, 0, n)).astype(int)
    return [int(t) for t in dict.fromkeys(ts.tolist())]


@torch.no_grad()
def ddim_sample(
    denoiser: Denoiser,
    x_T: torch.Tensor,
    condition: Condition,
    schedule: NoiseSchedule,
    sampler_config: SamplerConfig,
    per_step_hook: StepHook | None = None,
    t_start: int | None = None,
    generator: torch.Generator | None = None,
) -> torch.Tensor:
    """Deterministic (eta=0) DDIM; returns the final x0 estimate clamped to [-1, 1].

    ``per_step_hook(x, t_next, i)`` runs after every update, where ``t_next``
    is the timestep the state now sits at (-1 after the final step, meaning
    clean data).
    """
    sampler_config.validate(schedule.T)
    if sampler_config.scheduler_kind == "fast_multistep":
        return multistep_sample(denoiser, x_T, condition, schedule, sampler_config, per_step_hook, t_start)
    t_start = schedule.T - 1 if t_start is None else int(t_start)
    ts = sampling_timesteps(t_start, sampler_config.n_steps)
    ab = schedule.alpha_bars
    x = x_T
    for i, t in enumerate(ts):
        t_next = ts[i + 1] if i + 1 < len(ts) else -1
        a_t = float(ab[t])
        a_next = float(ab[t_next]) if t_next >= 0 else 1.0
        eps = cfg_predict(denoiser, x, t, condition, sampler_config.guidance_scale, schedule)
        x0_pred = (x - float(np.sqrt(1.0 - a_t)) * eps) / float(np.sqrt(a_t))
        if sampler_config.clip_denoised:
            x0_pred = x0_pred.clamp(-1.0, 1.0)
        sigma = 0.0
        if sampler_config.eta > 0 and t_next >= 0:
            sigma = float(sampler_config.eta * np.sqrt((1 - a_next) / (1 - a_t) * (1 - a_t / a_next)))
        x = float(np.sqrt(a_next)) * x0_pred + float(np.sqrt(max(1.0 - a_next - sigma**2, 0.0))) * eps
        if sigma > 0:
            x = x + sigma * torch.randn(x.shape, generator=generator, dtype=x.dtype)
        if per_step_hook is not None:
            x = per_step_hook(x, t_next, i)
    return x.clamp(-1.0, 1.0)


@torch.no_grad()
def multistep_sample(
    denoiser: Denoiser,
    x_T: torch.Tensor,
    condition: Condition,
    schedule: NoiseSchedule,
    sampler_config: SamplerConfig,
    per_step_hook: StepHook | None = None,
    t_start: int | None = None,
) -> torch.Tensor:
    """Second-order multistep solver in data-prediction form (DPM-Solver++ 2M)."""
    t_start = schedule.T - 1 if t_start is None else int(t_start)
    ts = sampling_timesteps(t_start, sampler_config.n_steps)
    ab = schedule.alpha_bars

    def lam(a):
        return 0.5 * np.log(a / (1.0 - a))

    x = x_T
    prev_x0, prev_h = None, None
    for i, t in enumerate(ts):
        t_next = ts[i + 1] if i + 1 < len(ts) else -1
        a_t = float(ab[t])
        eps = cfg_predict(denoiser, x, t, condition, sampler_config.guidance_scale, schedule)
        x0_pred = (x - float(np.sqrt(1.0 - a_t)) * eps) / float(np.sqrt(a_t))
        if sampler_config.clip_denoised:
            x0_pred = x0_pred.clamp(-1.0, 1.0)
        if t_next < 0:
            x = x0_pred
        else:
            a_n = float(ab[t_next])
            h = lam(a_n) - lam(a_t)
            d = x0_pred
            if prev_x0 is not None:
                r = float(prev_h / h)
                d = (1 + 1 / (2 * r)) * x0_pred - (1 / (2 * r)) * prev_x0
            x = float(np.sqrt((1 - a_n) / (1 - a_t))) * x - float(np.sqrt(a_n) * np.expm1(-h)) * d
            prev_x0, prev_h = x0_pred, h
        if per_step_hook is not None:
            x = per_step_hook(x, t_next, i)
    return x.clamp(-1.0, 1.0)


# ---------------------------------------------------------------------------
# Latent codec slot


class Codec(Protocol):
    def encode(self, x: torch.Tensor) -> torch.Tensor: ...

    def decode(self, z: torch.Tensor) -> torch.Tensor: ...


class IdentityCodec:
    """Pixel-space default: diffusion runs directly on [-1, 1] images."""

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return x

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return z


# ---------------------------------------------------------------------------
# Image <-> tensor conversion


def to_model_space(images: np.ndarray) -> torch.Tensor:
    """uint8 (B,H,W,3) or (H,W,3) -> float32 (B,3,H,W) in [-1, 1]."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    x = torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(torch.float32)
    return x / 127.5 - 1.0


def to_uint8(x: torch.Tensor) -> np.ndarray:
    """float (B,3,H,W) in [-1, 1] -> uint8 (B,H,W,3)."""
    arr = ((x.detach().clamp(-1, 1) + 1.0) * 127.5).round().to(torch.uint8).numpy()
    return arr.transpose(0, 2, 3, 1)


def masks_to_tensor(masks: np.ndarray) -> torch.Tensor:
    m = np.asarray(masks)
    if m.ndim == 2:
        m = m[None]
    return torch.from_numpy(m.astype(np.float32))[:, None]


def resize_mask_nearest(mask: np.ndarray, size: int) -> np.ndarray:
    m = np.asarray(mask)
    if m.shape == (size, size):
        return m
    t = torch.from_numpy(m.astype(np.float32))[None, None]
    return F.interpolate(t, size=(size, size), mode="nearest")[0, 0].numpy().astype(np.uint8)

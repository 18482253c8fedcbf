"""Generic conditional diffusion machinery (pixel space)."""

from .checkpoint import file_sha256, load_checkpoint, read_header, save_checkpoint
from .core import (
    Condition,
    Denoiser,
    IdentityCodec,
    SamplerConfig,
    TrainConfig,
    cfg_predict,
    ddim_sample,
    draw_training_noise,
    eps_from_v,
    forward_diffuse,
    multistep_sample,
    training_loss,
    v_from_eps,
)
from .nets import TinyUNet
from .schedule import NoiseSchedule, build_schedule
from .store import load_denoiser, save_denoiser

"""Conditional latent diffusion: schedule, VAE, prompt conditioning, denoiser."""

from dermdiff.diffusion.schedule import (
    NoiseSchedule,
    diffusion_loss,
    forward_diffuse,
    make_schedule,
)
from dermdiff.diffusion.vae import (
    VaeLite,
    kl_term,
    load_vae,
    save_vae,
    train_vae,
    vae_decode,
    vae_encode,
)
from dermdiff.diffusion.condition import ConditionEncoder
from dermdiff.diffusion.unet import UNetConfig, init_unet_params, unet_forward
from dermdiff.diffusion.model import (
    DermDiffModel,
    DiffusionTrainConfig,
    generate_balanced_dataset,
    load_model,
    predict_noise,
    sample,
    save_model,
    train_diffusion,
)

__all__ = [
    "NoiseSchedule",
    "make_schedule",
    "forward_diffuse",
    "diffusion_loss",
    "VaeLite",
    "train_vae",
    "vae_encode",
    "vae_decode",
    "kl_term",
    "save_vae",
    "load_vae",
    "ConditionEncoder",
    "UNetConfig",
    "init_unet_params",
    "unet_forward",
    "DermDiffModel",
    "DiffusionTrainConfig",
    "train_diffusion",
    "predict_noise",
    "sample",
    "generate_balanced_dataset",
    "save_model",
    "load_model",
]

"""All trainable parts in one module tree, plus checkpoint (de)serialization."""

from __future__ import annotations

import hashlib

import torch
import torch.nn as nn

from .checkpoint import Checkpoint
from .conditioner import Conditioner
from .config import ModelConfig
from .diffusion import Denoiser, NoiseSchedule, make_schedule
from .encoder import Encoder, RgbHead
from .errors import ConfigurationError
from .spatial_decoder import SpatialDecoder
from .spatial_vae import SpatialVAE

PARTS = ("encoder", "rgb_head", "decoder", "vae", "conditioner", "denoiser")


def check_model_config(cfg: ModelConfig) -> None:
    e = cfg.encoder
    checks = [
        (cfg.decoder.enc_dim == e.dim, "decoder.enc_dim must equal encoder.dim"),
        (cfg.decoder.grid == e.grid, "decoder.grid must equal the encoder token grid"),
        (cfg.decoder.patch_size == e.patch_size, "decoder.patch_size must equal encoder.patch_size"),
        (cfg.vae.in_dim == e.dim, "vae.in_dim must equal encoder.dim"),
        (cfg.vae.grid == e.grid, "vae.grid must equal the encoder token grid"),
        (cfg.denoiser.latent_grid == cfg.vae.latent_grid, "denoiser.latent_grid must equal vae.latent_grid"),
        (cfg.denoiser.latent_channels == cfg.vae.latent_channels, "latent channel counts differ"),
        (cfg.denoiser.context_dim == cfg.conditioner.dim, "denoiser.context_dim must equal conditioner.dim"),
        (cfg.conditioner.token_dim == e.dim, "conditioner.token_dim must equal encoder.dim"),
        (cfg.conditioner.grid == e.grid, "conditioner.grid must equal the encoder token grid"),
    ]
    for ok, msg in checks:
        if not ok:
            raise ConfigurationError(msg)


class UniUGGMini(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig()):
        super().__init__()
        check_model_config(cfg)
        self.cfg = cfg
        self.encoder = Encoder(cfg.encoder)
        self.rgb_head = RgbHead(cfg.encoder.dim, cfg.encoder.patch_size)
        self.decoder = SpatialDecoder(cfg.decoder)
        self.vae = SpatialVAE(cfg.vae)
        self.conditioner = Conditioner(cfg.conditioner)
        self.denoiser = Denoiser(cfg.denoiser)
        # 1 / std of the VAE posterior means, set after the VAE stage
        self.register_buffer("latent_scale", torch.ones(()))
        self.vae.attach_decoder(self.decoder, self.rgb_head)

    @property
    def schedule(self) -> NoiseSchedule:
        s = self.cfg.schedule
        return make_schedule(s.steps, s.beta_start, s.beta_end)

    def tensors(self) -> dict[str, torch.Tensor]:
        return {k: v.detach() for k, v in self.state_dict().items()}

    def load_tensors(self, ckpt: Checkpoint) -> None:
        state = self.state_dict()
        missing = sorted(set(state) - set(ckpt.tensors))
        if missing:
            raise ConfigurationError(f"checkpoint lacks {len(missing)} tensors, e.g. {missing[:3]}")
        with torch.no_grad():
            for name, value in state.items():
                src = ckpt.tensors[name]
                if tuple(src.shape) != tuple(value.shape):
                    raise ConfigurationError(f"shape mismatch for {name}: {src.shape} vs {tuple(value.shape)}")
                value.copy_(torch.from_numpy(src.copy()))


def build_model(cfg: ModelConfig, seed: int) -> UniUGGMini:
    """Model with weights initialized from ``seed`` without touching the global RNG stream."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return UniUGGMini(cfg)


def tensor_digest(named_tensors) -> str:
    """SHA-256 over names and raw bytes of ``(name, tensor)`` pairs, in name order."""
    h = hashlib.sha256()
    for name, t in sorted(named_tensors, key=lambda item: item[0]):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()

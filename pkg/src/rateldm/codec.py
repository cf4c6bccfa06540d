"""Small convolutional VAE compressing log-mel spectrograms 4x4 into latents.

One codec is shared across all sampling rates: every rate's mel grid runs at
100 frames/second with the same band count, so the latent space is
rate-agnostic and the rate information lives purely in the condition.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .dsp import LOG_FLOOR, MelSpectrogram, RateConfig

# fixed affine mapping log-mel into a roughly unit-scale range for the convs
MEL_SHIFT = -LOG_FLOOR / 2.0  # +5.756
MEL_SCALE = 4.0

LATENT_CHANNELS = 4
DOWN_FACTOR = 4


@dataclass
class Latent:
    """Latent tensor (C, T, F) plus the normalization and source grid info."""

    values: torch.Tensor
    scale_factor: float = 1.0
    source_config: RateConfig | None = None


def pad_frames(x: torch.Tensor, multiple: int = DOWN_FACTOR) -> torch.Tensor:
    """Edge-replicate the frame axis of (B, 1, frames, mel) up to a multiple."""
    pad = (-x.shape[2]) % multiple
    if pad:
        x = F.pad(x, (0, 0, 0, pad), mode="replicate")
    return x


class MelCodec(nn.Module):
    def __init__(self, latent_channels: int = LATENT_CHANNELS, base: int = 32,
                 kl_weight: float = 1e-4):
        super().__init__()
        self.latent_channels = latent_channels
        self.kl_weight = kl_weight
        self.encoder = nn.Sequential(
            nn.Conv2d(1, base, 3, padding=1),
            nn.GroupNorm(8, base), nn.SiLU(),
            nn.Conv2d(base, base, 3, stride=2, padding=1),
            nn.GroupNorm(8, base), nn.SiLU(),
            nn.Conv2d(base, base * 2, 3, stride=2, padding=1),
            nn.GroupNorm(8, base * 2), nn.SiLU(),
            nn.Conv2d(base * 2, 2 * latent_channels, 3, padding=1),
        )
        self.decoder = nn.Sequential(
            nn.Conv2d(latent_channels, base * 2, 3, padding=1),
            nn.GroupNorm(8, base * 2), nn.SiLU(),
            nn.ConvTranspose2d(base * 2, base, 4, stride=2, padding=1),
            nn.GroupNorm(8, base), nn.SiLU(),
            nn.ConvTranspose2d(base, base, 4, stride=2, padding=1),
            nn.GroupNorm(8, base), nn.SiLU(),
            nn.Conv2d(base, 1, 3, padding=1),
        )

    def encode(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(B, 1, frames, mel) normalized input -> (mean, logvar), each (B, C, T, F)."""
        if not torch.all(torch.isfinite(x)):
            raise ValueError("codec input contains non-finite values")
        if x.shape[3] % DOWN_FACTOR != 0:
            raise ValueError(f"mel_dim must be divisible by {DOWN_FACTOR}")
        x = pad_frames(x)
        h = self.encoder(x)
        mean, logvar = torch.chunk(h, 2, dim=1)
        return mean, torch.clamp(logvar, -20.0, 10.0)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        """(B, C, T, F) latent -> (B, 1, 4T, 4F) normalized mel."""
        if z.shape[1] != self.latent_channels:
            raise ValueError(
                f"latent has {z.shape[1]} channels, codec expects {self.latent_channels}"
            )
        return self.decoder(z)

    # --- mel-domain helpers -------------------------------------------------

    @staticmethod
    def normalize(values: np.ndarray | torch.Tensor) -> torch.Tensor:
        x = torch.as_tensor(np.asarray(values), dtype=torch.get_default_dtype())
        return (x + MEL_SHIFT) / MEL_SCALE

    @staticmethod
    def denormalize(x: torch.Tensor) -> torch.Tensor:
        return x * MEL_SCALE - MEL_SHIFT

    def encode_mel(self, m: MelSpectrogram) -> tuple[torch.Tensor, torch.Tensor]:
        x = self.normalize(m.values)[None, None]
        mean, logvar = self.encode(x)
        return mean[0], logvar[0]

    def decode_mel(self, z: torch.Tensor, frames: int, config: RateConfig) -> MelSpectrogram:
        if z.ndim == 3:
            z = z[None]
        x = self.decode(z)[0, 0]
        values = self.denormalize(x)[:frames].detach().numpy()
        return MelSpectrogram(values.astype(np.float32), config)

    def decode_latent(self, latent: Latent, frames: int) -> MelSpectrogram:
        """Decode a normalized Latent back to log-mel on its source grid."""
        if latent.source_config is None:
            raise ValueError("latent has no source RateConfig")
        z = latent.values / latent.scale_factor
        return self.decode_mel(z, frames, latent.source_config)


def reparameterize(mean: torch.Tensor, logvar: torch.Tensor,
                   generator: torch.Generator | None = None) -> torch.Tensor:
    if mean.shape != logvar.shape:
        raise ValueError(f"shape mismatch: {tuple(mean.shape)} vs {tuple(logvar.shape)}")
    eps = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
    return mean + torch.exp(0.5 * logvar) * eps


def kl_divergence(mean: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """Mean per-component KL(q || N(0, I)); nonnegative by construction."""
    return torch.mean(0.5 * (mean**2 + torch.exp(logvar) - 1.0 - logvar))


def codec_loss(codec: MelCodec, x: torch.Tensor,
               generator: torch.Generator | None = None) -> tuple[torch.Tensor, dict]:
    """Reconstruction MSE plus KL, on normalized mel input (B, 1, frames, mel)."""
    x_pad = pad_frames(x)
    mean, logvar = codec.encode(x)
    z = reparameterize(mean, logvar, generator)
    recon = codec.decode(z)
    recon_mse = torch.mean((recon - x_pad) ** 2)
    kl = kl_divergence(mean, logvar)
    loss = recon_mse + codec.kl_weight * kl
    return loss, {"recon_mse": float(recon_mse.detach()), "kl": float(kl.detach())}


@dataclass
class CodecTrainConfig:
    steps: int = 1500
    batch_size: int = 32
    lr: float = 2e-4
    kl_weight: float = 1e-4
    seed: int = 0
    val_interval: int = 100


def train_codec(train_mels: list[np.ndarray], valid_mels: list[np.ndarray],
                cfg: CodecTrainConfig, log=None) -> tuple[MelCodec, dict]:
    """Train the codec; returns the best-validation-loss parameters.

    Inputs are raw log-mel (frames, mel) arrays. The returned info dict has
    the loss curve, best step, and the latent scale factor computed from the
    training-set posterior means.
    """
    if not train_mels:
        raise ValueError("empty training split")
    torch.manual_seed(cfg.seed)
    codec = MelCodec(kl_weight=cfg.kl_weight)
    opt = torch.optim.Adam(codec.parameters(), lr=cfg.lr)
    train_x = torch.stack([MelCodec.normalize(m) for m in train_mels])[:, None]
    valid_x = torch.stack([MelCodec.normalize(m) for m in valid_mels])[:, None] if valid_mels else train_x

    best_state = {k: v.clone() for k, v in codec.state_dict().items()}
    best_val = float("inf")
    best_step = 0
    curve = []
    for step in range(1, cfg.steps + 1):
        g = torch.Generator().manual_seed(int(np.random.SeedSequence((cfg.seed, step)).generate_state(1)[0]))
        idx = torch.randint(0, len(train_x), (min(cfg.batch_size, len(train_x)),), generator=g)
        loss, parts = codec_loss(codec, train_x[idx], g)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"codec loss diverged at step {step}: {parts}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        curve.append(float(loss.detach()))

        if step % cfg.val_interval == 0 or step == cfg.steps:
            with torch.no_grad():
                vg = torch.Generator().manual_seed(cfg.seed)
                val_loss = float(codec_loss(codec, valid_x, vg)[0])
            if val_loss < best_val:
                best_val = val_loss
                best_step = step
                best_state = {k: v.clone() for k, v in codec.state_dict().items()}
            if log:
                log(f"codec step {step}: train {float(loss.detach()):.5f} val {val_loss:.5f}")

    codec.load_state_dict(best_state)
    with torch.no_grad():
        means = codec.encode(pad_frames(train_x))[0]
        scale_factor = float(1.0 / torch.std(means))
    info = {
        "loss_curve": curve,
        "best_step": best_step,
        "best_val_loss": best_val,
        "scale_factor": scale_factor,
    }
    return codec, info

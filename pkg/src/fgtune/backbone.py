"""Toy latent text-to-image diffusion model.

The autoencoder is a frozen linear codec: 4x4 patches (48 values) are
projected onto 8 fixed orthonormal directions fitted once by PCA on seeded
procedural scenes. The decoder is the transpose. Everything trainable lives
in :class:`TextEncoder` and :class:`Denoiser`.
"""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import dataprep


class ConfigError(ValueError):
    pass


class NumericGuardError(ArithmeticError):
    pass


# ---------------------------------------------------------------------------
# schedule

class NoiseSchedule:
    """Cosine schedule with a small terminal floor.

    ``alpha_bar[t]`` for ``t = 0..T``; index 0 is the clean endpoint
    (exactly 1) and is only used by the sampler and for testing.
    """

    def __init__(self, T: int = 1000, s: float = 0.008, terminal: float = 5e-3):
        self.T = T
        self.s = s
        self.terminal = terminal
        steps = np.arange(T + 1, dtype=np.float64)
        f = np.cos((steps / T + s) / (1 + s) * math.pi / 2) ** 2
        self.alpha_bar = terminal + (1 - terminal) * f / f[0]
        self.alpha_bar[0] = 1.0

    def cosine(self, t: int) -> float:
        f0 = math.cos(self.s / (1 + self.s) * math.pi / 2) ** 2
        ft = math.cos((t / self.T + self.s) / (1 + self.s) * math.pi / 2) ** 2
        return self.terminal + (1 - self.terminal) * ft / f0

    def check(self, t, allow_zero: bool = False):
        lo = 0 if allow_zero else 1
        tt = np.asarray(t)
        if np.any(tt < lo) or np.any(tt > self.T) or np.any(tt != np.round(tt)):
            raise ValueError(f"timestep out of range [{lo}, {self.T}]: {t}")

    def ab(self, t, like: torch.Tensor) -> torch.Tensor:
        """``alpha_bar`` at ``t`` broadcast against a latent batch."""
        a = torch.as_tensor(self.alpha_bar[np.asarray(t, dtype=np.int64)], dtype=like.dtype)
        if a.ndim == 1:
            a = a.view(-1, *([1] * (like.ndim - 1)))
        return a


def add_noise(schedule: NoiseSchedule, z0: torch.Tensor, t, eps: torch.Tensor) -> torch.Tensor:
    schedule.check(t, allow_zero=True)
    a = schedule.ab(t, z0)
    return a.sqrt() * z0 + (1 - a).sqrt() * eps


def predict_z0(schedule: NoiseSchedule, z_t: torch.Tensor, t, eps_hat: torch.Tensor,
               floor: float = 1e-6) -> torch.Tensor:
    schedule.check(t, allow_zero=True)
    a = schedule.ab(t, z_t)
    if torch.any(a < floor):
        raise NumericGuardError(f"alpha_bar below floor {floor} at t={t}")
    return (z_t - (1 - a).sqrt() * eps_hat) / a.sqrt()


# ---------------------------------------------------------------------------
# codec

class LinearCodec(nn.Module):
    """Patchify, project onto fixed orthonormal directions, rescale each channel.

    ``scale`` holds the per-channel RMS of the fitting data so every latent
    channel has unit RMS; decoding multiplies it back before the transpose
    projection.
    """

    def __init__(self, basis: np.ndarray, scale: np.ndarray | None = None, image_size: int = 64, patch: int = 4):
        super().__init__()
        if basis.shape[0] != patch * patch * 3:
            raise ConfigError("basis rows must equal patch*patch*3")
        self.image_size = image_size
        self.patch = patch
        self.register_buffer("basis", torch.as_tensor(basis, dtype=torch.float32))
        scale = np.ones(basis.shape[1], np.float32) if scale is None else scale
        self.register_buffer("scale", torch.as_tensor(scale, dtype=torch.float32))

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        g = self.image_size // self.patch
        return (self.basis.shape[1], g, g)

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        """``(B, H, W, 3)`` or ``(H, W, 3)`` images to ``(B, C, h, w)`` latents."""
        single = image.ndim == 3
        x = image[None] if single else image
        H, p = self.image_size, self.patch
        if tuple(x.shape[1:]) != (H, H, 3):
            raise ConfigError(f"expected image shape ({H}, {H}, 3), got {tuple(x.shape[1:])}")
        g = H // p
        x = x.reshape(-1, g, p, g, p, 3).permute(0, 1, 3, 2, 4, 5).reshape(-1, g, g, p * p * 3)
        z = ((x @ self.basis.to(x.dtype)) / self.scale.to(x.dtype)).permute(0, 3, 1, 2)
        return z[0] if single else z

    def decode(self, z: torch.Tensor, clamp: bool = True) -> torch.Tensor:
        single = z.ndim == 3
        z = z[None] if single else z
        if tuple(z.shape[1:]) != self.latent_shape:
            raise ConfigError(f"expected latent shape {self.latent_shape}, got {tuple(z.shape[1:])}")
        H, p = self.image_size, self.patch
        g = H // p
        x = (z.permute(0, 2, 3, 1) * self.scale.to(z.dtype)) @ self.basis.to(z.dtype).T
        x = x.reshape(-1, g, g, p, p, 3).permute(0, 1, 3, 2, 4, 5).reshape(-1, H, H, 3)
        if clamp:
            x = x.clamp(0.0, 1.0)
        return x[0] if single else x

    def param_hash(self) -> str:
        h = hashlib.sha256(self.basis.detach().cpu().numpy().astype("<f4").tobytes())
        h.update(self.scale.detach().cpu().numpy().astype("<f4").tobytes())
        return h.hexdigest()

    def project(self, z: torch.Tensor) -> torch.Tensor:
        """Nearest codec latent of a valid image: decode, clamp to [0, 1], re-encode."""
        return self.encode(self.decode(z))


def fit_codec_basis(seed: int = 0, n_images: int = 200, channels: int = 8,
                    patch: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """Uncentered PCA of 4x4 patches from seeded procedural scenes.

    Uncentered so the codec stays linear (zero image maps to zero latent).
    """
    rng = np.random.default_rng(seed)
    images, _ = dataprep.render_scenes(rng, n_images)
    g = images.shape[1] // patch
    P = images.reshape(-1, g, patch, g, patch, 3).transpose(0, 1, 3, 2, 4, 5).reshape(-1, patch * patch * 3)
    P = P.astype(np.float64)
    _, vecs = np.linalg.eigh(P.T @ P / len(P))
    basis = vecs[:, ::-1][:, :channels].copy()
    # fix the eigenvector sign so the basis is reproducible
    signs = np.sign(basis[np.abs(basis).argmax(axis=0), np.arange(channels)])
    basis = (basis * signs).astype(np.float32)
    rms = np.sqrt(np.mean((P @ basis.astype(np.float64)) ** 2, axis=0))
    return basis, rms.astype(np.float32)


# ---------------------------------------------------------------------------
# text encoder

_TOKEN = re.compile(r"[a-z0-9]+")


def tokenize(prompt: str) -> list[str]:
    return _TOKEN.findall(prompt.lower())


class TextEncoder(nn.Module):
    """Bag of hashed-token embeddings; the table is trainable."""

    def __init__(self, dim: int = 64, buckets: int = 4096, seed: int = 0):
        super().__init__()
        self.buckets = buckets
        self.seed = seed
        g = torch.Generator().manual_seed(seed)
        self.table = nn.Parameter(torch.randn(buckets, dim, generator=g))

    def token_ids(self, prompt: str) -> list[int]:
        ids = []
        for tok in tokenize(prompt):
            h = hashlib.blake2b(f"{self.seed}:{tok}".encode(), digest_size=8).digest()
            ids.append(int.from_bytes(h, "little") % self.buckets)
        return ids

    def forward(self, prompts: str | list[str]) -> torch.Tensor:
        if isinstance(prompts, str):
            prompts = [prompts]
        out = []
        for p in prompts:
            ids = self.token_ids(p)
            if not ids:
                out.append(torch.zeros_like(self.table[0]))
            else:
                out.append(self.table[torch.tensor(ids)].mean(0))
        return torch.stack(out)


# ---------------------------------------------------------------------------
# denoiser

def timestep_embedding(t: torch.Tensor, dim: int, T: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = (t.to(torch.float64) / T * 1000.0)[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, ch: int, emb: int, groups: int = 8):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, ch)
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.film = nn.Linear(emb, 2 * ch)
        self.norm2 = nn.GroupNorm(groups, ch)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x, e):
        h = self.conv1(F.silu(self.norm1(x)))
        scale, shift = self.film(e)[:, :, None, None].chunk(2, dim=1)
        h = self.norm2(h) * (1 + scale) + shift
        h = self.conv2(F.silu(h))
        return x + h


class Denoiser(nn.Module):
    """Conditional noise predictor on ``(B, C, 16, 16)`` latents."""

    def __init__(self, channels: int = 8, width: int = 64, depth: int = 4, cond_dim: int = 64,
                 T: int = 1000):
        super().__init__()
        self.T = T
        self.width = width
        self.time_mlp = nn.Sequential(nn.Linear(width, width), nn.SiLU(), nn.Linear(width, width))
        self.cond_proj = nn.Linear(cond_dim, width)
        self.conv_in = nn.Conv2d(channels, width, 3, padding=1)
        self.blocks = nn.ModuleList(ResBlock(width, width) for _ in range(depth))
        self.norm_out = nn.GroupNorm(8, width)
        self.conv_out = nn.Conv2d(width, channels, 3, padding=1)
        with torch.no_grad():
            self.conv_out.weight.mul_(0.1)
            self.conv_out.bias.zero_()

    def forward(self, z_t: torch.Tensor, t: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        temb = timestep_embedding(t, self.width, self.T).to(z_t.dtype)
        e = F.silu(self.time_mlp(temb) + self.cond_proj(cond))
        h = self.conv_in(z_t)
        for blk in self.blocks:
            h = blk(h, e)
        return self.conv_out(F.silu(self.norm_out(h)))


# ---------------------------------------------------------------------------
# assembled model

@dataclass
class BackboneConfig:
    image_size: int = 64
    patch: int = 4
    latent_channels: int = 8
    T: int = 1000
    width: int = 64
    depth: int = 4
    text_dim: int = 64
    text_buckets: int = 4096
    codec_seed: int = 0
    sample_steps: int = 25
    alpha_floor: float = 1e-6
    # generic pretraining on the class family before any finetuning
    pretrain_steps: int = 2000
    pretrain_batch: int = 16
    pretrain_lr: float = 1e-3


class LatentDiffusion(nn.Module):
    """Frozen codec + trainable text encoder and denoiser + schedule."""

    def __init__(self, cfg: BackboneConfig | None = None, seed: int = 42,
                 codec: tuple[np.ndarray, np.ndarray] | None = None):
        super().__init__()
        self.cfg = cfg = cfg or BackboneConfig()
        if codec is None:
            codec = fit_codec_basis(cfg.codec_seed, channels=cfg.latent_channels, patch=cfg.patch)
        self.codec = LinearCodec(codec[0], codec[1], cfg.image_size, cfg.patch)
        self.schedule = NoiseSchedule(cfg.T)
        torch.manual_seed(seed)
        self.text_encoder = TextEncoder(cfg.text_dim, cfg.text_buckets, seed)
        self.denoiser = Denoiser(cfg.latent_channels, cfg.width, cfg.depth, cfg.text_dim, cfg.T)

    def trainable_parameters(self):
        return list(self.text_encoder.parameters()) + list(self.denoiser.parameters())

    # thin wrappers so callers only need the model object
    def encode(self, image) -> torch.Tensor:
        return self.codec.encode(torch.as_tensor(np.asarray(image)) if not torch.is_tensor(image) else image)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        return self.codec.decode(z)

    def add_noise(self, z0, t, eps):
        return add_noise(self.schedule, z0, t, eps)

    def predict_z0(self, z_t, t, eps_hat):
        return predict_z0(self.schedule, z_t, t, eps_hat, self.cfg.alpha_floor)

    def predict_noise(self, z_t: torch.Tensor, t, cond: torch.Tensor) -> torch.Tensor:
        self.schedule.check(t)
        single = z_t.ndim == 3
        z = z_t[None] if single else z_t
        tt = torch.as_tensor(np.broadcast_to(np.asarray(t), (z.shape[0],)).copy())
        # the network head predicts v; converting to noise keeps z0 errors bounded at high t
        v = self.denoiser(z, tt, cond.to(z.dtype))
        ab = self.schedule.ab(t, z)
        out = ab.sqrt() * v + (1 - ab).sqrt() * z
        return out[0] if single else out

    @torch.no_grad()
    def sample(self, prompt: str | list[str], num_steps: int | None = None, seed: int = 0,
               return_latent: bool = False):
        """Deterministic DDIM (eta = 0) generation; one image per prompt.

        The initial noise for image ``k`` of a batch is drawn from a
        generator seeded with ``seed + k``.
        """
        num_steps = self.cfg.sample_steps if num_steps is None else num_steps
        if num_steps < 1:
            raise ValueError("num_steps must be >= 1")
        prompts = [prompt] if isinstance(prompt, str) else list(prompt)
        dtype = self.codec.basis.dtype
        shape = self.codec.latent_shape
        z = torch.stack([
            torch.randn(shape, generator=torch.Generator().manual_seed(seed + k), dtype=dtype)
            for k in range(len(prompts))
        ])
        cond = self.text_encoder(prompts).to(dtype)
        ts = np.unique(np.round(np.linspace(self.cfg.T, 1, num_steps)).astype(int))[::-1]
        z0 = z
        for i, t in enumerate(ts):
            t_next = int(ts[i + 1]) if i + 1 < len(ts) else 0
            eps = self.predict_noise(z, int(t), cond)
            z0 = self.codec.project(self.predict_z0(z, int(t), eps))
            z = add_noise(self.schedule, z0, t_next, eps)
        img = self.codec.decode(z0)
        if isinstance(prompt, str):
            img, z0 = img[0], z0[0]
        return (img, z0) if return_latent else img

"""Latent discriminator: conv stem + small patch transformer scoring realness."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
import torch
import torch.nn as nn

from . import dataprep
from .dataprep import ClassSample, InstanceSample

# (category, is_real, probability in percent)
CATEGORIES: tuple[tuple[str, bool, float], ...] = (
    ("instance", True, 30.0),
    ("colored_bg", True, 18.0),
    ("colored_bg_resize", True, 2.0),
    ("class", False, 17.5),
    ("negative_fg", False, 9.75),
    ("masked_fg", False, 3.25),
    ("colored_bg_negative_fg", False, 4.88),
    ("colored_bg_masked_fg", False, 14.63),
)
CATEGORY_NAMES = tuple(c[0] for c in CATEGORIES)
IS_REAL = {c[0]: c[1] for c in CATEGORIES}


class TrainingError(RuntimeError):
    pass


@dataclass
class LDItem:
    latent: torch.Tensor
    label: int  # 1 real, 0 fake
    category: str
    image: np.ndarray | None = field(default=None, repr=False)


# ---------------------------------------------------------------------------
# model

class InvertedBottleneck(nn.Module):
    def __init__(self, ch: int, expand: int = 4):
        super().__init__()
        hid = ch * expand
        self.net = nn.Sequential(
            nn.Conv2d(ch, hid, 1), nn.GELU(),
            nn.Conv2d(hid, hid, 3, padding=1, groups=hid), nn.GELU(),
            nn.Conv2d(hid, ch, 1),
        )

    def forward(self, x):
        return self.net(x)


class Block(nn.Module):
    def __init__(self, dim: int, heads: int, mlp: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, mlp), nn.GELU(), nn.Linear(mlp, dim))
        self.last_attention: torch.Tensor | None = None

    def forward(self, x):
        h = self.norm1(x)
        a, w = self.attn(h, h, h, need_weights=True, average_attn_weights=False)
        self.last_attention = w.detach()
        x = x + a
        return x + self.mlp(self.norm2(x))


class LatentDiscriminator(nn.Module):
    def __init__(self, channels: int = 8, size: int = 16, patch: int = 8, dim: int = 64,
                 depth: int = 3, heads: int = 4, mlp: int = 128):
        super().__init__()
        if size % patch:
            raise ValueError("latent size must be divisible by the patch size")
        self.channels, self.size, self.patch = channels, size, patch
        self.stem = InvertedBottleneck(channels)
        self.n_patches = (size // patch) ** 2
        self.embed = nn.Linear(2 * channels * patch * patch, dim)
        self.cls = nn.Parameter(torch.zeros(1, 1, dim))
        self.pos = nn.Parameter(torch.randn(1, self.n_patches + 1, dim) * 0.02)
        self.blocks = nn.ModuleList(Block(dim, heads, mlp) for _ in range(depth))
        self.norm = nn.LayerNorm(dim)
        # three-layer MLP head on the [CLS] token
        self.head = nn.Sequential(nn.Linear(dim, dim), nn.GELU(), nn.Linear(dim, dim // 2), nn.GELU(),
                                  nn.Linear(dim // 2, 1))

    def tokens(self, z: torch.Tensor) -> torch.Tensor:
        x = torch.cat([self.stem(z), z], dim=1)
        B, C, H, W = x.shape
        p = self.patch
        x = x.reshape(B, C, H // p, p, W // p, p).permute(0, 2, 4, 1, 3, 5).reshape(B, -1, C * p * p)
        x = self.embed(x)
        return torch.cat([self.cls.expand(B, -1, -1), x], dim=1) + self.pos

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        single = z.ndim == 3
        z = z[None] if single else z
        if tuple(z.shape[1:]) != (self.channels, self.size, self.size):
            raise ValueError(f"expected latent shape {(self.channels, self.size, self.size)}, got {tuple(z.shape[1:])}")
        x = self.tokens(z)
        for blk in self.blocks:
            x = blk(x)
        score = torch.sigmoid(self.head(self.norm(x[:, 0]))).squeeze(-1)
        return score[0] if single else score

    def attention_maps(self) -> list[torch.Tensor]:
        return [b.last_attention for b in self.blocks]


# ---------------------------------------------------------------------------
# fake-image generators

def negative_foreground(sample: InstanceSample) -> np.ndarray:
    """Invert the foreground. Computed in float64 so that applying it twice is exact."""
    img = sample.image.astype(np.float64)
    return np.where(sample.mask[..., None], 1.0 - img, img)


def mask_foreground(sample: InstanceSample, fill: float = 0.5) -> np.ndarray:
    return np.where(sample.mask[..., None], np.float32(fill), sample.image).astype(np.float32)


def _draw_image(category: str, instances, classes, rng: np.random.Generator,
                aug: dataprep.AugmentConfig, fill: float) -> np.ndarray:
    if category == "class":
        return classes[int(rng.integers(len(classes)))].image
    inst = instances[int(rng.integers(len(instances)))]
    if category.startswith("colored_bg"):
        color = aug.palette[int(rng.integers(len(aug.palette)))]
        inst = dataprep.replace_background(inst, color, aug.spec, aug.two_clause)
        if category == "colored_bg_resize":
            inst = dataprep.resize_foreground(inst, float(rng.uniform(*aug.scale_range)), aug.spec, aug.two_clause)
    if category.endswith("negative_fg"):
        return negative_foreground(inst)
    if category.endswith("masked_fg"):
        return mask_foreground(inst, fill)
    return inst.image


def build_ld_dataset(instances: Sequence[InstanceSample], classes: Sequence[ClassSample],
                     rng: np.random.Generator, encode=None,
                     aug: dataprep.AugmentConfig | None = None, fill: float = 0.5,
                     keep_images: bool = False) -> Iterator[LDItem]:
    """Endless stream of labelled latents drawn with the fixed category mix.

    ``encode`` maps an ``(H, W, 3)`` tensor to a latent; when ``None`` the
    items carry only the category and label (latent is an empty tensor).
    """
    if not instances or not classes:
        raise ValueError("datasets must be non-empty")
    aug = aug or dataprep.AugmentConfig()
    probs = np.array([c[2] for c in CATEGORIES])
    probs = probs / probs.sum()
    while True:
        cat = CATEGORY_NAMES[int(rng.choice(len(CATEGORIES), p=probs))]
        img = np.asarray(_draw_image(cat, instances, classes, rng, aug, fill), dtype=np.float32)
        latent = encode(torch.from_numpy(img)) if encode is not None else torch.empty(0)
        yield LDItem(latent, int(IS_REAL[cat]), cat, img if keep_images else None)


def take(stream: Iterator[LDItem], n: int) -> tuple[torch.Tensor, torch.Tensor]:
    items = [next(stream) for _ in range(n)]
    return torch.stack([it.latent for it in items]), torch.tensor([float(it.label) for it in items])


# ---------------------------------------------------------------------------
# objective and pretraining

def ld_discriminator_loss(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    """Least-squares objective ``mean((1-real)^2) + mean(fake^2)``; an empty side contributes 0."""
    if real_scores.numel() == 0 and fake_scores.numel() == 0:
        raise ValueError("need at least one score")
    zero = torch.zeros((), dtype=(real_scores if real_scores.numel() else fake_scores).dtype)
    real = (1 - real_scores).pow(2).mean() if real_scores.numel() else zero
    fake = fake_scores.pow(2).mean() if fake_scores.numel() else zero
    return real + fake


def r1_penalty(ld: LatentDiscriminator, real: torch.Tensor) -> torch.Tensor:
    """Mean squared input-gradient norm of the score on real latents."""
    real = real.detach().requires_grad_(True)
    (g,) = torch.autograd.grad(ld(real).sum(), real, create_graph=True)
    return g.pow(2).flatten(1).sum(1).mean()


def discriminator_step(ld: LatentDiscriminator, opt: torch.optim.Optimizer, latents: torch.Tensor,
                       labels: torch.Tensor, generated: torch.Tensor | None = None,
                       r1_gamma: float = 0.0) -> float:
    """One update. ``generated`` latents are fakes scored as a separate mean term."""
    scores = ld(latents)
    loss = ld_discriminator_loss(scores[labels > 0.5], scores[labels <= 0.5])
    if generated is not None and len(generated):
        loss = loss + ld(generated.detach()).pow(2).mean()
    if r1_gamma > 0 and bool((labels > 0.5).any()):
        loss = loss + 0.5 * r1_gamma * r1_penalty(ld, latents[labels > 0.5])
    if not torch.isfinite(loss):
        raise TrainingError("non-finite discriminator loss")
    opt.zero_grad()
    loss.backward()
    opt.step()
    return float(loss.detach())


def pretrain_ld(ld: LatentDiscriminator, stream: Iterator[LDItem], steps: int = 600, batch: int = 16,
                lr: float = 1e-3, r1_gamma: float = 0.0) -> tuple[LatentDiscriminator, list[float], torch.optim.Optimizer]:
    """Train on the category stream; returns the model, its loss curve and optimizer."""
    opt = torch.optim.Adam(ld.parameters(), lr=lr)
    curve = []
    for step in range(steps):
        lat, lab = take(stream, batch)
        try:
            curve.append(discriminator_step(ld, opt, lat, lab, r1_gamma=r1_gamma))
        except TrainingError as exc:
            raise TrainingError(f"discriminator diverged at pretraining step {step}") from exc
    return ld, curve, opt


@torch.no_grad()
def accuracy(ld: LatentDiscriminator, latents: torch.Tensor, labels: torch.Tensor,
             threshold: float = 0.5) -> float:
    pred = (ld(latents) > threshold).float()
    return float((pred == labels).float().mean())


def patch_count(ld: LatentDiscriminator) -> int:
    return ld.n_patches + 1


def param_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


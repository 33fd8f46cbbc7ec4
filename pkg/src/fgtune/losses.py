"""Supervision terms and their weighted composition."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import dataprep

DEFAULT_SIGMA = 1.382
DEFAULT_BLOCK_WEIGHTS = {2: 0.35, 3: 0.45, 4: 0.2}


class SolverError(RuntimeError):
    pass


@dataclass
class LossWeights:
    lambda_r: float = 1.0
    lambda_pp: float = 1.0
    lambda_p: float = 0.003
    lambda_ld: float = 0.5
    sigma: float = DEFAULT_SIGMA
    s_p: int = 500
    block_weights: dict[int, float] = field(default_factory=lambda: dict(DEFAULT_BLOCK_WEIGHTS))

    def validate(self, total_steps: int | None = None) -> None:
        lams = (self.lambda_r, self.lambda_pp, self.lambda_p, self.lambda_ld)
        if not all(math.isfinite(v) and v >= 0 for v in lams):
            raise ValueError(f"loss weights must be finite and nonnegative: {lams}")
        if not (math.isfinite(self.sigma) and self.sigma > 0):
            raise ValueError("sigma must be positive")
        if abs(sum(self.block_weights.values()) - 1.0) > 1e-9:
            raise ValueError("perceptual block weights must sum to 1")
        if total_steps is not None and self.s_p > total_steps:
            raise ValueError("s_p cannot exceed the number of training steps")


@dataclass
class LossBreakdown:
    r: float
    pp: float
    p: float
    ld: float
    total: float
    step: int = 0


# ---------------------------------------------------------------------------
# reconstruction

def inverse_gaussian(m, sigma: float):
    """``sigma*sqrt(2*pi)*(exp(m / (2 sigma^2)) - 1)`` for a mean squared residual ``m``."""
    if torch.is_tensor(m):
        return sigma * math.sqrt(2 * math.pi) * torch.expm1(m / (2 * sigma**2))
    return sigma * math.sqrt(2 * math.pi) * np.expm1(np.asarray(m) / (2 * sigma**2))


def inverse_gaussian_loss(eps_hat: torch.Tensor, eps: torch.Tensor, sigma: float = DEFAULT_SIGMA) -> torch.Tensor:
    if eps_hat.shape != eps.shape:
        raise ValueError(f"shape mismatch {tuple(eps_hat.shape)} vs {tuple(eps.shape)}")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if not (torch.isfinite(eps_hat).all() and torch.isfinite(eps).all()):
        raise FloatingPointError("non-finite input to reconstruction loss")
    m = (eps_hat - eps).pow(2).mean()
    return inverse_gaussian(m, sigma)


def calibration_objective(sigma: float, a: float = 1.0, intervals: int = 512) -> float:
    """Composite-Simpson value of the squared gap between x^2 and the inverse Gaussian on [0, a]."""
    if intervals % 2:
        intervals += 1
    x = np.linspace(0.0, a, intervals + 1)
    g = (x**2 - inverse_gaussian(x**2, sigma)) ** 2
    w = np.ones_like(x)
    w[1:-1:2] = 4
    w[2:-1:2] = 2
    return float((a / intervals) / 3 * (w @ g))


def calibrate_sigma(a: float = 1.0, lo: float = 0.2, hi: float = 5.0, tol: float = 1e-5,
                    max_iter: int = 200) -> float:
    """Golden-section search for the sigma that best matches squared error on ``[0, a]``."""
    if not a > 0:
        raise ValueError("a must be positive")
    invphi = (math.sqrt(5) - 1) / 2
    c = hi - invphi * (hi - lo)
    d = lo + invphi * (hi - lo)
    fc, fd = calibration_objective(c, a), calibration_objective(d, a)
    for _ in range(max_iter):
        if hi - lo < tol:
            break
        if fc < fd:
            hi, d, fd = d, c, fc
            c = hi - invphi * (hi - lo)
            fc = calibration_objective(c, a)
        else:
            lo, c, fc = c, d, fd
            d = lo + invphi * (hi - lo)
            fd = calibration_objective(d, a)
    else:
        raise SolverError(f"golden-section search did not converge in {max_iter} iterations")
    sigma = (lo + hi) / 2
    if not math.isfinite(calibration_objective(sigma, a)):
        raise SolverError("objective is not finite at the minimizer")
    return sigma


# ---------------------------------------------------------------------------
# prior preservation

def prior_preservation_loss(eps_hat_p: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    if eps_hat_p.shape != eps.shape:
        raise ValueError(f"shape mismatch {tuple(eps_hat_p.shape)} vs {tuple(eps.shape)}")
    return (eps_hat_p - eps).pow(2).mean()


# ---------------------------------------------------------------------------
# perceptual

class PerceptualEncoder(nn.Module):
    """Four strided conv blocks plus a linear identity classifier.

    ``features`` returns the activations of every block keyed 1..4.
    """

    def __init__(self, widths=(16, 32, 48, 64), n_classes: int = dataprep.NUM_IDENTITIES):
        super().__init__()
        chans = (3,) + tuple(widths)
        self.blocks = nn.ModuleList(
            nn.Sequential(nn.Conv2d(chans[i], chans[i + 1], 3, stride=2, padding=1),
                          nn.GroupNorm(4, chans[i + 1]), nn.SiLU(),
                          nn.Conv2d(chans[i + 1], chans[i + 1], 3, padding=1),
                          nn.GroupNorm(4, chans[i + 1]), nn.SiLU())
            for i in range(4)
        )
        self.head = nn.Linear(widths[-1], n_classes)

    def features(self, images: torch.Tensor) -> dict[int, torch.Tensor]:
        x = images if images.ndim == 4 else images[None]
        h = x.permute(0, 3, 1, 2)
        out = {}
        for i, blk in enumerate(self.blocks, start=1):
            h = blk(h)
            out[i] = h
        return out

    def pooled(self, images: torch.Tensor, block: int = 4) -> torch.Tensor:
        return self.features(images)[block].mean(dim=(2, 3))

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.head(self.pooled(images))

    def freeze(self) -> "PerceptualEncoder":
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        return self


def build_perceptual_encoder(seed: int = 0, steps: int = 150, batch: int = 32, lr: float = 2e-3) -> PerceptualEncoder:
    """Briefly train the encoder to classify family members, then freeze it."""
    torch.manual_seed(seed)
    enc = PerceptualEncoder()
    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(enc.parameters(), lr=lr)
    for _ in range(steps):
        imgs, labels = dataprep.render_scenes(rng, batch, jitter=6)
        loss = F.cross_entropy(enc(torch.from_numpy(imgs)), torch.from_numpy(labels))
        opt.zero_grad()
        loss.backward()
        opt.step()
    return enc.freeze()


def perceptual_loss(x: torch.Tensor, x_hat: torch.Tensor, enc: PerceptualEncoder,
                    weights: dict[int, float] | None = None, step: int = 0, s_p: int = 500) -> torch.Tensor:
    """Weighted per-block feature MSE, hard-gated to zero after step ``s_p``."""
    if step > s_p:
        return torch.zeros((), dtype=x_hat.dtype)
    weights = DEFAULT_BLOCK_WEIGHTS if weights is None else weights
    fa = enc.features(x)
    fb = enc.features(x_hat)
    return sum(w * F.mse_loss(fb[b], fa[b]) for b, w in weights.items())


# ---------------------------------------------------------------------------
# adversarial (generator side)

def ld_generator_loss(z0: torch.Tensor, ld: nn.Module) -> torch.Tensor:
    """``mean((1 - LD(z0))^2)``; gradients reach ``z0`` only.

    The discriminator's parameters are excluded from the graph so a
    generator backward pass can never write discriminator gradients.
    """
    flags = [p.requires_grad for p in ld.parameters()]
    for p in ld.parameters():
        p.requires_grad_(False)
    try:
        score = ld(z0)
    finally:
        for p, f in zip(ld.parameters(), flags):
            p.requires_grad_(f)
    return (1 - score).pow(2).mean()


# ---------------------------------------------------------------------------
# composition

def combine(r, pp, p, ld, w: LossWeights):
    """The weighted sum; works for floats and tensors alike."""
    return w.lambda_r * r + w.lambda_pp * pp + w.lambda_p * p + w.lambda_ld * ld


def total_loss(r: float, pp: float, p: float, ld: float, w: LossWeights, step: int = 0) -> LossBreakdown:
    vals = [float(v.detach()) if torch.is_tensor(v) else float(v) for v in (r, pp, p, ld)]
    if not all(math.isfinite(v) for v in vals):
        raise FloatingPointError(f"non-finite loss component: {vals}")
    return LossBreakdown(*vals, total=combine(*vals, w), step=step)

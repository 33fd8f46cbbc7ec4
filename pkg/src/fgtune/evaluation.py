"""Prompt-invariant / prompt-varying evaluation with toy stand-ins for the usual metrics."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from . import dataprep
from .dataprep import InstanceSample, SubjectSpec
from .losses import DEFAULT_BLOCK_WEIGHTS, PerceptualEncoder

CLIP_T_CAVEAT = ("prompt alignment is reported for completeness; it tracks qualitative "
                 "foreground fidelity least well of all metrics")
PSNR_CAP = 100.0
SIMILARITY_METRICS = ("dino", "clip_i", "clip_t", "ssim", "psnr")
DISTANCE_METRICS = ("lpips", "fid", "fg_struct_dev", "fg_color_dev")


@dataclass
class PromptListBundle:
    image_types: list[str]
    backgrounds: list[str]
    styles_by_type: dict[str, list[str]]

    def __post_init__(self):
        for t in self.image_types:
            if not self.styles_by_type.get(t):
                raise ValueError(f"image type {t!r} has no styles")

    @classmethod
    def default(cls) -> "PromptListBundle":
        return cls(
            image_types=["a photo", "a painting", "a sketch", "a 3d render", "a watercolor", "a poster"],
            backgrounds=["on a beach", "in a forest", "on a wooden table", "in a city street",
                         "on a snowy mountain", "in a kitchen", "on a red carpet", "in space",
                         "under the rain", "in a garden", "on a desk", "at night"],
            styles_by_type={
                "a photo": ["high detail", "studio lighting", "35mm film"],
                "a painting": ["oil on canvas", "impressionist", "baroque"],
                "a sketch": ["pencil", "charcoal", "ink lines"],
                "a 3d render": ["octane render", "soft shadows", "isometric"],
                "a watercolor": ["pastel tones", "wet on wet", "loose brushwork"],
                "a poster": ["flat colors", "bold typography", "vintage print"],
            },
        )


def sample_prompt(bundle: PromptListBundle, spec: SubjectSpec, rng: np.random.Generator) -> str:
    kind = bundle.image_types[int(rng.integers(len(bundle.image_types)))]
    bg = bundle.backgrounds[int(rng.integers(len(bundle.backgrounds)))]
    styles = bundle.styles_by_type[kind]
    style = styles[int(rng.integers(len(styles)))]
    return f"{kind} of {spec.instance_token} {spec.class_token}, {bg}, {style}"


def invariant_prompt(spec: SubjectSpec) -> str:
    return dataprep.build_instance_prompt(spec, two_clause=False)


# ---------------------------------------------------------------------------
# pixel metrics

def _np(img) -> np.ndarray:
    if torch.is_tensor(img):
        img = img.detach().cpu().numpy()
    return np.asarray(img, dtype=np.float64)


def luminance(img) -> np.ndarray:
    a = _np(img)
    return a[..., 0] * 0.299 + a[..., 1] * 0.587 + a[..., 2] * 0.114


def _window_sums(x: np.ndarray, win: int) -> np.ndarray:
    c = np.pad(x, ((1, 0), (1, 0))).cumsum(0).cumsum(1)
    return c[win:, win:] - c[:-win, win:] - c[win:, :-win] + c[:-win, :-win]


def ssim_map(a, b, win: int = 8, data_range: float = 1.0) -> np.ndarray:
    """SSIM over every ``win x win`` window (stride 1) of the luminance channel."""
    x, y = luminance(a), luminance(b)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    n = win * win
    mx, my = _window_sums(x, win) / n, _window_sums(y, win) / n
    vx = _window_sums(x * x, win) / n - mx**2
    vy = _window_sums(y * y, win) / n - my**2
    cxy = _window_sums(x * y, win) / n - mx * my
    return ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx**2 + my**2 + c1) * (vx + vy + c2))


def metric_ssim(a, b, win: int = 8) -> float:
    if _np(a).shape != _np(b).shape:
        raise ValueError("images must share a shape")
    return float(ssim_map(a, b, win).mean())


def metric_psnr(a, b, cap: float = PSNR_CAP, data_range: float = 1.0) -> float:
    x, y = _np(a), _np(b)
    if x.shape != y.shape:
        raise ValueError("images must share a shape")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0:
        return cap
    return min(cap, 10 * math.log10(data_range**2 / mse))


# ---------------------------------------------------------------------------
# distribution metric

def _sqrtm_psd(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((m + m.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


def gaussian_fit(emb: np.ndarray, shrinkage: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    emb = np.asarray(emb, np.float64)
    n, d = emb.shape
    if n < 2:
        raise ArithmeticError("need at least two embeddings for a covariance")
    mu = emb.mean(0)
    cov = np.cov(emb, rowvar=False).reshape(d, d)
    if shrinkage > 0:
        cov = (1 - shrinkage) * cov + shrinkage * np.trace(cov) / d * np.eye(d)
    elif n < d + 1 or np.linalg.matrix_rank(cov) < d:
        raise ArithmeticError(f"degenerate covariance from {n} samples in {d} dims; use shrinkage")
    return mu, cov


def frechet_distance(mu1, cov1, mu2, cov2) -> float:
    s1 = _sqrtm_psd(cov1)
    middle = _sqrtm_psd(s1 @ cov2 @ s1)
    val = float(np.sum((mu1 - mu2) ** 2) + np.trace(cov1) + np.trace(cov2) - 2 * np.trace(middle))
    return max(val, 0.0)


def metric_fid(set_a, set_b, shrinkage: float = 0.0) -> float:
    mu1, c1 = gaussian_fit(set_a, shrinkage)
    mu2, c2 = gaussian_fit(set_b, shrinkage)
    # symmetric in its arguments up to rounding; average both orders to make it exact
    return 0.5 * (frechet_distance(mu1, c1, mu2, c2) + frechet_distance(mu2, c2, mu1, c1))


# ---------------------------------------------------------------------------
# embedding metrics

Embedder = Callable[[torch.Tensor], torch.Tensor]


def block_embedder(enc: PerceptualEncoder, block: int) -> Embedder:
    """Global-average-pooled activations of one encoder block."""

    def embed(img: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return enc.pooled(torch.as_tensor(img, dtype=torch.float32), block)

    return embed


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ArithmeticError("zero-norm embedding")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def metric_embed_sim(gen, ref, embedder: Embedder) -> float:
    u = _np(embedder(torch.as_tensor(_np(gen), dtype=torch.float32))).ravel()
    v = _np(embedder(torch.as_tensor(_np(ref), dtype=torch.float32))).ravel()
    return cosine(u, v)


class PromptAligner:
    """Cosine between the prompt embedding and a fixed linear map of the image embedding."""

    def __init__(self, text_encoder, enc: PerceptualEncoder, seed: int = 0, block: int = 4):
        self.text_encoder = text_encoder
        self.embed = block_embedder(enc, block)
        in_dim = enc.blocks[block - 1][0].out_channels
        out_dim = text_encoder.table.shape[1]
        g = torch.Generator().manual_seed(seed)
        self.proj = torch.randn(in_dim, out_dim, generator=g, dtype=torch.float64) / math.sqrt(in_dim)

    def __call__(self, gen, prompt: str) -> float:
        with torch.no_grad():
            img = self.embed(torch.as_tensor(_np(gen), dtype=torch.float32)).to(torch.float64) @ self.proj
            txt = self.text_encoder(prompt).to(torch.float64)
        return cosine(img.numpy().ravel(), txt.numpy().ravel())


def metric_prompt_align(gen, prompt: str, aligner: PromptAligner) -> float:
    return aligner(gen, prompt)


def metric_lpips_proxy(a, b, enc: PerceptualEncoder, weights: dict[int, float] | None = None) -> float:
    """Per-block distance between channel-unit-normalized activations, weighted and summed."""
    weights = DEFAULT_BLOCK_WEIGHTS if weights is None else weights
    with torch.no_grad():
        fa = enc.features(torch.as_tensor(_np(a), dtype=torch.float32))
        fb = enc.features(torch.as_tensor(_np(b), dtype=torch.float32))
    total = 0.0
    for blk, w in weights.items():
        x, y = fa[blk].double(), fb[blk].double()
        x = x / (x.norm(dim=1, keepdim=True) + 1e-10)
        y = y / (y.norm(dim=1, keepdim=True) + 1e-10)
        total += w * float((x - y).pow(2).sum(1).mean())
    return total


# ---------------------------------------------------------------------------
# foreground fidelity

def _bbox(mask: np.ndarray) -> tuple[slice, slice]:
    ys, xs = np.nonzero(mask)
    return slice(ys.min(), ys.max() + 1), slice(xs.min(), xs.max() + 1)


def metric_foreground_fidelity(gen, instance: InstanceSample, win: int = 8) -> tuple[float, float]:
    """(structure deviation, color deviation) of the subject region.

    Both images are cropped to the reference mask's bounding box; structure
    is 1 - SSIM averaged over windows centred on subject pixels, color is the
    mean absolute gap between the subject's mean RGB vectors.
    """
    g, ref, mask = _np(gen), _np(instance.image), instance.mask
    ys, xs = _bbox(mask)
    smap = ssim_map(g[ys, xs], ref[ys, xs], win)
    m = mask[ys, xs]
    lo = win // 2
    centres = m[lo:lo + smap.shape[0], lo:lo + smap.shape[1]]
    struct = 1.0 - float(smap[centres].mean() if centres.any() else smap.mean())
    color = float(np.mean(np.abs(g[mask].mean(0) - ref[mask].mean(0))))
    return struct, color


# ---------------------------------------------------------------------------
# harness

def aggregate(values: Sequence[float]) -> dict:
    """Mean and population std with compensated summation (order independent)."""
    v = [float(x) for x in values]
    n = len(v)
    if n == 0:
        return {"mean": float("nan"), "std": float("nan"), "n": 0}
    mean = math.fsum(v) / n
    var = math.fsum((x - mean) ** 2 for x in v) / n
    return {"mean": mean, "std": math.sqrt(var), "n": n}


@dataclass
class EvalReport:
    regime: str
    metrics: dict[str, dict]
    config: dict = field(default_factory=dict)
    failures: int = 0
    notes: dict = field(default_factory=dict)
    prompts: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"regime": self.regime, "metrics": self.metrics, "config": self.config,
                "failures": self.failures, "notes": self.notes, "prompts": self.prompts}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "mean", "std", "n"])
        for name, s in self.metrics.items():
            w.writerow([name, repr(s["mean"]), repr(s["std"]), s["n"]])
        return buf.getvalue()

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(d["regime"], d["metrics"], d.get("config", {}), d.get("failures", 0),
                   d.get("notes", {}), d.get("prompts", []))


def evaluate(ckpt, regime: str = "invariant", n_images: int = 50, bundle: PromptListBundle | None = None,
             instances: Sequence[InstanceSample] | None = None, num_steps: int | None = None,
             seed: int | None = None, fid_shrinkage: float | None = None,
             clip_t_prompt: str | None = None) -> EvalReport:
    """Generate ``n_images`` and score each one against every reference instance."""
    if regime not in ("invariant", "varying"):
        raise ValueError("regime must be 'invariant' or 'varying'")
    cfg = ckpt.config
    ec = cfg.eval
    num_steps = num_steps or ec.num_steps
    seed = cfg.seed + ec.seed_offset if seed is None else seed
    fid_shrinkage = ec.fid_shrinkage if fid_shrinkage is None else fid_shrinkage
    clip_t_prompt = clip_t_prompt or ec.clip_t_prompt
    bundle = bundle or PromptListBundle.default()
    spec = SubjectSpec(cfg.data.instance_token, cfg.data.class_token, cfg.data.background_placeholder)
    if instances is None:
        from .trainer import make_datasets
        instances, _ = make_datasets(cfg)
    model, enc = ckpt.model, ckpt.perceptual
    model.eval()

    if regime == "invariant":
        prompts = [invariant_prompt(spec)] * n_images
    else:
        rng = np.random.default_rng([seed, 7])
        prompts = [sample_prompt(bundle, spec, rng) for _ in range(n_images)]

    images, failures = [], 0
    for k, prompt in enumerate(prompts):
        try:
            img = model.sample(prompt, num_steps, seed + k)
            if not torch.isfinite(img).all():
                raise FloatingPointError("non-finite image")
            images.append((prompt, img))
        except (FloatingPointError, ArithmeticError, RuntimeError):
            failures += 1

    dino = block_embedder(enc, 3)
    clip_i = block_embedder(enc, 4)
    aligner = PromptAligner(model.text_encoder, enc, cfg.seed)
    per: dict[str, list[float]] = {k: [] for k in ("dino", "clip_i", "clip_t", "ssim", "psnr", "lpips",
                                                   "fg_struct_dev", "fg_color_dev")}
    for prompt, img in images:
        align_text = prompt.split(",")[0] if clip_t_prompt == "first_clause" else prompt
        clip_t = metric_prompt_align(img, align_text, aligner)
        for inst in instances:
            per["dino"].append(metric_embed_sim(img, inst.image, dino))
            per["clip_i"].append(metric_embed_sim(img, inst.image, clip_i))
            per["clip_t"].append(clip_t)
            per["ssim"].append(metric_ssim(img, inst.image))
            per["psnr"].append(metric_psnr(img, inst.image))
            per["lpips"].append(metric_lpips_proxy(img, inst.image, enc))
            sd, cd = metric_foreground_fidelity(img, inst)
            per["fg_struct_dev"].append(sd)
            per["fg_color_dev"].append(cd)

    metrics = {k: aggregate(v) for k, v in per.items()}
    if len(images) >= 2:
        gen_emb = np.stack([clip_i(img).numpy().ravel() for _, img in images])
        ref_emb = np.stack([clip_i(torch.from_numpy(i.image)).numpy().ravel() for i in instances])
        fid = metric_fid(gen_emb, ref_emb, fid_shrinkage)
        metrics["fid"] = {"mean": fid, "std": 0.0, "n": 1}
    return EvalReport(
        regime,
        metrics,
        config={"mode": cfg.trainer.mode, "seed": seed, "n_images": n_images, "num_steps": num_steps,
                "n_instances": len(instances), "config_digest": cfg.digest(), "fid_shrinkage": fid_shrinkage,
                "clip_t_prompt": clip_t_prompt},
        failures=failures,
        notes={"clip_t": CLIP_T_CAVEAT},
        prompts=[p for p, _ in images],
    )

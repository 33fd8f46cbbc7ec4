"""Synthetic subject scenes, content-centric augmentation and two-clause prompts.

Images are ``(H, W, 3)`` float32 arrays in ``[0, 1]``; masks are ``(H, W)``
boolean arrays where ``True`` marks the subject (foreground).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from PIL import Image

IMAGE_SIZE = 64
NUM_IDENTITIES = 8
INSTANCE_IDENTITY = 0

PALETTE: dict[str, tuple[float, float, float]] = {
    "white": (1.0, 1.0, 1.0),
    "black": (0.0, 0.0, 0.0),
    "gray": (0.5, 0.5, 0.5),
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.75, 0.2),
    "blue": (0.15, 0.25, 0.9),
}


@dataclass(frozen=True)
class SubjectSpec:
    instance_token: str = "sks"
    class_token: str = "toy"
    background_placeholder: str = "krn"

    def __post_init__(self):
        for name in ("instance_token", "class_token", "background_placeholder"):
            if not getattr(self, name).strip():
                raise ValueError(f"{name} must be non-empty")
        if self.instance_token == self.background_placeholder:
            raise ValueError("instance_token and background_placeholder must differ")


@dataclass(frozen=True)
class Tag:
    """Augmentation applied to an instance sample.

    ``kind`` is one of ``original``, ``recolored`` or ``recolored_resized``.
    """

    kind: str = "original"
    color: str | None = None
    scale: float | None = None

    @property
    def recolored(self) -> bool:
        return self.kind != "original"

    def to_dict(self) -> dict:
        return {"kind": self.kind, "color": self.color, "scale": self.scale}


ORIGINAL = Tag()


@dataclass
class InstanceSample:
    image: np.ndarray
    mask: np.ndarray
    prompt: str
    tag: Tag = ORIGINAL
    color_rgb: tuple[float, float, float] | None = None


@dataclass
class ClassSample:
    image: np.ndarray
    prompt: str
    identity: int = 0


class Masker(Protocol):
    """Foreground segmenter for images without an oracle mask."""

    def __call__(self, image: np.ndarray) -> np.ndarray: ...


class ThresholdMasker:
    """Stand-in segmenter: marks pixels far from the border color as foreground.

    Real photos would plug a salient-object model in here instead.
    """

    def __init__(self, tol: float = 0.08):
        self.tol = tol

    def __call__(self, image: np.ndarray) -> np.ndarray:
        border = np.concatenate([image[0], image[-1], image[:, 0], image[:, -1]])
        ref = np.median(border, axis=0)
        return np.abs(image - ref).max(axis=-1) > self.tol


# ---------------------------------------------------------------------------
# rendering

_yy, _xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE].astype(np.float64) + 0.5


def render_sprite(identity: int, offset: tuple[int, int] = (0, 0)) -> tuple[np.ndarray, np.ndarray]:
    """Render one member of the toy family: striped body plus a round head.

    Shape and colors are fixed per ``identity``; ``offset`` shifts the sprite.
    """
    r = np.random.default_rng(1000 + identity)
    cx = 32 + offset[0]
    cy = 34 + offset[1]
    bw, bh = r.uniform(9, 14), r.uniform(10, 15)
    hr = r.uniform(6, 9)
    period = int(r.integers(4, 8))
    body = ((_xx - cx) / bw) ** 2 + ((_yy - cy - 4) / bh) ** 2 <= 1.0
    head = (_xx - cx) ** 2 + (_yy - (cy - bh - hr + 6)) ** 2 <= hr**2
    c1, c2, c3 = r.uniform(0.1, 0.9, (3, 3))
    rgb = np.zeros((IMAGE_SIZE, IMAGE_SIZE, 3))
    stripe = ((_yy // period) % 2 == 0)[..., None]
    rgb[:] = np.where(stripe, c1, c2)
    rgb[head] = c3
    return rgb.astype(np.float32), body | head


def render_background(rng: np.random.Generator) -> np.ndarray:
    """Smooth two-color gradient at a random angle."""
    a, b = rng.uniform(0, 1, (2, 3))
    ang = rng.uniform(0, 2 * np.pi)
    s = (np.cos(ang) * (_xx - 32) + np.sin(ang) * (_yy - 32)) / 90 + 0.5
    return (a * (1 - s[..., None]) + b * s[..., None]).astype(np.float32)


def composite(sprite: np.ndarray, mask: np.ndarray, background: np.ndarray) -> np.ndarray:
    return np.where(mask[..., None], sprite, background).astype(np.float32)


def render_scenes(rng: np.random.Generator, n: int, identities: Sequence[int] | None = None,
                  jitter: int = 4, return_backgrounds: bool = False):
    """Random scenes of random family members, for fitting frozen networks.

    Half the scenes get a gradient background, half a flat palette color.
    With ``return_backgrounds`` the palette name (or ``None`` for a
    gradient) of each scene is returned as a third element.
    """
    images, labels, names = [], [], []
    for _ in range(n):
        ident = int(rng.integers(NUM_IDENTITIES)) if identities is None else int(rng.choice(identities))
        off = tuple(int(v) for v in rng.integers(-jitter, jitter + 1, 2))
        sprite, mask = render_sprite(ident, off)
        if rng.random() < 0.5:
            bg = render_background(rng)
            names.append(None)
        else:
            name = list(PALETTE)[rng.integers(len(PALETTE))]
            bg = np.broadcast_to(np.asarray(PALETTE[name], np.float32), sprite.shape)
            names.append(name)
        images.append(composite(sprite, mask, bg))
        labels.append(ident)
    if return_backgrounds:
        return np.stack(images), np.asarray(labels), names
    return np.stack(images), np.asarray(labels)


# ---------------------------------------------------------------------------
# prompts

def build_instance_prompt(spec: SubjectSpec, tag: Tag = ORIGINAL, two_clause: bool = True) -> str:
    first = f"a photo of {spec.instance_token} {spec.class_token}"
    if not two_clause:
        return first
    second = tag.color if tag.recolored else spec.background_placeholder
    return f"{first}, {second} background"


def build_class_prompt(spec: SubjectSpec) -> str:
    return f"a photo of {spec.class_token}"


# ---------------------------------------------------------------------------
# dataset

def generate_synthetic_dataset(seed: int, n_instance: int = 4, n_class: int = 16,
                               spec: SubjectSpec | None = None,
                               two_clause: bool = True) -> tuple[list[InstanceSample], list[ClassSample]]:
    if n_instance < 1 or n_class < n_instance:
        raise ValueError("need n_instance >= 1 and n_class >= n_instance")
    spec = spec or SubjectSpec()
    rng = np.random.default_rng(seed)
    sprite, mask = render_sprite(INSTANCE_IDENTITY)
    prompt = build_instance_prompt(spec, ORIGINAL, two_clause)
    instances = [
        InstanceSample(composite(sprite, mask, render_background(rng)), mask.copy(), prompt)
        for _ in range(n_instance)
    ]
    class_prompt = build_class_prompt(spec)
    classes = []
    for i in range(n_class):
        ident = 1 + i % (NUM_IDENTITIES - 1)
        off = tuple(int(v) for v in rng.integers(-6, 7, 2))
        s, m = render_sprite(ident, off)
        classes.append(ClassSample(composite(s, m, render_background(rng)), class_prompt, ident))
    return instances, classes


# ---------------------------------------------------------------------------
# augmentation

def replace_background(sample: InstanceSample, color: str | tuple[float, float, float],
                       spec: SubjectSpec | None = None, two_clause: bool = True) -> InstanceSample:
    spec = spec or SubjectSpec()
    if isinstance(color, str):
        name, rgb = color, PALETTE[color]
    else:
        rgb = tuple(float(c) for c in color)
        name = next((k for k, v in PALETTE.items() if v == rgb), None)
        if name is None:
            raise ValueError(f"color {rgb} has no palette name")
    fill = np.asarray(rgb, np.float32)
    image = np.where(sample.mask[..., None], sample.image, fill).astype(np.float32)
    tag = Tag("recolored", name)
    return InstanceSample(image, sample.mask.copy(), build_instance_prompt(spec, tag, two_clause), tag, rgb)


def _bilinear(img: np.ndarray, sy: np.ndarray, sx: np.ndarray) -> np.ndarray:
    # zero outside the image
    h, w = img.shape[:2]
    y0 = np.floor(sy).astype(int)
    x0 = np.floor(sx).astype(int)
    fy = (sy - y0)[..., None]
    fx = (sx - x0)[..., None]
    pad = np.pad(img, ((1, 2), (1, 2), (0, 0)))
    y0c = np.clip(y0, -1, h) + 1
    x0c = np.clip(x0, -1, w) + 1
    a = pad[y0c, x0c]
    b = pad[y0c, x0c + 1]
    c = pad[y0c + 1, x0c]
    d = pad[y0c + 1, x0c + 1]
    return (a * (1 - fx) * (1 - fy) + b * fx * (1 - fy) + c * (1 - fx) * fy + d * fx * fy)


def resize_foreground(sample: InstanceSample, scale: float, spec: SubjectSpec | None = None,
                      two_clause: bool = True) -> InstanceSample:
    """Rescale the subject about its centroid onto the sample's monotone background."""
    if not 0.5 <= scale <= 1.0:
        raise ValueError(f"scale must lie in [0.5, 1.0], got {scale}")
    if not sample.tag.recolored or sample.color_rgb is None:
        raise ValueError("resize_foreground needs a recolored sample")
    spec = spec or SubjectSpec()
    ys, xs = np.nonzero(sample.mask)
    cy, cx = ys.mean(), xs.mean()
    # pixel-index coordinates of each output pixel mapped back into the source
    oy, ox = np.mgrid[0:sample.mask.shape[0], 0:sample.mask.shape[1]].astype(np.float64)
    sy = cy + (oy - cy) / scale
    sx = cx + (ox - cx) / scale
    alpha = sample.mask.astype(np.float64)[..., None]
    stack = np.concatenate([sample.image * alpha, alpha], axis=-1)
    warped = _bilinear(stack, sy, sx)
    a = warped[..., 3]
    mask = a >= 0.5
    fg = warped[..., :3] / np.maximum(a, 1e-12)[..., None]
    fill = np.asarray(sample.color_rgb, np.float32)
    image = np.where(mask[..., None], np.clip(fg, 0, 1), fill).astype(np.float32)
    tag = Tag("recolored_resized", sample.tag.color, float(scale))
    return InstanceSample(image, mask, build_instance_prompt(spec, tag, two_clause), tag, sample.color_rgb)


@dataclass
class AugmentConfig:
    proportion: float = 0.66
    resize_fraction: float = 0.15
    scale_range: tuple[float, float] = (0.6, 0.9)
    palette: tuple[str, ...] = tuple(PALETTE)
    two_clause: bool = True
    spec: SubjectSpec = field(default_factory=SubjectSpec)


def augment_instance(sample: InstanceSample, rng: np.random.Generator,
                     cfg: AugmentConfig) -> InstanceSample:
    if rng.random() >= cfg.proportion:
        return sample
    color = cfg.palette[int(rng.integers(len(cfg.palette)))]
    out = replace_background(sample, color, cfg.spec, cfg.two_clause)
    if rng.random() < cfg.resize_fraction:
        out = resize_foreground(out, float(rng.uniform(*cfg.scale_range)), cfg.spec, cfg.two_clause)
    return out


def sample_training_batch(instances: Sequence[InstanceSample], classes: Sequence[ClassSample],
                          rng: np.random.Generator,
                          cfg: AugmentConfig | None = None) -> tuple[InstanceSample, ClassSample]:
    if not instances or not classes:
        raise ValueError("datasets must be non-empty")
    cfg = cfg or AugmentConfig()
    inst = instances[int(rng.integers(len(instances)))]
    inst = augment_instance(inst, rng, cfg)
    cls = classes[int(rng.integers(len(classes)))]
    return inst, cls


# ---------------------------------------------------------------------------
# on-disk layout

def _to_png(arr: np.ndarray) -> Image.Image:
    return Image.fromarray(np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8))


def save_dataset(root: str | Path, instances: Sequence[InstanceSample],
                 classes: Sequence[ClassSample], seed: int) -> Path:
    """Write ``instance/``, ``masks/``, ``class/`` PNGs and ``manifest.json``."""
    root = Path(root)
    for sub in ("instance", "masks", "class"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    manifest = {"seed": seed, "instance": [], "class": []}
    for i, s in enumerate(instances):
        name = f"{i:03d}.png"
        _to_png(s.image).save(root / "instance" / name)
        Image.fromarray(s.mask.astype(np.uint8) * 255, mode="L").save(root / "masks" / name)
        manifest["instance"].append({"image": f"instance/{name}", "mask": f"masks/{name}",
                                     "prompt": s.prompt, "tag": s.tag.to_dict()})
    for i, c in enumerate(classes):
        name = f"{i:03d}.png"
        _to_png(c.image).save(root / "class" / name)
        manifest["class"].append({"image": f"class/{name}", "prompt": c.prompt, "identity": c.identity})
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return root


def load_dataset(root: str | Path) -> tuple[list[InstanceSample], list[ClassSample]]:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())

    def img(p):
        return np.asarray(Image.open(root / p), np.float32) / 255.0

    instances = [
        InstanceSample(img(e["image"]), np.asarray(Image.open(root / e["mask"])) > 127,
                       e["prompt"], Tag(**e["tag"]))
        for e in manifest["instance"]
    ]
    classes = [ClassSample(img(e["image"]), e["prompt"], e.get("identity", 0)) for e in manifest["class"]]
    return instances, classes

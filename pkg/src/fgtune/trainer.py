"""Finetuning loop: paired instance/class batches, four losses, adversarial interleave."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from safetensors.numpy import load_file, save_file

from . import dataprep
from .backbone import LatentDiffusion
from .config import RunConfig
from .discriminator import LatentDiscriminator, build_ld_dataset, discriminator_step, pretrain_ld, take
from .losses import (LossBreakdown, LossWeights, PerceptualEncoder, build_perceptual_encoder, calibrate_sigma,
                     combine, inverse_gaussian_loss, ld_generator_loss, perceptual_loss, prior_preservation_loss,
                     total_loss)

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("step", "r", "pp", "p", "ld", "total", "d_loss")
CHECKPOINT_FORMAT = "fgtune-checkpoint"


class TrainingDivergence(RuntimeError):
    def __init__(self, step: int, last: LossBreakdown | None, detail: str = ""):
        super().__init__(f"non-finite loss at step {step}{': ' + detail if detail else ''}; last finite: {last}")
        self.step = step
        self.last = last


def uses_ld(mode: str) -> bool:
    return mode in ("hypnos", "ablation_no_perceptual")


def uses_perceptual(mode: str) -> bool:
    return mode in ("hypnos", "ablation_no_ld", "ablation_ungated_perceptual")


def effective_weights(cfg: RunConfig, sigma: float | None = None) -> LossWeights:
    """Loss weights with the terms switched off that the mode excludes."""
    lc = cfg.losses
    mode = cfg.trainer.mode
    if sigma is None:
        sigma = calibrate_sigma(1.0) if lc.sigma == "auto" else float(lc.sigma)
    w = LossWeights(lc.lambda_r, lc.lambda_pp, lc.lambda_p, lc.lambda_ld, sigma, lc.s_p,
                    {int(k): float(v) for k, v in lc.block_weights.items()})
    if not uses_perceptual(mode):
        w.lambda_p = 0.0
    if not uses_ld(mode):
        w.lambda_ld = 0.0
    if mode == "ablation_ungated_perceptual":
        w.s_p = cfg.trainer.total_steps
    w.validate(cfg.trainer.total_steps)
    return w


def augment_config(cfg: RunConfig) -> dataprep.AugmentConfig:
    d = cfg.data
    baseline = cfg.trainer.mode == "dreambooth_baseline"
    return dataprep.AugmentConfig(
        proportion=0.0 if baseline else d.augment_proportion,
        resize_fraction=d.resize_fraction,
        scale_range=tuple(d.scale_range),
        palette=tuple(d.palette),
        two_clause=not baseline,
        spec=dataprep.SubjectSpec(d.instance_token, d.class_token, d.background_placeholder),
    )


def make_datasets(cfg: RunConfig):
    aug = augment_config(cfg)
    return dataprep.generate_synthetic_dataset(cfg.seed, cfg.data.n_instance, cfg.data.n_class, aug.spec,
                                               aug.two_clause)


# ---------------------------------------------------------------------------
# generic pretraining

_BASE_CACHE: dict[str, dict[str, torch.Tensor]] = {}


def _base_key(cfg: RunConfig) -> str:
    import dataclasses
    import hashlib

    blob = json.dumps({"backbone": dataclasses.asdict(cfg.backbone), "seed": cfg.seed,
                       "class_token": cfg.data.class_token}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def pretrain_backbone(cfg: RunConfig, cache_dir: str | Path | None = None) -> dict[str, torch.Tensor]:
    """State dict of a backbone fitted to captioned scenes of the class family.

    Plays the part of the large pretrained model that finetuning starts
    from. The instance identity is never shown, so the subject stays novel.
    Results are cached in memory and, when ``cache_dir`` is given, on disk.
    """
    key = _base_key(cfg)
    if key in _BASE_CACHE:
        return _BASE_CACHE[key]
    path = Path(cache_dir) / f"base-{key}.safetensors" if cache_dir is not None else None
    model = LatentDiffusion(cfg.backbone, cfg.seed)
    if path is not None and path.exists():
        state = {k: torch.from_numpy(v.copy()) for k, v in load_file(str(path)).items()}
    else:
        bc = cfg.backbone
        rng = np.random.default_rng([cfg.seed, 5])
        gen = torch.Generator().manual_seed(cfg.seed * 1000 + 5)
        opt = torch.optim.Adam(model.trainable_parameters(), lr=bc.pretrain_lr)
        family = range(dataprep.INSTANCE_IDENTITY + 1, dataprep.NUM_IDENTITIES)
        for step in range(bc.pretrain_steps):
            imgs, _, bgs = dataprep.render_scenes(rng, bc.pretrain_batch, family, jitter=6, return_backgrounds=True)
            prompts = [f"a photo of {cfg.data.class_token}" + (f", {b} background" if b else "") for b in bgs]
            with torch.no_grad():
                z = model.codec.encode(torch.from_numpy(imgs))
            t = torch.randint(1, bc.T + 1, (len(z),), generator=gen).numpy()
            eps = torch.randn(z.shape, generator=gen)
            eps_hat = model.predict_noise(model.add_noise(z, t, eps), t, model.text_encoder(prompts))
            loss = (eps_hat - eps).pow(2).mean()
            if not torch.isfinite(loss):
                raise TrainingDivergence(step, None, "backbone pretraining")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            if step % 500 == 0:
                log.info("backbone pretraining step %d loss %.4f", step, float(loss.detach()))
        state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            save_file({k: v.contiguous().numpy() for k, v in state.items()}, str(path))
    _BASE_CACHE[key] = state
    return state


# ---------------------------------------------------------------------------
# checkpoint

@dataclass
class Checkpoint:
    model: LatentDiffusion
    perceptual: PerceptualEncoder
    ld: LatentDiscriminator | None
    config: RunConfig
    step: int = 0
    history: list[dict] = field(default_factory=list)
    ld_history: list[float] = field(default_factory=list)
    codec_hash: dict = field(default_factory=dict)

    def save(self, path: str | Path) -> Path:
        """Safetensors container: little-endian arrays plus JSON metadata."""
        path = Path(path)
        tensors = {}
        for prefix, module in (("model.", self.model), ("perceptual.", self.perceptual), ("ld.", self.ld)):
            if module is None:
                continue
            for k, v in module.state_dict().items():
                tensors[prefix + k] = v.detach().cpu().contiguous().numpy()
        meta = {
            "format": CHECKPOINT_FORMAT,
            "schema_version": str(self.config.schema_version),
            "config": self.config.to_json(),
            "config_digest": self.config.digest(),
            "step": str(self.step),
            "history": json.dumps(self.history),
            "ld_history": json.dumps(self.ld_history),
            "codec_hash": json.dumps(self.codec_hash),
            "has_ld": str(self.ld is not None),
        }
        save_file(tensors, str(path), metadata=meta)
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        from safetensors import safe_open

        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(path)
        with safe_open(str(path), "np") as f:
            meta = f.metadata()
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path} is not a checkpoint of this package")
        arrays = load_file(str(path))
        cfg = RunConfig.from_dict(json.loads(meta["config"]))

        def part(prefix):
            return {k[len(prefix):]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith(prefix)}

        mstate = part("model.")
        model = LatentDiffusion(cfg.backbone, cfg.seed,
                               codec=(mstate["codec.basis"].numpy(), mstate["codec.scale"].numpy()))
        model.load_state_dict(mstate)
        perceptual = PerceptualEncoder()
        perceptual.load_state_dict(part("perceptual."))
        perceptual.freeze()
        ld = None
        if meta["has_ld"] == "True":
            ld = LatentDiscriminator(cfg.backbone.latent_channels, cfg.backbone.image_size // cfg.backbone.patch)
            ld.load_state_dict(part("ld."))
        return cls(model, perceptual, ld, cfg, int(meta["step"]), json.loads(meta["history"]),
                   json.loads(meta["ld_history"]), json.loads(meta["codec_hash"]))


def history_csv(history: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_COLUMNS)
    for row in history:
        w.writerow([row["step"]] + [repr(float(row[c])) for c in HISTORY_COLUMNS[1:]])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# trainer

class Trainer:
    """Holds every stateful piece of one finetuning run.

    Separate seeded streams drive batch sampling, diffusion noise and the
    discriminator data, so runs in different modes see the same batches.
    """

    def __init__(self, cfg: RunConfig, instances=None, classes=None, perceptual: PerceptualEncoder | None = None,
                 base_cache: str | Path | None = None):
        self.cfg = cfg
        self.mode = cfg.trainer.mode
        self.weights = effective_weights(cfg)
        self.aug = augment_config(cfg)
        if instances is None or classes is None:
            instances, classes = make_datasets(cfg)
        self.instances, self.classes = instances, classes
        self.model = LatentDiffusion(cfg.backbone, cfg.seed)
        if cfg.backbone.pretrain_steps > 0:
            self.model.load_state_dict(pretrain_backbone(cfg, base_cache))
        self.codec_hash_start = self.model.codec.param_hash()
        for p in self.model.codec.parameters():
            p.requires_grad_(False)
        self.perceptual = perceptual or build_perceptual_encoder(cfg.losses.perceptual_seed,
                                                                 cfg.losses.perceptual_pretrain_steps)
        self.opt = torch.optim.Adam(self.model.trainable_parameters(), lr=cfg.trainer.lr)
        self.batch_rng = np.random.default_rng([cfg.seed, 1])
        self.noise_gen = torch.Generator().manual_seed(cfg.seed * 1000 + 2)
        self.ld: LatentDiscriminator | None = None
        self.ld_opt = None
        self.ld_history: list[float] = []
        self.ld_stream = None
        self.ld_pretrained = False
        if uses_ld(self.mode):
            torch.manual_seed(cfg.seed + 3)
            self.ld = LatentDiscriminator(cfg.backbone.latent_channels, cfg.backbone.image_size // cfg.backbone.patch)
            self.ld_stream = build_ld_dataset(instances, classes, np.random.default_rng([cfg.seed, 3]),
                                              encode=self._encode_image, aug=self.aug,
                                              fill=cfg.discriminator.fill_value)
        self.history: list[dict] = []
        self.step = 0

    def _encode_image(self, img: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.model.codec.encode(img)

    def pretrain_discriminator(self) -> list[float]:
        dc = self.cfg.discriminator
        if self.ld is None:
            return []
        _, curve, _ = pretrain_ld(self.ld, self.ld_stream, dc.pretrain_steps, dc.batch_size, dc.lr,
                                  dc.r1_gamma)
        self.ld_history = curve
        self.ld.zero_grad(set_to_none=True)
        self.ld_opt = torch.optim.Adam(self.ld.parameters(), lr=dc.joint_lr)
        self.ld_pretrained = True
        return curve

    def training_step(self, step: int | None = None) -> tuple[LossBreakdown, float]:
        step = self.step if step is None else step
        if step >= self.cfg.trainer.total_steps:
            raise ValueError(f"step {step} beyond total_steps {self.cfg.trainer.total_steps}")
        if self.ld is not None and not self.ld_pretrained:
            raise RuntimeError("discriminator must be pretrained before joint training")
        w = self.weights
        model = self.model
        inst, cls = dataprep.sample_training_batch(self.instances, self.classes, self.batch_rng, self.aug)
        x_i = torch.from_numpy(inst.image)
        with torch.no_grad():
            z = model.codec.encode(torch.from_numpy(np.stack([inst.image, cls.image])))
        T = model.schedule.T
        t = int(torch.randint(1, T + 1, (1,), generator=self.noise_gen))
        eps = torch.randn(z.shape, generator=self.noise_gen)
        z_t = model.add_noise(z, t, eps)
        cond = model.text_encoder([inst.prompt, cls.prompt])
        eps_hat = model.predict_noise(z_t, t, cond)

        if self.mode == "dreambooth_baseline":
            r = prior_preservation_loss(eps_hat[0], eps[0])
        else:
            r = inverse_gaussian_loss(eps_hat[0], eps[0], w.sigma)
        pp = prior_preservation_loss(eps_hat[1], eps[1])
        zero = torch.zeros(())
        z0 = model.predict_z0(z_t[0], t, eps_hat[0])
        p = zero
        if w.lambda_p > 0:
            p = perceptual_loss(x_i, model.decode(z0), self.perceptual, w.block_weights, step, w.s_p)
        ld = zero
        if w.lambda_ld > 0:
            ld = ld_generator_loss(z0, self.ld)

        total = combine(r, pp, p, ld, w)
        if not torch.isfinite(total):
            last = self._last_breakdown()
            vals = " ".join(f"{n}={float(v.detach())}" for n, v in zip(("r", "pp", "p", "ld"), (r, pp, p, ld)))
            raise TrainingDivergence(step, last, vals)
        self.opt.zero_grad(set_to_none=True)
        total.backward()
        if self.ld is not None:
            assert all(q.grad is None for q in self.ld.parameters()), "generator pass touched discriminator"
        self.opt.step()
        breakdown = total_loss(r, pp, p, ld, w, step)

        d_loss = 0.0
        if self.ld is not None:
            dc = self.cfg.discriminator
            for _ in range(dc.d_steps_per_g):
                lat, lab = take(self.ld_stream, dc.batch_size)
                gen = z0.detach()[None] if dc.generated_as_fake else None
                d_loss = discriminator_step(self.ld, self.ld_opt, lat, lab, gen, dc.r1_gamma)
            self.ld.zero_grad(set_to_none=True)
            if not math.isfinite(d_loss):
                raise TrainingDivergence(step, breakdown, "discriminator loss")
        self.history.append({"step": step, "r": breakdown.r, "pp": breakdown.pp, "p": breakdown.p,
                             "ld": breakdown.ld, "total": breakdown.total, "d_loss": d_loss})
        self.step = step + 1
        return breakdown, d_loss

    def _last_breakdown(self) -> LossBreakdown | None:
        if not self.history:
            return None
        h = self.history[-1]
        return LossBreakdown(h["r"], h["pp"], h["p"], h["ld"], h["total"], h["step"])

    def run(self, progress=None) -> Checkpoint:
        if self.ld is not None and not self.ld_pretrained:
            self.pretrain_discriminator()
        while self.step < self.cfg.trainer.total_steps:
            self.training_step()
            if progress is not None:
                progress(self.step)
        return self.checkpoint()

    def checkpoint(self) -> Checkpoint:
        end_hash = self.model.codec.param_hash()
        if end_hash != self.codec_hash_start:
            raise RuntimeError("frozen codec parameters changed during training")
        return Checkpoint(self.model, self.perceptual, self.ld, self.cfg, self.step, list(self.history),
                          list(self.ld_history), {"start": self.codec_hash_start, "end": end_hash})


def train(cfg: RunConfig, instances=None, classes=None, perceptual: PerceptualEncoder | None = None,
          base_cache: str | Path | None = None) -> Checkpoint:
    trainer = Trainer(cfg, instances, classes, perceptual, base_cache)
    ckpt = trainer.run()
    log.info("trained %s for %d steps", cfg.trainer.mode, ckpt.step)
    return ckpt


def with_mode(cfg: RunConfig, mode: str) -> RunConfig:
    return replace(cfg, trainer=replace(cfg.trainer, mode=mode))

"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The full-size training runs are shared through module fixtures. Expect
roughly a quarter of an hour on one CPU core.
"""

import json
import math
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import torch
from PIL import Image
from scipy import integrate

from conftest import ACCEPTANCE, central_diff
from fgtune import dataprep
from fgtune.backbone import NoiseSchedule, add_noise, predict_z0
from fgtune.config import RunConfig
from fgtune.discriminator import CATEGORIES, CATEGORY_NAMES, build_ld_dataset
from fgtune.evaluation import (PSNR_CAP, block_embedder, evaluate, metric_embed_sim, metric_fid,
                               metric_foreground_fidelity, metric_lpips_proxy, metric_psnr, metric_ssim, ssim_map)
from fgtune.losses import (LossWeights, build_perceptual_encoder, inverse_gaussian, inverse_gaussian_loss,
                           perceptual_loss, total_loss)
from fgtune.trainer import Trainer, history_csv, with_mode

BASELINE = Path(__file__).with_name("baselines") / "directional.json"
N_EVAL = 50


def record(n: int, ok: bool, text: str) -> None:
    line = f"criterion {n:>2} [{'PASS' if ok else 'FAIL'}] {text}"
    ACCEPTANCE.append(line)
    print(line)


def _run(mode: str, perceptual):
    t0 = time.perf_counter()
    ckpt = Trainer(with_mode(RunConfig(), mode), perceptual=perceptual).run()
    return ckpt, time.perf_counter() - t0


@pytest.fixture(scope="module")
def hypnos():
    t0 = time.perf_counter()
    perceptual = build_perceptual_encoder()
    ckpt, _ = _run("hypnos", perceptual)
    return ckpt, time.perf_counter() - t0


@pytest.fixture(scope="module")
def ablations(hypnos):
    return {mode: _run(mode, hypnos[0].perceptual)[0] for mode in ("ablation_no_ld", "ablation_no_perceptual")}


# ---------------------------------------------------------------------------

def _grid_sigma(a=1.0):
    def objective(s):
        f = lambda x: (x * x - s * math.sqrt(2 * math.pi) * math.expm1(x * x / (2 * s * s))) ** 2
        return integrate.quad(f, 0.0, a, epsabs=1e-14, epsrel=1e-12)[0]

    grid = np.arange(0.5, 3.0 + 1e-9, 1e-3)
    return float(grid[int(np.argmin([objective(s) for s in grid]))])


def test_criterion_01_sigma_calibration():
    t0 = time.perf_counter()
    out = subprocess.run([sys.executable, "-m", "fgtune", "calibrate-sigma", "--a", "1"], capture_output=True,
                         text=True, check=True).stdout
    elapsed = time.perf_counter() - t0
    sigma = float(out.split()[0].split("=")[1])
    oracle = _grid_sigma()
    ok = abs(sigma - 1.382) <= 0.01 and abs(sigma - oracle) <= 2e-3 and elapsed < 5
    record(1, ok, f"sigma={sigma:.5f} (target 1.382 +/- 0.01), grid oracle={oracle:.3f}, cli time={elapsed:.2f}s (< 5s)")
    assert ok


def test_criterion_02_inverse_gaussian():
    sigma = 1.382
    vals = {}
    for m in (0.0, 0.25, 1.0):
        eps = torch.zeros(8, 16, 16, dtype=torch.float64)
        vals[m] = float(inverse_gaussian_loss(eps + math.sqrt(m), eps, sigma))
    ok_vals = all(abs(vals[m] - e) <= 1e-3 for m, e in ((0.0, 0.0), (0.25, 0.234), (1.0, 1.037)))
    g = torch.Generator().manual_seed(0)
    worst = 0.0
    for _ in range(10):
        eps = torch.randn(3, 5, 5, generator=g, dtype=torch.float64)
        hat = (eps + 0.8 * torch.randn(3, 5, 5, generator=g, dtype=torch.float64)).requires_grad_()
        inverse_gaussian_loss(hat, eps, sigma).backward()
        idx = int(torch.randint(hat.numel(), (1,), generator=g))
        fd = central_diff(lambda: inverse_gaussian_loss(hat.detach(), eps, sigma), hat, idx)
        an = float(hat.grad.view(-1)[idx])
        worst = max(worst, abs(fd - an) / max(abs(an), 1e-12))
    h = 1e-7
    slope = float(inverse_gaussian(h, sigma) - inverse_gaussian(0.0, sigma)) / h
    target = math.sqrt(2 * math.pi) / (2 * sigma)
    ok = ok_vals and worst <= 1e-4 and abs(slope - target) <= 1e-3
    record(2, ok, f"L(0,.25,1)=({vals[0.0]:.4f},{vals[0.25]:.4f},{vals[1.0]:.4f}); "
                  f"max grad rel err={worst:.1e}; slope={slope:.5f} vs {target:.5f}")
    assert ok


def test_criterion_03_perceptual_gate(hypnos):
    ckpt, _ = hypnos
    rows = history_csv(ckpt.history).strip().split("\n")[1:]
    late = [r.split(",") for r in rows if int(r.split(",")[0]) > 500]
    zeros = all(float(r[3]) == 0.0 for r in late) and len(late) == 299
    early_nonzero = sum(h["p"] > 0 for h in ckpt.history if h["step"] <= 500)

    model, enc = ckpt.model, ckpt.perceptual
    inst = dataprep.generate_synthetic_dataset(42)[0][0]
    x = torch.from_numpy(inst.image)
    z = model.encode(x)
    eps = torch.randn(z.shape, generator=torch.Generator().manual_seed(1))
    z_t = model.add_noise(z, 300, eps)
    params = model.trainable_parameters()

    def grad_norm(step):
        eps_hat = model.predict_noise(z_t, 300, model.text_encoder(inst.prompt))
        p = 0.003 * perceptual_loss(x, model.decode(model.predict_z0(z_t, 300, eps_hat)), enc, step=step, s_p=500)
        if not p.requires_grad:
            return 0.0
        grads = torch.autograd.grad(p, params, allow_unused=True)
        return float(sum((g**2).sum() for g in grads if g is not None))

    g500, g501 = grad_norm(500), grad_norm(501)
    ok = zeros and g501 == 0.0 and g500 > 0 and early_nonzero > 0
    record(3, ok, f"p==0 on all {len(late)} steps >500; grad^2 at 501={g501} (500: {g500:.2e}); "
                  f"nonzero p on {early_nonzero} steps <=500")
    assert ok


def test_criterion_04_table_a1(dataset):
    inst, cls = dataset
    stream = build_ld_dataset(inst, cls, np.random.default_rng(42))
    draws = [next(stream) for _ in range(10_000)]
    total = sum(p for _, _, p in CATEGORIES)
    worst, name = 0.0, ""
    for cat, _, pct in CATEGORIES:
        freq = sum(d.category == cat for d in draws) / len(draws)
        dev = abs(freq - pct / 100)
        if dev > worst:
            worst, name = dev, cat
    real = sum(d.label for d in draws) / len(draws)
    ok = worst <= 0.02 and abs(real - 0.5) <= 0.02 and len(set(d.category for d in draws)) == len(CATEGORY_NAMES)
    record(4, ok, f"max |freq - table| = {worst:.4f} ({name}); real fraction = {real:.4f}; table sum = {total:.2f}")
    assert ok


def test_criterion_05_augmentation(dataset, monkeypatch):
    calls = []
    original = dataprep.replace_background

    def spy(sample, *a, **k):
        out = original(sample, *a, **k)
        calls.append((sample, out))
        return out

    monkeypatch.setattr(dataprep, "replace_background", spy)
    rng = np.random.default_rng(42)
    kinds = [dataprep.sample_training_batch(*dataset, rng)[0].tag.kind for _ in range(10_000)]
    frac = float(np.mean([k != "original" for k in kinds]))
    identical = all(np.array_equal(o.image[s.mask], s.image[s.mask]) and np.array_equal(o.mask, s.mask)
                    for s, o in calls)
    ok = abs(frac - 0.66) <= 0.02 and identical and len(calls) == sum(k != "original" for k in kinds)
    record(5, ok, f"recolored fraction = {frac:.4f} (0.66 +/- 0.02); foreground bit-identical on "
                  f"{len(calls)}/{len(calls)} recolorings: {identical}")
    assert ok


def test_criterion_06_composition():
    rng = np.random.default_rng(42)
    w = LossWeights()
    lam = (w.lambda_r, w.lambda_pp, w.lambda_p, w.lambda_ld)
    worst = 0.0
    for _ in range(1000):
        comps = rng.uniform(0, 10, 4) * rng.choice([1e-3, 1, 1e3], 4)
        b = total_loss(*comps, w)
        exact = math.fsum(l * c for l, c in zip(lam, comps))
        worst = max(worst, abs(b.total - exact) / math.ulp(exact))
    ok = worst <= 4 and lam == (1.0, 1.0, 0.003, 0.5)
    record(6, ok, f"max deviation = {worst:.1f} ulp over 1000 tuples; weights {lam}")
    assert ok


def test_criterion_07_diffusion_algebra():
    s = NoiseSchedule(1000)
    g = torch.Generator().manual_seed(42)
    z0 = torch.randn(8, 16, 16, generator=g, dtype=torch.float64)
    worst = 0.0
    for t in (1, 250, 500, 750, 1000):
        eps = torch.randn(z0.shape, generator=g, dtype=torch.float64)
        worst = max(worst, float((predict_z0(s, add_noise(s, z0, t, eps), t, eps) - z0).abs().max()))
    var_err = 0.0
    for t in (10, 500, 990):
        eps = torch.randn((20_000, 8), generator=g, dtype=torch.float64)
        x = add_noise(s, z0[:, 0, 0].expand(20_000, 8), t, eps)
        var = x.var(dim=0)  # per coordinate, across draws
        var_err = max(var_err, float((var / (1 - s.alpha_bar[t]) - 1).abs().max()))
    ok = worst <= 1e-5 and var_err <= 0.05
    record(7, ok, f"max round-trip error = {worst:.1e} (<= 1e-5); max MC variance rel err = {var_err:.4f} (<= 5%)")
    assert ok


def test_criterion_08_training_stability(hypnos):
    ckpt, elapsed = hypnos
    finite = all(math.isfinite(h[c]) for h in ckpt.history for c in ("r", "pp", "p", "ld", "total", "d_loss"))
    finite = finite and all(math.isfinite(v) for v in ckpt.ld_history)
    same = ckpt.codec_hash["start"] == ckpt.codec_hash["end"]
    n = (len(ckpt.ld_history), len(ckpt.history))
    ok = finite and same and n == (600, 800) and elapsed < 15 * 60
    record(8, ok, f"{n[0]} LD + {n[1]} joint steps in {elapsed:.0f}s (< 900s, includes backbone pretraining); "
                  f"all finite: {finite}; codec hash unchanged: {same}")
    assert ok


def _ssim_loops(a, b, win=8):
    w = np.array([0.299, 0.587, 0.114])
    x, y = np.asarray(a, np.float64) @ w, np.asarray(b, np.float64) @ w
    vals = []
    for i in range(x.shape[0] - win + 1):
        for j in range(x.shape[1] - win + 1):
            p, q = x[i:i + win, j:j + win], y[i:i + win, j:j + win]
            mp, mq = p.mean(), q.mean()
            cov = ((p - mp) * (q - mq)).mean()
            vals.append((2 * mp * mq + 1e-4) * (2 * cov + 9e-4) / ((mp**2 + mq**2 + 1e-4) * (p.var() + q.var() + 9e-4)))
    return float(np.mean(vals))


def test_criterion_09_metric_oracles(dataset, perceptual):
    rng = np.random.default_rng(42)
    ssim_err = psnr_err = 0.0
    for _ in range(5):
        a = rng.random((32, 32, 3))
        b = np.clip(a + 0.2 * rng.standard_normal(a.shape), 0, 1)
        ssim_err = max(ssim_err, abs(metric_ssim(a, b) - _ssim_loops(a, b)))
        psnr_err = max(psnr_err, abs(metric_psnr(a, b) - 10 * math.log10(1 / np.mean((a - b) ** 2))))
    d = 1.7
    e = rng.standard_normal((5000, 3))
    e = (e - e.mean(0)) @ np.linalg.inv(np.linalg.cholesky(np.cov(e, rowvar=False))).T
    fid_err = abs(metric_fid(e, e + np.array([d, 0, 0])) - d * d)

    img = dataset[0][0].image
    emb = block_embedder(perceptual, 3)
    perfect = {
        "ssim": metric_ssim(img, img) == pytest.approx(1.0, abs=1e-12),
        "psnr": metric_psnr(img, img) == PSNR_CAP,
        "fid": abs(metric_fid(e[:200], e[:200])) <= 1e-6,
        "lpips": metric_lpips_proxy(img, img, perceptual) == 0.0,
        "embed": metric_embed_sim(img, img, emb) == pytest.approx(1.0, abs=1e-9),
        "foreground": metric_foreground_fidelity(img, dataset[0][0]) == pytest.approx((0.0, 0.0), abs=1e-12),
        "ssim_map": bool(np.allclose(ssim_map(img, img), 1.0)),
    }
    ok = ssim_err <= 1e-6 and psnr_err <= 1e-6 and fid_err <= 1e-5 and all(perfect.values())
    record(9, ok, f"SSIM err={ssim_err:.1e}, PSNR err={psnr_err:.1e}, FID mean-shift err={fid_err:.1e}; "
                  f"perfect on identical inputs: {all(perfect.values())}")
    assert ok, perfect


@pytest.fixture(scope="module")
def directional(hypnos, ablations):
    ckpts = {"hypnos": hypnos[0], **ablations}
    out = {}
    for mode, ck in ckpts.items():
        out[mode] = {reg: evaluate(ck, reg, n_images=N_EVAL).to_dict()["metrics"] for reg in ("invariant", "varying")}
    return out


def test_criterion_10_directional(directional):
    inv = {m: r["invariant"] for m, r in directional.items()}
    color = {m: v["fg_color_dev"]["mean"] for m, v in inv.items()}
    struct = {m: v["fg_struct_dev"]["mean"] for m, v in inv.items()}
    others = ("ablation_no_ld", "ablation_no_perceptual")
    a = all(color["hypnos"] < color[o] for o in others)
    b = all(struct["hypnos"] < struct[o] for o in others)
    c_fail = [f"{m}:{k}" for m, r in directional.items() for k in ("dino", "clip_i")
              if r["varying"][k]["mean"] > r["invariant"][k]["mean"]]
    c = not c_fail
    fmt = lambda d: ", ".join(f"{m.replace('ablation_', '')}={v:.4f}" for m, v in d.items())
    record(10, a and b and c,
           f"(a) color_dev {fmt(color)} -> {'ok' if a else 'violated'}; (b) struct_dev {fmt(struct)} -> "
           f"{'ok' if b else 'violated'}; (c) varying <= invariant embed_sim -> "
           f"{'ok' if c else 'violated by ' + ' '.join(c_fail)}")
    summary = {m: {reg: {k: v["mean"] for k, v in r[reg].items()} for reg in r} for m, r in directional.items()}
    if BASELINE.exists():
        base = json.loads(BASELINE.read_text())
        drift = max(abs(summary[m][reg][k] - base[m][reg][k]) for m in base for reg in base[m] for k in base[m][reg])
        print(f"criterion 10 regression drift vs recorded baseline: {drift:.2e}")
        assert drift <= 1e-6
    else:
        BASELINE.parent.mkdir(exist_ok=True)
        BASELINE.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    assert a and b and c


def test_criterion_11_determinism(hypnos, tmp_path):
    first = hypnos[0]
    second = Trainer(with_mode(RunConfig(), "hypnos"), perceptual=build_perceptual_encoder()).run()
    csv_same = history_csv(first.history).encode() == history_csv(second.history).encode()

    def png_bytes(ck, k):
        p = tmp_path / f"{id(ck)}_{k}.png"
        Image.fromarray(np.round(ck.model.sample("a photo of sks toy", seed=k).numpy() * 255).astype(np.uint8)).save(p)
        return p.read_bytes()

    img_same = all(png_bytes(first, k) == png_bytes(second, k) for k in range(3))
    rep = lambda ck: evaluate(ck, "varying", n_images=5).to_json().encode()
    rep_same = rep(first) == rep(second)
    ok = csv_same and img_same and rep_same
    record(11, ok, f"seed-42 rerun: loss CSV identical={csv_same}, PNG bytes identical={img_same}, "
                   f"report JSON identical={rep_same}")
    assert ok

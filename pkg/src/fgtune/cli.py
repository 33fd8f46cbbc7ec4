"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
RUN_ROOT_ENV = "FGTUNE_RUN_ROOT"

log = logging.getLogger("fgtune")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def run_root() -> Path:
    return Path(os.environ.get(RUN_ROOT_ENV, "runs"))


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _load_config(args):
    from .config import RunConfig

    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    return cfg.with_overrides(args.set or [])


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


# ---------------------------------------------------------------------------
# commands

def cmd_calibrate_sigma(args) -> int:
    from .losses import calibrate_sigma, calibration_objective

    if not args.a > 0:
        raise UsageError("--a must be positive")
    sigma = calibrate_sigma(args.a)
    print(f"sigma={sigma:.6f} objective={calibration_objective(sigma, args.a):.6e}")
    return EXIT_OK


def cmd_make_data(args) -> int:
    from .dataprep import save_dataset
    from .trainer import make_datasets

    cfg = _load_config(args)
    inst, cls = make_datasets(cfg)
    root = save_dataset(args.out, inst, cls, cfg.seed)
    print(f"wrote {len(inst)} instance and {len(cls)} class images to {root}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .trainer import Trainer, history_csv

    cfg = _load_config(args)
    out = Path(args.run_dir) if args.run_dir else run_root() / f"{cfg.trainer.mode}-s{cfg.seed}-{cfg.digest()[:8]}"
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "config.json", cfg.to_json() + "\n")
    trainer = Trainer(cfg, base_cache=run_root() / "_base_cache")
    every = max(1, cfg.trainer.total_steps // 10)
    ckpt = trainer.run(progress=lambda s: log.info("step %d/%d", s, cfg.trainer.total_steps) if s % every == 0 else None)
    ckpt.save(out / "checkpoint.safetensors")
    _write(out / "loss_history.csv", history_csv(ckpt.history))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "d_loss"])
    for i, v in enumerate(ckpt.ld_history):
        w.writerow([i, repr(float(v))])
    _write(out / "ld_pretrain_history.csv", buf.getvalue())
    print(out)
    return EXIT_OK


def _checkpoint(path):
    from .trainer import Checkpoint

    path = Path(path)
    if path.is_dir():
        path = path / "checkpoint.safetensors"
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return path, Checkpoint.load(path)


def cmd_generate(args) -> int:
    from PIL import Image

    if args.n < 1:
        raise UsageError("--n must be >= 1")
    path, ckpt = _checkpoint(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for k in range(args.n):
        img = ckpt.model.sample(args.prompt, args.steps, args.seed + k)
        arr = np.round(img.numpy() * 255).astype(np.uint8)
        name = f"image_{k:03d}.png"
        Image.fromarray(arr).save(out / name)
        files.append({"file": name, "seed": args.seed + k})
    manifest = {"prompt": args.prompt, "num_steps": args.steps or ckpt.config.eval.num_steps, "images": files,
                "checkpoint": str(path), "checkpoint_sha256": _sha256(path),
                "config_digest": ckpt.config.digest()}
    _write(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(out)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .evaluation import evaluate

    path, ckpt = _checkpoint(args.checkpoint)
    if args.set:
        ckpt.config = ckpt.config.with_overrides(args.set)
    n = args.n if args.n is not None else ckpt.config.eval.n_images
    report = evaluate(ckpt, args.regime, n_images=n)
    report.config["checkpoint_sha256"] = _sha256(path)
    out = Path(args.out) if args.out else path.parent
    _write(out / f"report_{args.regime}.json", report.to_json() + "\n")
    _write(out / f"report_{args.regime}.csv", report.to_csv())
    print(out / f"report_{args.regime}.json")
    return EXIT_OK


def cmd_report(args) -> int:
    rows = []
    for p in args.reports:
        p = Path(p)
        files = sorted(p.glob("report_*.json")) if p.is_dir() else [p]
        if not files:
            raise FileNotFoundError(f"no reports under {p}")
        for f in files:
            d = json.loads(f.read_text())
            for name, s in d["metrics"].items():
                rows.append((d["config"].get("mode", "?"), d["regime"], name, s["mean"], s["std"], s["n"]))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["mode", "regime", "metric", "mean", "std", "n"])
    w.writerows(rows)
    text = buf.getvalue()
    if args.out:
        _write(Path(args.out), text)
    sys.stdout.write(text)
    if args.plot:
        _plot(rows, Path(args.plot))
    return EXIT_OK


def _plot(rows, path: Path) -> None:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as exc:
        raise RuntimeError("plotting needs matplotlib (pip install .[plot])") from exc
    metrics = sorted({r[2] for r in rows})
    groups = sorted({(r[0], r[1]) for r in rows})
    fig, axes = plt.subplots(1, len(metrics), figsize=(2.2 * len(metrics), 3), squeeze=False)
    for ax, m in zip(axes[0], metrics):
        vals = {(r[0], r[1]): (r[3], r[4]) for r in rows if r[2] == m}
        xs = np.arange(len(groups))
        ax.bar(xs, [vals.get(g, (np.nan, 0))[0] for g in groups], yerr=[vals.get(g, (0, 0))[1] for g in groups])
        ax.set_xticks(xs, [f"{g[0]}\n{g[1]}" for g in groups], rotation=90, fontsize=6)
        ax.set_title(m, fontsize=8)
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fgtune", description="Subject finetuning toolkit for a toy latent diffusion model.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(sp):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")

    sp = sub.add_parser("calibrate-sigma", help="fit the reconstruction-loss sigma")
    sp.add_argument("--a", type=float, default=1.0, help="upper end of the residual range")
    sp.set_defaults(func=cmd_calibrate_sigma)

    sp = sub.add_parser("make-data", help="render the synthetic dataset to disk")
    with_config(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_make_data)

    sp = sub.add_parser("train", help="run one finetuning job")
    with_config(sp)
    sp.add_argument("--run-dir", help=f"output directory (default: ${RUN_ROOT_ENV}/<mode>-s<seed>-<digest>)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("generate", help="sample images from a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--prompt", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--n", type=int, default=1)
    sp.add_argument("--steps", type=int, default=None)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_generate)

    sp = sub.add_parser("evaluate", help="score a checkpoint under one prompt regime")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--regime", choices=("invariant", "varying"), default="invariant")
    sp.add_argument("--n", type=int, default=None, help="number of generated images (default from config)")
    sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    sp.add_argument("--out", help="output directory (default: next to the checkpoint)")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("report", help="collect evaluation reports into one table")
    sp.add_argument("reports", nargs="+", help="report JSON files or run directories")
    sp.add_argument("--out", help="write the CSV table here")
    sp.add_argument("--plot", help="write a bar chart PNG here")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    from .backbone import ConfigError
    from .config import SchemaError

    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, SchemaError, ConfigError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # runtime failures map to a single exit code
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

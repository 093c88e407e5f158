"""Command-line interface.

Subcommands:
    pair      scan a directory of image pairs into a manifest
    synth     generate a deterministic synthetic dataset
    train     train a model from a manifest (+ optional key=value config file)
    generate  write predicted masks (optionally the subtraction baseline too)
    filter    validity-filter a directory of masks into a JSONL report
    eval      score predicted masks against ground truth -> JSON report
    plot      per-pair panels: original | tampered | baseline | model mask

Exit codes: 0 success, 1 runtime failure (bad data, missing files), 2 usage.
Set MASKFORGE_DETERMINISTIC=1 to force single-threaded deterministic numerics.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import evaluation, ingestion, postprocess
from .ingestion import DatasetManifest, load_mask, load_pair, save_mask, scan_pairs
from .maskgen import predict_mask
from .model import ModelConfig
from .postprocess import baseline_subtract, filter_valid
from .training import Checkpoint, TrainConfig, apply_determinism_env, train


# ---------------------------------------------------------------------------
# argument helpers (argparse types -> usage errors exit with code 2)


def _size_arg(text: str) -> tuple[int, int]:
    try:
        if "x" in text:
            h, w = text.split("x")
            return int(h), int(w)
        n = int(text)
        return n, n
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad size {text!r}, expected INT or HxW")


def _scale_arg(text: str) -> tuple[float, float]:
    try:
        if "," in text:
            rh, rw = text.split(",")
            return float(rh), float(rw)
        r = float(text)
        return r, r
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad scale {text!r}, expected R or RH,RW")


def _grid_arg(text: str) -> tuple[int, int]:
    try:
        gh, gw = text.split("x")
        return int(gh), int(gw)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad grid {text!r}, expected GHxGW")


def _bool_value(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"bad boolean {text!r}")


# ---------------------------------------------------------------------------
# config files: key = value lines mirroring TrainConfig (+ model_* keys)


def parse_config_file(path: str | Path) -> dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    out: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        sep = "=" if "=" in line else (":" if ":" in line else None)
        if sep is None:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, val = line.split(sep, 1)
        out[key.strip()] = val.strip()
    return out


def build_configs(file_values: dict[str, str],
                  overrides: dict[str, object]) -> tuple[TrainConfig, ModelConfig]:
    """Defaults <- config file <- CLI flags, split into train and model configs."""
    train_kw: dict[str, object] = {}
    model_kw: dict[str, object] = {}
    train_fields = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    model_fields = {f.name for f in dataclasses.fields(ModelConfig)}
    for key, raw in file_values.items():
        if key in train_fields:
            typ = train_fields[key]
            train_kw[key] = int(raw) if typ == "int" else float(raw)
        elif key.startswith("model_") and key[len("model_"):] in model_fields:
            name = key[len("model_"):]
            if name in ("channels", "stride", "decoder_hidden"):
                model_kw[name] = int(raw)
            elif name == "grid":
                model_kw[name] = _grid_arg(raw)
            elif name == "tie_encoders":
                model_kw[name] = _bool_value(raw)
            else:
                model_kw[name] = raw
        else:
            raise ValueError(f"unknown config key {key!r}")
    for key, val in overrides.items():
        if val is None:
            continue
        if key.startswith("model_"):
            model_kw[key[len("model_"):]] = val
        else:
            train_kw[key] = val
    return TrainConfig(**train_kw), ModelConfig(**model_kw)


# ---------------------------------------------------------------------------
# subcommands


def cmd_pair(args) -> int:
    manifest, skipped = scan_pairs(args.root, layout=args.layout, split=args.split)
    manifest.save(args.out)
    print(f"wrote {len(manifest)} pairs to {args.out} ({len(skipped)} skipped)")
    for s in skipped:
        print(f"  skipped {s.pair_id}: {s.reason}")
    return 0


def cmd_synth(args) -> int:
    counts = {"train": args.train, "val": args.val, "test": args.test}
    if sum(counts.values()) == 0:
        counts["test"] = args.n
    if sum(counts.values()) == 0:
        raise ValueError("nothing to generate: give --n or --train/--val/--test")
    manifest = ingestion.synth_dataset(
        args.out, counts, args.size, seed=args.seed,
        jpeg_quality=args.jpeg_quality, blur_sigma=args.blur_sigma, texture=args.texture,
    )
    print(f"wrote {len(manifest)} synthetic pairs to {args.out}")
    return 0


def cmd_train(args) -> int:
    file_values = parse_config_file(args.config) if args.config else {}
    overrides = {
        "seed": args.seed,
        "learning_rate": args.lr,
        "max_epochs": args.epochs,
        "batch_size": args.batch_size,
        "lambda_mmd": args.lambda_mmd,
        "threshold": args.threshold,
        "r_min": args.r_min,
        "r_max": args.r_max,
        "model_channels": args.channels,
    }
    train_cfg, model_cfg = build_configs(file_values, overrides)
    manifest = DatasetManifest.load(args.manifest)
    ckpt = train(train_cfg, manifest, model_config=model_cfg, log_path=args.log)
    ckpt.save(args.out)
    print(f"saved checkpoint to {args.out} (epoch {ckpt.epoch}, "
          f"val_f1 {ckpt.best_val_f1:.4f})")
    return 0


def cmd_generate(args) -> int:
    manifest = DatasetManifest.load(args.manifest)
    records = manifest.split(args.split)
    if not records:
        raise ValueError(f"manifest has no {args.split!r} records")
    model = Checkpoint.load(args.ckpt).build_model()
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for rec in records:
        pair = load_pair(rec)
        mask = predict_mask(pair, model, r=args.scale, threshold=args.threshold)
        save_mask(out_dir / f"{rec.pair_id}_mask.png", mask)
        if args.baseline:
            save_mask(out_dir / f"{rec.pair_id}_baseline.png", baseline_subtract(pair))
    print(f"wrote {len(records)} masks to {out_dir}")
    return 0


def cmd_filter(args) -> int:
    mask_dir = Path(args.masks)
    if not mask_dir.is_dir():
        raise FileNotFoundError(f"mask directory not found: {mask_dir}")
    paths = sorted(mask_dir.glob("*_mask.png"))
    if not paths:
        raise ValueError(f"no *_mask.png files under {mask_dir}")
    rows = []
    n_valid = 0
    for p in paths:
        verdict = filter_valid(load_mask(p))
        n_valid += verdict.valid
        rows.append({
            "pair_id": p.name[: -len("_mask.png")],
            "valid": verdict.valid,
            "fraction": verdict.fraction,
            "reason": verdict.reason,
        })
    with open(args.out, "w") as f:
        for row in rows:
            f.write(json.dumps(row) + "\n")
    print(f"filtered {len(rows)} masks: {n_valid} valid, {len(rows) - n_valid} invalid "
          f"-> {args.out}")
    return 0


def cmd_eval(args) -> int:
    manifest = DatasetManifest.load(args.manifest)
    records = manifest.split(args.split)
    if not records:
        raise ValueError(f"manifest has no {args.split!r} records")
    pred_dir = Path(args.pred)
    items = []
    for rec in records:
        if not rec.mask_path:
            raise ValueError(f"{rec.pair_id}: no ground-truth mask to evaluate against")
        pred_path = pred_dir / f"{rec.pair_id}_mask.png"
        if not pred_path.is_file():
            raise FileNotFoundError(f"missing prediction {pred_path}")
        items.append((rec.pair_id, load_mask(pred_path), load_mask(rec.mask_path)))
    report = evaluation.evaluate_pairs(items)
    evaluation.save_report(report, args.out, split=args.split)
    flag = " (degenerate)" if report.degenerate else ""
    print(f"{args.split}: f1={report.f1:.4f} iou={report.iou:.4f} "
          f"precision={report.precision:.4f} recall={report.recall:.4f} "
          f"accuracy={report.accuracy:.4f}{flag} -> {args.out}")
    return 0


def _mask_to_rgb(mask: np.ndarray) -> np.ndarray:
    return np.repeat(mask[:, :, None], 3, axis=2)


def cmd_plot(args) -> int:
    manifest = DatasetManifest.load(args.manifest)
    records = manifest.split(args.split)
    if not records:
        raise ValueError(f"manifest has no {args.split!r} records")
    pred_dir = Path(args.pred)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    gap = 2
    for rec in records:
        pair = load_pair(rec)
        pred_path = pred_dir / f"{rec.pair_id}_mask.png"
        if not pred_path.is_file():
            raise FileNotFoundError(f"missing prediction {pred_path}")
        panels = [
            pair.original,
            pair.tampered,
            _mask_to_rgb(baseline_subtract(pair, args.baseline_threshold)),
            _mask_to_rgb(load_mask(pred_path)),
        ]
        h = pair.original.shape[0]
        sep = np.full((h, gap, 3), 255, dtype=np.uint8)
        strip = panels[0]
        for p in panels[1:]:
            strip = np.concatenate([strip, sep, p], axis=1)
        Image.fromarray(strip, mode="RGB").save(out_dir / f"{rec.pair_id}_panel.png")
    print(f"wrote {len(records)} panels to {out_dir}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="maskforge",
        description="Manufacture tamper-localization masks from image pairs.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pair", help="scan a pair directory into a manifest")
    p.add_argument("--root", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--layout", default="suffix", choices=sorted(ingestion.LAYOUTS))
    p.add_argument("--split", default="test", choices=ingestion.SPLITS)
    p.set_defaults(func=cmd_pair)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=0, help="pairs for the test split")
    p.add_argument("--train", type=int, default=0)
    p.add_argument("--val", type=int, default=0)
    p.add_argument("--test", type=int, default=0)
    p.add_argument("--size", type=_size_arg, default=(64, 64), help="INT or HxW")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jpeg-quality", type=int, default=100)
    p.add_argument("--blur-sigma", type=float, default=0.0)
    p.add_argument("--texture", type=float, default=18.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--config", default=None, help="key = value file")
    p.add_argument("--log", default=None, help="JSONL epoch log path")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lambda-mmd", type=float, default=None)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--r-min", type=float, default=None)
    p.add_argument("--r-max", type=float, default=None)
    p.add_argument("--channels", type=int, default=None, help="model embedding width C")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="predict masks for a split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output mask directory")
    p.add_argument("--split", default="test", choices=ingestion.SPLITS)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--scale", type=_scale_arg, default=(1.0, 1.0), help="R or RH,RW")
    p.add_argument("--baseline", action="store_true",
                   help="also write <id>_baseline.png subtraction masks")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("filter", help="validity-filter a directory of masks")
    p.add_argument("--masks", required=True)
    p.add_argument("--out", required=True, help="JSONL report path")
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    p.add_argument("--manifest", required=True)
    p.add_argument("--pred", required=True, help="directory of <id>_mask.png predictions")
    p.add_argument("--split", default="test", choices=ingestion.SPLITS)
    p.add_argument("--out", required=True, help="JSON report path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", help="write original|tampered|baseline|mask panels")
    p.add_argument("--manifest", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--split", default="test", choices=ingestion.SPLITS)
    p.add_argument("--out", required=True, help="panel output directory")
    p.add_argument("--baseline-threshold", type=int, default=postprocess.BASELINE_THRESHOLD)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv: list[str] | None = None) -> int:
    apply_determinism_env()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, RuntimeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
